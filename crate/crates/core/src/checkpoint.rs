//! Checkpoint directories: a plain-text manifest next to raw little-endian
//! parameter and optimizer blobs, plus the run configuration.
//!
//! ```text
//! ckpt/
//!   manifest.txt   step, optimizer counter, RNG state, parameter table
//!   params.bin     f64 LE, parameters in table order
//!   optim.bin      f64 LE, first moments then second moments
//!   config.toml
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::train::Trainer;

const FORMAT: &str = "egiinet-checkpoint 1";

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            model: t.model.clone(),
            adam: t.adam.clone(),
            step: t.step,
            epoch: t.epoch,
            rng: t.rng.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "format {FORMAT}");
        let _ = writeln!(manifest, "variant {}", self.model.variant);
        let _ = writeln!(manifest, "step {}", self.step);
        let _ = writeln!(manifest, "epoch {}", self.epoch);
        let _ = writeln!(manifest, "adam_t {}", self.adam.t);
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(manifest, "rng_seed {seed}");
        let _ = writeln!(manifest, "rng_stream {}", self.rng.get_stream());
        let _ = writeln!(manifest, "rng_word_pos {}", self.rng.get_word_pos());
        let mut params = Vec::with_capacity(8 * self.model.params.num_scalars());
        for (_, name, m) in self.model.params.iter() {
            let _ = writeln!(manifest, "param {name} {} {}", m.rows(), m.cols());
            m.data().iter().for_each(|v| params.extend_from_slice(&v.to_le_bytes()));
        }
        let mut optim = Vec::with_capacity(params.len() * 2);
        for m in self.adam.m.iter().chain(&self.adam.v) {
            m.data().iter().for_each(|v| optim.extend_from_slice(&v.to_le_bytes()));
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write("manifest.txt", manifest.as_bytes())?;
        write("params.bin", &params)?;
        write("optim.bin", &optim)?;
        write("config.toml", self.config.to_toml_string().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest_path = dir.join("manifest.txt");
        let bad = |msg: String| Error::parse(&manifest_path, msg);
        let text = String::from_utf8(read("manifest.txt")?).map_err(|_| bad("not UTF-8".into()))?;
        let config = RunConfig::load(&dir.join("config.toml"))?;
        let mut model = Model::from_run_config(&config)?;

        let mut fields = std::collections::BTreeMap::new();
        let mut table = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            if key == "param" {
                let f: Vec<&str> = rest.split(' ').collect();
                let dims = (f.len() == 3)
                    .then(|| Some((f[1].parse::<usize>().ok()?, f[2].parse::<usize>().ok()?)))
                    .flatten()
                    .ok_or_else(|| bad(format!("malformed parameter line {line:?}")))?;
                table.push((f[0].to_owned(), dims));
            } else {
                fields.insert(key.to_owned(), rest.to_owned());
            }
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let number = |k: &str| -> Result<u128> { field(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        if field("format")? != FORMAT {
            return Err(bad("unsupported checkpoint format".into()));
        }
        if field("variant")? != config.variant.as_str() {
            return Err(bad("variant disagrees with config.toml".into()));
        }

        let expected: Vec<(String, (usize, usize))> =
            model.params.iter().map(|(_, n, m)| (n.to_owned(), m.shape())).collect();
        if table != expected {
            return Err(bad("parameter table does not match the configured model".into()));
        }
        let scalars = model.params.num_scalars();
        let params = decode_f64(&read("params.bin")?, scalars).ok_or_else(|| bad("params.bin has the wrong size".into()))?;
        let optim = decode_f64(&read("optim.bin")?, 2 * scalars).ok_or_else(|| bad("optim.bin has the wrong size".into()))?;

        let mut adam = Adam::new(&model.params, &config.optim);
        let ids: Vec<_> = model.params.ids().collect();
        let mut at = 0;
        for (i, id) in ids.iter().enumerate() {
            let len = model.params.get(*id).len();
            model.params.get_mut(*id).data_mut().copy_from_slice(&params[at..at + len]);
            adam.m[i].data_mut().copy_from_slice(&optim[at..at + len]);
            adam.v[i].data_mut().copy_from_slice(&optim[scalars + at..scalars + at + len]);
            at += len;
        }
        adam.t = number("adam_t")? as u64;

        let hex = field("rng_seed")?;
        if hex.len() != 64 {
            return Err(bad("rng_seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("bad rng_seed".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(number("rng_stream")? as u64);
        rng.set_word_pos(number("rng_word_pos")?);

        Ok(Checkpoint {
            config,
            model,
            adam,
            step: number("step")? as u64,
            epoch: number("epoch")? as usize,
            rng,
        })
    }
}

fn decode_f64(bytes: &[u8], expected: usize) -> Option<Vec<f64>> {
    (bytes.len() == 8 * expected).then(|| {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use rand::RngCore;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = RunConfig::tiny();
        cfg.variant = Variant::NoSharing;
        let model = Model::from_run_config(&cfg).unwrap();
        let mut adam = Adam::new(&model.params, &cfg.optim);
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.1 + 0.2;
        adam.v[3].data_mut()[1] = 1e-300;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(2);
        rng.next_u64();
        let ck = Checkpoint {
            config: cfg.clone(),
            model,
            adam,
            step: 5,
            epoch: 2,
            rng,
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let mut back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.adam, ck.adam);
        assert_eq!((back.step, back.epoch), (5, 2));
        for ((_, n1, a), (_, n2, b)) in back.model.params.iter().zip(ck.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        let mut orig = ck.rng.clone();
        assert_eq!(back.rng.next_u64(), orig.next_u64());

        fs::write(dir.path().join("params.bin"), [0u8; 8]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Parse { .. })));
    }
}
