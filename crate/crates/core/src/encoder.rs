//! Weight-shared transformer stacks.
//!
//! The feature extractor and the feature-transfer network are both a
//! [`SharedStack`]: one set of transformer blocks applied verbatim to the
//! image tokens and to the point cloud tokens. The `no_sharing` ablation
//! swaps in one stack per modality.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::TransformerStack;
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::tokenize::{Modality, TokenSequence};

#[derive(Clone, Debug)]
pub enum SharedStack {
    Shared(TransformerStack),
    PerModality { image: TransformerStack, point: TransformerStack },
}

impl SharedStack {
    pub fn shared(store: &mut ParamStore, name: &str, depth: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        SharedStack::Shared(TransformerStack::new(store, name, depth, dim, heads, rng))
    }

    /// Two independent stacks, named `{name}.pc.*` and `{name}.img.*`.
    pub fn per_modality(store: &mut ParamStore, name: &str, depth: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let point = TransformerStack::new(store, &format!("{name}.pc"), depth, dim, heads, rng);
        let image = TransformerStack::new(store, &format!("{name}.img"), depth, dim, heads, rng);
        SharedStack::PerModality { image, point }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, SharedStack::Shared(_))
    }

    pub fn stack(&self, modality: Modality) -> &TransformerStack {
        match (self, modality) {
            (SharedStack::Shared(s), _) => s,
            (SharedStack::PerModality { image, .. }, Modality::Image) => image,
            (SharedStack::PerModality { point, .. }, Modality::PointCloud) => point,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, modality: Modality, maps: Option<&mut Vec<Var>>) -> Var {
        self.stack(modality).forward(tape, x, maps)
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        let dim = self.stack(seq.modality).dim;
        if seq.channels() != dim {
            return Err(Error::config(format!(
                "token width {} does not match stack width {dim}",
                seq.channels()
            )));
        }
        if !seq.tokens.is_finite() {
            return Err(Error::invalid("token sequence has non-finite entries"));
        }
        Ok(())
    }

    /// Runs the stack on concrete tokens; the modality tag only selects a
    /// stack when weights are not shared.
    pub fn apply(&self, store: &ParamStore, seq: &TokenSequence) -> Result<TokenSequence> {
        self.check(seq)?;
        let mut tape = Tape::new(store);
        let x = tape.constant(seq.tokens.clone());
        let y = self.forward(&mut tape, x, seq.modality, None);
        Ok(TokenSequence {
            tokens: tape.value(y).clone(),
            modality: seq.modality,
            anchor: seq.anchor.clone(),
        })
    }

    /// Self-attention weights, `maps[block][head]`, each `N' × N'` and
    /// row-stochastic.
    pub fn attention_maps(&self, store: &ParamStore, seq: &TokenSequence) -> Result<Vec<Vec<Mat>>> {
        self.check(seq)?;
        let stack = self.stack(seq.modality);
        let mut tape = Tape::new(store);
        let x = tape.constant(seq.tokens.clone());
        let mut vars = Vec::new();
        stack.forward(&mut tape, x, Some(&mut vars));
        Ok(vars
            .chunks(stack.heads)
            .map(|block| block.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, c: usize, modality: Modality) -> TokenSequence {
        TokenSequence::new(
            Mat::from_vec(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()),
            modality,
        )
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let s = SharedStack::shared(&mut store, "sfe", 0, 16, 4, &mut rng);
        let seq = random_tokens(&mut rng, 8, 16, Modality::PointCloud);
        assert_eq!(s.apply(&store, &seq).unwrap(), seq);
        assert!(s.attention_maps(&store, &seq).unwrap().is_empty());
    }

    #[test]
    fn both_modalities_see_the_same_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let s = SharedStack::shared(&mut store, "sfe", 2, 16, 4, &mut rng);
        let seq = random_tokens(&mut rng, 8, 16, Modality::PointCloud);
        let as_image = TokenSequence::new(seq.tokens.clone(), Modality::Image);
        let a = s.apply(&store, &seq).unwrap();
        let b = s.apply(&store, &as_image).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.shape(), (8, 16));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let s = SharedStack::shared(&mut store, "sfe", 3, 16, 4, &mut rng);
        let seq = random_tokens(&mut rng, 10, 16, Modality::Image);
        let maps = s.attention_maps(&store, &seq).unwrap();
        assert_eq!(maps.len(), 3);
        for block in &maps {
            assert_eq!(block.len(), 4);
            for m in block {
                assert_eq!(m.shape(), (10, 10));
                for r in 0..10 {
                    assert!(m.row(r).iter().all(|&v| v >= 0.0));
                    assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
        let single = random_tokens(&mut rng, 1, 16, Modality::Image);
        for block in s.attention_maps(&store, &single).unwrap() {
            for m in block {
                assert_eq!(m, Mat::scalar(1.0));
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let s = SharedStack::shared(&mut store, "sfe", 1, 16, 4, &mut rng);
        let seq = random_tokens(&mut rng, 8, 12, Modality::Image);
        assert!(matches!(s.apply(&store, &seq), Err(Error::Config(_))));
    }

    #[test]
    fn separate_stacks_double_the_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut shared = ParamStore::new();
        SharedStack::shared(&mut shared, "sfe", 2, 16, 4, &mut rng);
        let mut split = ParamStore::new();
        let s = SharedStack::per_modality(&mut split, "sfe", 2, 16, 4, &mut rng);
        assert!(!s.is_shared());
        assert_eq!(split.num_scalars(), 2 * shared.num_scalars());
    }
}
