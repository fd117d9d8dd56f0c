//! Training loop, validation and evaluation tables.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l2, MetricReport, PointCloud};
use crate::interaction::LossBundle;
use crate::model::{Model, PreparedSample};
use crate::optim::{cosine_lr, Adam};
use crate::synth::{Manifest, SampleRecord, ShapeFamily, Split};
use crate::tensor::Mat;

/// Loads every sample of one split.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<SampleRecord>> {
    manifest.split(split).map(|r| manifest.load_sample(r)).collect()
}

/// One line of the per-epoch metric log. Epoch 0 describes the initial
/// parameters and carries no training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub losses: Option<LossBundle>,
    pub val_cd_l2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub epochs: Vec<EpochLog>,
}

impl MetricLog {
    pub const HEADER: &'static str = "epoch,step,l_infor,l_stc,l_transfer,l_l1cd,l_total,val_cd_l2";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            let _ = write!(out, "{},{}", e.epoch, e.step);
            match &e.losses {
                Some(b) => {
                    let _ = write!(out, ",{},{},{},{},{}", b.l_infor, b.l_stc, b.l_transfer, b.l_l1cd, b.l_total);
                }
                None => out.push_str(",,,,,"),
            }
            let _ = writeln!(out, ",{}", e.val_cd_l2);
        }
        out
    }

    pub fn initial_val(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.val_cd_l2)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_cd_l2)
    }
}

fn mean_bundle(bundles: &[LossBundle]) -> LossBundle {
    let n = bundles.len().max(1) as f64;
    let avg = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
    let first = bundles.first();
    LossBundle {
        l_infor: avg(|b| b.l_infor),
        l_stc: avg(|b| b.l_stc),
        l_transfer: avg(|b| b.l_transfer),
        l_l1cd: avg(|b| b.l_l1cd),
        l_total: avg(|b| b.l_total),
        alpha: first.map_or(0.0, |b| b.alpha),
        transfer_in_objective: first.is_none_or(|b| b.transfer_in_objective),
    }
}

/// Owns the model, optimizer state and the prepared training samples.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    train: Vec<PreparedSample>,
    val: Vec<(PreparedSample, PointCloud)>,
}

impl Trainer {
    pub fn new(config: &RunConfig, train: &[SampleRecord], val: &[SampleRecord]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let model = Model::from_run_config(config)?;
        let adam = Adam::new(&model.params, &config.optim);
        let train = train
            .iter()
            .map(|s| model.prepare(&s.partial, &s.view, Some(&s.complete)))
            .collect::<Result<Vec<_>>>()?;
        let val = val
            .iter()
            .map(|s| Ok((model.prepare(&s.partial, &s.view, None)?, s.complete.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            step: 0,
            epoch: 0,
            rng,
            train,
            val,
        })
    }

    pub fn total_steps(&self) -> u64 {
        let per_epoch = self.train.len().div_ceil(self.config.optim.batch_size);
        (per_epoch * self.config.optim.epochs) as u64
    }

    /// Mean validation chamfer_l2; NaN without validation samples.
    pub fn validate(&self) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for (sample, truth) in &self.val {
            let (out, _) = self.model.predict_prepared(sample)?;
            total += chamfer_l2(&out.cloud, truth)?;
        }
        Ok(total / self.val.len() as f64)
    }

    /// One optimizer update on the averaged gradient of `batch`.
    pub fn step_on(&mut self, batch: &[usize]) -> Result<Vec<LossBundle>> {
        let mut sum: Option<Vec<Mat>> = None;
        let mut bundles = Vec::with_capacity(batch.len());
        for &i in batch {
            let (bundle, grads) = self.model.loss_and_grads(&self.train[i])?;
            if let Some((component, value)) = bundle.non_finite_component() {
                return Err(Error::Divergence {
                    component,
                    step: self.step as usize,
                    value,
                });
            }
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_scaled(g, 1.0)),
            }
            bundles.push(bundle);
        }
        let mut grads = sum.ok_or_else(|| Error::invalid("empty batch"))?;
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| g.scale_in_place(scale));
        if let Some(bad) = grads.iter().flat_map(|g| g.data()).find(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                component: "gradient",
                step: self.step as usize,
                value: *bad,
            });
        }
        let o = &self.config.optim;
        let lr = cosine_lr(o.learning_rate, o.min_lr_ratio, self.step, self.total_steps());
        self.adam.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(bundles)
    }

    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut bundles = Vec::with_capacity(order.len());
        for batch in order.chunks(self.config.optim.batch_size) {
            bundles.extend(self.step_on(batch)?);
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.step,
            losses: Some(mean_bundle(&bundles)),
            val_cd_l2: self.validate()?,
        })
    }

    pub fn initial_log(&self) -> Result<EpochLog> {
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.step,
            losses: None,
            val_cd_l2: self.validate()?,
        })
    }

    /// Runs the configured number of epochs, reporting each log line.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<MetricLog> {
        let mut log = MetricLog::default();
        let first = self.initial_log()?;
        on_epoch(&first);
        log.epochs.push(first);
        while self.epoch < self.config.optim.epochs {
            let e = self.train_epoch()?;
            on_epoch(&e);
            log.epochs.push(e);
        }
        Ok(log)
    }
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: Variant,
    /// A family name or `average`.
    pub family: String,
    pub cd_l2_x1000: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: &str = "variant,family,cd_l2_x1000,fscore";

impl EvalTable {
    /// Per-family means, then an `average` row over the family means.
    pub fn from_reports(variant: Variant, reports: &[(ShapeFamily, MetricReport)]) -> Self {
        let mut rows = Vec::new();
        for family in ShapeFamily::ALL {
            let of: Vec<&MetricReport> = reports.iter().filter(|(f, _)| *f == family).map(|(_, r)| r).collect();
            if of.is_empty() {
                continue;
            }
            let n = of.len() as f64;
            rows.push(EvalRow {
                variant,
                family: family.to_string(),
                cd_l2_x1000: 1000.0 * of.iter().map(|r| r.cd_l2).sum::<f64>() / n,
                fscore: of.iter().map(|r| r.fscore).sum::<f64>() / n,
            });
        }
        if !rows.is_empty() {
            let n = rows.len() as f64;
            let cd = rows.iter().map(|r| r.cd_l2_x1000).sum::<f64>() / n;
            let f = rows.iter().map(|r| r.fscore).sum::<f64>() / n;
            rows.push(EvalRow {
                variant,
                family: "average".into(),
                cd_l2_x1000: cd,
                fscore: f,
            });
        }
        EvalTable { rows }
    }

    pub fn average(&self) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.family == "average")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.variant, r.family, r.cd_l2_x1000, r.fscore);
        }
        out
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some(EVAL_HEADER) {
            return Err("missing or malformed header".into());
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(format!("expected 4 fields in {line:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
            rows.push(EvalRow {
                variant: f[0].parse().map_err(|e: Error| e.to_string())?,
                family: f[1].to_owned(),
                cd_l2_x1000: num(f[2])?,
                fscore: num(f[3])?,
            });
        }
        Ok(EvalTable { rows })
    }
}

/// Completes every sample and scores it against its ground truth.
pub fn evaluate(model: &Model, samples: &[SampleRecord], threshold: f64) -> Result<EvalTable> {
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model
            .predict(&s.partial, &s.view)
            .map_err(|e| Error::invalid(format!("sample {}: {e}", s.id)))?;
        reports.push((s.family, MetricReport::compute(&out.cloud, &s.complete, threshold)?));
    }
    Ok(EvalTable::from_reports(model.variant, &reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(cd_l2: f64, fscore: f64) -> MetricReport {
        MetricReport {
            cd_l1: 0.0,
            cd_l2,
            fscore,
            threshold_d: 0.001,
        }
    }

    #[test]
    fn table_averages_family_means() {
        let reports = vec![
            (ShapeFamily::Sphere, report(0.001, 1.0)),
            (ShapeFamily::Sphere, report(0.003, 0.0)),
            (ShapeFamily::Torus, report(0.004, 0.5)),
        ];
        let t = EvalTable::from_reports(Variant::NoImage, &reports);
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[0].family, "sphere");
        assert!((t.rows[0].cd_l2_x1000 - 2.0).abs() < 1e-12);
        assert!((t.average().unwrap().cd_l2_x1000 - 3.0).abs() < 1e-12);
        assert_eq!(t.average().unwrap().fscore, 0.5);
        assert_eq!(EvalTable::parse_csv(&t.to_csv()).unwrap(), t);
        assert!(EvalTable::from_reports(Variant::Full, &[]).rows.is_empty());
    }

    #[test]
    fn log_csv_has_blank_initial_losses() {
        let log = MetricLog {
            epochs: vec![
                EpochLog {
                    epoch: 0,
                    step: 0,
                    losses: None,
                    val_cd_l2: 0.5,
                },
                EpochLog {
                    epoch: 1,
                    step: 4,
                    losses: Some(LossBundle::new(1.0, 2.0, 0.25, 0.01, true)),
                    val_cd_l2: 0.25,
                },
            ],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "0,0,,,,,,0.5");
        assert_eq!(lines[2], "1,4,1,2,3,0.25,0.28,0.25");
    }
}
