//! The training loop: seeded per-epoch shuffling, batch-mean backward pass,
//! scheduled Adam updates and periodic metric records.

use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::checkpoint;
use crate::data::ActivationDataset;
use crate::error::{Result, SaeError};
use crate::grad::{backward_terms, LossTerms};
use crate::optim::{constrained_step, max_decoder_norm_deviation, AdamState, TrainConfig};
use crate::sae::{LossBreakdown, SaeParams, SaeVariant};

/// One metric log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub lambda: f64,
    pub l0_batch: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainLogRecord>,
    /// Decoder column-norm deviation after the update of each logged step;
    /// only filled for constrained Baseline runs.
    pub decoder_norm_deviation: Vec<f64>,
    pub steps_run: usize,
}

/// Training with optional streaming of records and a last-good checkpoint.
pub struct Trainer<'a> {
    config: TrainConfig,
    on_record: Option<Box<dyn FnMut(&TrainLogRecord) + 'a>>,
    last_good: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Trainer {
            config,
            on_record: None,
            last_good: None,
        }
    }

    /// Called for every metric record as it is produced.
    pub fn on_record(mut self, f: impl FnMut(&TrainLogRecord) + 'a) -> Self {
        self.on_record = Some(Box::new(f));
        self
    }

    /// Where the most recent finite parameters are written if training
    /// aborts on a numerics error.
    pub fn last_good_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.last_good = Some(path.into());
        self
    }

    pub fn run(mut self, data: &ActivationDataset) -> Result<(SaeParams, TrainReport)> {
        let cfg = self.config.clone();
        cfg.validate()?;
        let (rows, n) = data.data.dim();
        if cfg.steps > 0 && cfg.batch_size > rows {
            return Err(SaeError::Config(format!(
                "batch_size {} exceeds dataset size {rows}",
                cfg.batch_size
            )));
        }
        let target = (n as f64).sqrt();
        if rows > 0 && (data.mean_row_norm() - target).abs() > 1e-3 * target {
            warn!(
                mean_norm = data.mean_row_norm(),
                target, "dataset does not look normalized"
            );
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = cfg.expansion_factor * n;
        let mut params = SaeParams::init(cfg.variant, n, m, &mut rng);
        if cfg.untied_magnitude {
            params.untie_magnitude();
        }
        let mut report = TrainReport::default();
        if cfg.steps == 0 {
            return Ok((params, report));
        }

        let adam = cfg.adam();
        let constrain = cfg.constrain_decoder && cfg.variant == SaeVariant::Baseline;
        let mut state = AdamState::new(&params);
        let log_every = if cfg.log_every == 0 {
            (cfg.steps / 100).max(1)
        } else {
            cfg.log_every
        };

        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut batch = Array2::<f64>::zeros((cfg.batch_size, n));
        let mut last_good = params.clone();

        for step in 0..cfg.steps {
            if cursor + cfg.batch_size > rows {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            for (mut dst, &src) in batch
                .rows_mut()
                .into_iter()
                .zip(&order[cursor..cursor + cfg.batch_size])
            {
                dst.assign(&data.data.row(src));
            }
            cursor += cfg.batch_size;

            let lr = cfg.lr_at(step)?;
            let lambda = cfg.lambda_at(step)?;
            let outcome = backward_terms(&params, batch.view(), lambda, LossTerms::ALL).and_then(
                |mut pass| {
                    constrained_step(&mut params, &mut pass.grads, &mut state, lr, &adam, constrain)?;
                    Ok(pass)
                },
            );
            let pass = match outcome {
                Ok(pass) => pass,
                Err(e) => return Err(self.abort(step, e, &last_good)),
            };

            if step % log_every == 0 || step + 1 == cfg.steps {
                let record = TrainLogRecord {
                    step,
                    loss: pass.loss,
                    lr,
                    lambda,
                    l0_batch: pass.l0,
                };
                debug!(step, total = record.loss.total, l0 = record.l0_batch, "train");
                if let Some(f) = self.on_record.as_mut() {
                    f(&record);
                }
                report.records.push(record);
                if constrain {
                    report
                        .decoder_norm_deviation
                        .push(max_decoder_norm_deviation(&params));
                }
                last_good.clone_from(&params);
            }
            report.steps_run = step + 1;
        }
        Ok((params, report))
    }

    fn abort(&self, step: usize, source: SaeError, last_good: &SaeParams) -> SaeError {
        let saved = self.last_good.as_ref().and_then(|path| {
            match checkpoint::save(last_good, path) {
                Ok(()) => Some(path.clone()),
                Err(e) => {
                    warn!(error = %e, "could not write last-good checkpoint");
                    None
                }
            }
        });
        SaeError::TrainAborted {
            step,
            source: Box::new(source),
            last_good: saved,
        }
    }
}

/// Train with default options.
pub fn train(config: &TrainConfig, data: &ActivationDataset) -> Result<(SaeParams, TrainReport)> {
    Trainer::new(config.clone()).run(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small_data() -> ActivationDataset {
        let spec = SyntheticSpec {
            n: 8,
            m_true: 16,
            rows: 512,
            p_active: 0.1,
            magnitude_range: (0.5, 1.5),
            noise_sigma: 0.01,
            seed: 1,
        };
        generate_synthetic(&spec).unwrap().0.normalized().unwrap()
    }

    fn small_config(variant: SaeVariant) -> TrainConfig {
        TrainConfig {
            expansion_factor: 2,
            lambda_max: 0.05,
            lr_max: 1e-2,
            steps: 60,
            batch_size: 64,
            seed: 9,
            log_every: 10,
            ..TrainConfig::full_scale(variant)
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = small_data();
        let cfg = TrainConfig {
            steps: 0,
            ..small_config(SaeVariant::SaeRad)
        };
        let (p, report) = train(&cfg, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        assert_eq!(p, SaeParams::init(SaeVariant::SaeRad, 8, 16, &mut rng));
        assert!(report.records.is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = small_data();
        for v in SaeVariant::ALL {
            let cfg = small_config(v);
            let (a, ra) = train(&cfg, &data).unwrap();
            let (b, rb) = train(&cfg, &data).unwrap();
            assert_eq!(
                checkpoint::to_bytes(&a).unwrap(),
                checkpoint::to_bytes(&b).unwrap()
            );
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn loss_decreases_and_records_are_logged() {
        let data = small_data();
        let (_, report) = train(&small_config(SaeVariant::SaeRad), &data).unwrap();
        let steps: Vec<usize> = report.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40, 50, 59]);
        let first = report.records[0].loss.reconstruct;
        let last = report.records.last().unwrap().loss.reconstruct;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn baseline_columns_stay_unit_norm() {
        let data = small_data();
        let (p, report) = train(&small_config(SaeVariant::Baseline), &data).unwrap();
        assert_eq!(report.decoder_norm_deviation.len(), report.records.len());
        assert!(report.decoder_norm_deviation.iter().all(|&d| d <= 1e-10));
        assert!(max_decoder_norm_deviation(&p) <= 1e-10);
    }

    #[test]
    fn oversized_batch_rejected() {
        let data = small_data();
        let cfg = TrainConfig {
            batch_size: 10_000,
            ..small_config(SaeVariant::Gated)
        };
        assert!(matches!(train(&cfg, &data), Err(SaeError::Config(_))));
    }

    #[test]
    fn numerics_failure_writes_last_good_checkpoint() {
        let mut data = small_data();
        data.data *= 1e200;
        let cfg = small_config(SaeVariant::SaeRad);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.saep");
        let err = Trainer::new(cfg).last_good_checkpoint(&path).run(&data).unwrap_err();
        assert!(err.is_numerics(), "{err}");
        match err {
            SaeError::TrainAborted { last_good, .. } => assert_eq!(last_good, Some(path.clone())),
            other => panic!("unexpected {other}"),
        }
        let restored = checkpoint::load(&path).unwrap();
        assert!(restored.first_non_finite().is_none());
    }
}
