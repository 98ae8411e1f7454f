//! Training configuration, learning-rate and L1 schedules, Adam, and the
//! unit-norm decoder constraint of the Baseline variant.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::grad::GradSet;
use crate::sae::{SaeParams, SaeVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: SaeVariant,
    pub expansion_factor: usize,
    pub lambda_max: f64,
    pub lr_max: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "defaults::lr_warmup_frac")]
    pub lr_warmup_frac: f64,
    #[serde(default = "defaults::lr_warmdown_frac")]
    pub lr_warmdown_frac: f64,
    #[serde(default = "defaults::l1_warmup_frac")]
    pub l1_warmup_frac: f64,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Unit-norm decoder columns for the Baseline variant.
    #[serde(default = "defaults::yes")]
    pub constrain_decoder: bool,
    /// Free `W_mag` instead of the `r_mag` tying (gated variants only).
    #[serde(default)]
    pub untied_magnitude: bool,
    /// Metric record interval in steps; 0 picks roughly 100 records per run.
    #[serde(default)]
    pub log_every: usize,
}

mod defaults {
    pub fn lr_warmup_frac() -> f64 {
        0.01
    }
    pub fn lr_warmdown_frac() -> f64 {
        0.20
    }
    pub fn l1_warmup_frac() -> f64 {
        0.05
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn yes() -> bool {
        true
    }
}

impl TrainConfig {
    /// The full-scale recipe: expansion 64, λ 8e-3, lr 5e-5, 200k steps of
    /// batch 2048.
    pub fn full_scale(variant: SaeVariant) -> Self {
        TrainConfig {
            variant,
            expansion_factor: 64,
            lambda_max: 8e-3,
            lr_max: 5e-5,
            steps: 200_000,
            batch_size: 2048,
            lr_warmup_frac: defaults::lr_warmup_frac(),
            lr_warmdown_frac: defaults::lr_warmdown_frac(),
            l1_warmup_frac: defaults::l1_warmup_frac(),
            adam_beta1: defaults::beta1(),
            adam_beta2: defaults::beta2(),
            adam_eps: defaults::eps(),
            weight_decay: 0.0,
            seed: 0,
            constrain_decoder: true,
            untied_magnitude: false,
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !(frac_ok(self.lr_warmup_frac)
            && frac_ok(self.lr_warmdown_frac)
            && frac_ok(self.l1_warmup_frac))
        {
            return Err(SaeError::Config("schedule fractions must lie in [0, 1]".into()));
        }
        if self.lr_warmup_frac + self.lr_warmdown_frac > 1.0 {
            return Err(SaeError::Config(
                "lr_warmup_frac + lr_warmdown_frac must not exceed 1".into(),
            ));
        }
        if self.batch_size == 0 || self.expansion_factor == 0 {
            return Err(SaeError::Config(
                "batch_size and expansion_factor must be >= 1".into(),
            ));
        }
        if !(self.lambda_max >= 0.0 && self.lr_max >= 0.0) {
            return Err(SaeError::Config("lambda_max and lr_max must be >= 0".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(SaeError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(SaeError::Config(
                "adam_eps must be > 0 and weight_decay >= 0".into(),
            ));
        }
        if self.untied_magnitude && !self.variant.is_gated() {
            return Err(SaeError::Config(
                "untied_magnitude only applies to gated variants".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    fn ramp_len(&self, frac: f64) -> usize {
        (frac * self.steps as f64).round() as usize
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.steps {
            Err(SaeError::Index {
                index: step,
                len: self.steps,
            })
        } else {
            Ok(())
        }
    }

    /// Piecewise-linear learning rate: warm-up over the first
    /// `lr_warmup_frac`, plateau, linear decay to zero over the final
    /// `lr_warmdown_frac`. Ramps are sampled at `(s + 1) / len`, so step 0
    /// already takes one increment and the last step one increment above 0.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.check_step(step)?;
        let warmup = self.ramp_len(self.lr_warmup_frac);
        let warmdown = self.ramp_len(self.lr_warmdown_frac);
        let mut factor = 1.0f64;
        if step < warmup {
            factor = factor.min((step + 1) as f64 / warmup as f64);
        }
        if warmdown > 0 && step + warmdown >= self.steps {
            factor = factor.min((self.steps - step) as f64 / warmdown as f64);
        }
        Ok(self.lr_max * factor)
    }

    /// Linear λ warm-up over the first `l1_warmup_frac`, then constant.
    pub fn lambda_at(&self, step: usize) -> Result<f64> {
        self.check_step(step)?;
        let warmup = self.ramp_len(self.l1_warmup_frac);
        if step < warmup {
            Ok(self.lambda_max * (step + 1) as f64 / warmup as f64)
        } else {
            Ok(self.lambda_max)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: SaeParams,
    pub second: SaeParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &SaeParams) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut SaeParams,
    grads: &GradSet,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(SaeError::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);

    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.grad.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut());
    for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(SaeError::Config(format!("shape mismatch in tensor {name}")));
        }
        let mut finite = true;
        Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
                finite &= p.is_finite();
            });
        if !finite {
            return Err(SaeError::Numerics(format!("Adam update of {name}")));
        }
    }
    Ok(())
}

/// Baseline only: remove from each decoder-column gradient its component
/// along the column, `g - (g·w) w / ‖w‖²`. No-op for other variants.
pub fn project_decoder_grads(params: &SaeParams, grads: &mut GradSet) -> Result<()> {
    if params.variant != SaeVariant::Baseline {
        return Ok(());
    }
    for (i, (w, mut g)) in params
        .w_dec
        .columns()
        .into_iter()
        .zip(grads.grad.w_dec.columns_mut())
        .enumerate()
    {
        let ww = w.dot(&w);
        if ww == 0.0 {
            return Err(SaeError::DegenerateFeature(i));
        }
        let coef = g.dot(&w) / ww;
        g.scaled_add(-coef, &w);
    }
    Ok(())
}

/// Baseline only: rescale every decoder column to unit L2 norm.
pub fn renormalize_decoder(params: &mut SaeParams) -> Result<()> {
    if params.variant != SaeVariant::Baseline {
        return Ok(());
    }
    for (i, mut col) in params.w_dec.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SaeError::DegenerateFeature(i));
        }
        col /= norm;
    }
    Ok(())
}

/// Largest `|‖W_dec[:, i]‖₂ - 1|` over all columns.
pub fn max_decoder_norm_deviation(params: &SaeParams) -> f64 {
    params
        .decoder_norms()
        .iter()
        .map(|n| (n - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Adam step with the Baseline decoder constraint applied around it when
/// `constrain` is set: gradient projection before, renormalization after.
pub fn constrained_step(
    params: &mut SaeParams,
    grads: &mut GradSet,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    constrain: bool,
) -> Result<()> {
    let constrain = constrain && params.variant == SaeVariant::Baseline;
    if constrain {
        project_decoder_grads(params, grads)?;
    }
    adam_step(params, grads, state, lr, cfg)?;
    if constrain {
        renormalize_decoder(params)?;
    }
    Ok(())
}
