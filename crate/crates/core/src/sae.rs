//! SAE parameter containers and forward computations for the four
//! architecture variants.
//!
//! ```text
//! Baseline:           h = ReLU(W_enc (x - b_dec) + b_enc)
//! Gated:              h = I[π_gate > 0] ⊙ ReLU(W_mag (x - b_dec) + b_mag)
//!                     π_gate = W_gate (x - b_dec) + b_gate
//! UnconstrainedNorm:  h = ReLU(W_enc x + b_enc)
//! SaeRad:             h = I[π_gate > 0] ⊙ ReLU(W_mag x + b_mag)
//!                     π_gate = W_gate x + b_gate
//! decode:             x̂ = W_dec h + b_dec
//! ```
//!
//! For the gated encoders `W_mag` is tied to `W_gate` row-wise through
//! `W_mag[i, j] = exp(r_mag[i]) * W_gate[i, j]` and is never stored. An
//! untied `W_mag` is available for ablations.
//!
//! Baseline and UnconstrainedNorm share the gate slots: `w_gate`/`b_gate`
//! hold `W_enc`/`b_enc`.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, ShapeBuilder};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaeVariant {
    Baseline,
    Gated,
    UnconstrainedNorm,
    SaeRad,
}

impl SaeVariant {
    pub const ALL: [SaeVariant; 4] = [
        SaeVariant::Baseline,
        SaeVariant::Gated,
        SaeVariant::UnconstrainedNorm,
        SaeVariant::SaeRad,
    ];

    /// Gated encoders carry a separate magnitude path and an auxiliary loss.
    pub fn is_gated(self) -> bool {
        matches!(self, SaeVariant::Gated | SaeVariant::SaeRad)
    }

    /// Whether the encoder subtracts `b_dec` before the affine map.
    pub fn centers_input(self) -> bool {
        matches!(self, SaeVariant::Baseline | SaeVariant::Gated)
    }

    /// Whether the sparsity penalty (and the feature activation) is weighted
    /// by decoder column norms.
    pub fn norm_weighted(self) -> bool {
        matches!(self, SaeVariant::UnconstrainedNorm | SaeVariant::SaeRad)
    }

    pub fn tag(self) -> u8 {
        match self {
            SaeVariant::Baseline => 0,
            SaeVariant::Gated => 1,
            SaeVariant::UnconstrainedNorm => 2,
            SaeVariant::SaeRad => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => SaeVariant::Baseline,
            1 => SaeVariant::Gated,
            2 => SaeVariant::UnconstrainedNorm,
            3 => SaeVariant::SaeRad,
            _ => return None,
        })
    }
}

impl std::fmt::Display for SaeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SaeVariant::Baseline => "baseline",
            SaeVariant::Gated => "gated",
            SaeVariant::UnconstrainedNorm => "unconstrained-norm",
            SaeVariant::SaeRad => "sae-rad",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SaeVariant {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "baseline" => Ok(SaeVariant::Baseline),
            "gated" => Ok(SaeVariant::Gated),
            "unconstrained-norm" | "unconstrainednorm" => Ok(SaeVariant::UnconstrainedNorm),
            "sae-rad" | "saerad" => Ok(SaeVariant::SaeRad),
            other => Err(SaeError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Weights of the magnitude path of a gated encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum MagnitudeWeights {
    /// `W_mag = diag(exp(r_mag)) · W_gate`.
    Tied(Array1<f64>),
    /// Free `m × n` matrix (ablation only).
    Untied(Array2<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMagnitude {
    pub weights: MagnitudeWeights,
    pub b_mag: Array1<f64>,
}

impl GateMagnitude {
    pub fn r_mag(&self) -> Option<&Array1<f64>> {
        match &self.weights {
            MagnitudeWeights::Tied(r) => Some(r),
            MagnitudeWeights::Untied(_) => None,
        }
    }

    pub fn is_tied(&self) -> bool {
        matches!(self.weights, MagnitudeWeights::Tied(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    pub variant: SaeVariant,
    /// `m × n`; `W_enc` for the non-gated variants.
    pub w_gate: Array2<f64>,
    /// `b_enc` for the non-gated variants.
    pub b_gate: Array1<f64>,
    /// Present iff the variant is gated.
    pub magnitude: Option<GateMagnitude>,
    /// `n × m`, column-major so each feature direction is contiguous.
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeResult {
    /// Feature activations after gating.
    pub h: Array1<f64>,
    pub pi_gate: Array1<f64>,
    /// `ReLU(pi_gate)`.
    pub ra: Array1<f64>,
    pub h_mag: Array1<f64>,
}

/// Per-term loss values. `sparsity` already includes the λ factor, so
/// `total = reconstruct + sparsity + aux`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruct: f64,
    pub sparsity: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruct: f64, sparsity: f64, aux: f64) -> Self {
        LossBreakdown {
            reconstruct,
            sparsity,
            aux,
            total: reconstruct + sparsity + aux,
        }
    }
}

pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn ensure_finite(what: &str, v: impl IntoIterator<Item = f64>) -> Result<()> {
    if v.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(SaeError::Numerics(what.to_string()))
    }
}

impl SaeParams {
    /// All-zero parameters. Gated variants get tied magnitude weights.
    pub fn zeros(variant: SaeVariant, n: usize, m: usize) -> Self {
        let magnitude = variant.is_gated().then(|| GateMagnitude {
            weights: MagnitudeWeights::Tied(Array1::zeros(m)),
            b_mag: Array1::zeros(m),
        });
        SaeParams {
            variant,
            w_gate: Array2::zeros((m, n)),
            b_gate: Array1::zeros(m),
            magnitude,
            w_dec: Array2::zeros((n, m).f()),
            b_dec: Array1::zeros(n),
        }
    }

    /// Standard initialization: biases and `r_mag` zero, encoder rows drawn
    /// uniformly on the unit sphere, decoder set to the encoder transpose.
    pub fn init<R: Rng + ?Sized>(variant: SaeVariant, n: usize, m: usize, rng: &mut R) -> Self {
        let mut p = SaeParams::zeros(variant, n, m);
        for mut row in p.w_gate.rows_mut() {
            loop {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let norm = row.dot(&row).sqrt();
                if norm > 1e-12 {
                    row /= norm;
                    break;
                }
            }
        }
        p.w_dec.assign(&p.w_gate.t());
        p
    }

    /// Replace the tied magnitude path with an untied copy of `W_mag`.
    pub fn untie_magnitude(&mut self) {
        if let Some(mag) = &mut self.magnitude {
            if let MagnitudeWeights::Tied(r) = &mag.weights {
                let mut w = self.w_gate.clone();
                for (mut row, &ri) in w.rows_mut().into_iter().zip(r.iter()) {
                    row *= ri.exp();
                }
                mag.weights = MagnitudeWeights::Untied(w);
            }
        }
    }

    pub fn n(&self) -> usize {
        self.b_dec.len()
    }

    pub fn m(&self) -> usize {
        self.b_gate.len()
    }

    /// Checks shapes and the presence of variant-specific tensors.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.w_gate.dim() != (m, n) {
            return Err(SaeError::dim("w_gate rows*cols", m * n, self.w_gate.len()));
        }
        if self.w_dec.dim() != (n, m) {
            return Err(SaeError::dim("w_dec rows*cols", n * m, self.w_dec.len()));
        }
        match (&self.magnitude, self.variant.is_gated()) {
            (Some(mag), true) => {
                if mag.b_mag.len() != m {
                    return Err(SaeError::dim("b_mag", m, mag.b_mag.len()));
                }
                match &mag.weights {
                    MagnitudeWeights::Tied(r) if r.len() != m => {
                        return Err(SaeError::dim("r_mag", m, r.len()))
                    }
                    MagnitudeWeights::Untied(w) if w.dim() != (m, n) => {
                        return Err(SaeError::dim("w_mag rows*cols", m * n, w.len()))
                    }
                    _ => {}
                }
            }
            (None, false) => {}
            _ => {
                return Err(SaeError::Config(format!(
                    "magnitude tensors do not match variant {}",
                    self.variant
                )))
            }
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }

    /// Every tensor as a dynamic-dimension view, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("w_gate", self.w_gate.view().into_dyn()),
            ("b_gate", self.b_gate.view().into_dyn()),
        ];
        if let Some(mag) = &self.magnitude {
            match &mag.weights {
                MagnitudeWeights::Tied(r) => out.push(("r_mag", r.view().into_dyn())),
                MagnitudeWeights::Untied(w) => out.push(("w_mag", w.view().into_dyn())),
            }
            out.push(("b_mag", mag.b_mag.view().into_dyn()));
        }
        out.push(("w_dec", self.w_dec.view().into_dyn()));
        out.push(("b_dec", self.b_dec.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("w_gate", self.w_gate.view_mut().into_dyn()),
            ("b_gate", self.b_gate.view_mut().into_dyn()),
        ];
        if let Some(mag) = &mut self.magnitude {
            match &mut mag.weights {
                MagnitudeWeights::Tied(r) => out.push(("r_mag", r.view_mut().into_dyn())),
                MagnitudeWeights::Untied(w) => out.push(("w_mag", w.view_mut().into_dyn())),
            }
            out.push(("b_mag", mag.b_mag.view_mut().into_dyn()));
        }
        out.push(("w_dec", self.w_dec.view_mut().into_dyn()));
        out.push(("b_dec", self.b_dec.view_mut().into_dyn()));
        out
    }

    /// Same shapes and variant, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = SaeParams::zeros(self.variant, self.n(), self.m());
        if let (Some(mag), Some(src)) = (&mut z.magnitude, &self.magnitude) {
            if let MagnitudeWeights::Untied(w) = &src.weights {
                mag.weights = MagnitudeWeights::Untied(Array2::zeros(w.raw_dim()));
            }
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// L2 norm of every decoder column.
    pub fn decoder_norms(&self) -> Array1<f64> {
        self.w_dec
            .columns()
            .into_iter()
            .map(|c| c.dot(&c).sqrt())
            .collect()
    }

    /// Forward pass of the encoder for a single input.
    pub fn encode(&self, x: ArrayView1<f64>) -> Result<EncodeResult> {
        let (n, m) = (self.n(), self.m());
        if x.len() != n {
            return Err(SaeError::dim("input", n, x.len()));
        }
        ensure_finite("input", x.iter().copied())?;

        let xc = if self.variant.centers_input() {
            &x - &self.b_dec
        } else {
            x.to_owned()
        };
        let proj = self.w_gate.dot(&xc);
        let pi_gate = &proj + &self.b_gate;
        let ra = pi_gate.mapv(relu);

        let (h, h_mag) = match &self.magnitude {
            None => (ra.clone(), ra.clone()),
            Some(mag) => {
                let pre_mag = match &mag.weights {
                    MagnitudeWeights::Tied(r) => {
                        Array1::from_shape_fn(m, |i| r[i].exp() * proj[i] + mag.b_mag[i])
                    }
                    MagnitudeWeights::Untied(w) => w.dot(&xc) + &mag.b_mag,
                };
                let h_mag = pre_mag.mapv(relu);
                let h = Array1::from_shape_fn(m, |i| if pi_gate[i] > 0.0 { h_mag[i] } else { 0.0 });
                (h, h_mag)
            }
        };
        ensure_finite("encoder output", h.iter().chain(pi_gate.iter()).copied())?;
        Ok(EncodeResult {
            h,
            pi_gate,
            ra,
            h_mag,
        })
    }

    pub fn decode(&self, h: ArrayView1<f64>) -> Result<Array1<f64>> {
        if h.len() != self.m() {
            return Err(SaeError::dim("latent", self.m(), h.len()));
        }
        let out = self.w_dec.dot(&h) + &self.b_dec;
        ensure_finite("decoder output", out.iter().copied())?;
        Ok(out)
    }

    /// Strength of feature `i` given latent `h`: `h_i · ‖W_dec[:, i]‖₂` for
    /// the norm-weighted variants, `h_i` otherwise.
    pub fn feature_activation(&self, h: ArrayView1<f64>, i: usize) -> Result<f64> {
        if h.len() != self.m() {
            return Err(SaeError::dim("latent", self.m(), h.len()));
        }
        if i >= self.m() {
            return Err(SaeError::Index {
                index: i,
                len: self.m(),
            });
        }
        if h[i] == 0.0 {
            return Ok(0.0);
        }
        if self.variant.norm_weighted() {
            let col = self.w_dec.column(i);
            Ok(h[i] * col.dot(&col).sqrt())
        } else {
            Ok(h[i])
        }
    }

    /// Unit-normalized decoder column `i`.
    pub fn concept_direction(&self, i: usize) -> Result<Array1<f64>> {
        if i >= self.m() {
            return Err(SaeError::Index {
                index: i,
                len: self.m(),
            });
        }
        let col = self.w_dec.column(i);
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SaeError::DegenerateFeature(i));
        }
        Ok(col.mapv(|v| v / norm))
    }

    /// Per-example loss for the configured variant.
    pub fn loss(&self, x: ArrayView1<f64>, lambda: f64) -> Result<LossBreakdown> {
        if !(lambda >= 0.0) {
            return Err(SaeError::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        let enc = self.encode(x)?;
        let x_hat = self.decode(enc.h.view())?;
        let reconstruct = sq_dist(x, x_hat.view());

        let penalised = if self.variant.is_gated() { &enc.ra } else { &enc.h };
        let sparsity = if self.variant.norm_weighted() {
            let norms = self.decoder_norms();
            lambda * penalised.dot(&norms)
        } else {
            lambda * penalised.sum()
        };

        // The frozen-decoder distinction of the Gated variant only affects
        // gradients; the value is computed through the live decoder.
        let aux = if self.variant.is_gated() {
            let x_aux = self.decode(enc.ra.view())?;
            sq_dist(x, x_aux.view())
        } else {
            0.0
        };
        let out = LossBreakdown::new(reconstruct, sparsity, aux);
        ensure_finite("loss", [out.total])?;
        Ok(out)
    }
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}
