//! Analytic gradients of the four SAE objectives, and a central
//! finite-difference oracle.
//!
//! Losses and gradients are means over the batch. The batch is split into
//! fixed-size row chunks that are processed in parallel and reduced in chunk
//! order, so results do not depend on the number of worker threads.
//!
//! Gradient-flow contract:
//! - the Heaviside gate has zero derivative; `W_gate`/`b_gate` receive
//!   gradient through the tied magnitude path and through `RA` in the
//!   sparsity and auxiliary terms;
//! - Gated: the auxiliary term never reaches `W_dec`/`b_dec` through the
//!   decoder (the encoder's `b_dec` centering still does);
//! - SaeRad: the auxiliary term flows into the decoder;
//! - norm-weighted variants differentiate the decoder column norms in the
//!   sparsity term. A zero column contributes no norm gradient.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SaeError};
use crate::sae::{relu, sq_dist, LossBreakdown, MagnitudeWeights, SaeParams, SaeVariant};

/// Rows per reduction chunk. Fixed so the summation order is independent of
/// the degree of parallelism.
const CHUNK_ROWS: usize = 32;

/// Gradient of every parameter, stored in a parameter-shaped container.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub grad: SaeParams,
    pub batch_size: usize,
}

impl GradSet {
    pub fn zeros_like(params: &SaeParams, batch_size: usize) -> Self {
        GradSet {
            grad: params.zeros_like(),
            batch_size,
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.grad.first_non_finite() {
            None => Ok(()),
            Some(name) => Err(SaeError::Numerics(format!("gradient of {name}"))),
        }
    }
}

/// Which loss terms contribute to a backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub reconstruct: bool,
    pub sparsity: bool,
    pub aux: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        reconstruct: true,
        sparsity: true,
        aux: true,
    };
    pub const AUX_ONLY: LossTerms = LossTerms {
        reconstruct: false,
        sparsity: false,
        aux: true,
    };
}

/// Result of one batched forward/backward pass.
#[derive(Clone, Debug)]
pub struct BatchPass {
    pub loss: LossBreakdown,
    pub grads: GradSet,
    /// Mean number of strictly positive latents per row.
    pub l0: f64,
}

/// Batch-mean loss and gradients.
pub fn backward(
    params: &SaeParams,
    batch: ArrayView2<f64>,
    lambda: f64,
) -> Result<(LossBreakdown, GradSet)> {
    let pass = backward_terms(params, batch, lambda, LossTerms::ALL)?;
    Ok((pass.loss, pass.grads))
}

/// Like [`backward`], restricted to a subset of loss terms. The reported
/// loss also only includes the selected terms.
pub fn backward_terms(
    params: &SaeParams,
    batch: ArrayView2<f64>,
    lambda: f64,
    terms: LossTerms,
) -> Result<BatchPass> {
    params.validate()?;
    let (rows, n) = batch.dim();
    if rows == 0 {
        return Err(SaeError::Config("batch must contain at least one row".into()));
    }
    if n != params.n() {
        return Err(SaeError::dim("batch columns", params.n(), n));
    }
    if !(lambda >= 0.0) {
        return Err(SaeError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::Numerics("input batch".into()));
    }

    let scale = 1.0 / rows as f64;
    let norms = params.decoder_norms();
    let ctx = Ctx {
        params,
        norms: norms.view(),
        lambda,
        scale,
        terms,
    };

    let starts: Vec<usize> = (0..rows).step_by(CHUNK_ROWS).collect();
    let partials: Vec<Partial> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK_ROWS).min(rows);
            ctx.chunk(batch.slice(s![start..end, ..]))
        })
        .collect();

    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk");
    for p in iter {
        total.merge(p);
    }

    let mut grads = total.grads;
    if params.variant.norm_weighted() && terms.sparsity {
        // d(λ Σ_b pen_bi ‖w_i‖)/d w_i = λ (Σ_b pen_bi) w_i / ‖w_i‖
        for (i, coef) in total.norm_coef.iter().enumerate() {
            if *coef != 0.0 && norms[i] > 0.0 {
                let factor = coef / norms[i];
                let mut g = grads.grad.w_dec.column_mut(i);
                g.scaled_add(factor, &params.w_dec.column(i));
            }
        }
    }
    grads.check_finite()?;

    let loss = LossBreakdown::new(
        total.reconstruct * scale,
        total.sparsity * scale,
        total.aux * scale,
    );
    if !loss.total.is_finite() {
        return Err(SaeError::Numerics("loss".into()));
    }
    Ok(BatchPass {
        loss,
        grads,
        l0: total.active as f64 * scale,
    })
}

struct Ctx<'a> {
    params: &'a SaeParams,
    norms: ArrayView1<'a, f64>,
    lambda: f64,
    scale: f64,
    terms: LossTerms,
}

struct Partial {
    grads: GradSet,
    /// Σ over rows of λ·scale·penalised activation, per feature, for the
    /// decoder-norm gradient.
    norm_coef: Array1<f64>,
    reconstruct: f64,
    sparsity: f64,
    aux: f64,
    active: usize,
}

impl Partial {
    fn merge(&mut self, other: Partial) {
        for ((_, mut a), (_, b)) in self
            .grads
            .grad
            .tensors_mut()
            .into_iter()
            .zip(other.grads.grad.tensors())
        {
            a += &b;
        }
        self.norm_coef += &other.norm_coef;
        self.reconstruct += other.reconstruct;
        self.sparsity += other.sparsity;
        self.aux += other.aux;
        self.active += other.active;
    }
}

impl Ctx<'_> {
    fn chunk(&self, x: ArrayView2<f64>) -> Partial {
        let p = self.params;
        let variant = p.variant;
        let (rows, n) = x.dim();
        let m = p.m();
        let terms = self.terms;
        let gated = variant.is_gated();
        let weighted = variant.norm_weighted();

        let xc: Array2<f64> = if variant.centers_input() {
            &x - &p.b_dec.view().insert_axis(Axis(0))
        } else {
            x.to_owned()
        };
        // Dense encoder projection; everything after it only touches the
        // rows' active sets.
        let proj = xc.dot(&p.w_gate.t());
        let untied_pre = match p.magnitude.as_ref().map(|m| &m.weights) {
            Some(MagnitudeWeights::Untied(w)) => Some(xc.dot(&w.t())),
            _ => None,
        };
        let exp_r: Option<Array1<f64>> = p
            .magnitude
            .as_ref()
            .and_then(|m| m.r_mag())
            .map(|r| r.mapv(f64::exp));

        let mut grads = GradSet::zeros_like(p, 0);
        let mut norm_coef = Array1::zeros(m);
        let (mut rec_sum, mut sp_sum, mut aux_sum) = (0.0, 0.0, 0.0);
        let mut active_total = 0usize;

        let mut gate_on: Vec<usize> = Vec::with_capacity(m);
        let mut pre_mag: Vec<f64> = Vec::with_capacity(m);
        let mut ra: Vec<f64> = Vec::with_capacity(m);
        let mut h: Vec<f64> = Vec::with_capacity(m);
        let mut x_hat = Array1::<f64>::zeros(n);
        let mut x_aux = Array1::<f64>::zeros(n);
        let mut dxc = Array1::<f64>::zeros(n);

        for b in 0..rows {
            let xb = x.row(b);
            let xcb = xc.row(b);
            let pb = proj.row(b);

            gate_on.clear();
            ra.clear();
            h.clear();
            pre_mag.clear();
            for i in 0..m {
                let pi = pb[i] + p.b_gate[i];
                if pi > 0.0 {
                    gate_on.push(i);
                    ra.push(pi);
                }
            }
            if let Some(mag) = &p.magnitude {
                for &i in &gate_on {
                    let pm = match (&exp_r, &untied_pre) {
                        (Some(er), _) => er[i] * pb[i] + mag.b_mag[i],
                        (None, Some(u)) => u[[b, i]] + mag.b_mag[i],
                        (None, None) => unreachable!("gated params without magnitude weights"),
                    };
                    pre_mag.push(pm);
                    h.push(relu(pm));
                }
            } else {
                h.extend_from_slice(&ra);
            }
            active_total += h.iter().filter(|&&v| v > 0.0).count();

            // Reconstruction through the active set.
            x_hat.assign(&p.b_dec);
            for (k, &i) in gate_on.iter().enumerate() {
                if h[k] > 0.0 {
                    x_hat.scaled_add(h[k], &p.w_dec.column(i));
                }
            }
            let rec = sq_dist(xb, x_hat.view());

            let pen_weight = |i: usize| if weighted { self.norms[i] } else { 1.0 };
            let penalised: &[f64] = if gated { &ra } else { &h };
            let sp: f64 = gate_on
                .iter()
                .zip(penalised)
                .map(|(&i, &v)| v * pen_weight(i))
                .sum::<f64>()
                * self.lambda;

            let aux = if gated {
                x_aux.assign(&p.b_dec);
                for (k, &i) in gate_on.iter().enumerate() {
                    x_aux.scaled_add(ra[k], &p.w_dec.column(i));
                }
                sq_dist(xb, x_aux.view())
            } else {
                0.0
            };

            if terms.reconstruct {
                rec_sum += rec;
            }
            if terms.sparsity {
                sp_sum += sp;
            }
            if terms.aux {
                aux_sum += aux;
            }

            // dL/dh and dL/dRA over the gate-on set.
            let mut dh = vec![0.0; gate_on.len()];
            let mut dra = vec![0.0; gate_on.len()];

            if terms.reconstruct {
                let dxhat = (&x_hat - &xb) * (2.0 * self.scale);
                grads.grad.b_dec += &dxhat;
                for (k, &i) in gate_on.iter().enumerate() {
                    if h[k] > 0.0 {
                        grads.grad.w_dec.column_mut(i).scaled_add(h[k], &dxhat);
                        dh[k] = dxhat.dot(&p.w_dec.column(i));
                    }
                }
            }

            if gated && terms.aux {
                let dxa = (&x_aux - &xb) * (2.0 * self.scale);
                let decoder_learns = variant == SaeVariant::SaeRad;
                if decoder_learns {
                    grads.grad.b_dec += &dxa;
                }
                for (k, &i) in gate_on.iter().enumerate() {
                    if decoder_learns {
                        grads.grad.w_dec.column_mut(i).scaled_add(ra[k], &dxa);
                    }
                    dra[k] += dxa.dot(&p.w_dec.column(i));
                }
            }

            if terms.sparsity {
                let ls = self.lambda * self.scale;
                for (k, &i) in gate_on.iter().enumerate() {
                    let d = ls * pen_weight(i);
                    if gated {
                        dra[k] += d;
                    } else if h[k] > 0.0 {
                        dh[k] += d;
                    }
                    if weighted {
                        norm_coef[i] += ls * penalised[k];
                    }
                }
            }

            // Back through the encoder.
            dxc.fill(0.0);
            for (k, &i) in gate_on.iter().enumerate() {
                let d_pi = if gated { dra[k] } else { dh[k] };
                let mut d_proj = d_pi;
                grads.grad.b_gate[i] += d_pi;

                if let Some(mag) = &mut grads.grad.magnitude {
                    let d_pm = if pre_mag[k] > 0.0 { dh[k] } else { 0.0 };
                    mag.b_mag[i] += d_pm;
                    match &mut mag.weights {
                        MagnitudeWeights::Tied(dr) => {
                            let er = exp_r.as_ref().expect("tied weights")[i];
                            dr[i] += d_pm * er * pb[i];
                            d_proj += d_pm * er;
                        }
                        MagnitudeWeights::Untied(dw) => {
                            if d_pm != 0.0 {
                                dw.row_mut(i).scaled_add(d_pm, &xcb);
                                if let Some(MagnitudeWeights::Untied(w)) =
                                    p.magnitude.as_ref().map(|m| &m.weights)
                                {
                                    dxc.scaled_add(d_pm, &w.row(i));
                                }
                            }
                        }
                    }
                }

                if d_proj != 0.0 {
                    grads.grad.w_gate.row_mut(i).scaled_add(d_proj, &xcb);
                    dxc.scaled_add(d_proj, &p.w_gate.row(i));
                }
            }
            if variant.centers_input() {
                grads.grad.b_dec -= &dxc;
            }
        }

        grads.batch_size = rows;
        Partial {
            grads,
            norm_coef,
            reconstruct: rec_sum,
            sparsity: sp_sum,
            aux: aux_sum,
            active: active_total,
        }
    }
}

/// Batch-mean objective evaluated with the single-example forward ops.
/// For the Gated variant the auxiliary term decodes through `frozen`, a
/// snapshot of `(W_dec, b_dec)` that perturbations do not touch.
fn objective_with_frozen(
    params: &SaeParams,
    frozen: Option<(&Array2<f64>, &Array1<f64>)>,
    batch: ArrayView2<f64>,
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for x in batch.rows() {
        let enc = params.encode(x)?;
        let x_hat = params.decode(enc.h.view())?;
        let mut value = sq_dist(x, x_hat.view());
        let penalised = if params.variant.is_gated() { &enc.ra } else { &enc.h };
        value += if params.variant.norm_weighted() {
            lambda * penalised.dot(&params.decoder_norms())
        } else {
            lambda * penalised.sum()
        };
        if params.variant.is_gated() {
            let x_aux = match frozen {
                Some((w, b)) => w.dot(&enc.ra) + b,
                None => params.decode(enc.ra.view())?,
            };
            value += sq_dist(x, x_aux.view());
        }
        total += value;
    }
    Ok(total / batch.nrows() as f64)
}

/// Central-difference gradient of the batch-mean total loss for every
/// parameter entry. Gated models keep the auxiliary decoder fixed at the
/// unperturbed values, matching the stop-gradient semantics of `backward`.
pub fn finite_diff_grad(
    params: &SaeParams,
    batch: ArrayView2<f64>,
    lambda: f64,
    step: f64,
) -> Result<GradSet> {
    if !(step > 0.0) {
        return Err(SaeError::Config(format!("step must be > 0, got {step}")));
    }
    params.validate()?;
    let frozen_w = params.w_dec.clone();
    let frozen_b = params.b_dec.clone();
    let frozen = (params.variant == SaeVariant::Gated).then_some((&frozen_w, &frozen_b));

    let mut grads = GradSet::zeros_like(params, batch.nrows());
    let mut probe = params.clone();
    let tensor_count = params.tensors().len();
    for t in 0..tensor_count {
        let len = params.tensors()[t].1.len();
        for k in 0..len {
            let original = *probe.tensors_mut()[t].1.iter_mut().nth(k).unwrap();
            set_entry(&mut probe, t, k, original + step);
            let plus = objective_with_frozen(&probe, frozen, batch, lambda)?;
            set_entry(&mut probe, t, k, original - step);
            let minus = objective_with_frozen(&probe, frozen, batch, lambda)?;
            set_entry(&mut probe, t, k, original);
            let g = (plus - minus) / (2.0 * step);
            *grads.grad.tensors_mut()[t].1.iter_mut().nth(k).unwrap() = g;
        }
    }
    Ok(grads)
}

fn set_entry(params: &mut SaeParams, tensor: usize, index: usize, value: f64) {
    *params.tensors_mut()[tensor].1.iter_mut().nth(index).unwrap() = value;
}

/// Worst relative error `|a - f| / max(|a|, |f|, 1)` per tensor, in tensor order.
pub fn max_relative_error(analytic: &GradSet, numeric: &GradSet) -> Vec<(&'static str, f64)> {
    analytic
        .grad
        .tensors()
        .into_iter()
        .zip(numeric.grad.tensors())
        .map(|((name, a), (_, f))| {
            let mut worst = 0.0f64;
            Zip::from(&a).and(&f).for_each(|&a, &f| {
                let err = (a - f).abs() / a.abs().max(f.abs()).max(1.0);
                worst = worst.max(err);
            });
            (name, worst)
        })
        .collect()
}

/// Distance from zero that every gate, magnitude and ReLU pre-activation
/// must keep in a gradient-check instance.
pub const KINK_MARGIN: f64 = 1e-4;

/// A random parameter set and batch with every pre-activation at least
/// `margin` away from its kink, so finite differences are well defined.
/// Gives up after 10 000 draws.
pub fn random_check_instance(
    variant: SaeVariant,
    n: usize,
    m: usize,
    batch_size: usize,
    seed: u64,
    margin: f64,
) -> Result<(SaeParams, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let mut p = SaeParams::zeros(variant, n, m);
        for (_, mut t) in p.tensors_mut() {
            t.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        if let Some(MagnitudeWeights::Tied(r)) = p.magnitude.as_mut().map(|m| &mut m.weights) {
            r.mapv_inplace(|v| 0.5 * v);
        }
        let batch = Array2::from_shape_fn((batch_size, n), |_| rng.random_range(-1.5..1.5));
        if clear_of_kinks(&p, batch.view(), margin)? {
            return Ok((p, batch));
        }
    }
    Err(SaeError::Config(format!(
        "no kink-free instance found for n={n}, m={m}, batch={batch_size}"
    )))
}

/// True when no pre-activation of `batch` under `params` lies within
/// `margin` of zero and no decoder column is near zero norm.
pub fn clear_of_kinks(params: &SaeParams, batch: ArrayView2<f64>, margin: f64) -> Result<bool> {
    if params.decoder_norms().iter().any(|&v| v <= margin) {
        return Ok(false);
    }
    for x in batch.rows() {
        let enc = params.encode(x)?;
        if enc.pi_gate.iter().any(|v| v.abs() <= margin) {
            return Ok(false);
        }
        if let Some(mag) = &params.magnitude {
            let xc = if params.variant.centers_input() {
                &x - &params.b_dec
            } else {
                x.to_owned()
            };
            let pre = match &mag.weights {
                MagnitudeWeights::Tied(r) => {
                    &params.w_gate.dot(&xc) * &r.mapv(f64::exp) + &mag.b_mag
                }
                MagnitudeWeights::Untied(w) => w.dot(&xc) + &mag.b_mag,
            };
            if pre.iter().any(|v| v.abs() <= margin) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Analytic vs finite-difference comparison on one instance: worst relative
/// error per tensor.
pub fn grad_check(
    params: &SaeParams,
    batch: ArrayView2<f64>,
    lambda: f64,
    step: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let (_, analytic) = backward(params, batch, lambda)?;
    let numeric = finite_diff_grad(params, batch, lambda, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_rad() -> SaeParams {
        let mut p = SaeParams::zeros(SaeVariant::SaeRad, 2, 2);
        p.w_gate = Array2::eye(2);
        p.w_dec.assign(&Array2::<f64>::eye(2));
        p
    }

    #[test]
    fn zero_batch_zero_gradients() {
        for v in SaeVariant::ALL {
            let p = SaeParams::zeros(v, 3, 5);
            let (loss, g) = backward(&p, Array2::zeros((4, 3)).view(), 0.7).unwrap();
            assert_eq!(loss.total, 0.0);
            for (_, t) in g.grad.tensors() {
                assert!(t.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sae_rad_hand_case() {
        let p = identity_rad();
        let batch = array![[1.0, 0.0]];
        let pass = backward_terms(
            &p,
            batch.view(),
            1.0,
            LossTerms {
                reconstruct: true,
                sparsity: false,
                aux: false,
            },
        )
        .unwrap();
        assert_eq!(pass.grads.grad.b_dec, array![0.0, 0.0]);

        let sparsity_only = backward_terms(
            &p,
            batch.view(),
            1.0,
            LossTerms {
                reconstruct: false,
                sparsity: true,
                aux: false,
            },
        )
        .unwrap();
        let col = sparsity_only.grads.grad.w_dec.column(0).to_owned();
        assert_eq!(col, array![1.0, 0.0]);

        let (loss, _) = backward(&p, batch.view(), 1.0).unwrap();
        assert_eq!(loss, LossBreakdown::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn baseline_quadratic_bias_gradient() {
        // Encoder with negative biases keeps h at zero, so the loss is
        // ‖b_dec - x‖² and its gradient is 2(b_dec - x) averaged.
        let mut p = SaeParams::zeros(SaeVariant::Baseline, 2, 3);
        p.b_gate.fill(-10.0);
        p.b_dec = array![0.5, -0.5];
        let batch = array![[1.0, 2.0], [3.0, -1.0]];
        let fd = finite_diff_grad(&p, batch.view(), 0.1, 1e-5).unwrap();
        let want = array![
            ((0.5 - 1.0) * 2.0 + (0.5 - 3.0) * 2.0) / 2.0,
            ((-0.5 - 2.0) * 2.0 + (-0.5 + 1.0) * 2.0) / 2.0
        ];
        for (a, b) in fd.grad.b_dec.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let (_, g) = backward(&p, batch.view(), 0.1).unwrap();
        assert_eq!(g.grad.b_dec, want);
    }

    #[test]
    fn rejects_bad_batches() {
        let p = SaeParams::zeros(SaeVariant::Gated, 3, 4);
        assert!(backward(&p, Array2::zeros((0, 3)).view(), 0.1).is_err());
        assert!(matches!(
            backward(&p, Array2::zeros((2, 2)).view(), 0.1),
            Err(SaeError::Dimension { .. })
        ));
        let mut bad = Array2::zeros((2, 3));
        bad[[1, 1]] = f64::INFINITY;
        assert!(matches!(
            backward(&p, bad.view(), 0.1),
            Err(SaeError::Numerics(_))
        ));
        assert!(finite_diff_grad(&p, Array2::zeros((1, 3)).view(), 0.1, 0.0).is_err());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = identity_rad();
        p.w_dec[[0, 0]] = 1e300;
        let err = backward(&p, array![[1e10, 0.0]].view(), 1.0).unwrap_err();
        assert!(err.is_numerics(), "{err}");
    }
}
