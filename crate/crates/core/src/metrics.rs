//! Evaluation metrics over a dataset: sparsity, reconstruction fidelity,
//! dead features and dictionary recovery against a known ground truth.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::data::{column_mean, ActivationDataset, GroundTruthDictionary};
use crate::error::{Result, SaeError};
use crate::sae::{relu, sq_dist, MagnitudeWeights, SaeParams};

const CHUNK_ROWS: usize = 256;

/// Strictly positive latent entries of one example, ascending by feature.
pub type SparseCode = Vec<(usize, f64)>;

/// Encode every row of `x`, keeping only the firing features. Rows are
/// processed in parallel chunks; the output order matches the input.
pub fn sparse_codes(params: &SaeParams, x: ArrayView2<f64>) -> Result<Vec<SparseCode>> {
    params.validate()?;
    if x.ncols() != params.n() {
        return Err(SaeError::dim("data columns", params.n(), x.ncols()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::Numerics("input data".into()));
    }
    let rows = x.nrows();
    let chunks: Vec<Vec<SparseCode>> = (0..rows)
        .step_by(CHUNK_ROWS)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| encode_chunk(params, x.slice(s![start..(start + CHUNK_ROWS).min(rows), ..])))
        .collect();
    let codes: Vec<SparseCode> = chunks.into_iter().flatten().collect();
    if codes.iter().flatten().any(|(_, v)| !v.is_finite()) {
        return Err(SaeError::Numerics("encoder output".into()));
    }
    Ok(codes)
}

fn encode_chunk(p: &SaeParams, x: ArrayView2<f64>) -> Vec<SparseCode> {
    let xc: Array2<f64> = if p.variant.centers_input() {
        &x - &p.b_dec.view().insert_axis(Axis(0))
    } else {
        x.to_owned()
    };
    let proj = xc.dot(&p.w_gate.t());
    let untied = match p.magnitude.as_ref().map(|m| &m.weights) {
        Some(MagnitudeWeights::Untied(w)) => Some(xc.dot(&w.t())),
        _ => None,
    };
    let exp_r = p
        .magnitude
        .as_ref()
        .and_then(|m| m.r_mag())
        .map(|r| r.mapv(f64::exp));

    proj.outer_iter()
        .enumerate()
        .map(|(b, pb)| {
            let mut code = Vec::new();
            for (i, &pv) in pb.iter().enumerate() {
                let pi = pv + p.b_gate[i];
                if pi <= 0.0 {
                    continue;
                }
                let h = match &p.magnitude {
                    None => pi,
                    Some(mag) => relu(match (&exp_r, &untied) {
                        (Some(er), _) => er[i] * pv + mag.b_mag[i],
                        (None, Some(u)) => u[[b, i]] + mag.b_mag[i],
                        (None, None) => unreachable!("gated params without magnitude weights"),
                    }),
                };
                if h > 0.0 {
                    code.push((i, h));
                }
            }
            code
        })
        .collect()
}

/// Decoder output for a sparse code.
pub fn decode_sparse(params: &SaeParams, code: &[(usize, f64)]) -> Array1<f64> {
    let mut out = params.b_dec.clone();
    for &(i, h) in code {
        out.scaled_add(h, &params.w_dec.column(i));
    }
    out
}

/// Mean number of firing features per example.
pub fn l0(params: &SaeParams, data: &ActivationDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let codes = sparse_codes(params, data.data.view())?;
    Ok(codes.iter().map(Vec::len).sum::<usize>() as f64 / codes.len() as f64)
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the dataset mean row.
pub fn explained_variance(params: &SaeParams, data: &ActivationDataset) -> Result<f64> {
    let codes = sparse_codes(params, data.data.view())?;
    let residual = residual_sum(params, data.data.view(), &codes);
    ev_from_residual(residual, data.data.view())
}

fn residual_sum(params: &SaeParams, x: ArrayView2<f64>, codes: &[SparseCode]) -> f64 {
    // Per-chunk partial sums reduced in order, so the result does not depend
    // on the thread count.
    let partials: Vec<f64> = codes
        .par_chunks(CHUNK_ROWS)
        .enumerate()
        .map(|(c, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(k, code)| {
                    let x_hat = decode_sparse(params, code);
                    sq_dist(x.row(c * CHUNK_ROWS + k), x_hat.view())
                })
                .sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

fn ev_from_residual(residual: f64, x: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() < 2 {
        return Err(SaeError::DegenerateData(
            "explained variance needs at least two examples".into(),
        ));
    }
    let mean = column_mean(x);
    let total: f64 = x.outer_iter().map(|row| sq_dist(row, mean.view())).sum();
    if total == 0.0 {
        return Err(SaeError::DegenerateData("dataset has zero variance".into()));
    }
    Ok(1.0 - residual / total)
}

/// Per-feature count of examples on which the feature fires.
pub fn fire_counts(m: usize, codes: &[SparseCode]) -> Vec<u64> {
    let mut counts = vec![0u64; m];
    for &(i, _) in codes.iter().flatten() {
        counts[i] += 1;
    }
    counts
}

/// Features that never fire on `data`.
pub fn dead_features(params: &SaeParams, data: &ActivationDataset) -> Result<Vec<usize>> {
    let codes = sparse_codes(params, data.data.view())?;
    Ok(dead_from_counts(&fire_counts(params.m(), &codes)))
}

fn dead_from_counts(counts: &[u64]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect()
}

/// Mean over true dictionary columns of the best cosine similarity to any
/// learned concept direction. Zero learned columns are skipped.
pub fn mmcs(learned: &SaeParams, truth: &GroundTruthDictionary) -> Result<f64> {
    let d = &truth.dictionary;
    if d.nrows() != learned.n() {
        return Err(SaeError::dim("dictionary rows", learned.n(), d.nrows()));
    }
    if d.ncols() == 0 {
        return Err(SaeError::DegenerateData("empty ground-truth dictionary".into()));
    }
    let mut directions = Vec::with_capacity(learned.m());
    for i in 0..learned.m() {
        match learned.concept_direction(i) {
            Ok(dir) => directions.push(dir),
            Err(SaeError::DegenerateFeature(i)) => {
                warn!(feature = i, "skipping zero decoder column in MMCS")
            }
            Err(e) => return Err(e),
        }
    }
    if directions.is_empty() {
        return Err(SaeError::DegenerateData("no usable learned directions".into()));
    }
    let mut total = 0.0;
    for (j, col) in d.columns().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 {
            return Err(SaeError::DegenerateFeature(j));
        }
        let best = directions
            .iter()
            .map(|dir| dir.dot(&col) / norm)
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / d.ncols() as f64)
}

/// Strength of every firing feature, in the units `feature_activation` uses.
fn activation_value(params: &SaeParams, norms: &Array1<f64>, i: usize, h: f64) -> f64 {
    if params.variant.norm_weighted() {
        h * norms[i]
    } else {
        h
    }
}

/// Paired comparison of learned and true coefficient magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageReport {
    /// Mean learned feature activation over matched pairs, in raw data units.
    pub learned_mean: f64,
    /// Mean true coefficient over the same pairs.
    pub true_mean: f64,
    pub pairs: usize,
}

impl ShrinkageReport {
    /// Relative underestimate, `1 − learned / true`. Positive means shrinkage.
    pub fn gap(&self) -> f64 {
        1.0 - self.learned_mean / self.true_mean
    }
}

/// Match each true feature to its most similar learned direction, then
/// compare magnitudes on every example where the true feature is present
/// and the matched learned feature fires. Learned activations are divided by
/// the dataset scale so both sides are in raw units.
pub fn shrinkage(
    params: &SaeParams,
    data: &ActivationDataset,
    truth: &GroundTruthDictionary,
) -> Result<ShrinkageReport> {
    if truth.coefficients.len() != data.len() {
        return Err(SaeError::dim(
            "ground-truth coefficient rows",
            data.len(),
            truth.coefficients.len(),
        ));
    }
    let norms = params.decoder_norms();
    let mut matched = Vec::with_capacity(truth.num_features());
    for col in truth.dictionary.columns() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..params.m() {
            if norms[i] == 0.0 {
                continue;
            }
            let cos = params.w_dec.column(i).dot(&col) / norms[i];
            if cos > best.0 {
                best = (cos, i);
            }
        }
        if best.1 == usize::MAX {
            return Err(SaeError::DegenerateData("no usable learned directions".into()));
        }
        matched.push(best.1);
    }

    let codes = sparse_codes(params, data.data.view())?;
    let (mut learned_sum, mut true_sum, mut pairs) = (0.0, 0.0, 0usize);
    for (code, coefs) in codes.iter().zip(&truth.coefficients) {
        for &(j, a) in coefs {
            let i = matched[j];
            if let Ok(k) = code.binary_search_by_key(&i, |&(f, _)| f) {
                learned_sum += activation_value(params, &norms, i, code[k].1) / data.scale;
                true_sum += a;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(SaeError::DegenerateData(
            "no example where a matched feature fires".into(),
        ));
    }
    Ok(ShrinkageReport {
        learned_mean: learned_sum / pairs as f64,
        true_mean: true_sum / pairs as f64,
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l0: f64,
    /// Mean over examples of `‖x − x̂‖²`.
    pub mse: f64,
    pub explained_variance: f64,
    /// Formula used for `explained_variance`.
    pub explained_variance_formula: String,
    pub dead_feature_count: usize,
    pub per_feature_fire_counts: Vec<u64>,
}

pub const EV_FORMULA: &str = "1 - sum ||x - x_hat||^2 / sum ||x - mean(x)||^2";

/// All metrics from a single encoding pass.
pub fn evaluate(params: &SaeParams, data: &ActivationDataset) -> Result<EvalReport> {
    let x = data.data.view();
    let codes = sparse_codes(params, x)?;
    let residual = residual_sum(params, x, &codes);
    let counts = fire_counts(params.m(), &codes);
    let rows = codes.len().max(1) as f64;
    Ok(EvalReport {
        l0: codes.iter().map(Vec::len).sum::<usize>() as f64 / rows,
        mse: residual / rows,
        explained_variance: ev_from_residual(residual, x)?,
        explained_variance_formula: EV_FORMULA.to_string(),
        dead_feature_count: dead_from_counts(&counts).len(),
        per_feature_fire_counts: counts,
    })
}
