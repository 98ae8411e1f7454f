//! Latent interventions: set one feature to a constant, decode, and
//! optionally add back the reconstruction error of the original token.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::sae::{sq_dist, SaeParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub feature: usize,
    /// Target value in latent (`h`) units.
    pub beta: f64,
    pub apply_delta_correction: bool,
}

impl InterventionSpec {
    fn validate(&self, m: usize) -> Result<()> {
        if self.feature >= m {
            return Err(SaeError::Index {
                index: self.feature,
                len: m,
            });
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(SaeError::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualToken {
    /// Decoded latent after the intervention.
    pub z_tilde: Array1<f64>,
    pub base_z: Array1<f64>,
    /// Reconstruction error `ẑ − z` of the original token.
    pub delta: Array1<f64>,
    pub spec: InterventionSpec,
}

impl CounterfactualToken {
    /// `z_tilde + delta` when correction is on, `z_tilde` otherwise.
    pub fn emitted(&self) -> Array1<f64> {
        if self.spec.apply_delta_correction {
            &self.z_tilde + &self.delta
        } else {
            self.z_tilde.clone()
        }
    }
}

/// Copy of `h` with entry `i` replaced by `beta`.
pub fn do_op(h: ArrayView1<f64>, i: usize, beta: f64) -> Result<Array1<f64>> {
    if i >= h.len() {
        return Err(SaeError::Index {
            index: i,
            len: h.len(),
        });
    }
    let mut out = h.to_owned();
    out[i] = beta;
    Ok(out)
}

pub fn counterfactual_token(
    params: &SaeParams,
    z: ArrayView1<f64>,
    spec: InterventionSpec,
) -> Result<CounterfactualToken> {
    spec.validate(params.m())?;
    let h = params.encode(z)?.h;
    let z_hat = params.decode(h.view())?;
    let z_tilde = params.decode(do_op(h.view(), spec.feature, spec.beta)?.view())?;
    Ok(CounterfactualToken {
        delta: &z_hat - &z,
        z_tilde,
        base_z: z.to_owned(),
        spec,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicResult {
    pub z_on: Array1<f64>,
    pub z_off: Array1<f64>,
    /// Distance between `z_off` and directly deactivating the feature on `z`.
    pub residual: f64,
}

/// Activate feature `i` at `beta`, re-encode, deactivate, and compare with
/// deactivating directly. With `reencode_corrected`, the δ-corrected token
/// is re-encoded instead of the plain decoder output.
pub fn cyclic_consistency(
    params: &SaeParams,
    z: ArrayView1<f64>,
    i: usize,
    beta: f64,
    reencode_corrected: bool,
) -> Result<CyclicResult> {
    let token = counterfactual_token(
        params,
        z,
        InterventionSpec {
            feature: i,
            beta,
            apply_delta_correction: reencode_corrected,
        },
    )?;
    let z_on = token.emitted();
    let h_on = params.encode(z_on.view())?.h;
    let z_off = params.decode(do_op(h_on.view(), i, 0.0)?.view())?;

    let h = params.encode(z)?.h;
    let direct = params.decode(do_op(h.view(), i, 0.0)?.view())?;
    let residual = sq_dist(z_off.view(), direct.view()).sqrt();
    Ok(CyclicResult {
        z_on,
        z_off,
        residual,
    })
}

/// Latent value giving feature activation `activation` for feature `i`,
/// i.e. divides by the decoder-column norm for norm-weighted variants.
pub fn beta_from_activation(params: &SaeParams, i: usize, activation: f64) -> Result<f64> {
    let scale = activation_scale(params, i)?;
    Ok(activation / scale)
}

/// Inverse of [`beta_from_activation`].
pub fn activation_from_beta(params: &SaeParams, i: usize, beta: f64) -> Result<f64> {
    Ok(beta * activation_scale(params, i)?)
}

fn activation_scale(params: &SaeParams, i: usize) -> Result<f64> {
    if i >= params.m() {
        return Err(SaeError::Index {
            index: i,
            len: params.m(),
        });
    }
    if !params.variant.norm_weighted() {
        return Ok(1.0);
    }
    let col = params.w_dec.column(i);
    let norm = col.dot(&col).sqrt();
    if norm == 0.0 {
        return Err(SaeError::DegenerateFeature(i));
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::SaeVariant;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Orthogonal encoder/decoder pair that reconstructs nonnegative inputs
    /// exactly.
    fn bijective() -> SaeParams {
        let mut p = SaeParams::zeros(SaeVariant::UnconstrainedNorm, 2, 2);
        p.w_gate = Array2::eye(2);
        p.w_dec = Array2::eye(2);
        p
    }

    #[test]
    fn do_op_cases() {
        let h = array![0.5, 0.0, 2.0];
        assert_eq!(do_op(h.view(), 2, h[2]).unwrap(), h);
        assert_eq!(
            do_op(Array1::zeros(3).view(), 0, 15.0).unwrap(),
            array![15.0, 0.0, 0.0]
        );
        let on = do_op(h.view(), 1, 7.0).unwrap();
        assert_eq!(
            do_op(on.view(), 1, 0.0).unwrap(),
            do_op(h.view(), 1, 0.0).unwrap()
        );
        assert!(matches!(do_op(h.view(), 3, 1.0), Err(SaeError::Index { .. })));
    }

    #[test]
    fn reassigning_current_value_round_trips() {
        let p = bijective();
        let z = array![1.5, 0.25];
        let spec = InterventionSpec {
            feature: 0,
            beta: 1.5,
            apply_delta_correction: true,
        };
        let t = counterfactual_token(&p, z.view(), spec).unwrap();
        assert_eq!(t.emitted(), z);
        assert_eq!(t.delta, array![0.0, 0.0]);
    }

    #[test]
    fn inactive_feature_at_zero_is_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SaeParams::init(SaeVariant::Gated, 4, 6, &mut rng);
        let z = array![0.3, -0.2, 0.9, 0.1];
        let h = p.encode(z.view()).unwrap().h;
        let i = (0..6).find(|&i| h[i] == 0.0).expect("an inactive feature");
        let t = counterfactual_token(
            &p,
            z.view(),
            InterventionSpec {
                feature: i,
                beta: 0.0,
                apply_delta_correction: false,
            },
        )
        .unwrap();
        assert_eq!(t.emitted(), p.decode(h.view()).unwrap());
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in SaeVariant::ALL {
            let mut p = SaeParams::init(v, 5, 8, &mut rng);
            p.b_dec = Array1::from_shape_fn(5, |_| rng.random_range(-0.2..0.2));
            let z = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let spec = InterventionSpec {
                feature: 3,
                beta: 2.5,
                apply_delta_correction: true,
            };
            let t = counterfactual_token(&p, z.view(), spec).unwrap();
            let mut h = p.encode(z.view()).unwrap().h;
            let mut z_hat = [0.0; 5];
            for k in 0..5 {
                z_hat[k] = p.b_dec[k] + (0..8).map(|i| p.w_dec[[k, i]] * h[i]).sum::<f64>();
            }
            h[3] = 2.5;
            for k in 0..5 {
                let tilde = p.b_dec[k] + (0..8).map(|i| p.w_dec[[k, i]] * h[i]).sum::<f64>();
                let expected = tilde + (z_hat[k] - z[k]);
                assert!((t.emitted()[k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cyclic_consistency_cases() {
        let p = bijective();
        let z = array![0.7, 1.1];
        for corrected in [false, true] {
            let r = cyclic_consistency(&p, z.view(), 1, 4.0, corrected).unwrap();
            assert_eq!(r.z_on, array![0.7, 4.0]);
            assert_eq!(r.z_off, array![0.7, 0.0]);
            assert_eq!(r.residual, 0.0);
        }

        // Feature 1 starts inactive; switching it "on" at zero is a no-op.
        let z = array![0.7, -0.3];
        let r = cyclic_consistency(&p, z.view(), 1, 0.0, false).unwrap();
        assert_eq!(r.z_on, r.z_off);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn beta_conversion_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = SaeParams::init(SaeVariant::SaeRad, 3, 4, &mut rng);
        p.w_dec.column_mut(2).mapv_inplace(|v| v * 3.0);
        let beta = beta_from_activation(&p, 2, 6.0).unwrap();
        assert!((beta - 2.0).abs() < 1e-12);
        assert!((activation_from_beta(&p, 2, beta).unwrap() - 6.0).abs() < 1e-12);

        let b = SaeParams::init(SaeVariant::Baseline, 3, 4, &mut rng);
        assert_eq!(beta_from_activation(&b, 1, 6.0).unwrap(), 6.0);
    }

    #[test]
    fn invalid_spec_rejected() {
        let p = bijective();
        let z = array![1.0, 1.0];
        let bad = |feature, beta| InterventionSpec {
            feature,
            beta,
            apply_delta_correction: false,
        };
        assert!(counterfactual_token(&p, z.view(), bad(2, 1.0)).is_err());
        assert!(counterfactual_token(&p, z.view(), bad(0, -1.0)).is_err());
        assert!(counterfactual_token(&p, z.view(), bad(0, f64::NAN)).is_err());
    }
}
