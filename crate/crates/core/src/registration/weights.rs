//! Robust weight functions for iteratively re-weighted least squares.

use serde::{Deserialize, Serialize};

/// Consistency factor turning a median absolute deviation into a Gaussian sigma.
pub const MAD_TO_SIGMA: f64 = 1.4826;
/// Lower bound on an online scale estimate, in pixels.
pub const MIN_SCALE: f64 = 1e-2;
/// Switch point of the Tukey-Lambda weight.
pub const DEFAULT_TUKEY_EPSILON: f64 = 1e-4;
pub const DEFAULT_T_NU: f64 = 2.5;

/// Scale of the T-distribution weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Fixed(f64),
    /// Re-estimated from the current residuals as `1.4826 * MAD`.
    Mad,
}

/// Robust M-estimator family and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFunction {
    None,
    Huber { k: f64 },
    Cauchy { k: f64 },
    TDistribution { nu: f64, scale: Scale },
    /// Logistic (Tukey-Lambda with shape 0).
    TukeyLambda { k: f64, epsilon: f64 },
}

impl Default for WeightFunction {
    fn default() -> Self {
        WeightFunction::TDistribution {
            nu: DEFAULT_T_NU,
            scale: Scale::Mad,
        }
    }
}

/// TUM camera families the fitted presets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Freiburg {
    Fr1,
    Fr2,
    Fr3,
}

impl std::str::FromStr for Freiburg {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fr1" | "freiburg1" => Ok(Freiburg::Fr1),
            "fr2" | "freiburg2" => Ok(Freiburg::Fr2),
            "fr3" | "freiburg3" => Ok(Freiburg::Fr3),
            other => Err(crate::Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl WeightFunction {
    pub fn huber_preset(set: Freiburg) -> Self {
        let k = match set {
            Freiburg::Fr1 => 1.1426,
            Freiburg::Fr2 => 1.1710,
            Freiburg::Fr3 => 1.4425,
        };
        WeightFunction::Huber { k }
    }

    pub fn cauchy_preset(set: Freiburg) -> Self {
        let k = match set {
            Freiburg::Fr1 => 0.9701,
            Freiburg::Fr2 => 0.9102,
            Freiburg::Fr3 => 0.7217,
        };
        WeightFunction::Cauchy { k }
    }

    pub fn tukey_preset(set: Freiburg) -> Self {
        let k = match set {
            Freiburg::Fr1 => 0.8368,
            Freiburg::Fr2 => 0.7909,
            Freiburg::Fr3 => 0.6540,
        };
        WeightFunction::TukeyLambda {
            k,
            epsilon: DEFAULT_TUKEY_EPSILON,
        }
    }

    pub fn t_preset(set: Freiburg) -> Self {
        let (nu, sigma) = match set {
            Freiburg::Fr1 => (2.2875, 1.1050),
            Freiburg::Fr2 => (2.7104, 1.0682),
            Freiburg::Fr3 => (2.4621, 0.8330),
        };
        WeightFunction::TDistribution {
            nu,
            scale: Scale::Fixed(sigma),
        }
    }

    pub fn is_valid(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            WeightFunction::None => true,
            WeightFunction::Huber { k } | WeightFunction::Cauchy { k } => pos(k),
            WeightFunction::TDistribution { nu, scale } => {
                pos(nu) && match scale {
                    Scale::Fixed(s) => pos(s),
                    Scale::Mad => true,
                }
            }
            WeightFunction::TukeyLambda { k, epsilon } => pos(k) && pos(epsilon),
        }
    }

    /// Fixes an online scale to `sigma`; other kinds are returned unchanged.
    pub fn resolved(&self, sigma: f64) -> Self {
        match *self {
            WeightFunction::TDistribution { nu, scale: Scale::Mad } => WeightFunction::TDistribution {
                nu,
                scale: Scale::Fixed(sigma.max(MIN_SCALE)),
            },
            other => other,
        }
    }

    pub fn needs_scale(&self) -> bool {
        matches!(self, WeightFunction::TDistribution { scale: Scale::Mad, .. })
    }

    /// Weight of one residual. An online scale that was not resolved is taken as 1.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            WeightFunction::None => 1.0,
            WeightFunction::Huber { k } => {
                let a = r.abs();
                if a <= k {
                    1.0
                } else {
                    k / a
                }
            }
            WeightFunction::Cauchy { k } => 1.0 / (1.0 + (r / k).powi(2)),
            WeightFunction::TDistribution { nu, scale } => {
                let sigma = match scale {
                    Scale::Fixed(s) => s,
                    Scale::Mad => 1.0,
                };
                (nu + 1.0) / (nu + (r / sigma).powi(2))
            }
            WeightFunction::TukeyLambda { k, epsilon } => tukey_lambda_weight(r, k, epsilon),
        }
    }
}

/// `tanh(r / 2k) / (2 k r)`, with its even Taylor expansion near zero.
pub fn tukey_lambda_weight(r: f64, k: f64, epsilon: f64) -> f64 {
    if r.abs() <= epsilon {
        let q = r / k;
        (1.0 - q * q / 12.0) / (4.0 * k * k)
    } else {
        (r / (2.0 * k)).tanh() / (2.0 * k * r)
    }
}

/// `1.4826 * median(|r - median(r)|)` over the given values.
pub fn mad_sigma(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let m = median_in_place(&mut v);
    for x in &mut v {
        *x = (*x - m).abs();
    }
    Some(MAD_TO_SIGMA * median_in_place(&mut v))
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn huber_branches() {
        let w = WeightFunction::huber_preset(Freiburg::Fr1);
        assert_eq!(w.weight(0.5), 1.0);
        assert_eq!(w.weight(1.1426), 1.0);
        assert_relative_eq!(w.weight(2.2852), 0.5, epsilon = 1e-15);
        assert_relative_eq!(w.weight(-2.2852), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn t_distribution_at_zero() {
        let w = WeightFunction::t_preset(Freiburg::Fr1);
        assert_relative_eq!(w.weight(0.0), 3.2875 / 2.2875, epsilon = 1e-12);
        assert_relative_eq!(w.weight(0.0), 1.4372, epsilon = 1e-4);
    }

    #[test]
    fn cauchy_half_at_k() {
        let w = WeightFunction::cauchy_preset(Freiburg::Fr3);
        assert_relative_eq!(w.weight(0.7217), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tukey_continuous_at_switch() {
        for set in [Freiburg::Fr1, Freiburg::Fr2, Freiburg::Fr3] {
            let WeightFunction::TukeyLambda { k, epsilon } = WeightFunction::tukey_preset(set) else {
                unreachable!()
            };
            let below = tukey_lambda_weight(epsilon, k, epsilon);
            let above = tukey_lambda_weight(epsilon * (1.0 + 1e-12), k, epsilon);
            assert!((below - above).abs() < 1e-6);
            assert_relative_eq!(tukey_lambda_weight(0.0, k, epsilon), 1.0 / (4.0 * k * k), epsilon = 1e-15);
        }
    }

    #[test]
    fn mad_of_known_values() {
        assert_relative_eq!(mad_sigma(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), MAD_TO_SIGMA);
        assert!(mad_sigma(&[]).is_none());
    }

    #[test]
    fn online_scale_resolution() {
        let w = WeightFunction::default().resolved(2.0);
        assert_eq!(
            w,
            WeightFunction::TDistribution {
                nu: 2.5,
                scale: Scale::Fixed(2.0)
            }
        );
        assert_eq!(WeightFunction::default().resolved(0.0).weight(0.0), 3.5 / 2.5);
    }

    fn any_weight() -> impl Strategy<Value = WeightFunction> {
        prop_oneof![
            Just(WeightFunction::None),
            (0.1f64..3.0).prop_map(|k| WeightFunction::Huber { k }),
            (0.1f64..3.0).prop_map(|k| WeightFunction::Cauchy { k }),
            (0.5f64..10.0, 0.1f64..3.0).prop_map(|(nu, s)| WeightFunction::TDistribution {
                nu,
                scale: Scale::Fixed(s)
            }),
            (0.1f64..3.0).prop_map(|k| WeightFunction::TukeyLambda {
                k,
                epsilon: DEFAULT_TUKEY_EPSILON
            }),
        ]
    }

    proptest! {
        #[test]
        fn weights_positive_and_even(w in any_weight(), r in -50.0f64..50.0) {
            let a = w.weight(r);
            prop_assert!(a > 0.0 && a.is_finite());
            prop_assert_eq!(a, w.weight(-r));
        }
    }
}
