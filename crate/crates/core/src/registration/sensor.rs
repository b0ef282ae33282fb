//! Maximum-likelihood fits of residual distributions.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use super::weights::{Scale, WeightFunction, DEFAULT_TUKEY_EPSILON};
use crate::error::{Error, Result};

/// Fewest samples a fit accepts.
pub const MIN_FIT_SAMPLES: usize = 1000;
/// Huber tuning constant relative to the fitted scale.
const HUBER_C: f64 = 1.345;
/// Standard-normal 75th percentile.
const Q75_NORMAL: f64 = 0.674_489_750_196_081_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorModel {
    /// Tukey-Lambda with shape 0.
    Logistic,
    Cauchy,
    Huber,
    StudentT,
}

impl SensorModel {
    pub const ALL: [SensorModel; 4] = [
        SensorModel::Logistic,
        SensorModel::Cauchy,
        SensorModel::Huber,
        SensorModel::StudentT,
    ];
}

impl std::str::FromStr for SensorModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" | "tukey" => Ok(SensorModel::Logistic),
            "cauchy" => Ok(SensorModel::Cauchy),
            "huber" => Ok(SensorModel::Huber),
            "t" | "student-t" | "studentt" | "student_t" => Ok(SensorModel::StudentT),
            other => Err(Error::Config(format!("unknown sensor model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedParams {
    Scale { k: f64 },
    Huber { k: f64, sigma: f64 },
    StudentT { nu: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModelFit {
    pub model: SensorModel,
    pub params: FittedParams,
    /// Mean negative log-likelihood per sample.
    pub nll: f64,
    pub samples: usize,
}

impl SensorModelFit {
    /// The weight function implied by the fitted density.
    pub fn weight_function(&self) -> WeightFunction {
        match (self.model, self.params) {
            (SensorModel::Logistic, FittedParams::Scale { k }) => WeightFunction::TukeyLambda {
                k,
                epsilon: DEFAULT_TUKEY_EPSILON,
            },
            (_, FittedParams::Scale { k }) => WeightFunction::Cauchy { k },
            (_, FittedParams::Huber { k, .. }) => WeightFunction::Huber { k },
            (_, FittedParams::StudentT { nu, sigma }) => WeightFunction::TDistribution {
                nu,
                scale: Scale::Fixed(sigma),
            },
        }
    }
}

/// Fits `model` to zero-mean residual samples by maximum likelihood.
pub fn fit_sensor_model(samples: &[f64], model: SensorModel) -> Result<SensorModelFit> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::Fit(format!(
            "need at least {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|r| !r.is_finite()) {
        return Err(Error::Fit("non-finite sample".into()));
    }
    let mut abs: Vec<f64> = samples.iter().map(|r| r.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let spread = quantile_sorted(&abs, 0.5).max(quantile_sorted(&abs, 0.75));
    if !(spread > 0.0) || samples.iter().all(|&r| r == samples[0]) {
        return Err(Error::Fit("degenerate samples".into()));
    }
    let n = samples.len() as f64;
    let (params, nll) = match model {
        SensorModel::Logistic => {
            let k = minimise_scale(spread, |k| logistic_nll(samples, k));
            (FittedParams::Scale { k }, logistic_nll(samples, k))
        }
        SensorModel::Cauchy => {
            let k = minimise_scale(spread, |k| cauchy_nll(samples, k));
            (FittedParams::Scale { k }, cauchy_nll(samples, k))
        }
        SensorModel::Huber => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            let sigma = quantile_sorted(&sorted, 0.75) / Q75_NORMAL;
            if !(sigma > 0.0) {
                return Err(Error::Fit("degenerate samples".into()));
            }
            let k = HUBER_C * sigma;
            (FittedParams::Huber { k, sigma }, huber_nll(samples, sigma))
        }
        SensorModel::StudentT => {
            let log_nu = golden_section(0.1f64.ln(), 1000f64.ln(), 1e-6, |l| student_t_profile(samples, l.exp()).1);
            let nu = log_nu.exp();
            let (sigma, nll) = student_t_profile(samples, nu);
            (FittedParams::StudentT { nu, sigma }, nll)
        }
    };
    Ok(SensorModelFit {
        model,
        params,
        nll: nll / n,
        samples: samples.len(),
    })
}

/// Fits every family; sorted by ascending negative log-likelihood.
pub fn fit_all(samples: &[f64]) -> Result<Vec<SensorModelFit>> {
    let mut fits = SensorModel::ALL
        .iter()
        .map(|&m| fit_sensor_model(samples, m))
        .collect::<Result<Vec<_>>>()?;
    fits.sort_by(|a, b| a.nll.total_cmp(&b.nll));
    Ok(fits)
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
fn golden_section(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Scale minimising `nll`, searched in log space around `guess`.
fn minimise_scale(guess: f64, nll: impl Fn(f64) -> f64) -> f64 {
    let c = guess.ln();
    golden_section(c - 7.0, c + 7.0, 1e-9, |l| nll(l.exp())).exp()
}

fn logistic_nll(r: &[f64], k: f64) -> f64 {
    // p(r) = 1 / (4k cosh²(r / 2k)); log cosh computed stably
    r.iter()
        .map(|&x| {
            let a = (x / (2.0 * k)).abs();
            let log_cosh = a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
            (4.0 * k).ln() + 2.0 * log_cosh
        })
        .sum()
}

fn cauchy_nll(r: &[f64], k: f64) -> f64 {
    r.iter()
        .map(|&x| (std::f64::consts::PI * k).ln() + (x / k).powi(2).ln_1p())
        .sum()
}

fn huber_nll(r: &[f64], sigma: f64) -> f64 {
    let c = HUBER_C;
    let z = (2.0 * std::f64::consts::PI).sqrt() * erf(c / std::f64::consts::SQRT_2) + 2.0 * (-c * c / 2.0).exp() / c;
    r.iter()
        .map(|&x| {
            let u = (x / sigma).abs();
            let rho = if u <= c { 0.5 * u * u } else { c * u - 0.5 * c * c };
            rho + (sigma * z).ln()
        })
        .sum()
}

fn student_t_nll(r: &[f64], nu: f64, sigma: f64) -> f64 {
    let norm = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln() - sigma.ln();
    r.iter()
        .map(|&x| -norm + (nu + 1.0) / 2.0 * ((x / sigma).powi(2) / nu).ln_1p())
        .sum()
}

/// EM estimate of sigma for fixed `nu`, with the resulting NLL.
fn student_t_profile(r: &[f64], nu: f64) -> (f64, f64) {
    let n = r.len() as f64;
    let mut s2 = r.iter().map(|x| x * x).sum::<f64>() / n;
    if !(s2 > 0.0) {
        s2 = 1e-12;
    }
    for _ in 0..500 {
        let next = r
            .iter()
            .map(|x| {
                let w = (nu + 1.0) / (nu + x * x / s2);
                w * x * x
            })
            .sum::<f64>()
            / n;
        let done = ((next - s2) / s2).abs() < 1e-12;
        s2 = next;
        if done {
            break;
        }
    }
    let sigma = s2.sqrt();
    (sigma, student_t_nll(r, nu, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal, StudentT};

    fn draws<D: Distribution<f64>>(d: D, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn recovers_student_t() {
        let r = draws(StudentT::new(2.5).unwrap(), 100_000, 1);
        let fit = fit_sensor_model(&r, SensorModel::StudentT).unwrap();
        let FittedParams::StudentT { nu, sigma } = fit.params else {
            panic!("wrong params")
        };
        assert!((nu - 2.5).abs() < 0.3, "nu = {nu}");
        assert!((sigma - 1.0).abs() < 0.05, "sigma = {sigma}");
    }

    #[test]
    fn gaussian_prefers_t_over_cauchy() {
        let r = draws(Normal::new(0.0, 1.0).unwrap(), 20_000, 2);
        let t = fit_sensor_model(&r, SensorModel::StudentT).unwrap();
        let c = fit_sensor_model(&r, SensorModel::Cauchy).unwrap();
        assert!(c.nll > t.nll);
        let FittedParams::StudentT { nu, .. } = t.params else { panic!() };
        assert!(nu > 20.0);
    }

    #[test]
    fn degenerate_and_small_inputs_fail() {
        assert!(matches!(fit_sensor_model(&[0.0; 5000], SensorModel::StudentT), Err(Error::Fit(_))));
        assert!(matches!(fit_sensor_model(&[0.3; 5000], SensorModel::Cauchy), Err(Error::Fit(_))));
        assert!(matches!(fit_sensor_model(&[1.0; 10], SensorModel::Huber), Err(Error::Fit(_))));
    }

    #[test]
    fn cauchy_scale_recovered() {
        let r = draws(rand_distr::Cauchy::new(0.0, 0.7).unwrap(), 50_000, 3);
        let fit = fit_sensor_model(&r, SensorModel::Cauchy).unwrap();
        let FittedParams::Scale { k } = fit.params else { panic!() };
        assert!((k - 0.7).abs() < 0.02, "k = {k}");
    }

    #[test]
    fn huber_scale_from_quartile() {
        let r = draws(Normal::new(0.0, 2.0).unwrap(), 50_000, 4);
        let fit = fit_sensor_model(&r, SensorModel::Huber).unwrap();
        let FittedParams::Huber { sigma, k } = fit.params else { panic!() };
        assert!((sigma - 2.0).abs() < 0.05);
        assert!((k - 1.345 * sigma).abs() < 1e-12);
    }

    #[test]
    fn logistic_scale_recovered() {
        // inverse-cdf sampling of a logistic with scale 0.8
        let u = draws(rand_distr::Uniform::new(1e-12, 1.0 - 1e-12), 50_000, 5);
        let r: Vec<f64> = u.iter().map(|p| 0.8 * (p / (1.0 - p)).ln()).collect();
        let fit = fit_sensor_model(&r, SensorModel::Logistic).unwrap();
        let FittedParams::Scale { k } = fit.params else { panic!() };
        // the density uses k as the scale of r / (2k) inside cosh², i.e. logistic scale k
        assert!((k - 0.8).abs() < 0.02, "k = {k}");
    }
}
