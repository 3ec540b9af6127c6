//! Rounds-versus-heterogeneity law `T(D) = 1/(β1·D² + β2·D + β3)`.
//!
//! The reciprocal makes the fit a linear least-squares problem on `1/T`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundModel {
    pub beta: [f64; 3],
    #[serde(rename = "range")]
    pub valid_range: (f64, f64),
    pub nmse: f64,
    #[serde(default)]
    pub std_errors: [f64; 3],
}

fn denominator(beta: &[f64; 3], d: f64) -> f64 {
    beta[0] * d * d + beta[1] * d + beta[2]
}

/// Smallest value of the quadratic on `[lo, hi]` and where it occurs.
fn min_on_range(beta: &[f64; 3], (lo, hi): (f64, f64)) -> (f64, f64) {
    let mut best = (denominator(beta, lo), lo);
    let hi_v = denominator(beta, hi);
    if hi_v < best.0 {
        best = (hi_v, hi);
    }
    if beta[0] > 0.0 {
        let vertex = -beta[1] / (2.0 * beta[0]);
        if vertex > lo && vertex < hi {
            let v = denominator(beta, vertex);
            if v < best.0 {
                best = (v, vertex);
            }
        }
    }
    best
}

/// `Σ(T̂−T)²/Σ(T−mean)²`. For constant targets the denominator vanishes; the
/// value then falls back to normalizing by `n·mean²`.
pub fn nmse(predicted: &[f64], actual: &[f64]) -> f64 {
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let num: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    let den: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if den > 1e-12 * mean * mean * n {
        num / den
    } else {
        num / (n * mean * mean)
    }
}

impl RoundModel {
    /// A model with known coefficients and no fit diagnostics.
    pub fn from_beta(beta: [f64; 3], valid_range: (f64, f64)) -> Result<Self> {
        let m = Self {
            beta,
            valid_range,
            nmse: 0.0,
            std_errors: [0.0; 3],
        };
        m.check_valid()?;
        Ok(m)
    }

    fn check_valid(&self) -> Result<()> {
        let (v, at) = min_on_range(&self.beta, self.valid_range);
        if !(v > 0.0) {
            return Err(Error::Fit(format!(
                "fitted denominator {v} is non-positive at D = {at}"
            )));
        }
        Ok(())
    }

    /// Least squares on `1/T = β1·D² + β2·D + β3`.
    pub fn fit(samples: &[(f64, f64)]) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::Fit(format!("need at least 3 samples, got {}", samples.len())));
        }
        if let Some(&(d, t)) = samples.iter().find(|(d, t)| !d.is_finite() || !(*t > 0.0)) {
            return Err(Error::Fit(format!("invalid sample (D = {d}, T = {t})")));
        }
        let mut ds: Vec<f64> = samples.iter().map(|s| s.0).collect();
        ds.sort_by(f64::total_cmp);
        ds.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        if ds.len() < 3 {
            return Err(Error::Fit(format!(
                "design matrix is singular: only {} distinct D values",
                ds.len()
            )));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, 3, |i, j| samples[i].0.powi(2 - j as i32));
        let y = DVector::from_iterator(n, samples.iter().map(|s| 1.0 / s.1));
        let xtx = x.transpose() * &x;
        let chol = xtx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Fit("design matrix is singular".into()))?;
        let sol = chol.solve(&(x.transpose() * &y));
        let beta = [sol[0], sol[1], sol[2]];

        let resid = &y - &x * &sol;
        let dof = n.saturating_sub(3);
        let s2 = if dof > 0 { resid.norm_squared() / dof as f64 } else { 0.0 };
        let inv = chol.inverse();
        let std_errors = [
            (s2 * inv[(0, 0)]).max(0.0).sqrt(),
            (s2 * inv[(1, 1)]).max(0.0).sqrt(),
            (s2 * inv[(2, 2)]).max(0.0).sqrt(),
        ];

        let valid_range = (ds[0], ds[ds.len() - 1]);
        let mut model = Self {
            beta,
            valid_range,
            nmse: 0.0,
            std_errors,
        };
        model.check_valid()?;
        let predicted: Vec<f64> = samples.iter().map(|s| 1.0 / denominator(&beta, s.0)).collect();
        let actual: Vec<f64> = samples.iter().map(|s| s.1).collect();
        model.nmse = nmse(&predicted, &actual);
        Ok(model)
    }

    pub fn denominator(&self, d: f64) -> f64 {
        denominator(&self.beta, d)
    }

    pub fn predict(&self, d: f64) -> Result<f64> {
        predict_with(&self.beta, d, self.valid_range)
    }

    /// Coefficients perturbed by independent Gaussians with standard
    /// deviation `noise_scale·std_error`. Draws whose denominator is not
    /// positive on the valid range are redrawn.
    pub fn sample_beta(&self, noise_scale: f64, seed: u64) -> Result<[f64; 3]> {
        if !(noise_scale >= 0.0) {
            return Err(Error::validation(format!("noise scale {noise_scale} must be non-negative")));
        }
        if noise_scale == 0.0 {
            return Ok(self.beta);
        }
        let mut rng = rng_for(seed, &[0xBE7A]);
        for _ in 0..MAX_REDRAWS {
            let mut b = self.beta;
            for (bi, se) in b.iter_mut().zip(self.std_errors) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *bi += noise_scale * se * z;
            }
            if min_on_range(&b, self.valid_range).0 > 0.0 {
                return Ok(b);
            }
        }
        Err(Error::Numerical(format!(
            "no valid coefficient draw in {MAX_REDRAWS} attempts"
        )))
    }
}

/// `1/(β1·D² + β2·D + β3)`; extrapolation outside `range` is allowed with a warning.
pub fn predict_with(beta: &[f64; 3], d: f64, range: (f64, f64)) -> Result<f64> {
    let den = denominator(beta, d);
    if !(den > 0.0) {
        return Err(Error::Domain(format!(
            "round model denominator {den} is non-positive at D = {d}"
        )));
    }
    if d < range.0 - 1e-9 || d > range.1 + 1e-9 {
        log::debug!("round model extrapolated to D = {d} outside [{}, {}]", range.0, range.1);
    }
    Ok(1.0 / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const PAPER_BETA: [f64; 3] = [0.50, -1.83, 1.70];

    fn exact_samples(beta: [f64; 3], ds: &[f64]) -> Vec<(f64, f64)> {
        ds.iter()
            .map(|&d| (d, 1.0 / (beta[0] * d * d + beta[1] * d + beta[2])))
            .collect()
    }

    #[test]
    fn exact_round_trip() {
        let ds: Vec<f64> = (0..9).map(|i| 0.2 * i as f64).collect();
        let m = RoundModel::fit(&exact_samples(PAPER_BETA, &ds)).unwrap();
        for (a, b) in m.beta.iter().zip(PAPER_BETA) {
            assert!((a - b).abs() < 1e-9, "{:?}", m.beta);
        }
        assert!(m.nmse < 1e-12);
        assert_eq!(m.valid_range, (0.0, 1.6));
    }

    #[test]
    fn constant_rounds() {
        let s: Vec<_> = [0.1, 0.5, 0.9, 1.3].iter().map(|&d| (d, 8.0)).collect();
        let m = RoundModel::fit(&s).unwrap();
        assert!(m.beta[0].abs() < 1e-10 && m.beta[1].abs() < 1e-10);
        assert!((m.beta[2] - 0.125).abs() < 1e-10);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(RoundModel::fit(&[(0.1, 2.0), (0.2, 3.0)]), Err(Error::Fit(_))));
        assert!(matches!(
            RoundModel::fit(&[(0.1, 2.0), (0.1, 3.0), (0.2, 3.0), (0.2, 4.0)]),
            Err(Error::Fit(_))
        ));
        // A steep rise then a collapse forces a negative denominator inside the range.
        let bad = [(0.0, 1.0), (0.5, 10.0), (1.0, 1000.0), (1.5, 10.0), (2.0, 1.0)];
        assert!(RoundModel::fit(&bad).is_err());
    }

    #[test]
    fn noisy_fit_is_close_on_average() {
        let ds: Vec<f64> = (0..25).map(|i| 0.2 + 1.4 * i as f64 / 24.0).collect();
        let clean = exact_samples(PAPER_BETA, &ds);
        let seeds = 40;
        let mut mean = [0.0; 3];
        for seed in 0..seeds {
            let mut rng = rng_for(seed, &[]);
            let noisy: Vec<_> = clean
                .iter()
                .map(|&(d, t)| (d, t * (1.0 + rng.random_range(-0.1..0.1))))
                .collect();
            let m = RoundModel::fit(&noisy).unwrap();
            assert!(m.nmse > 0.0);
            for i in 0..3 {
                mean[i] += m.beta[i] / seeds as f64;
            }
        }
        for i in 0..3 {
            assert!(
                ((mean[i] - PAPER_BETA[i]) / PAPER_BETA[i]).abs() < 0.2,
                "{mean:?}"
            );
        }
    }

    #[test]
    fn predict_examples() {
        let m = RoundModel::from_beta(PAPER_BETA, (0.0, 1.8)).unwrap();
        assert!((m.predict(1.0).unwrap() - 1.0 / 0.37).abs() < 1e-12);
        assert!((m.predict(1.8).unwrap() - 1.0 / 0.026).abs() < 1e-9);
        let flat = RoundModel::from_beta([0.0, 0.0, 0.5], (0.0, 2.0)).unwrap();
        assert_eq!(flat.predict(1.3).unwrap(), 2.0);
        assert!(matches!(
            predict_with(&[0.0, -1.0, 0.5], 1.0, (0.0, 2.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn predict_is_monotone_where_denominator_falls() {
        let m = RoundModel::from_beta(PAPER_BETA, (0.0, 1.8)).unwrap();
        // Vertex at 1.83 lies right of the range, so the denominator falls throughout.
        let mut prev = 0.0;
        for i in 0..=180 {
            let t = m.predict(i as f64 * 0.01).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn sample_beta_behaviour() {
        let ds: Vec<f64> = (0..10).map(|i| 0.2 + 0.15 * i as f64).collect();
        let mut rng = rng_for(5, &[]);
        let s: Vec<_> = exact_samples(PAPER_BETA, &ds)
            .into_iter()
            .map(|(d, t)| (d, t * (1.0 + rng.random_range(-0.05..0.05))))
            .collect();
        let m = RoundModel::fit(&s).unwrap();
        assert_eq!(m.sample_beta(0.0, 1).unwrap(), m.beta);
        assert_eq!(m.sample_beta(1.0, 7).unwrap(), m.sample_beta(1.0, 7).unwrap());
        assert!(m.sample_beta(-1.0, 7).is_err());

        let draws = 10_000;
        let mut mean = [0.0; 3];
        for seed in 0..draws {
            let b = m.sample_beta(0.5, seed).unwrap();
            for i in 0..3 {
                mean[i] += b[i] / draws as f64;
            }
        }
        for i in 0..3 {
            assert!((mean[i] - m.beta[i]).abs() <= 3.0 * m.std_errors[i], "{i}");
        }
    }

    #[test]
    fn json_shape() {
        let m = RoundModel::from_beta(PAPER_BETA, (0.0, 1.8)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert!(v.get("beta").is_some() && v.get("range").is_some() && v.get("nmse").is_some());
    }
}
