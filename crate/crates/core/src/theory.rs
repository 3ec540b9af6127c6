//! Empirical checks of the convergence analysis for convex models:
//! constant estimation, the gradient-dissimilarity inequality, the local
//! drift bound and the averaged optimality-gap bound.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{pooled_label_distribution, ClientDataset};
use crate::error::{Error, Result};
use crate::fedsim::{aggregate, effective_batch_size, global_loss, local_sgd_with, Model, TrainConfig};
use crate::hetero::emd;
use crate::rng::rng_for;

/// A differentiable function of a flat parameter vector.
pub trait SmoothObjective: Sync {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>);
}

/// `F(w) = (1/K)·Σ_k F_k(w)` for a model template.
pub struct FederatedObjective<'a> {
    pub datasets: &'a [ClientDataset],
    pub template: &'a Model,
}

impl SmoothObjective for FederatedObjective<'_> {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let mut m = self.template.clone();
        m.weights.copy_from_slice(w);
        let k = self.datasets.len() as f64;
        let mut grad = vec![0.0; w.len()];
        let mut value = 0.0;
        for d in self.datasets {
            let (l, g) = m.full_gradient(d);
            value += l / k;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / k;
            }
        }
        (value, grad)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Largest observed gradient-difference ratio.
///
/// Combines random secant pairs around the probes with a few
/// finite-difference power iterations on the Hessian.
pub fn estimate_lipschitz(
    obj: &dyn SmoothObjective,
    probes: &[Vec<f64>],
    pairs: usize,
    power_iters: usize,
    seed: u64,
) -> f64 {
    if probes.is_empty() {
        return 0.0;
    }
    let n = obj.dim();
    let secant = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng_for(seed, &[0x5EC, p as u64]);
            let base = &probes[p % probes.len()];
            let mut u = gaussian_vec(&mut rng, n);
            let un = norm(&u).max(f64::MIN_POSITIVE);
            let scale = 10f64.powf(rng.random_range(-3.0..0.0)) * norm(base).max(1.0);
            u.iter_mut().for_each(|v| *v *= scale / un);
            let moved: Vec<f64> = base.iter().zip(&u).map(|(a, b)| a + b).collect();
            let g1 = obj.value_and_gradient(base).1;
            let g2 = obj.value_and_gradient(&moved).1;
            dist(&g1, &g2) / dist(base, &moved)
        })
        .reduce(|| 0.0, f64::max);
    let starts = probes.len().min(5);
    let power = (0..starts)
        .into_par_iter()
        .map(|s| {
            let base = &probes[s * probes.len() / starts];
            let mut rng = rng_for(seed, &[0x90E, s as u64]);
            let mut v = gaussian_vec(&mut rng, n);
            let mut est: f64 = 0.0;
            let h = 1e-4 * norm(base).max(1.0);
            for _ in 0..power_iters {
                let vn = norm(&v).max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x /= vn);
                let plus: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                let minus: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a - h * b).collect();
                let gp = obj.value_and_gradient(&plus).1;
                let gm = obj.value_and_gradient(&minus).1;
                v = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                est = est.max(norm(&v));
            }
            est
        })
        .reduce(|| 0.0, f64::max);
    secant.max(power)
}

/// Logits and probabilities of a logistic model for one sample.
fn logistic_probs(w: &[f64], d: usize, y: usize, x: &[f64], logits: &mut [f64], probs: &mut [f64]) {
    let (wm, b) = w.split_at(y * d);
    for c in 0..y {
        logits[c] = b[c] + wm[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for c in 0..y {
        probs[c] = (logits[c] - max).exp();
        s += probs[c];
    }
    probs.iter_mut().for_each(|p| *p /= s);
}

/// Adds `scale·(p − e_label) ⊗ [x; 1]` to `acc` in the logistic layout.
fn add_sample_gradient(acc: &mut [f64], d: usize, y: usize, x: &[f64], probs: &[f64], label: usize, scale: f64) {
    let (gw, gb) = acc.split_at_mut(y * d);
    for c in 0..y {
        let a = scale * (probs[c] - f64::from(c == label));
        gb[c] += a;
        for (g, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
            *g += a * xv;
        }
    }
}

/// Minimizer of the regularized pooled logistic loss by damped Newton steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub weights: Vec<f64>,
    pub loss: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

pub const OPTIMUM_TOLERANCE: f64 = 1e-6;

pub fn logistic_optimum(datasets: &[ClientDataset], template: &Model) -> Result<Optimum> {
    if !template.is_convex() {
        return Err(Error::Unsupported("the optimum is only certified for logistic regression".into()));
    }
    let (d, y) = (template.dim, template.num_classes);
    let p = template.num_params();
    let obj = FederatedObjective { datasets, template };
    let k = datasets.len() as f64;
    let mut w = vec![0.0; p];
    for it in 0..200 {
        let (loss, grad) = obj.value_and_gradient(&w);
        let gn = norm(&grad);
        if gn < OPTIMUM_TOLERANCE * 1e-2 || (gn < OPTIMUM_TOLERANCE && it > 0) {
            return Ok(Optimum { weights: w, loss, gradient_norm: gn, iterations: it });
        }
        // Hessian blocks (c, c') = Σ_i s_i[c,c']·x̃_i x̃_iᵀ / (K·n_k).
        let mut h = DMatrix::<f64>::zeros(p, p);
        let idx = |c: usize, j: usize| if j < d { c * d + j } else { y * d + c };
        let blocks: Vec<DMatrix<f64>> = datasets
            .par_iter()
            .map(|data| {
                let n = data.len();
                let xt = DMatrix::from_fn(n, d + 1, |i, j| if j < d { data.feature(i)[j] } else { 1.0 });
                let mut probs = vec![vec![0.0; y]; n];
                let mut logits = vec![0.0; y];
                for (i, pr) in probs.iter_mut().enumerate() {
                    logistic_probs(&w, d, y, data.feature(i), &mut logits, pr);
                }
                let mut local = DMatrix::<f64>::zeros(p, p);
                let scale = 1.0 / (k * n as f64);
                for c in 0..y {
                    for c2 in c..y {
                        let s: Vec<f64> = probs
                            .iter()
                            .map(|pr| scale * (f64::from(c == c2) * pr[c] - pr[c] * pr[c2]))
                            .collect();
                        let weighted = DMatrix::from_fn(n, d + 1, |i, j| s[i] * xt[(i, j)]);
                        let block = xt.transpose() * weighted;
                        for j in 0..=d {
                            for j2 in 0..=d {
                                local[(idx(c, j), idx(c2, j2))] += block[(j, j2)];
                                if c2 != c {
                                    local[(idx(c2, j2), idx(c, j))] += block[(j, j2)];
                                }
                            }
                        }
                    }
                }
                local
            })
            .collect();
        for b in blocks {
            h += b;
        }
        for i in 0..p {
            h[(i, i)] += template.l2;
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::Numerical("Hessian is not positive definite".into()))?;
        let step = chol.solve(&DVector::from_column_slice(&grad));
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let (l2, _) = obj.value_and_gradient(&cand);
            if l2 <= loss || t < 1e-10 {
                w = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let (loss, grad) = obj.value_and_gradient(&w);
    let gn = norm(&grad);
    if gn < OPTIMUM_TOLERANCE {
        return Ok(Optimum { weights: w, loss, gradient_norm: gn, iterations: 200 });
    }
    Err(Error::Numerical(format!("Newton iterations stalled at gradient norm {gn:.3e}")))
}

/// Empirical stand-ins for the smoothness, variance and gradient bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub l_smooth: f64,
    pub sigma: f64,
    pub g: f64,
    /// `‖w^(0,0) − w*‖`.
    pub a: f64,
    pub d_k: BTreeMap<usize, f64>,
    pub d_bar: f64,
}

impl TheoryConstants {
    /// Scales the estimated suprema `L`, `σ` and `G`. `A` and the EMDs
    /// are computed exactly and stay as they are.
    pub fn inflated(&self, factor: f64) -> Self {
        Self { l_smooth: self.l_smooth * factor, sigma: self.sigma * factor, g: self.g * factor, ..self.clone() }
    }

    pub fn max_learning_rate(&self) -> f64 {
        1.0 / (4.0 * self.l_smooth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub num_probes: usize,
    pub lipschitz_pairs: usize,
    pub power_iters: usize,
    /// Noise norm of a probe relative to `‖w*‖`.
    pub spread: f64,
    /// Mini-batch size of the stochastic gradients; 0 means full batch.
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { num_probes: 1000, lipschitz_pairs: 1000, power_iters: 30, spread: 0.5, batch_size: 20 }
    }
}

/// Points `s·center + noise` with `s ∈ [0, 1.25]` and noise norm about
/// `spread·max(‖center‖, 1)`.
pub fn probe_points(center: &[f64], count: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let n = center.len();
    let radius = spread * norm(center).max(1.0) / (n as f64).sqrt();
    (0..count)
        .map(|p| {
            let mut rng = rng_for(seed, &[0x9F0B, p as u64]);
            let s: f64 = rng.random_range(0.0..1.25);
            center
                .iter()
                .map(|c| s * c + radius * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsEstimate {
    pub constants: TheoryConstants,
    pub optimum: Optimum,
    pub probes: usize,
}

fn check_uniform(datasets: &[ClientDataset]) -> Result<usize> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::validation("theory checks need at least one client"))?;
    if let Some((k, d)) = datasets.iter().enumerate().find(|(_, d)| d.len() != first.len()) {
        return Err(Error::validation(format!(
            "client {k} has {} samples; theory checks need equal client sizes ({})",
            d.len(),
            first.len()
        )));
    }
    if first.is_empty() {
        return Err(Error::validation("clients have no samples"));
    }
    Ok(first.len())
}

fn client_emds(datasets: &[ClientDataset]) -> Result<Vec<f64>> {
    let g = pooled_label_distribution(datasets)?;
    datasets.iter().map(|d| emd(&d.label_distribution, &g)).collect()
}

/// Per-client mini-batch gradient variance and the largest single-sample
/// gradient norm at `w`.
fn variance_and_max_norm(data: &ClientDataset, model: &Model, w: &[f64], batch: usize) -> (f64, f64) {
    let (d, y) = (model.dim, model.num_classes);
    let n = data.len();
    let mut logits = vec![0.0; y];
    let mut probs = vec![0.0; y];
    let mut mean = vec![0.0; w.len()];
    let mut sq = 0.0;
    let mut max_norm: f64 = 0.0;
    let w_sq: f64 = w.iter().map(|v| v * v).sum();
    for i in 0..n {
        let x = data.feature(i);
        let label = data.labels[i];
        logistic_probs(w, d, y, x, &mut logits, &mut probs);
        let a_sq: f64 = (0..y).map(|c| (probs[c] - f64::from(c == label)).powi(2)).sum();
        let x_sq: f64 = x.iter().map(|v| v * v).sum::<f64>() + 1.0;
        let g_sq = a_sq * x_sq;
        sq += g_sq / n as f64;
        // ⟨a ⊗ x̃, w⟩ is Σ_c a_c·logit_c.
        let cross: f64 = (0..y).map(|c| (probs[c] - f64::from(c == label)) * logits[c]).sum();
        let full_sq = g_sq + 2.0 * model.l2 * cross + model.l2 * model.l2 * w_sq;
        max_norm = max_norm.max(full_sq.max(0.0).sqrt());
        add_sample_gradient(&mut mean, d, y, x, &probs, label, 1.0 / n as f64);
    }
    let s2 = (sq - mean.iter().map(|v| v * v).sum::<f64>()).max(0.0);
    let b = batch as f64;
    let var = if n > 1 { (n as f64 - b) / (n as f64 - 1.0) * s2 / b } else { 0.0 };
    (var.max(0.0), max_norm)
}

/// Estimates every constant over seeded probes around the certified optimum.
pub fn estimate_constants(
    datasets: &[ClientDataset],
    template: &Model,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ConstantsEstimate> {
    if !template.is_convex() {
        return Err(Error::Unsupported("constant estimation needs a convex model".into()));
    }
    let n = check_uniform(datasets)?;
    let optimum = logistic_optimum(datasets, template)?;
    let probes = probe_points(&optimum.weights, probe.num_probes.max(1), probe.spread, seed);
    let obj = FederatedObjective { datasets, template };
    let l_smooth = estimate_lipschitz(&obj, &probes, probe.lipschitz_pairs, probe.power_iters, seed);
    let batch = effective_batch_size(n, probe.batch_size);
    let (var, g) = probes
        .par_iter()
        .map(|w| {
            datasets
                .iter()
                .map(|d| variance_and_max_norm(d, template, w, batch))
                .fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)))
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let emds = client_emds(datasets)?;
    let d_bar = emds.iter().sum::<f64>() / emds.len() as f64;
    let a = dist(&template.weights, &optimum.weights);
    Ok(ConstantsEstimate {
        constants: TheoryConstants {
            l_smooth,
            sigma: var.sqrt(),
            g,
            a,
            d_k: emds.into_iter().enumerate().collect(),
            d_bar,
        },
        optimum,
        probes: probes.len(),
    })
}

/// The five terms of the averaged optimality-gap bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub optimization: f64,
    pub variance: f64,
    pub drift_gradient: f64,
    pub drift_dissimilarity: f64,
    pub drift_variance: f64,
    pub total: f64,
}

/// `A/(2ηET) + ησ²/K + 2KLE²η²D̄²G² + 6KLEη²D̄² + 4LEη²σ²`.
pub fn convergence_bound(c: &TheoryConstants, eta: f64, e: usize, t: usize, k: usize) -> Result<BoundTerms> {
    if !(eta > 0.0) {
        return Err(Error::validation("learning rate must be positive"));
    }
    if eta > c.max_learning_rate() {
        return Err(Error::ConstraintViolation(format!(
            "learning rate {eta} exceeds 1/(4L) = {}",
            c.max_learning_rate()
        )));
    }
    if e == 0 || t == 0 || k == 0 {
        return Err(Error::validation("E, T and K must be positive"));
    }
    let (e, t, k) = (e as f64, t as f64, k as f64);
    let (l, s, g, d) = (c.l_smooth, c.sigma, c.g, c.d_bar);
    let optimization = c.a / (2.0 * eta * e * t);
    let variance = eta * s * s / k;
    let drift_gradient = 2.0 * k * l * e * e * eta * eta * d * d * g * g;
    let drift_dissimilarity = 6.0 * k * l * e * eta * eta * d * d;
    let drift_variance = 4.0 * l * e * eta * eta * s * s;
    Ok(BoundTerms {
        optimization,
        variance,
        drift_gradient,
        drift_dissimilarity,
        drift_variance,
        total: optimization + variance + drift_gradient + drift_dissimilarity + drift_variance,
    })
}

/// `2E²η²D_k²G² + 6Eη²D_k² + 4Eη²σ²`.
pub fn drift_bound(c: &TheoryConstants, d_k: f64, eta: f64, e: usize) -> f64 {
    let e = e as f64;
    let eta2 = eta * eta;
    2.0 * e * e * eta2 * d_k * d_k * c.g * c.g + 6.0 * e * eta2 * d_k * d_k + 4.0 * e * eta2 * c.sigma * c.sigma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityReport {
    pub checks: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub max_lhs: f64,
    pub max_rhs: f64,
    /// Same ratio with per-client sample gradients in place of the shared
    /// class-conditional means; reported only.
    pub max_empirical_ratio: f64,
    pub passed: bool,
}

/// Checks `‖∇F_k(w) − ∇F(w)‖ ≤ D_k·Ĝ(w)` at every probe and client.
///
/// Client gradients are formed from the pooled class-conditional mean
/// gradients `ḡ_y(w)` weighted by each client's label distribution, which
/// is exact when every client draws `x | y` from the same law. `Ĝ(w)` is
/// `max_y ‖ḡ_y(w)‖`.
pub fn check_gradient_dissimilarity(
    datasets: &[ClientDataset],
    template: &Model,
    probes: &[Vec<f64>],
) -> Result<DissimilarityReport> {
    check_uniform(datasets)?;
    if !template.is_convex() {
        return Err(Error::Unsupported("dissimilarity check needs logistic regression".into()));
    }
    let (d, y) = (template.dim, template.num_classes);
    let p = template.num_params();
    let g = pooled_label_distribution(datasets)?;
    let emds = client_emds(datasets)?;
    let k = datasets.len();
    let rows: Vec<(f64, f64, f64, bool)> = probes
        .par_iter()
        .flat_map_iter(|w| {
            let mut sums = vec![vec![vec![0.0; p]; y]; k];
            let mut logits = vec![0.0; y];
            let mut probs = vec![0.0; y];
            for (ci, data) in datasets.iter().enumerate() {
                for i in 0..data.len() {
                    let x = data.feature(i);
                    logistic_probs(w, d, y, x, &mut logits, &mut probs);
                    add_sample_gradient(&mut sums[ci][data.labels[i]], d, y, x, &probs, data.labels[i], 1.0);
                }
            }
            let counts: Vec<Vec<usize>> = datasets.iter().map(ClientDataset::label_counts).collect();
            let class_mean: Vec<Vec<f64>> = (0..y)
                .map(|c| {
                    let n_c: usize = counts.iter().map(|v| v[c]).sum();
                    let mut m = vec![0.0; p];
                    if n_c > 0 {
                        for s in &sums {
                            for (a, b) in m.iter_mut().zip(&s[c]) {
                                *a += b / n_c as f64;
                            }
                        }
                    }
                    m
                })
                .collect();
            let g_hat = class_mean.iter().map(|v| norm(v)).fold(0.0, f64::max);
            let client_emp: Vec<Vec<f64>> = (0..k)
                .map(|ci| {
                    let n = datasets[ci].len() as f64;
                    let mut v = vec![0.0; p];
                    for s in &sums[ci] {
                        for (a, b) in v.iter_mut().zip(s) {
                            *a += b / n;
                        }
                    }
                    v
                })
                .collect();
            let global_emp: Vec<f64> =
                (0..p).map(|j| client_emp.iter().map(|v| v[j]).sum::<f64>() / k as f64).collect();
            let probs_g = g.probs().to_vec();
            (0..k)
                .map(|ci| {
                    let pk = datasets[ci].label_distribution.probs();
                    let mut diff = vec![0.0; p];
                    for c in 0..y {
                        let wgt = pk[c] - probs_g[c];
                        for (a, b) in diff.iter_mut().zip(&class_mean[c]) {
                            *a += wgt * b;
                        }
                    }
                    let lhs = norm(&diff);
                    let rhs = emds[ci] * g_hat;
                    let emp = dist(&client_emp[ci], &global_emp);
                    let ok = lhs <= rhs * (1.0 + 1e-12) + 1e-12;
                    (lhs, rhs, emp, ok)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let ratio = |lhs: f64, rhs: f64| if rhs > 0.0 { lhs / rhs } else if lhs > 1e-12 { f64::INFINITY } else { 0.0 };
    let violations = rows.iter().filter(|r| !r.3).count();
    let any_nan = rows.iter().any(|r| r.0.is_nan() || r.1.is_nan());
    Ok(DissimilarityReport {
        checks: rows.len(),
        violations,
        max_ratio: rows.iter().map(|r| ratio(r.0, r.1)).fold(0.0, f64::max),
        max_lhs: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        max_rhs: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        max_empirical_ratio: rows.iter().map(|r| ratio(r.2, r.1)).fold(0.0, f64::max),
        passed: violations == 0 && !any_nan && !rows.is_empty(),
    })
}

/// A federated run with per-step bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRun {
    pub learning_rate: f64,
    pub steps_per_round: usize,
    pub num_clients: usize,
    /// Model broadcast at the start of each round, plus the final model.
    pub broadcasts: Vec<Vec<f64>>,
    /// `F(w̄^(t,i))` for `i = 0..E−1` of every round.
    pub shadow_losses: Vec<Vec<f64>>,
    /// `w̄^(t,E)` of every round.
    pub shadow_ends: Vec<Vec<f64>>,
    /// `w_k^(t,i)` indexed `[t][i][k]` for `i = 0..=E`, when kept.
    pub iterates: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

/// Runs `rounds` FedAvg rounds recording the shadow sequence and, if asked,
/// every local iterate.
pub fn record_run(
    datasets: &[ClientDataset],
    config: &TrainConfig,
    rounds: usize,
    keep_iterates: bool,
) -> Result<RecordedRun> {
    config.validate()?;
    let n = check_uniform(datasets)?;
    let first = &datasets[0];
    let counts: Vec<usize> = datasets.iter().map(ClientDataset::len).collect();
    let steps = config.local_epochs * n.div_ceil(effective_batch_size(n, config.batch_size));
    let mut global = config.initial_model(first.dim, first.num_classes);
    let mut broadcasts = vec![global.weights.clone()];
    let mut shadow_losses = Vec::with_capacity(rounds);
    let mut shadow_ends = Vec::with_capacity(rounds);
    let mut iterates = keep_iterates.then(Vec::new);
    for t in 1..=rounds {
        let paths: Vec<Vec<Model>> = datasets
            .par_iter()
            .enumerate()
            .map(|(k, d)| {
                let mut path = vec![global.clone()];
                local_sgd_with(&global, d, config, t, k, |m| path.push(m.clone()))?;
                Ok(path)
            })
            .collect::<Result<_>>()?;
        let shadows: Vec<Model> = (0..=steps)
            .map(|i| {
                let at: Vec<Model> = paths.iter().map(|p| p[i].clone()).collect();
                aggregate(&at, &counts)
            })
            .collect::<Result<_>>()?;
        shadow_losses.push(shadows[..steps].par_iter().map(|m| global_loss(m, datasets)).collect());
        let ends: Vec<Model> = paths.iter().map(|p| p[steps].clone()).collect();
        global = aggregate(&ends, &counts)?;
        shadow_ends.push(shadows[steps].weights.clone());
        broadcasts.push(global.weights.clone());
        if let Some(it) = iterates.as_mut() {
            it.push(
                (0..=steps)
                    .map(|i| paths.iter().map(|p| p[i].weights.clone()).collect())
                    .collect(),
            );
        }
    }
    Ok(RecordedRun {
        learning_rate: config.learning_rate,
        steps_per_round: steps,
        num_clients: datasets.len(),
        broadcasts,
        shadow_losses,
        shadow_ends,
        iterates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub seeds: usize,
    pub points: usize,
    pub violations_estimated: usize,
    pub violations_inflated: usize,
    pub max_ratio_estimated: f64,
    pub max_ratio_inflated: f64,
    pub max_drift: f64,
    pub min_bound: f64,
    pub passed: bool,
}

pub const MIN_DRIFT_SEEDS: usize = 10;

/// Seed-averaged `‖w_k^(t,i) − w̄^(t,i)‖²` against the per-client bound at
/// every `(t, i, k)`.
pub fn check_drift_bound(runs: &[RecordedRun], constants: &TheoryConstants, inflation: f64) -> Result<DriftReport> {
    if runs.len() < MIN_DRIFT_SEEDS {
        return Err(Error::validation(format!(
            "drift expectation needs at least {MIN_DRIFT_SEEDS} seeds, got {}",
            runs.len()
        )));
    }
    let its: Vec<&Vec<Vec<Vec<Vec<f64>>>>> = runs
        .iter()
        .map(|r| {
            r.iterates
                .as_ref()
                .ok_or_else(|| Error::Instrumentation("run was recorded without local iterates".into()))
        })
        .collect::<Result<_>>()?;
    let r0 = &runs[0];
    if runs.iter().any(|r| {
        r.steps_per_round != r0.steps_per_round || r.shadow_losses.len() != r0.shadow_losses.len()
    }) {
        return Err(Error::validation("runs differ in shape"));
    }
    let e = r0.steps_per_round;
    let eta = r0.learning_rate;
    let inflated = constants.inflated(inflation);
    let mut report = DriftReport {
        seeds: runs.len(),
        points: 0,
        violations_estimated: 0,
        violations_inflated: 0,
        max_ratio_estimated: 0.0,
        max_ratio_inflated: 0.0,
        max_drift: 0.0,
        min_bound: f64::INFINITY,
        passed: true,
    };
    for t in 0..r0.shadow_losses.len() {
        for i in 0..=e {
            for k in 0..r0.num_clients {
                let mut mean = 0.0;
                for it in &its {
                    let step = &it[t][i];
                    let avg: Vec<f64> = (0..step[0].len())
                        .map(|j| step.iter().map(|w| w[j]).sum::<f64>() / step.len() as f64)
                        .collect();
                    mean += dist(&step[k], &avg).powi(2) / its.len() as f64;
                }
                let d_k = constants.d_k.get(&k).copied().unwrap_or(0.0);
                let b_est = drift_bound(constants, d_k, eta, e);
                let b_inf = drift_bound(&inflated, d_k, eta, e);
                report.points += 1;
                if !mean.is_finite() || !b_est.is_finite() {
                    report.passed = false;
                }
                report.violations_estimated += usize::from(mean > b_est);
                report.violations_inflated += usize::from(mean > b_inf);
                let r = |b: f64| if b > 0.0 { mean / b } else if mean > 0.0 { f64::INFINITY } else { 0.0 };
                report.max_ratio_estimated = report.max_ratio_estimated.max(r(b_est));
                report.max_ratio_inflated = report.max_ratio_inflated.max(r(b_inf));
                report.max_drift = report.max_drift.max(mean);
                report.min_bound = report.min_bound.min(b_est);
            }
        }
    }
    report.passed &= report.violations_inflated == 0 && report.points > 0;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub seeds: usize,
    /// Seed-averaged `(1/(ET))·ΣΣ F(w̄^(t,i)) − F(w*)`.
    pub lhs: f64,
    pub bound_estimated: BoundTerms,
    pub bound_inflated: BoundTerms,
    /// `bound_inflated.total / lhs`.
    pub slack_ratio: f64,
    pub passed: bool,
}

pub fn check_rate_bound(
    runs: &[RecordedRun],
    constants: &TheoryConstants,
    optimum_loss: f64,
    inflation: f64,
) -> Result<RateReport> {
    let r0 = runs.first().ok_or_else(|| Error::validation("no runs to check"))?;
    let rounds = r0.shadow_losses.len();
    if rounds == 0 {
        return Err(Error::Instrumentation("run recorded no rounds".into()));
    }
    let e = r0.steps_per_round;
    let lhs = runs
        .iter()
        .map(|r| {
            let total: f64 = r.shadow_losses.iter().flatten().sum();
            total / (e * rounds) as f64 - optimum_loss
        })
        .sum::<f64>()
        / runs.len() as f64;
    let inflated = constants.inflated(inflation);
    let bound_inflated = convergence_bound(&inflated, r0.learning_rate, e, rounds, r0.num_clients)?;
    let bound_estimated = convergence_bound(constants, r0.learning_rate, e, rounds, r0.num_clients)?;
    let slack_ratio = if lhs > 0.0 { bound_inflated.total / lhs } else { f64::INFINITY };
    Ok(RateReport {
        seeds: runs.len(),
        lhs,
        bound_estimated,
        bound_inflated,
        slack_ratio,
        passed: lhs.is_finite() && bound_inflated.total.is_finite() && lhs <= bound_inflated.total,
    })
}
