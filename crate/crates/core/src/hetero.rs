//! Label-distribution arithmetic: the ℓ1 earth mover's distance between a
//! client distribution and the global one, its data-weighted average, and the
//! distribution mixing induced by clustered data sharing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::daca::ClusterAssignment;
use crate::error::{Error, Result};
use crate::jfvo::SharingPlan;

const SUM_TOL: f64 = 1e-9;

/// Probability vector over `Y` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::validation(format!(
                "distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < -1e-12 || **p > 1.0 + 1e-12)
        {
            return Err(Error::validation(format!("probability {bad} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::validation(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Normalized histogram. All-zero counts are rejected.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::validation("empty histogram"));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.0
    }
}

fn check_dims(p: &LabelDistribution, g: &LabelDistribution) -> Result<()> {
    if p.num_classes() != g.num_classes() {
        return Err(Error::Dimension {
            expected: g.num_classes(),
            got: p.num_classes(),
        });
    }
    Ok(())
}

fn l1(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum()
}

/// `Σ_i |p_i − g_i|`, in `[0, 2]`.
pub fn emd(p: &LabelDistribution, g: &LabelDistribution) -> Result<f64> {
    check_dims(p, g)?;
    Ok(l1(&p.0, &g.0))
}

/// Sample count and label distribution of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLabelStats {
    pub n: usize,
    pub dist: LabelDistribution,
}

impl ClientLabelStats {
    pub fn new(n: usize, dist: LabelDistribution) -> Self {
        Self { n, dist }
    }
}

/// Data-volume weighted average EMD, `Σ_k (n_k/n)·emd(p_k, g)`.
pub fn average_emd(clients: &[ClientLabelStats], g: &LabelDistribution) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::validation("average EMD of an empty client list"));
    }
    if let Some(k) = clients.iter().position(|c| c.n == 0) {
        return Err(Error::validation(format!("client {k} has no samples")));
    }
    let n: usize = clients.iter().map(|c| c.n).sum();
    let mut acc = 0.0;
    for c in clients {
        acc += c.n as f64 / n as f64 * emd(&c.dist, g)?;
    }
    Ok(acc)
}

/// Real-valued mixture `(n_k·p_k + n_s·p_m)/(n_k + n_s)`.
pub(crate) fn mix_probs(n_k: f64, p_k: &[f64], n_s: f64, p_m: &[f64]) -> Vec<f64> {
    let total = n_k + n_s;
    p_k.iter()
        .zip(p_m)
        .map(|(a, b)| (n_k * a + n_s * b) / total)
        .collect()
}

/// Local data volume and label distribution after receiving `n_s` shared
/// samples drawn from distribution `p_m`.
pub fn mix_distribution(
    n_k: usize,
    p_k: &LabelDistribution,
    n_s: usize,
    p_m: &LabelDistribution,
) -> Result<(usize, LabelDistribution)> {
    check_dims(p_k, p_m)?;
    if n_k == 0 {
        return Err(Error::validation("cannot mix into a client with no samples"));
    }
    if n_s == 0 {
        return Ok((n_k, p_k.clone()));
    }
    let mixed = mix_probs(n_k as f64, &p_k.0, n_s as f64, &p_m.0);
    Ok((n_k + n_s, LabelDistribution::new(mixed)?))
}

/// How the per-client post-sharing EMDs are weighted when averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmdWeighting {
    /// `Σ_k (ñ_k/n)·emd(p̃_k)` with `n` the pre-sharing total.
    #[default]
    Verbatim,
    /// `Σ_k (ñ_k/Σñ)·emd(p̃_k)`.
    Normalized,
    /// `Σ_k (n_k/n)·emd(p̃_k)`: the pre-sharing population, measured after sharing.
    PreSharing,
}

/// Post-sharing average EMD for real-valued volumes keyed by head id.
///
/// Heads and clients outside every cluster keep their own distribution.
/// Heads with no entry in `volumes` share nothing.
pub fn post_sharing_emd(
    clients: &[ClientLabelStats],
    assignment: &ClusterAssignment,
    volumes: &BTreeMap<usize, f64>,
    g: &LabelDistribution,
    weighting: EmdWeighting,
) -> Result<f64> {
    Ok(post_sharing_terms(clients, assignment, volumes, g, weighting)?.0)
}

/// Returns the weighted average together with the per-client `(ñ_k, emd(p̃_k))`.
pub(crate) fn post_sharing_terms(
    clients: &[ClientLabelStats],
    assignment: &ClusterAssignment,
    volumes: &BTreeMap<usize, f64>,
    g: &LabelDistribution,
    weighting: EmdWeighting,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if clients.is_empty() {
        return Err(Error::validation("post-sharing EMD of an empty client list"));
    }
    for (&head, &v) in volumes {
        if !assignment.heads.contains(&head) {
            return Err(Error::validation(format!(
                "sharing plan references unknown head {head}"
            )));
        }
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::validation(format!(
                "shared volume {v} of head {head} must be a finite non-negative number"
            )));
        }
    }
    let mut head_of = vec![None; clients.len()];
    for (&head, members) in &assignment.members {
        for &c in members {
            if c >= clients.len() {
                return Err(Error::validation(format!("member {c} out of range")));
            }
            head_of[c] = Some(head);
        }
    }

    let n: f64 = clients.iter().map(|c| c.n as f64).sum();
    let mut terms = Vec::with_capacity(clients.len());
    for (k, c) in clients.iter().enumerate() {
        check_dims(&c.dist, g)?;
        if c.n == 0 {
            return Err(Error::validation(format!("client {k} has no samples")));
        }
        let n_k = c.n as f64;
        let term = match head_of[k] {
            Some(m) => {
                let n_s = volumes.get(&m).copied().unwrap_or(0.0);
                if n_s > 0.0 {
                    let mixed = mix_probs(n_k, &c.dist.0, n_s, &clients[m].dist.0);
                    (n_k + n_s, l1(&mixed, &g.0))
                } else {
                    (n_k, l1(&c.dist.0, &g.0))
                }
            }
            None => (n_k, l1(&c.dist.0, &g.0)),
        };
        terms.push(term);
    }

    let value = match weighting {
        EmdWeighting::Verbatim => terms.iter().map(|(nt, e)| nt / n * e).sum(),
        EmdWeighting::Normalized => {
            let total: f64 = terms.iter().map(|(nt, _)| nt).sum();
            terms.iter().map(|(nt, e)| nt / total * e).sum()
        }
        EmdWeighting::PreSharing => terms
            .iter()
            .zip(clients)
            .map(|((_, e), c)| c.n as f64 / n * e)
            .sum(),
    };
    Ok((value, terms))
}

/// Post-sharing average EMD with the weighting written as `ñ_k/n`.
pub fn post_sharing_average_emd(
    clients: &[ClientLabelStats],
    assignment: &ClusterAssignment,
    plan: &SharingPlan,
    g: &LabelDistribution,
) -> Result<f64> {
    post_sharing_average_emd_with(clients, assignment, plan, g, EmdWeighting::Verbatim)
}

pub fn post_sharing_average_emd_with(
    clients: &[ClientLabelStats],
    assignment: &ClusterAssignment,
    plan: &SharingPlan,
    g: &LabelDistribution,
    weighting: EmdWeighting,
) -> Result<f64> {
    post_sharing_emd(clients, assignment, &plan.real_volumes(), g, weighting)
}

/// Per-client and aggregate heterogeneity of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub per_client_emd: BTreeMap<usize, f64>,
    pub sample_counts: BTreeMap<usize, usize>,
    pub average_emd: f64,
    pub post_sharing_emd: Option<f64>,
}

impl HeterogeneityReport {
    pub fn compute(clients: &[ClientLabelStats], g: &LabelDistribution) -> Result<Self> {
        let mut per_client_emd = BTreeMap::new();
        let mut sample_counts = BTreeMap::new();
        for (k, c) in clients.iter().enumerate() {
            per_client_emd.insert(k, emd(&c.dist, g)?);
            sample_counts.insert(k, c.n);
        }
        Ok(Self {
            per_client_emd,
            sample_counts,
            average_emd: average_emd(clients, g)?,
            post_sharing_emd: None,
        })
    }

    pub fn with_post_sharing(mut self, value: f64) -> Self {
        self.post_sharing_emd = Some(value);
        self
    }

    /// `client_id,n_k,emd` rows followed by summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,n_k,emd\n");
        for (k, e) in &self.per_client_emd {
            let _ = writeln!(out, "{k},{},{e}", self.sample_counts[k]);
        }
        let n: usize = self.sample_counts.values().sum();
        let _ = writeln!(out, "average,{n},{}", self.average_emd);
        if let Some(p) = self.post_sharing_emd {
            let _ = writeln!(out, "post_sharing,{n},{p}");
        }
        out
    }
}
