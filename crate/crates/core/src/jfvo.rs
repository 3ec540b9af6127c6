//! Joint optimization of per-client compute frequency and per-head shared
//! data volume by stochastic successive convex approximation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::daca::ClusterAssignment;
use crate::error::{Error, Result};
use crate::hetero::{post_sharing_emd, ClientLabelStats, EmdWeighting, LabelDistribution};
use crate::rng::derive_seed;
use crate::roundsfit::{predict_with, RoundModel};
use crate::wireless::{round_delay, sharing_delay_real, ComputeParams};

/// Shared volume per head and compute frequency per client.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SharingPlan {
    pub volumes: BTreeMap<usize, usize>,
    pub frequencies: BTreeMap<usize, f64>,
}

impl SharingPlan {
    pub fn real_volumes(&self) -> BTreeMap<usize, f64> {
        self.volumes.iter().map(|(&m, &v)| (m, v as f64)).collect()
    }
}

/// Largest frequency meeting the per-round energy budget, capped at `f_max`.
///
/// Solves `γ_u + ς·L·E·ñ·f² = γ_th` for `f`. The result is nudged down by
/// at most a few ulps so that the energy it implies never exceeds the budget.
pub fn optimal_frequency(
    client: usize,
    samples: f64,
    compute: &ComputeParams,
    upload_energy: f64,
) -> Result<f64> {
    let slack = compute.energy_budget - upload_energy;
    if !(slack > 0.0) {
        return Err(Error::Infeasible(format!(
            "client {client}: upload energy {upload_energy} J leaves no room in the {} J budget",
            compute.energy_budget
        )));
    }
    let work = compute.energy_coeff * compute.cycles_per_round(samples);
    if !(work > 0.0) {
        return Ok(compute.max_frequency);
    }
    let f_budget = (slack / work).sqrt();
    if f_budget >= compute.max_frequency {
        return Ok(compute.max_frequency);
    }
    let mut f = f_budget;
    while upload_energy + work * f * f > compute.energy_budget {
        f = f.next_down();
    }
    Ok(f)
}

/// Per-round energy of a client running at `frequency` on `samples` samples.
pub fn client_energy(compute: &ComputeParams, samples: f64, frequency: f64, upload_energy: f64) -> f64 {
    upload_energy + compute.energy_coeff * compute.cycles_per_round(samples) * frequency * frequency
}

/// Device-side quantities that do not depend on the decision variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub compute: ComputeParams,
    pub download_delay: f64,
    pub upload_delay: f64,
    pub upload_energy: f64,
}

/// Rounds needed as a function of the sharing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoundsLaw {
    /// Reciprocal quadratic in the post-sharing average EMD.
    Fitted { model: RoundModel },
    /// `intercept + slope·Σ_m n_m^s`, ignoring the EMD. Used for closed-form checks.
    Linear { intercept: f64, slope: f64 },
}

impl RoundsLaw {
    fn mean_beta(&self) -> [f64; 3] {
        match self {
            RoundsLaw::Fitted { model } => model.beta,
            RoundsLaw::Linear { .. } => [0.0; 3],
        }
    }

    fn draw_beta(&self, noise_scale: f64, seed: u64) -> Result<[f64; 3]> {
        match self {
            RoundsLaw::Fitted { model } => model.sample_beta(noise_scale, seed),
            RoundsLaw::Linear { .. } => Ok([0.0; 3]),
        }
    }

    fn rounds(&self, emd: f64, total_shared: f64, beta: &[f64; 3]) -> Result<f64> {
        match self {
            RoundsLaw::Fitted { model } => predict_with(beta, emd, model.valid_range),
            RoundsLaw::Linear { intercept, slope } => {
                let t = intercept + slope * total_shared;
                if !(t > 0.0) {
                    return Err(Error::Domain(format!("linear round law gives {t} rounds")));
                }
                Ok(t)
            }
        }
    }
}

/// A head with at least one member; the only heads whose volume matters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlot {
    pub id: usize,
    pub members: Vec<usize>,
    pub max_volume: usize,
    pub rate: f64,
}

/// Everything the objective needs besides the decision variables.
#[derive(Debug, Clone)]
pub struct ObjectiveContext {
    pub clients: Vec<ClientLabelStats>,
    pub global: LabelDistribution,
    pub assignment: ClusterAssignment,
    pub rounds: RoundsLaw,
    pub devices: Vec<DeviceProfile>,
    pub bits_per_sample: f64,
    pub weighting: EmdWeighting,
    heads: Vec<HeadSlot>,
    slot_of: Vec<Option<usize>>,
    rates: BTreeMap<usize, f64>,
}

/// Breakdown of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sharing_delay: f64,
    pub emd: f64,
    pub rounds: f64,
    pub round_delay: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
enum Freqs<'a> {
    Optimal,
    Fixed(&'a [f64]),
}

impl ObjectiveContext {
    /// `rates` maps each head to its multicast rate in bit/s. Heads with a
    /// zero rate are pinned to zero volume.
    pub fn new(
        clients: Vec<ClientLabelStats>,
        global: LabelDistribution,
        assignment: ClusterAssignment,
        rates: BTreeMap<usize, f64>,
        rounds: RoundsLaw,
        devices: Vec<DeviceProfile>,
        bits_per_sample: f64,
        weighting: EmdWeighting,
    ) -> Result<Self> {
        let k = clients.len();
        if k == 0 {
            return Err(Error::validation("objective over zero clients"));
        }
        if devices.len() != k {
            return Err(Error::Dimension { expected: k, got: devices.len() });
        }
        if !(bits_per_sample > 0.0) {
            return Err(Error::validation("bits per sample must be positive"));
        }
        for (i, d) in devices.iter().enumerate() {
            d.compute.validate()?;
            if !(d.download_delay >= 0.0 && d.upload_delay >= 0.0 && d.upload_energy >= 0.0) {
                return Err(Error::validation(format!("device {i} has negative delay or energy")));
            }
            if d.upload_energy >= d.compute.energy_budget {
                return Err(Error::Infeasible(format!(
                    "client {i}: upload energy {} J exceeds the {} J budget",
                    d.upload_energy, d.compute.energy_budget
                )));
            }
        }
        let mut heads = Vec::new();
        let mut slot_of = vec![None; k];
        for (head, members) in assignment.sharing_heads() {
            if head >= k || members.iter().any(|&c| c >= k) {
                return Err(Error::validation(format!("cluster of head {head} has out-of-range ids")));
            }
            let rate = rates.get(&head).copied().unwrap_or(0.0);
            if !(rate >= 0.0) || !rate.is_finite() {
                return Err(Error::validation(format!("head {head} has invalid rate {rate}")));
            }
            for &c in members {
                slot_of[c] = Some(heads.len());
            }
            heads.push(HeadSlot {
                id: head,
                members: members.iter().copied().collect(),
                max_volume: if rate > 0.0 { clients[head].n } else { 0 },
                rate,
            });
        }
        Ok(Self {
            clients,
            global,
            assignment,
            rounds,
            devices,
            bits_per_sample,
            weighting,
            heads,
            slot_of,
            rates,
        })
    }

    pub fn heads(&self) -> &[HeadSlot] {
        &self.heads
    }

    pub fn mean_beta(&self) -> [f64; 3] {
        self.rounds.mean_beta()
    }

    fn samples(&self, x: &[f64]) -> Vec<f64> {
        self.clients
            .iter()
            .zip(&self.slot_of)
            .map(|(c, s)| c.n as f64 + s.map_or(0.0, |s| x[s]))
            .collect()
    }

    fn volume_map(&self, x: &[f64]) -> BTreeMap<usize, f64> {
        self.heads.iter().zip(x).map(|(h, &v)| (h.id, v)).collect()
    }

    /// Optimal frequencies for the client volumes implied by `x`.
    fn frequencies_for(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.samples(x)
            .iter()
            .zip(&self.devices)
            .enumerate()
            .map(|(k, (&n, d))| optimal_frequency(k, n, &d.compute, d.upload_energy))
            .collect()
    }

    fn evaluate(&self, x: &[f64], freqs: Freqs<'_>, beta: &[f64; 3]) -> Result<Evaluation> {
        let volumes = self.volume_map(x);
        let sharing_delay = sharing_delay_real(&volumes, &self.rates, self.bits_per_sample)?;
        let emd = post_sharing_emd(&self.clients, &self.assignment, &volumes, &self.global, self.weighting)?;
        let rounds = self.rounds.rounds(emd, x.iter().sum(), beta)?;
        let samples = self.samples(x);
        let owned;
        let f = match freqs {
            Freqs::Fixed(f) => f,
            Freqs::Optimal => {
                owned = self.frequencies_for(x)?;
                &owned
            }
        };
        let downloads: Vec<f64> = self.devices.iter().map(|d| d.download_delay).collect();
        let uploads: Vec<f64> = self.devices.iter().map(|d| d.upload_delay).collect();
        let computes: Vec<f64> = self
            .devices
            .iter()
            .zip(&samples)
            .zip(f)
            .map(|((d, &n), &f)| d.compute.cycles_per_round(n) / f)
            .collect();
        let tau = round_delay(&downloads, &computes, &uploads)?;
        let total = sharing_delay + rounds * tau;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("objective is {total}")));
        }
        Ok(Evaluation { sharing_delay, emd, rounds, round_delay: tau, total })
    }

    /// Slot-indexed volumes of a plan; unknown heads are rejected.
    fn plan_vector(&self, plan: &SharingPlan) -> Result<Vec<f64>> {
        for &m in plan.volumes.keys() {
            if !self.assignment.heads.contains(&m) {
                return Err(Error::validation(format!("sharing plan references unknown head {m}")));
            }
        }
        Ok(self
            .heads
            .iter()
            .map(|h| plan.volumes.get(&h.id).copied().unwrap_or(0) as f64)
            .collect())
    }

    fn plan_frequencies(&self, plan: &SharingPlan) -> Result<Vec<f64>> {
        (0..self.clients.len())
            .map(|k| {
                plan.frequencies
                    .get(&k)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("plan has no frequency for client {k}")))
            })
            .collect()
    }

    fn make_plan(&self, x: &[usize], f: &[f64]) -> SharingPlan {
        SharingPlan {
            volumes: self.heads.iter().zip(x).map(|(h, &v)| (h.id, v)).collect(),
            frequencies: f.iter().copied().enumerate().collect(),
        }
    }
}

/// Objective `τ^s + T·τ` of a complete plan under coefficients `beta`.
pub fn objective(ctx: &ObjectiveContext, plan: &SharingPlan, beta: &[f64; 3]) -> Result<Evaluation> {
    let x = ctx.plan_vector(plan)?;
    let f = ctx.plan_frequencies(plan)?;
    ctx.evaluate(&x, Freqs::Fixed(&f), beta)
}

/// Result of checking a plan against the volume, frequency and energy constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCertificate {
    /// Largest `max(0, n_m^s − n_m)` over heads.
    pub volume_excess: f64,
    /// Largest `max(0, f_k − f_max)`, or infinity for a non-positive frequency.
    pub frequency_excess: f64,
    /// Largest `max(0, γ_k − γ_th)/γ_th`.
    pub energy_excess: f64,
    pub feasible: bool,
}

impl FeasibilityCertificate {
    pub fn max_violation(&self) -> f64 {
        self.volume_excess.max(self.frequency_excess).max(self.energy_excess)
    }
}

/// Re-evaluates every constraint from the raw plan, without tolerance.
pub fn verify_plan(ctx: &ObjectiveContext, plan: &SharingPlan) -> Result<FeasibilityCertificate> {
    let mut volume_excess: f64 = 0.0;
    for (&m, &v) in &plan.volumes {
        if m >= ctx.clients.len() || !ctx.assignment.heads.contains(&m) {
            return Err(Error::validation(format!("sharing plan references unknown head {m}")));
        }
        let cap = if ctx.heads.iter().any(|h| h.id == m) { ctx.clients[m].n } else { 0 };
        let cap = if ctx.rates.get(&m).copied().unwrap_or(0.0) > 0.0 { cap } else { 0 };
        volume_excess = volume_excess.max(v as f64 - cap as f64);
    }
    let f = ctx.plan_frequencies(plan)?;
    let x = ctx.plan_vector(plan)?;
    let samples = ctx.samples(&x);
    let mut frequency_excess: f64 = 0.0;
    let mut energy_excess: f64 = 0.0;
    for (k, d) in ctx.devices.iter().enumerate() {
        if !(f[k] > 0.0) || !f[k].is_finite() {
            frequency_excess = f64::INFINITY;
            continue;
        }
        frequency_excess = frequency_excess.max(f[k] - d.compute.max_frequency);
        let gamma = client_energy(&d.compute, samples[k], f[k], d.upload_energy);
        energy_excess = energy_excess.max((gamma - d.compute.energy_budget) / d.compute.energy_budget);
    }
    let (volume_excess, frequency_excess, energy_excess) =
        (volume_excess.max(0.0), frequency_excess.max(0.0), energy_excess.max(0.0));
    Ok(FeasibilityCertificate {
        volume_excess,
        frequency_excess,
        energy_excess,
        feasible: volume_excess == 0.0 && frequency_excess == 0.0 && energy_excess == 0.0,
    })
}

/// How frequencies move while the inner loop changes volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// Every objective evaluation re-applies the frequency rule to the
    /// volumes being evaluated.
    #[default]
    Coupled,
    /// Frequencies stay at the outer-iteration value; the energy budget
    /// then caps each head's volume.
    Frozen,
}

/// Step-size rules and iteration counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SscaSchedule {
    /// `ρ_i = (i+1)^(−rho_exponent)`.
    pub rho_exponent: f64,
    /// `μ_i = (i+1)^(−mu_exponent)`.
    pub mu_exponent: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    /// Defaults to `10·Ψ(N_0)/(max n_m)²`.
    pub lipschitz: Option<f64>,
    /// Weight of the proximal seed; defaults to the Lipschitz constant.
    pub init_prox: Option<f64>,
    /// Coefficient noise in units of the fit's standard errors.
    pub noise_scale: f64,
    pub frequency_mode: FrequencyMode,
    /// Doublings of `L` allowed per inner iteration; each iteration starts
    /// again from the base value.
    pub max_doublings: usize,
    /// Starting volumes as fractions of each head's `n_m`. Every start is
    /// run and the lowest final mean-β objective wins.
    pub starts: Vec<f64>,
}

impl Default for SscaSchedule {
    fn default() -> Self {
        Self {
            rho_exponent: 0.6,
            mu_exponent: 0.9,
            inner_iters: 10,
            outer_iters: 20,
            lipschitz: None,
            init_prox: None,
            noise_scale: 0.2,
            frequency_mode: FrequencyMode::Coupled,
            max_doublings: 30,
            starts: vec![0.0],
        }
    }
}

impl SscaSchedule {
    pub fn rho(&self, i: usize) -> f64 {
        ((i + 1) as f64).powf(-self.rho_exponent)
    }

    pub fn mu(&self, i: usize) -> f64 {
        ((i + 1) as f64).powf(-self.mu_exponent)
    }

    /// Exponents must give `Σρ = ∞`, `Σρ² < ∞` and `μ/ρ → 0`.
    pub fn validate(&self) -> Result<()> {
        let (r, m) = (self.rho_exponent, self.mu_exponent);
        if !(r > 0.5 && r <= 1.0) {
            return Err(Error::validation(format!("rho exponent {r} must lie in (0.5, 1]")));
        }
        if !(m > r && m <= 1.0) {
            return Err(Error::validation(format!("mu exponent {m} must lie in ({r}, 1]")));
        }
        for (name, v) in [("lipschitz", self.lipschitz), ("init_prox", self.init_prox)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::validation(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::validation("noise scale must be non-negative"));
        }
        if self.starts.is_empty() || self.starts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::validation("starts must be a non-empty list of fractions in [0, 1]"));
        }
        Ok(())
    }
}

/// Separable quadratic plus a weighted sharing-delay term:
/// `c + Σ_m (a_m/2·x_m² + b_m·x_m) + w·max_m(s_m·x_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub curvature: Vec<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub sharing_weight: f64,
}

impl Surrogate {
    /// `(ρ/2)·‖x − x0‖²`.
    pub fn prox_seed(x0: &[f64], rho: f64) -> Self {
        Self {
            curvature: vec![rho; x0.len()],
            linear: x0.iter().map(|v| -rho * v).collect(),
            constant: 0.5 * rho * x0.iter().map(|v| v * v).sum::<f64>(),
            sharing_weight: 0.0,
        }
    }

    /// `τ^s(x) + ψ + ∇ψ·(x − x0) + (L/2)·‖x − x0‖²`.
    pub fn linearized(x0: &[f64], value: f64, grad: &[f64], lipschitz: f64) -> Self {
        let mut s = Self::prox_seed(x0, lipschitz);
        s.constant += value - grad.iter().zip(x0).map(|(g, x)| g * x).sum::<f64>();
        for (b, g) in s.linear.iter_mut().zip(grad) {
            *b += g;
        }
        s.sharing_weight = 1.0;
        s
    }

    /// `(1−ρ)·self + ρ·other`.
    pub fn blend(&self, other: &Self, rho: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| (1.0 - rho) * a + rho * b).collect();
        Self {
            curvature: mix(&self.curvature, &other.curvature),
            linear: mix(&self.linear, &other.linear),
            constant: (1.0 - rho) * self.constant + rho * other.constant,
            sharing_weight: (1.0 - rho) * self.sharing_weight + rho * other.sharing_weight,
        }
    }

    /// Value with per-coordinate delay slopes `slopes` (seconds per sample).
    pub fn value(&self, x: &[f64], slopes: &[f64]) -> f64 {
        let quad: f64 = x
            .iter()
            .zip(self.curvature.iter().zip(&self.linear))
            .map(|(x, (a, b))| 0.5 * a * x * x + b * x)
            .sum();
        let delay = x.iter().zip(slopes).map(|(x, s)| x * s).fold(0.0, f64::max);
        self.constant + quad + self.sharing_weight * delay
    }

    /// Exact minimizer over `0 ≤ x_m ≤ caps[m]`.
    ///
    /// With `t` standing for the delay term, each coordinate is the clipped
    /// quadratic minimizer under `x_m ≤ t/s_m`, and the reduced function of
    /// `t` is piecewise quadratic between the breakpoints where a coordinate
    /// starts or stops being limited by `t`. Every breakpoint and every
    /// segment's stationary point is evaluated.
    pub fn solve(&self, caps: &[f64], slopes: &[f64]) -> Result<Vec<f64>> {
        let n = self.curvature.len();
        if caps.len() != n || slopes.len() != n {
            return Err(Error::Dimension { expected: n, got: caps.len().min(slopes.len()) });
        }
        for (m, (&a, &c)) in self.curvature.iter().zip(caps).enumerate() {
            if !(a > 0.0) {
                return Err(Error::Numerical(format!("surrogate curvature {a} of head {m} is not positive")));
            }
            if !(c >= 0.0) {
                return Err(Error::Infeasible(format!("head {m} has an empty volume range (cap {c})")));
            }
        }
        let free: Vec<f64> = (0..n)
            .map(|m| (-self.linear[m] / self.curvature[m]).clamp(0.0, caps[m]))
            .collect();
        let w = self.sharing_weight;
        if w <= 0.0 {
            return Ok(free);
        }
        let at = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|m| if slopes[m] > 0.0 { free[m].min(t / slopes[m]) } else { free[m] })
                .collect()
        };
        let reduced = |t: f64| -> f64 {
            let x = at(t);
            self.constant
                + (0..n)
                    .map(|m| 0.5 * self.curvature[m] * x[m] * x[m] + self.linear[m] * x[m])
                    .sum::<f64>()
                + w * t
        };
        let mut breaks: Vec<f64> = (0..n)
            .filter(|&m| slopes[m] > 0.0)
            .map(|m| slopes[m] * free[m])
            .chain(std::iter::once(0.0))
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let mut candidates = breaks.clone();
        for pair in breaks.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let mid = 0.5 * (lo + hi);
            let (mut num, mut den) = (w, 0.0);
            for m in 0..n {
                if slopes[m] > 0.0 && mid / slopes[m] < free[m] {
                    num += self.linear[m] / slopes[m];
                    den += self.curvature[m] / (slopes[m] * slopes[m]);
                }
            }
            if den > 0.0 {
                candidates.push((-num / den).clamp(lo, hi));
            }
        }
        let best = candidates
            .into_iter()
            .map(|t| (reduced(t), t))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, t)| t)
            .unwrap_or(0.0);
        Ok(at(best))
    }
}

/// One row of the outer-loop convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JfvoResult {
    pub plan: SharingPlan,
    pub evaluation: Evaluation,
    /// Row 0 is the starting point; row `j` follows outer iteration `j`.
    pub trace: Vec<TraceRow>,
    pub certificate: FeasibilityCertificate,
    pub lipschitz: f64,
    /// Set when the trace's last quarter spreads by more than 5%.
    pub oscillating: bool,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,objective,max_violation\n");
    for r in trace {
        out.push_str(&format!("{},{:.9},{:.3e}\n", r.iteration, r.objective, r.max_violation));
    }
    out
}

struct Inner<'a> {
    ctx: &'a ObjectiveContext,
    mode: FrequencyMode,
    frozen: Vec<f64>,
    slopes: Vec<f64>,
}

impl Inner<'_> {
    fn freqs(&self) -> Freqs<'_> {
        match self.mode {
            FrequencyMode::Coupled => Freqs::Optimal,
            FrequencyMode::Frozen => Freqs::Fixed(&self.frozen),
        }
    }

    /// `T·τ` without the sharing delay.
    fn psi(&self, x: &[f64], beta: &[f64; 3]) -> Result<f64> {
        let e = self.ctx.evaluate(x, self.freqs(), beta)?;
        Ok(e.rounds * e.round_delay)
    }

    fn total(&self, x: &[f64], beta: &[f64; 3]) -> Result<f64> {
        Ok(self.ctx.evaluate(x, self.freqs(), beta)?.total)
    }

    /// Central differences with step `max(1, 1e-3·n_m)`, shortened on the
    /// side that would leave the box.
    fn gradient(&self, x: &[f64], caps: &[f64], beta: &[f64; 3]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; x.len()];
        for (m, h) in self.ctx.heads.iter().enumerate() {
            if caps[m] <= 0.0 {
                continue;
            }
            let step = (1e-3 * h.max_volume as f64).max(1.0);
            let lo = (x[m] - step).max(0.0);
            let hi = (x[m] + step).min(caps[m]);
            if hi <= lo {
                continue;
            }
            let mut xp = x.to_vec();
            xp[m] = hi;
            let fp = self.psi(&xp, beta)?;
            xp[m] = lo;
            let fm = self.psi(&xp, beta)?;
            grad[m] = (fp - fm) / (hi - lo);
            if !grad[m].is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for head {}", h.id)));
            }
        }
        Ok(grad)
    }

    /// Volume caps: `n_m`, further limited under frozen frequencies by the
    /// energy budget of every member.
    fn caps(&self) -> Vec<f64> {
        self.ctx
            .heads
            .iter()
            .map(|h| {
                let mut cap = h.max_volume as f64;
                if self.mode == FrequencyMode::Frozen {
                    for &k in &h.members {
                        let d = &self.ctx.devices[k];
                        let per_sample = d.compute.energy_coeff
                            * d.compute.cycles_per_round(1.0)
                            * self.frozen[k]
                            * self.frozen[k];
                        let room = (d.compute.energy_budget - d.upload_energy) / per_sample
                            - self.ctx.clients[k].n as f64;
                        cap = cap.min(room.max(0.0));
                    }
                }
                cap
            })
            .collect()
    }
}

struct Run {
    /// Lowest mean-β iterate of the run.
    x: Vec<f64>,
    trace: Vec<TraceRow>,
    lipschitz: f64,
}

fn ssca(ctx: &ObjectiveContext, schedule: &SscaSchedule, seed: u64, slopes: &[f64], base_l: f64, x0: Vec<f64>) -> Result<Run> {
    let mean_beta = ctx.mean_beta();
    let mut x = x0;
    let mut max_l = base_l;
    let mut trace = vec![trace_row(ctx, 0, &x, &mean_beta)?];
    let mut best = (trace[0].objective, x.clone());
    for j in 0..schedule.outer_iters {
        let frozen = ctx.frequencies_for(&x)?;
        let inner = Inner { ctx, mode: schedule.frequency_mode, frozen, slopes: slopes.to_vec() };
        let caps = inner.caps();
        for (v, c) in x.iter_mut().zip(&caps) {
            *v = v.min(*c);
        }
        let prox = schedule.init_prox.unwrap_or(base_l);
        let mut avg = Surrogate::prox_seed(&x, prox);
        for i in 0..schedule.inner_iters {
            let rho = schedule.rho(i);
            let mut attempt = 0u64;
            let (target, candidate_avg, lipschitz) = loop {
                let beta = if attempt < MAX_REDRAWS {
                    ctx.rounds.draw_beta(schedule.noise_scale, derive_seed(seed, &[j as u64, i as u64, attempt]))?
                } else {
                    mean_beta
                };
                match inner_step(&inner, &avg, &x, &caps, &beta, rho, base_l, schedule.max_doublings) {
                    Err(Error::Domain(msg)) if attempt < MAX_REDRAWS => {
                        log::debug!("redrawing coefficients: {msg}");
                        attempt += 1;
                    }
                    other => break other?,
                }
            };
            avg = candidate_avg;
            max_l = max_l.max(lipschitz);
            let mu = schedule.mu(i);
            for (v, t) in x.iter_mut().zip(&target) {
                *v = ((1.0 - mu) * *v + mu * t).max(0.0);
            }
        }
        let row = trace_row(ctx, j + 1, &x, &mean_beta)?;
        if row.objective < best.0 {
            best = (row.objective, x.clone());
        }
        trace.push(row);
    }
    Ok(Run { x: best.1, trace, lipschitz: max_l })
}

/// Draws whose round law is undefined somewhere on the step are replaced;
/// after this many the mean coefficients are used.
const MAX_REDRAWS: u64 = 16;

/// One surrogate update under `beta`: returns the surrogate minimizer, the
/// blended surrogate and the Lipschitz value that was accepted.
#[allow(clippy::too_many_arguments)]
fn inner_step(
    inner: &Inner<'_>,
    avg: &Surrogate,
    x: &[f64],
    caps: &[f64],
    beta: &[f64; 3],
    rho: f64,
    base_l: f64,
    max_doublings: usize,
) -> Result<(Vec<f64>, Surrogate, f64)> {
    let psi = inner.psi(x, beta)?;
    let grad = inner.gradient(x, caps, beta)?;
    let here = inner.total(x, beta)?;
    let mut lipschitz = base_l;
    let mut doublings = 0;
    loop {
        let g = Surrogate::linearized(x, psi, &grad, lipschitz);
        let candidate = avg.blend(&g, rho);
        let target = candidate.solve(caps, &inner.slopes)?;
        let there = inner.total(&target, beta)?;
        if there <= here + 1e-12 * here.abs() || doublings >= max_doublings {
            return Ok((target, candidate, lipschitz));
        }
        lipschitz *= 2.0;
        doublings += 1;
    }
}

/// Runs the alternating frequency/volume optimization from each configured
/// start and keeps the best.
pub fn jfvo(ctx: &ObjectiveContext, schedule: &SscaSchedule, seed: u64) -> Result<JfvoResult> {
    schedule.validate()?;
    let mean_beta = ctx.mean_beta();
    let slopes: Vec<f64> = ctx
        .heads
        .iter()
        .map(|h| if h.rate > 0.0 { ctx.bits_per_sample / h.rate } else { 0.0 })
        .collect();
    let start = ctx.evaluate(&vec![0.0; ctx.heads.len()], Freqs::Optimal, &mean_beta)?;
    let largest = ctx.heads.iter().map(|h| h.max_volume).max().unwrap_or(0).max(1) as f64;
    let base_l = schedule
        .lipschitz
        .unwrap_or_else(|| (10.0 * start.total / (largest * largest)).max(f64::MIN_POSITIVE));

    let mut best: Option<(Run, Vec<usize>, Vec<f64>, Evaluation)> = None;
    for &fraction in &schedule.starts {
        let x0: Vec<f64> = ctx.heads.iter().map(|h| (fraction * h.max_volume as f64).round()).collect();
        let run = ssca(ctx, schedule, seed, &slopes, base_l, x0)?;
        let (volumes, freqs, evaluation) = round_volumes(ctx, &run.x, schedule.frequency_mode, &mean_beta)?;
        if best.as_ref().is_none_or(|b| evaluation.total < b.3.total) {
            best = Some((run, volumes, freqs, evaluation));
        }
    }
    let (run, volumes, freqs, evaluation) = best.expect("at least one start");
    let plan = ctx.make_plan(&volumes, &freqs);
    let certificate = verify_plan(ctx, &plan)?;
    if !certificate.feasible {
        return Err(Error::Numerical(format!(
            "optimized plan violates a constraint by {:.3e}",
            certificate.max_violation()
        )));
    }
    let oscillating = oscillates(&run.trace);
    if oscillating {
        log::warn!("objective trace oscillates by more than 5% over its last quarter");
    }
    Ok(JfvoResult { plan, evaluation, trace: run.trace, certificate, lipschitz: run.lipschitz, oscillating })
}

fn trace_row(ctx: &ObjectiveContext, iteration: usize, x: &[f64], beta: &[f64; 3]) -> Result<TraceRow> {
    let f = ctx.frequencies_for(x)?;
    let e = ctx.evaluate(x, Freqs::Fixed(&f), beta)?;
    let samples = ctx.samples(x);
    let mut violation: f64 = 0.0;
    for (m, h) in ctx.heads.iter().enumerate() {
        violation = violation.max(x[m] - h.max_volume as f64).max(-x[m]);
    }
    for (k, d) in ctx.devices.iter().enumerate() {
        let gamma = client_energy(&d.compute, samples[k], f[k], d.upload_energy);
        violation = violation.max((gamma - d.compute.energy_budget) / d.compute.energy_budget);
    }
    Ok(TraceRow { iteration, objective: e.total, max_violation: violation.max(0.0) })
}

fn oscillates(trace: &[TraceRow]) -> bool {
    let tail = &trace[trace.len() - (trace.len() / 4).max(1)..];
    let lo = tail.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
    let hi = tail.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max);
    hi - lo > 0.05 * lo.abs()
}

/// Rounds each head's volume down or up, whichever gives the lower
/// objective, keeping the energy budget under the given mode.
fn round_volumes(
    ctx: &ObjectiveContext,
    x: &[f64],
    mode: FrequencyMode,
    beta: &[f64; 3],
) -> Result<(Vec<usize>, Vec<f64>, Evaluation)> {
    let caps: Vec<f64> = match mode {
        FrequencyMode::Coupled => ctx.heads.iter().map(|h| h.max_volume as f64).collect(),
        FrequencyMode::Frozen => {
            let inner = Inner { ctx, mode, frozen: ctx.frequencies_for(x)?, slopes: Vec::new() };
            inner.caps()
        }
    };
    let mut cur: Vec<f64> = x.iter().zip(&caps).map(|(v, c)| v.min(*c).floor()).collect();
    for m in 0..cur.len() {
        let up = x[m].ceil();
        if up > cur[m] && up <= caps[m] {
            let mut alt = cur.clone();
            alt[m] = up;
            let keep = ctx.evaluate(&cur, Freqs::Optimal, beta)?.total;
            if ctx.evaluate(&alt, Freqs::Optimal, beta)?.total < keep {
                cur = alt;
            }
        }
    }
    let f = ctx.frequencies_for(&cur)?;
    let e = ctx.evaluate(&cur, Freqs::Fixed(&f), beta)?;
    Ok((cur.iter().map(|&v| v as usize).collect(), f, e))
}

/// Upper limit on the number of grid points the oracle will visit.
pub const GRID_LIMIT: f64 = 1e7;

/// Exhaustive search over volumes in steps of `resolution` (each cap is
/// always included), with optimal frequencies and mean coefficients.
pub fn grid_oracle(ctx: &ObjectiveContext, resolution: usize) -> Result<(SharingPlan, Evaluation)> {
    if resolution == 0 {
        return Err(Error::validation("grid resolution must be at least 1"));
    }
    let axes: Vec<Vec<usize>> = ctx
        .heads
        .iter()
        .map(|h| {
            let mut v: Vec<usize> = (0..=h.max_volume).step_by(resolution).collect();
            if *v.last().unwrap() != h.max_volume {
                v.push(h.max_volume);
            }
            v
        })
        .collect();
    let points: f64 = axes.iter().map(|a| a.len() as f64).product();
    if points > GRID_LIMIT {
        return Err(Error::SizeGuard(format!(
            "grid has {points:.3e} points, above the {GRID_LIMIT:.0e} limit"
        )));
    }
    let beta = ctx.mean_beta();
    let mut idx = vec![0usize; axes.len()];
    let mut best: Option<(Vec<usize>, Evaluation)> = None;
    loop {
        let x: Vec<usize> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        match ctx.evaluate(&xf, Freqs::Optimal, &beta) {
            Ok(e) => {
                if best.as_ref().is_none_or(|b| e.total < b.1.total) {
                    best = Some((x, e));
                }
            }
            Err(Error::Domain(_)) => {}
            Err(e) => return Err(e),
        }
        let mut d = 0;
        while d < idx.len() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == idx.len() {
            break;
        }
    }
    let (x, e) = best.ok_or_else(|| Error::Domain("round law is undefined at every grid point".into()))?;
    let f = ctx.frequencies_for(&x.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    Ok((ctx.make_plan(&x, &f), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daca::ClusterAssignment;
    use proptest::prelude::*;

    fn compute(budget: f64) -> ComputeParams {
        let mut c = ComputeParams::reference(10560.0);
        c.energy_budget = budget;
        c
    }

    #[test]
    fn frequency_solves_the_energy_equality() {
        let c = compute(0.005);
        let f = optimal_frequency(0, 600.0, &c, 0.001).unwrap();
        let expect = (0.004f64 / 6e-18).sqrt();
        assert!((f - expect).abs() / expect < 1e-12);
        assert!((f - 2.582e7).abs() / 2.582e7 < 1e-3);
        let f2 = optimal_frequency(0, 1200.0, &c, 0.001).unwrap();
        assert!((f / f2 - 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(optimal_frequency(0, 600.0, &compute(1e9), 0.001).unwrap(), c.max_frequency);
    }

    #[test]
    fn frequency_rejects_exhausted_budget() {
        let err = optimal_frequency(3, 600.0, &compute(0.005), 0.005).unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref s) if s.contains("client 3")));
    }

    proptest! {
        #[test]
        fn frequency_meets_the_kkt_dichotomy(
            samples in 1.0f64..5000.0,
            budget in 1e-4f64..10.0,
            up_frac in 0.0f64..0.99,
            fmax in 1e7f64..3e9,
        ) {
            let mut c = compute(budget);
            c.max_frequency = fmax;
            c.frequency = fmax;
            let up = up_frac * budget;
            let f = optimal_frequency(0, samples, &c, up).unwrap();
            let gamma = client_energy(&c, samples, f, up);
            prop_assert!(f > 0.0 && f <= fmax);
            prop_assert!(gamma <= budget);
            prop_assert!(f == fmax || (budget - gamma) / budget < 1e-9);
        }
    }

    #[test]
    fn schedule_exponents_meet_the_step_conditions() {
        let s = SscaSchedule::default();
        s.validate().unwrap();
        let n = 1_000_000;
        let (mut sum_rho, mut sum_rho2) = (0.0, 0.0);
        for i in 0..n {
            sum_rho += s.rho(i);
            sum_rho2 += s.rho(i).powi(2);
        }
        // Partial sums of the divergent series grow like n^0.4/0.4; the
        // squared series is bounded by ζ(1.2) ≈ 5.59.
        assert!(sum_rho > 600.0);
        assert!(sum_rho2 < 5.6);
        assert!(s.mu(n) / s.rho(n) < 0.02);
        assert!(s.mu(n) / s.rho(n) < s.mu(1000) / s.rho(1000));
        let bad = SscaSchedule { mu_exponent: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn dist(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    fn unit_device(download: f64) -> DeviceProfile {
        let mut c = compute(1e9);
        c.cycles_per_sample = 1e-30;
        DeviceProfile { compute: c, download_delay: download, upload_delay: 0.0, upload_energy: 0.0 }
    }

    /// Head 0 and member 1, 500 samples each, one bit per sample at one bit
    /// per second and a one-second round.
    fn toy(intercept: f64, slope: f64) -> ObjectiveContext {
        let clients = vec![
            ClientLabelStats::new(500, dist(&[0.5, 0.5])),
            ClientLabelStats::new(500, dist(&[1.0, 0.0])),
        ];
        let a = ClusterAssignment::from_head_of(&[None, Some(0)]);
        ObjectiveContext::new(
            clients,
            dist(&[0.5, 0.5]),
            a,
            BTreeMap::from([(0, 1.0)]),
            RoundsLaw::Linear { intercept, slope },
            vec![unit_device(1.0), unit_device(1.0)],
            1.0,
            EmdWeighting::PreSharing,
        )
        .unwrap()
    }

    fn plan_with(ctx: &ObjectiveContext, v: usize) -> SharingPlan {
        let f = ctx.frequencies_for(&[v as f64]).unwrap();
        ctx.make_plan(&[v], &f)
    }

    #[test]
    fn toy_objective_is_closed_form() {
        let ctx = toy(10.0, -0.01);
        for v in [0, 1, 250, 500] {
            let e = objective(&ctx, &plan_with(&ctx, v), &[0.0; 3]).unwrap();
            let expect = v as f64 + 10.0 - v as f64 / 100.0;
            assert!((e.total - expect).abs() < 1e-9, "{v}: {}", e.total);
        }
        let zero = objective(&ctx, &plan_with(&ctx, 0), &[0.0; 3]).unwrap();
        assert_eq!(zero.sharing_delay, 0.0);
    }

    #[test]
    fn toys_reach_their_boundary_optima() {
        let s = SscaSchedule { noise_scale: 0.0, ..Default::default() };
        let interior_cost = toy(10.0, -0.01);
        let r = jfvo(&interior_cost, &s, 1).unwrap();
        assert!(r.plan.volumes[&0] <= 1);
        assert_eq!(grid_oracle(&interior_cost, 1).unwrap().0.volumes[&0], 0);

        let pays_off = toy(1000.0, -1.5);
        let r = jfvo(&pays_off, &s, 1).unwrap();
        assert!(r.plan.volumes[&0] >= 499, "{:?}", r.plan.volumes);
        let (p, e) = grid_oracle(&pays_off, 1).unwrap();
        assert_eq!(p.volumes[&0], 500);
        assert!((e.total - 750.0).abs() < 1e-9);
        assert!(r.certificate.feasible);
    }

    #[test]
    fn zero_inner_iterations_keep_initial_volumes() {
        let ctx = toy(1000.0, -1.5);
        let s = SscaSchedule { inner_iters: 0, ..Default::default() };
        let r = jfvo(&ctx, &s, 0).unwrap();
        assert_eq!(r.plan.volumes[&0], 0);
        assert_eq!(r.plan.frequencies[&0], ctx.devices[0].compute.max_frequency);
    }

    #[test]
    fn surrogate_with_full_weight_replaces_average() {
        let x0 = [3.0, 4.0];
        let a = Surrogate::prox_seed(&x0, 2.0);
        let b = Surrogate::linearized(&x0, 5.0, &[1.0, -1.0], 0.5);
        assert_eq!(a.blend(&b, 1.0), b);
        let same = b.blend(&b, 0.3);
        for (x, y) in same.linear.iter().zip(&b.linear) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((same.constant - b.constant).abs() < 1e-12);
    }

    #[test]
    fn surrogate_matches_its_own_value_at_expansion_point() {
        let x0 = [3.0, 4.0];
        let s = Surrogate::linearized(&x0, 5.0, &[1.0, -1.0], 0.5);
        assert!((s.value(&x0, &[0.0, 0.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn box_solution_without_sharing_term_is_clipped() {
        let s = Surrogate { curvature: vec![2.0, 2.0], linear: vec![-4.0, 6.0], constant: 0.0, sharing_weight: 0.0 };
        assert_eq!(s.solve(&[10.0, 10.0], &[0.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        // Minimizer 2 beyond the cap 1.5: clipped, and the derivative at the
        // bound points inward.
        let x = s.solve(&[1.5, 10.0], &[0.0, 0.0]).unwrap();
        assert_eq!(x[0], 1.5);
        assert!(2.0 * x[0] - 4.0 < 0.0);
    }

    fn brute_force(s: &Surrogate, caps: &[f64], slopes: &[f64], step: f64) -> f64 {
        let mut best = f64::INFINITY;
        let n0 = (caps[0] / step).round() as usize;
        let n1 = (caps[1] / step).round() as usize;
        for i in 0..=n0 {
            for j in 0..=n1 {
                best = best.min(s.value(&[i as f64 * step, j as f64 * step], slopes));
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn coupled_solve_beats_every_grid_point(
            a in prop::collection::vec(0.1f64..5.0, 2),
            b in prop::collection::vec(-20.0f64..5.0, 2),
            slopes in prop::collection::vec(0.0f64..3.0, 2),
            w in 0.0f64..2.0,
        ) {
            let s = Surrogate { curvature: a, linear: b, constant: 0.0, sharing_weight: w };
            let caps = [10.0, 10.0];
            let x = s.solve(&caps, &slopes).unwrap();
            prop_assert!(x.iter().zip(&caps).all(|(v, c)| *v >= 0.0 && v <= c));
            let v = s.value(&x, &slopes);
            prop_assert!(v <= brute_force(&s, &caps, &slopes, 0.05) + 1e-9);
        }
    }

    #[test]
    fn negative_cap_is_infeasible() {
        let s = Surrogate::prox_seed(&[0.0], 1.0);
        assert!(matches!(s.solve(&[-1.0], &[0.0]), Err(Error::Infeasible(_))));
    }

    #[test]
    fn grid_guard_and_refinement() {
        let ctx = toy(1000.0, -1.5);
        let coarse = grid_oracle(&ctx, 200).unwrap().1.total;
        let fine = grid_oracle(&ctx, 100).unwrap().1.total;
        assert!(fine <= coarse);
        assert!(matches!(grid_oracle(&ctx, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn verification_flags_each_constraint() {
        let ctx = toy(10.0, -0.01);
        let mut p = plan_with(&ctx, 10);
        assert!(verify_plan(&ctx, &p).unwrap().feasible);
        p.volumes.insert(0, 501);
        assert!(verify_plan(&ctx, &p).unwrap().volume_excess > 0.0);
        let mut p = plan_with(&ctx, 10);
        p.frequencies.insert(1, 2e9);
        assert!(verify_plan(&ctx, &p).unwrap().frequency_excess > 0.0);
        p.volumes.insert(7, 1);
        assert!(verify_plan(&ctx, &p).is_err());
    }

    #[test]
    fn frozen_frequencies_cap_volumes_by_energy() {
        let clients = vec![
            ClientLabelStats::new(500, dist(&[0.5, 0.5])),
            ClientLabelStats::new(500, dist(&[1.0, 0.0])),
        ];
        let dev = DeviceProfile { compute: compute(0.005), download_delay: 100.0, upload_delay: 0.0, upload_energy: 0.0 };
        let ctx = ObjectiveContext::new(
            clients,
            dist(&[0.5, 0.5]),
            ClusterAssignment::from_head_of(&[None, Some(0)]),
            BTreeMap::from([(0, 1e6)]),
            RoundsLaw::Linear { intercept: 1000.0, slope: -1.5 },
            vec![dev.clone(), dev],
            1.0,
            EmdWeighting::PreSharing,
        )
        .unwrap();
        let frozen = SscaSchedule { frequency_mode: FrequencyMode::Frozen, noise_scale: 0.0, ..Default::default() };
        let r = jfvo(&ctx, &frozen, 0).unwrap();
        assert_eq!(r.plan.volumes[&0], 0);
        assert!(r.certificate.feasible);
        let coupled = SscaSchedule { noise_scale: 0.0, ..Default::default() };
        let r = jfvo(&ctx, &coupled, 0).unwrap();
        assert!(r.plan.volumes[&0] > 0);
        assert!(r.certificate.feasible);
    }
}
