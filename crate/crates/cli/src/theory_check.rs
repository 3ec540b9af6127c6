//! Convergence-analysis checks on the configured scenario.

use std::fmt::Write as _;

use fedshare_core::datagen::{generate, ClientDataset, SampleCounts};
use fedshare_core::fedsim::{Model, TrainConfig};
use fedshare_core::rng::derive_seed;
use fedshare_core::theory::{
    check_drift_bound, check_gradient_dissimilarity, check_rate_bound, estimate_constants, probe_points,
    record_run, BoundTerms, DissimilarityReport, DriftReport, RateReport, RecordedRun, TheoryConstants,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::pipeline::{scenario_for, stream_seed, TAG_DATA, TAG_THEORY};

const TAG_PROBES: u64 = 1;
const TAG_DRIFT: u64 = 2;
const TAG_RATE: u64 = 3;
const TAG_CONSTANTS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub d_bar: f64,
    pub l_smooth: f64,
    pub sigma: f64,
    pub g: f64,
    pub learning_rate: f64,
    pub lhs: f64,
    pub bound: BoundTerms,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryOutcome {
    pub constants: TheoryConstants,
    pub inflation: f64,
    pub optimum_loss: f64,
    pub optimum_gradient_norm: f64,
    pub learning_rate: f64,
    pub steps_per_round: usize,
    pub dissimilarity: DissimilarityReport,
    pub drift: DriftReport,
    pub rate: RateReport,
    pub trend: Vec<TrendRow>,
    pub passed: bool,
}

impl TheoryOutcome {
    pub fn trend_csv(&self) -> String {
        let mut out = String::from(
            "num_clients,samples_per_client,d_bar,l_smooth,sigma,g,learning_rate,lhs,bound,optimization,variance,drift_gradient,drift_dissimilarity,drift_variance,passed\n",
        );
        for r in &self.trend {
            let b = &r.bound;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.num_clients,
                r.samples_per_client,
                r.d_bar,
                r.l_smooth,
                r.sigma,
                r.g,
                r.learning_rate,
                r.lhs,
                b.total,
                b.optimization,
                b.variance,
                b.drift_gradient,
                b.drift_dissimilarity,
                b.drift_variance,
                r.passed
            );
        }
        out
    }
}

/// Largest step size the inflated constants allow, capped by the configured one.
pub fn theory_learning_rate(cfg: &RunConfig, c: &TheoryConstants) -> f64 {
    cfg.train.learning_rate.min(c.inflated(cfg.theory.inflation).max_learning_rate())
}

fn runs(
    data: &[ClientDataset],
    train: &TrainConfig,
    seeds: usize,
    rounds: usize,
    base: u64,
    keep: bool,
) -> CliResult<Vec<RecordedRun>> {
    (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let cfg = TrainConfig { rng_seed: derive_seed(base, &[s]), stop_at_target: false, ..train.clone() };
            record_run(data, &cfg, rounds, keep)
        })
        .collect::<fedshare_core::Result<_>>()
        .stage("theory")
}

fn template(cfg: &RunConfig) -> Model {
    cfg.train_config(0).initial_model(cfg.scenario.feature_dim, cfg.scenario.num_classes)
}

fn trend_row(cfg: &RunConfig, k: usize, total: usize, seed: u64) -> CliResult<TrendRow> {
    let n = total / k;
    let mut c = cfg.clone();
    c.scenario.num_clients = k;
    c.scenario.samples_per_client = SampleCounts::Uniform(n);
    let data = generate(&scenario_for(&c, derive_seed(seed, &[TAG_DATA, k as u64]))).stage("theory")?;
    let est = estimate_constants(&data.clients, &template(&c), &c.theory.probe, derive_seed(seed, &[TAG_CONSTANTS, k as u64]))
        .stage("theory")?;
    let eta = theory_learning_rate(&c, &est.constants);
    let train = TrainConfig { learning_rate: eta, ..c.train_config(0) };
    let rs = runs(&data.clients, &train, c.theory.rate_seeds, c.theory.rate_rounds, derive_seed(seed, &[TAG_RATE, k as u64]), false)?;
    let rate = check_rate_bound(&rs, &est.constants, est.optimum.loss, c.theory.inflation).stage("theory")?;
    Ok(TrendRow {
        num_clients: k,
        samples_per_client: n,
        d_bar: est.constants.d_bar,
        l_smooth: est.constants.l_smooth,
        sigma: est.constants.sigma,
        g: est.constants.g,
        learning_rate: eta,
        lhs: rate.lhs,
        bound: rate.bound_inflated,
        passed: rate.passed,
    })
}

pub fn run_theory(cfg: &RunConfig) -> CliResult<TheoryOutcome> {
    cfg.validate()?;
    let th = &cfg.theory;
    let seed = stream_seed(cfg.seed, TAG_THEORY);
    let data = generate(&scenario_for(cfg, stream_seed(cfg.seed, TAG_DATA))).stage("theory")?;
    let model = template(cfg);
    let est = estimate_constants(&data.clients, &model, &th.probe, derive_seed(seed, &[TAG_CONSTANTS])).stage("theory")?;
    let c = est.constants.clone();

    let probes = probe_points(&est.optimum.weights, th.probe.num_probes, th.probe.spread, derive_seed(seed, &[TAG_PROBES]));
    let dissimilarity = check_gradient_dissimilarity(&data.clients, &model, &probes).stage("theory")?;

    let eta = theory_learning_rate(cfg, &c);
    if eta < cfg.train.learning_rate {
        log::info!("theory runs use step size {eta:.3e} (configured {})", cfg.train.learning_rate);
    }
    let train = TrainConfig { learning_rate: eta, ..cfg.train_config(0) };
    let drift_runs = runs(&data.clients, &train, th.drift_seeds, th.drift_rounds, derive_seed(seed, &[TAG_DRIFT]), true)?;
    let drift = check_drift_bound(&drift_runs, &c, th.inflation).stage("theory")?;
    let steps_per_round = drift_runs[0].steps_per_round;
    drop(drift_runs);
    let rate_runs = runs(&data.clients, &train, th.rate_seeds, th.rate_rounds, derive_seed(seed, &[TAG_RATE]), false)?;
    let rate = check_rate_bound(&rate_runs, &c, est.optimum.loss, th.inflation).stage("theory")?;

    let total: usize = data.clients.iter().map(ClientDataset::len).sum();
    let mut trend = Vec::new();
    for &k in &th.trend_clients {
        if k < 2 || total / k == 0 {
            return Err(CliError::Config(format!("trend client count {k} is invalid")));
        }
        trend.push(trend_row(cfg, k, total, seed)?);
    }

    Ok(TheoryOutcome {
        passed: dissimilarity.passed && drift.passed && rate.passed,
        constants: c,
        inflation: th.inflation,
        optimum_loss: est.optimum.loss,
        optimum_gradient_norm: est.optimum.gradient_norm,
        learning_rate: eta,
        steps_per_round,
        dissimilarity,
        drift,
        rate,
        trend,
    })
}
