//! One-parameter sweeps: heterogeneity level, shared fraction and number
//! of clusters.

use std::fmt::Write as _;
use std::str::FromStr;

use fedshare_core::datagen::{generate, GeneratedData, SkewMode};
use fedshare_core::fedsim::{RoundRecord, TrainingTrace};
use fedshare_core::rng::{derive_seed, rng_for};
use fedshare_core::{ClusterAssignment, HeterogeneityReport};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::pipeline::{cluster, fraction_plan, network, partition, plan_emd, scenario_for, stream_seed, train_shared, TAG_DATA};

const TAG_RANDOM_CLUSTERS: u64 = 0x5357;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Skew parameter of the scenario, no sharing.
    EmdLevel,
    /// Fraction of every DACA head's data shared with its members.
    SharedFraction,
    /// Random assignments with this many heads; a DACA row is added per seed.
    NumClusters,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::EmdLevel => "emd_level",
            Axis::SharedFraction => "shared_fraction",
            Axis::NumClusters => "num_clusters",
        }
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "emd_level" | "emd" => Ok(Axis::EmdLevel),
            "shared_fraction" | "alpha" => Ok(Axis::SharedFraction),
            "num_clusters" | "clusters" => Ok(Axis::NumClusters),
            _ => Err(CliError::Config(format!(
                "unknown sweep axis {s:?}; expected emd_level, shared_fraction or num_clusters"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seed_index: usize,
    /// `daca`, `random` or `none`.
    pub assignment: String,
    pub emd: Option<f64>,
    pub rounds: Option<usize>,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub curve: Vec<RoundRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub value: f64,
    pub assignment: String,
    pub mean_emd: Option<f64>,
    /// `None` when any seed missed the target or failed.
    pub mean_rounds: Option<f64>,
    pub seeds: usize,
    pub censored: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
    pub aggregates: Vec<SweepAggregate>,
}

/// Config of point `seed_index`: seed index 0 is the base run itself.
pub fn point_config(cfg: &RunConfig, seed_index: usize) -> RunConfig {
    RunConfig { seed: cfg.seed.wrapping_add(seed_index as u64), ..cfg.clone() }
}

fn with_skew(cfg: &RunConfig, value: f64) -> CliResult<RunConfig> {
    let mut c = cfg.clone();
    c.scenario.skew_mode = match &cfg.scenario.skew_mode {
        SkewMode::SingleClassFraction { .. } => SkewMode::SingleClassFraction { fraction: value },
        SkewMode::Dirichlet { .. } => SkewMode::Dirichlet { alpha: value },
        SkewMode::DominantClass { .. } => SkewMode::DominantClass { strength: value },
        SkewMode::FeatureNoise { .. } => SkewMode::FeatureNoise { levels: vec![0.0, value] },
    };
    c.scenario.validate()?;
    Ok(c)
}

/// Clients shuffled; the first `heads` lead, the rest join heads round-robin.
pub fn random_assignment(num_clients: usize, heads: usize, seed: u64) -> CliResult<ClusterAssignment> {
    if heads == 0 || heads >= num_clients {
        return Err(CliError::Config(format!("{heads} clusters for {num_clients} clients")));
    }
    let mut order: Vec<usize> = (0..num_clients).collect();
    order.shuffle(&mut rng_for(seed, &[TAG_RANDOM_CLUSTERS]));
    let mut head_of = vec![None; num_clients];
    for (i, &c) in order[heads..].iter().enumerate() {
        head_of[c] = Some(order[i % heads]);
    }
    Ok(ClusterAssignment::from_head_of(&head_of))
}

fn point_from(
    value: f64,
    seed_index: usize,
    assignment: &str,
    run: CliResult<(f64, TrainingTrace)>,
) -> SweepPoint {
    match run {
        Ok((emd, t)) => SweepPoint {
            value,
            seed_index,
            assignment: assignment.into(),
            emd: Some(emd),
            rounds: t.rounds_to_target,
            final_accuracy: Some(t.final_accuracy),
            final_loss: t.rounds.last().map(|r| r.loss),
            curve: t.rounds,
            error: None,
        },
        Err(e) => {
            log::warn!("sweep point {value} (seed {seed_index}) failed: {e}");
            SweepPoint {
                value,
                seed_index,
                assignment: assignment.into(),
                emd: None,
                rounds: None,
                final_accuracy: None,
                final_loss: None,
                curve: vec![],
                error: Some(e.to_string()),
            }
        }
    }
}

fn no_sharing(cfg: &RunConfig, data: &GeneratedData) -> CliResult<(f64, TrainingTrace)> {
    let (stats, g) = data.heterogeneity_inputs();
    let emd = HeterogeneityReport::compute(&stats, &g).stage("partition")?.average_emd;
    let none = ClusterAssignment::singletons(data.clients.len());
    let (_, t) = train_shared(cfg, data, &none, &Default::default())?;
    Ok((emd, t))
}

fn shared(cfg: &RunConfig, data: &GeneratedData, a: &ClusterAssignment, alpha: f64) -> CliResult<(f64, TrainingTrace)> {
    let plan = fraction_plan(&data.clients, a, alpha);
    let emd = plan_emd(cfg, data, a, &plan)?;
    let (_, t) = train_shared(cfg, data, a, &plan)?;
    Ok((emd, t))
}

fn daca_assignment(cfg: &RunConfig, data: &GeneratedData) -> CliResult<ClusterAssignment> {
    let net = network(cfg)?;
    Ok(cluster(cfg, data, &net)?.1)
}

fn run_point(cfg: &RunConfig, axis: Axis, value: f64, seed_index: usize) -> Vec<SweepPoint> {
    let pc = point_config(cfg, seed_index);
    match axis {
        Axis::EmdLevel => {
            let run = with_skew(&pc, value).and_then(|c| {
                let data = generate(&scenario_for(&c, stream_seed(c.seed, TAG_DATA))).stage("partition")?;
                no_sharing(&c, &data)
            });
            vec![point_from(value, seed_index, "none", run)]
        }
        Axis::SharedFraction => {
            let run = (|| {
                if !(0.0..=1.0).contains(&value) {
                    return Err(CliError::Config(format!("shared fraction {value} outside [0, 1]")));
                }
                let data = partition(&pc)?;
                let a = daca_assignment(&pc, &data)?;
                shared(&pc, &data, &a, value)
            })();
            vec![point_from(value, seed_index, "daca", run)]
        }
        Axis::NumClusters => {
            let data = partition(&pc);
            let random = data.as_ref().map_err(clone_err).and_then(|data| {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(CliError::Config(format!("cluster count {value} is not a positive integer")));
                }
                let seed = derive_seed(pc.seed, &[TAG_RANDOM_CLUSTERS, value as u64]);
                let a = random_assignment(data.clients.len(), value as usize, seed)?;
                shared(&pc, data, &a, cfg.sweep.cluster_alpha)
            });
            let daca = data.as_ref().map_err(clone_err).and_then(|data| {
                let a = daca_assignment(&pc, data)?;
                shared(&pc, data, &a, cfg.sweep.cluster_alpha)
            });
            vec![
                point_from(value, seed_index, "random", random),
                point_from(value, seed_index, "daca", daca),
            ]
        }
    }
}

fn clone_err(e: &CliError) -> CliError {
    CliError::Config(e.to_string())
}

fn aggregate(points: &[SweepPoint]) -> Vec<SweepAggregate> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for p in points {
        if !keys.iter().any(|(v, a)| *v == p.value && *a == p.assignment) {
            keys.push((p.value, p.assignment.clone()));
        }
    }
    keys.into_iter()
        .map(|(value, assignment)| {
            let ps: Vec<&SweepPoint> =
                points.iter().filter(|p| p.value == value && p.assignment == assignment).collect();
            let emds: Vec<f64> = ps.iter().filter_map(|p| p.emd).collect();
            let failed = ps.iter().filter(|p| p.error.is_some()).count();
            let censored = ps.iter().filter(|p| p.error.is_none() && p.rounds.is_none()).count();
            let mean_rounds = (failed == 0 && censored == 0)
                .then(|| ps.iter().map(|p| p.rounds.unwrap() as f64).sum::<f64>() / ps.len() as f64);
            SweepAggregate {
                value,
                assignment,
                mean_emd: (!emds.is_empty()).then(|| emds.iter().sum::<f64>() / emds.len() as f64),
                mean_rounds,
                seeds: ps.len(),
                censored,
                failed,
            }
        })
        .collect()
}

/// Runs every `(value, seed)` point in parallel. Point failures are
/// recorded in the outcome rather than aborting the sweep.
pub fn run_sweep(cfg: &RunConfig, axis: Axis, values: &[f64]) -> CliResult<SweepOutcome> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(CliError::Config("a sweep needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config("sweep values must be finite".into()));
    }
    let jobs: Vec<(f64, usize)> =
        values.iter().flat_map(|&v| (0..cfg.sweep.seeds).map(move |s| (v, s))).collect();
    let points: Vec<SweepPoint> = jobs
        .par_iter()
        .map(|&(v, s)| run_point(cfg, axis, v, s))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let aggregates = aggregate(&points);
    Ok(SweepOutcome { axis, points, aggregates })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl SweepOutcome {
    pub fn points_csv(&self) -> String {
        let mut out = String::from("axis,value,seed,assignment,emd,rounds,final_accuracy,final_loss,error\n");
        for p in &self.points {
            let err = p.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{err}",
                self.axis.name(),
                p.value,
                p.seed_index,
                p.assignment,
                opt(&p.emd),
                opt(&p.rounds),
                opt(&p.final_accuracy),
                opt(&p.final_loss),
            );
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("value,seed,assignment,round,loss,accuracy\n");
        for p in &self.points {
            for r in &p.curve {
                let _ = writeln!(out, "{},{},{},{},{},{}", p.value, p.seed_index, p.assignment, r.round, r.loss, r.accuracy);
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("value,assignment,mean_emd,mean_rounds,seeds,censored,failed\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                a.value,
                a.assignment,
                opt(&a.mean_emd),
                opt(&a.mean_rounds),
                a.seeds,
                a.censored,
                a.failed
            );
        }
        out
    }

    pub fn mean_rounds(&self, value: f64, assignment: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.value == value && a.assignment == assignment)
            .and_then(|a| a.mean_rounds)
    }
}
