//! Synchronous FedAvg with local mini-batch SGD.

mod model;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use model::{num_params, Model, ModelKind};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;

const TAG_LOCAL: u64 = 0x4C4F_4341;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    /// Zero means full batch.
    pub batch_size: usize,
    pub max_rounds: usize,
    pub target_accuracy: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Stop as soon as the target accuracy is reached.
    #[serde(default = "default_true")]
    pub stop_at_target: bool,
}

fn default_l2() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            local_epochs: 2,
            batch_size: 20,
            max_rounds: 200,
            target_accuracy: 0.9,
            rng_seed: 0,
            model: ModelKind::Logistic,
            l2: default_l2(),
            stop_at_target: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation(format!(
                "learning rate {} must be a non-negative number",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::validation("local_epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::validation("target_accuracy must lie in [0, 1]"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::validation("l2 must be non-negative"));
        }
        Ok(())
    }

    pub fn initial_model(&self, dim: usize, num_classes: usize) -> Model {
        Model::init(self.model, dim, num_classes, self.l2, self.rng_seed)
    }
}

/// Mini-batch size actually used on a client with `n` samples.
pub fn effective_batch_size(n: usize, batch_size: usize) -> usize {
    if batch_size == 0 || batch_size >= n {
        n
    } else {
        batch_size
    }
}

/// `E` epochs of mini-batch SGD on one client. The shuffle stream is keyed
/// by `(seed, round, client, epoch)`.
pub fn local_sgd(
    model: &Model,
    data: &ClientDataset,
    config: &TrainConfig,
    round: usize,
    client: usize,
) -> Result<Model> {
    local_sgd_with(model, data, config, round, client, |_| {})
}

/// Same as [`local_sgd`], calling `on_step` with the iterate after every step.
pub fn local_sgd_with(
    model: &Model,
    data: &ClientDataset,
    config: &TrainConfig,
    round: usize,
    client: usize,
    mut on_step: impl FnMut(&Model),
) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::validation(format!("client {client} has no data")));
    }
    let mut m = model.clone();
    let mut grad = vec![0.0; m.num_params()];
    let b = effective_batch_size(data.len(), config.batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.local_epochs {
        let mut rng = rng_for(config.rng_seed, &[TAG_LOCAL, round as u64, client as u64, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(b) {
            let loss = m.loss_and_grad(data, chunk, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "client {client} loss became {loss} in round {round}; the learning rate may be too large"
                )));
            }
            m.step(&grad, config.learning_rate)?;
            on_step(&m);
        }
    }
    Ok(m)
}

/// `Σ (n_k/n)·w_k`, accumulated in index order.
pub fn aggregate(models: &[Model], counts: &[usize]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| Error::validation("no models to aggregate"))?;
    if models.len() != counts.len() {
        return Err(Error::Dimension {
            expected: models.len(),
            got: counts.len(),
        });
    }
    if let Some(m) = models.iter().find(|m| m.num_params() != first.num_params()) {
        return Err(Error::Dimension {
            expected: first.num_params(),
            got: m.num_params(),
        });
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::validation("aggregation weights sum to zero"));
    }
    let mut out = first.clone();
    out.weights.iter_mut().for_each(|w| *w = 0.0);
    for (m, &c) in models.iter().zip(counts) {
        let a = c as f64 / n as f64;
        for (o, w) in out.weights.iter_mut().zip(&m.weights) {
            *o += a * w;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundRecord>,
    pub rounds_to_target: Option<usize>,
    pub final_accuracy: f64,
    pub final_model: Model,
}

impl TrainingTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,loss,accuracy\n");
        for r in &self.rounds {
            let _ = writeln!(out, "{},{},{}", r.round, r.loss, r.accuracy);
        }
        out
    }
}

/// Unweighted mean over clients of each client's mean loss.
pub fn global_loss(model: &Model, datasets: &[ClientDataset]) -> f64 {
    datasets.iter().map(|d| model.mean_loss(d)).sum::<f64>() / datasets.len() as f64
}

/// Full-participation FedAvg. Local updates run in parallel; aggregation is
/// sequential in client order, so results do not depend on thread count.
pub fn run_federated(
    datasets: &[ClientDataset],
    test: &ClientDataset,
    config: &TrainConfig,
) -> Result<TrainingTrace> {
    config.validate()?;
    let first = datasets
        .first()
        .ok_or_else(|| Error::validation("federated run needs at least one client"))?;
    let counts: Vec<usize> = datasets.iter().map(ClientDataset::len).collect();
    let mut global = config.initial_model(first.dim, first.num_classes);
    let mut rounds = Vec::new();
    let mut rounds_to_target = None;
    for t in 1..=config.max_rounds {
        let locals: Vec<Model> = datasets
            .par_iter()
            .enumerate()
            .map(|(k, d)| local_sgd(&global, d, config, t, k))
            .collect::<Result<_>>()?;
        global = aggregate(&locals, &counts)?;
        let loss = global_loss(&global, datasets);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("global loss became {loss} in round {t}")));
        }
        let accuracy = global.accuracy(test);
        rounds.push(RoundRecord { round: t, loss, accuracy });
        if rounds_to_target.is_none() && accuracy >= config.target_accuracy {
            rounds_to_target = Some(t);
            if config.stop_at_target {
                break;
            }
        }
    }
    Ok(TrainingTrace {
        final_accuracy: rounds.last().map_or(0.0, |r| r.accuracy),
        rounds,
        rounds_to_target,
        final_model: global,
    })
}

/// Seed-averaged rounds-to-target at one heterogeneity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsSample {
    pub emd: f64,
    pub mean_rounds: Option<f64>,
    pub per_seed: Vec<Option<usize>>,
    pub censored: bool,
}

/// Runs every `(level, seed)` pair produced by `make` and averages the
/// rounds-to-target. A level where any seed misses the target is censored.
pub fn measure_rounds_curve<F>(
    num_levels: usize,
    seeds: &[u64],
    config: &TrainConfig,
    make: F,
) -> Result<Vec<RoundsSample>>
where
    F: Fn(usize, u64) -> Result<(f64, Vec<ClientDataset>, ClientDataset)> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::validation("at least one seed is required"));
    }
    let jobs: Vec<(usize, u64)> = (0..num_levels)
        .flat_map(|l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results: Vec<(f64, Option<usize>)> = jobs
        .par_iter()
        .map(|&(level, seed)| {
            let (emd, data, test) = make(level, seed)?;
            let mut cfg = config.clone();
            cfg.rng_seed = seed;
            let trace = run_federated(&data, &test, &cfg)?;
            Ok((emd, trace.rounds_to_target))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(num_levels);
    for (level, chunk) in results.chunks(seeds.len()).enumerate() {
        let emd = chunk.iter().map(|r| r.0).sum::<f64>() / chunk.len() as f64;
        let per_seed: Vec<Option<usize>> = chunk.iter().map(|r| r.1).collect();
        let censored = per_seed.iter().any(Option::is_none);
        if censored {
            log::warn!("level {level} (EMD {emd:.4}) missed the target on some seeds; excluded from fitting");
        }
        let mean_rounds = (!censored)
            .then(|| per_seed.iter().map(|r| r.unwrap() as f64).sum::<f64>() / per_seed.len() as f64);
        out.push(RoundsSample {
            emd,
            mean_rounds,
            per_seed,
            censored,
        });
    }
    Ok(out)
}

/// `(EMD, rounds)` pairs of the uncensored levels.
pub fn fit_samples(curve: &[RoundsSample]) -> Vec<(f64, f64)> {
    curve
        .iter()
        .filter_map(|s| s.mean_rounds.map(|t| (s.emd, t)))
        .collect()
}
