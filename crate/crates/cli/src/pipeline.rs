//! Stages of the end-to-end run: partition, graph, clustering, rounds-law
//! calibration, volume/frequency optimization and training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedshare_core::daca::{build_graph, daca_cluster, verify_conditions};
use fedshare_core::datagen::{apply_sharing, dump_clients, generate, ClientDataset, GeneratedData, Scenario};
use fedshare_core::fedsim::{fit_samples, measure_rounds_curve, run_federated, RoundsSample, TrainingTrace};
use fedshare_core::hetero::post_sharing_emd;
use fedshare_core::jfvo::{
    jfvo, optimal_frequency, trace_to_csv, DeviceProfile, JfvoResult, ObjectiveContext, RoundsLaw,
};
use fedshare_core::rng::{derive_seed, rng_for};
use fedshare_core::roundsfit::RoundModel;
use fedshare_core::wireless::{
    cluster_multicast_rate, distance, equal_subcarrier_split, expected_download_delay, expected_upload_delay,
    round_delay, sharing_delay, upload_energy, RadioParams, SidelinkChannel,
};
use fedshare_core::{ClusterAssignment, ConstrainedGraph, Error, HeterogeneityReport, SharingPlan};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClosenessConfig, RunConfig};
use crate::error::{CliError, CliResult, StageExt};

pub(crate) const TAG_DATA: u64 = 1;
const TAG_POSITIONS: u64 = 2;
const TAG_CLOSENESS: u64 = 3;
const TAG_FADING: u64 = 4;
const TAG_CALIBRATION: u64 = 5;
const TAG_JFVO: u64 = 6;
pub(crate) const TAG_SHARE: u64 = 7;
pub(crate) const TAG_TRAIN: u64 = 8;
const TAG_DOWN: u64 = 9;
const TAG_UP: u64 = 10;
pub(crate) const TAG_THEORY: u64 = 11;

/// Seed of one named stream of a run.
pub fn stream_seed(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, &[tag])
}

pub fn scenario_for(cfg: &RunConfig, data_seed: u64) -> Scenario {
    Scenario { rng_seed: data_seed, ..cfg.scenario.clone() }
}

pub fn partition(cfg: &RunConfig) -> CliResult<GeneratedData> {
    generate(&scenario_for(cfg, stream_seed(cfg.seed, TAG_DATA))).stage("partition")
}

/// Radio environment of a run.
#[derive(Debug, Clone)]
pub struct Network {
    pub radio: RadioParams,
    pub channel: SidelinkChannel,
    pub positions: Vec<[f64; 2]>,
    pub closeness: Vec<Vec<f64>>,
    pub devices: Vec<DeviceProfile>,
}

fn drop_positions(cfg: &RunConfig) -> Vec<[f64; 2]> {
    if let Some(p) = &cfg.geometry.positions {
        return p.clone();
    }
    let mut rng = rng_for(cfg.seed, &[TAG_POSITIONS]);
    (0..cfg.scenario.num_clients)
        .map(|_| {
            let r = cfg.geometry.cell_radius * rng.random::<f64>().sqrt();
            let phi = std::f64::consts::TAU * rng.random::<f64>();
            [r * phi.cos(), r * phi.sin()]
        })
        .collect()
}

fn closeness_matrix(cfg: &RunConfig) -> CliResult<Vec<Vec<f64>>> {
    let k = cfg.scenario.num_clients;
    match &cfg.closeness {
        ClosenessConfig::Uniform { low, high } => {
            let mut rng = rng_for(cfg.seed, &[TAG_CLOSENESS]);
            let mut m = vec![vec![1.0; k]; k];
            for a in 0..k {
                for b in a + 1..k {
                    let e = low + (high - low) * rng.random::<f64>();
                    m[a][b] = e;
                    m[b][a] = e;
                }
            }
            Ok(m)
        }
        ClosenessConfig::Matrix { values } => Ok(values.clone()),
        ClosenessConfig::File { path } => {
            let text =
                std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split(',')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
                        })
                        .collect()
                })
                .collect()
        }
    }
}

pub fn network(cfg: &RunConfig) -> CliResult<Network> {
    let radio = cfg.radio.params();
    radio.validate().stage("network")?;
    let k = cfg.scenario.num_clients;
    let bits = cfg.model_size_bits();
    let fading_seed = stream_seed(cfg.seed, TAG_FADING);
    let down = cfg.downlink_fading(derive_seed(fading_seed, &[TAG_DOWN]));
    let up = cfg.uplink_fading(derive_seed(fading_seed, &[TAG_UP]));
    let split = equal_subcarrier_split(radio.num_subcarriers, k).stage("network")?;
    let compute = cfg.compute_params(bits);
    let devices = (0..k)
        .map(|c| {
            let download_delay = expected_download_delay(&radio, &down.for_client(c), bits)?;
            let upload_delay = expected_upload_delay(&radio, &up.for_client(c), split[c], bits)?;
            Ok(DeviceProfile {
                compute: compute.clone(),
                download_delay,
                upload_delay,
                upload_energy: upload_energy(radio.ue_power, upload_delay),
            })
        })
        .collect::<fedshare_core::Result<Vec<_>>>()
        .stage("network")?;
    Ok(Network {
        channel: cfg.sidelink(),
        positions: drop_positions(cfg),
        closeness: closeness_matrix(cfg)?,
        radio,
        devices,
    })
}

pub fn cluster(
    cfg: &RunConfig,
    data: &GeneratedData,
    net: &Network,
) -> CliResult<(ConstrainedGraph, ClusterAssignment)> {
    let (stats, g) = data.heterogeneity_inputs();
    let graph = build_graph(
        &stats,
        &g,
        &net.closeness,
        &net.positions,
        &net.channel,
        &net.radio,
        cfg.thresholds.e_th,
        cfg.thresholds.v_th,
    )
    .stage("build_graph")?;
    let assignment = daca_cluster(&graph);
    let report = verify_conditions(&assignment, &graph);
    if !report.passed() {
        log::warn!("clustering violates head conditions: {report:?}");
    }
    Ok((graph, assignment))
}

pub fn head_rates(assignment: &ClusterAssignment, net: &Network) -> CliResult<BTreeMap<usize, f64>> {
    assignment
        .sharing_heads()
        .map(|(m, cs)| Ok((m, cluster_multicast_rate(m, cs, &net.positions, &net.channel, &net.radio)?)))
        .collect::<fedshare_core::Result<_>>()
        .stage("rates")
}

/// Every sharing head sends `round(fraction·n_m)` samples.
pub fn fraction_plan(data: &[ClientDataset], assignment: &ClusterAssignment, fraction: f64) -> SharingPlan {
    SharingPlan {
        volumes: assignment
            .sharing_heads()
            .map(|(m, _)| (m, (fraction * data[m].len() as f64).round() as usize))
            .collect(),
        frequencies: BTreeMap::new(),
    }
}

/// Post-sharing average EMD of `plan` on `data` under the run's weighting.
pub fn plan_emd(cfg: &RunConfig, data: &GeneratedData, assignment: &ClusterAssignment, plan: &SharingPlan) -> CliResult<f64> {
    let (stats, g) = data.heterogeneity_inputs();
    post_sharing_emd(&stats, assignment, &plan.real_volumes(), &g, cfg.weighting).stage("emd")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fractions: Vec<f64>,
    pub curve: Vec<RoundsSample>,
}

impl Calibration {
    pub fn samples(&self) -> Vec<(f64, f64)> {
        fit_samples(&self.curve)
    }

    /// `level,fraction,seed,emd,rounds` with empty rounds when censored.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,fraction,seed,emd,rounds\n");
        for (l, (f, s)) in self.fractions.iter().zip(&self.curve).enumerate() {
            for (i, r) in s.per_seed.iter().enumerate() {
                let r = r.map(|r| r.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{l},{f},{i},{},{r}", s.emd);
            }
        }
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("fraction,emd,mean_rounds,censored\n");
        for (f, s) in self.fractions.iter().zip(&self.curve) {
            let m = s.mean_rounds.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{f},{},{m},{}", s.emd, s.censored);
        }
        out
    }
}

/// Rounds-to-target over the shared-fraction staircase. Each seed draws a
/// fresh dataset from the same scenario family and reuses `assignment`.
pub fn calibrate(cfg: &RunConfig, assignment: &ClusterAssignment) -> CliResult<Calibration> {
    let base = stream_seed(cfg.seed, TAG_CALIBRATION);
    let seeds: Vec<u64> = (0..cfg.calibration.seeds as u64).map(|i| derive_seed(base, &[i])).collect();
    let fractions = cfg.calibration.fractions.clone();
    let train = cfg.train_config(0);
    let curve = measure_rounds_curve(fractions.len(), &seeds, &train, |level, seed| {
        let data = generate(&scenario_for(cfg, seed))?;
        let plan = fraction_plan(&data.clients, assignment, fractions[level]);
        let (stats, g) = data.heterogeneity_inputs();
        let emd = post_sharing_emd(&stats, assignment, &plan.real_volumes(), &g, cfg.weighting)?;
        let shared = apply_sharing(&data.clients, assignment, &plan, derive_seed(seed, &[TAG_SHARE]))?;
        Ok((emd, shared, data.test))
    })
    .stage("calibration")?;
    Ok(Calibration { fractions, curve })
}

pub fn fit_rounds(samples: &[(f64, f64)]) -> CliResult<RoundModel> {
    RoundModel::fit(samples).stage("fit_rounds")
}

pub fn objective_context(
    cfg: &RunConfig,
    data: &GeneratedData,
    assignment: &ClusterAssignment,
    net: &Network,
    model: RoundModel,
) -> CliResult<ObjectiveContext> {
    let (stats, g) = data.heterogeneity_inputs();
    ObjectiveContext::new(
        stats,
        g,
        assignment.clone(),
        head_rates(assignment, net)?,
        RoundsLaw::Fitted { model },
        net.devices.clone(),
        cfg.compute.bits_per_sample,
        cfg.weighting,
    )
    .stage("jfvo")
}

pub fn optimize(cfg: &RunConfig, ctx: &ObjectiveContext) -> CliResult<JfvoResult> {
    let res = jfvo(ctx, &cfg.ssca, stream_seed(cfg.seed, TAG_JFVO)).stage("jfvo")?;
    if !res.certificate.feasible {
        return Err(CliError::Stage {
            stage: "jfvo",
            source: Error::ConstraintViolation(format!(
                "optimized plan violates constraints by {}",
                res.certificate.max_violation()
            )),
        });
    }
    Ok(res)
}

/// Per-round delay with explicit frequencies on the given local volumes.
pub fn round_delay_for(devices: &[DeviceProfile], samples: &[usize], freqs: &[f64]) -> CliResult<f64> {
    let downloads: Vec<f64> = devices.iter().map(|d| d.download_delay).collect();
    let uploads: Vec<f64> = devices.iter().map(|d| d.upload_delay).collect();
    let computes: Vec<f64> = devices
        .iter()
        .zip(samples)
        .zip(freqs)
        .map(|((d, &n), &f)| d.compute.cycles_per_round(n as f64) / f)
        .collect();
    round_delay(&downloads, &computes, &uploads).stage("delay")
}

/// Energy-optimal frequencies for the given local volumes.
pub fn frequencies_for(devices: &[DeviceProfile], samples: &[usize]) -> CliResult<Vec<f64>> {
    devices
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(k, (d, &n))| optimal_frequency(k, n as f64, &d.compute, d.upload_energy))
        .collect::<fedshare_core::Result<_>>()
        .stage("frequency")
}

/// Fills in energy-optimal frequencies for every client a plan leaves out.
pub fn complete_plan(plan: &SharingPlan, net: &Network, shared: &[ClientDataset]) -> CliResult<SharingPlan> {
    let samples: Vec<usize> = shared.iter().map(ClientDataset::len).collect();
    let f = frequencies_for(&net.devices, &samples)?;
    let mut out = plan.clone();
    for (k, f) in f.into_iter().enumerate() {
        out.frequencies.entry(k).or_insert(f);
    }
    Ok(out)
}

/// Applies `plan` and trains on the result, with the run's sharing and
/// training streams.
pub fn train_shared(
    cfg: &RunConfig,
    data: &GeneratedData,
    assignment: &ClusterAssignment,
    plan: &SharingPlan,
) -> CliResult<(Vec<ClientDataset>, TrainingTrace)> {
    let shared =
        apply_sharing(&data.clients, assignment, plan, stream_seed(cfg.seed, TAG_SHARE)).stage("apply_sharing")?;
    let trace = run_federated(&shared, &data.test, &cfg.train_config(stream_seed(cfg.seed, TAG_TRAIN)))
        .stage("run_federated")?;
    Ok((shared, trace))
}

/// Training outcome of one plan next to the no-sharing baseline.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub shared: Vec<ClientDataset>,
    pub trace: TrainingTrace,
    pub baseline: TrainingTrace,
    pub sharing_delay: f64,
    pub round_delay: f64,
    pub baseline_round_delay: f64,
}

pub fn simulate(
    cfg: &RunConfig,
    data: &GeneratedData,
    assignment: &ClusterAssignment,
    plan: &SharingPlan,
    net: &Network,
) -> CliResult<Simulation> {
    let (shared_run, baseline) = rayon::join(
        || train_shared(cfg, data, assignment, plan),
        || run_federated(&data.clients, &data.test, &cfg.train_config(stream_seed(cfg.seed, TAG_TRAIN))),
    );
    let (shared, trace) = shared_run?;
    let baseline = baseline.stage("run_federated")?;
    let plan = complete_plan(plan, net, &shared)?;
    let rates = head_rates(assignment, net)?;
    let sharing_delay = sharing_delay(&plan, &rates, cfg.compute.bits_per_sample).stage("delay")?;
    let samples: Vec<usize> = shared.iter().map(ClientDataset::len).collect();
    let freqs: Vec<f64> = (0..samples.len()).map(|k| plan.frequencies[&k]).collect();
    let round_delay = round_delay_for(&net.devices, &samples, &freqs)?;
    let base_samples: Vec<usize> = data.clients.iter().map(ClientDataset::len).collect();
    let base_freqs = frequencies_for(&net.devices, &base_samples)?;
    let baseline_round_delay = round_delay_for(&net.devices, &base_samples, &base_freqs)?;
    Ok(Simulation { shared, trace, baseline, sharing_delay, round_delay, baseline_round_delay })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub num_clients: usize,
    pub num_heads: usize,
    pub num_members: usize,
    pub average_emd: f64,
    pub post_sharing_emd: f64,
    pub shared_samples: usize,
    pub predicted_rounds: Option<f64>,
    pub predicted_total: Option<f64>,
    pub sharing_delay: f64,
    pub round_delay: f64,
    pub rounds: Option<usize>,
    /// `τ^s + T·τ` with the measured `T`.
    pub total_delay: Option<f64>,
    pub final_accuracy: f64,
    pub baseline_round_delay: f64,
    pub baseline_rounds: Option<usize>,
    pub baseline_total_delay: Option<f64>,
    pub baseline_accuracy: f64,
    /// `1 − total/baseline`.
    pub improvement: Option<f64>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl Summary {
    pub const CSV_HEADER: &'static str = "seed,num_clients,num_heads,num_members,average_emd,post_sharing_emd,shared_samples,predicted_rounds,predicted_total,sharing_delay,round_delay,rounds,total_delay,final_accuracy,baseline_round_delay,baseline_rounds,baseline_total_delay,baseline_accuracy,improvement";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.num_clients,
            self.num_heads,
            self.num_members,
            self.average_emd,
            self.post_sharing_emd,
            self.shared_samples,
            opt(&self.predicted_rounds),
            opt(&self.predicted_total),
            self.sharing_delay,
            self.round_delay,
            opt(&self.rounds),
            opt(&self.total_delay),
            self.final_accuracy,
            self.baseline_round_delay,
            opt(&self.baseline_rounds),
            opt(&self.baseline_total_delay),
            self.baseline_accuracy,
            opt(&self.improvement),
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Everything a pipeline run produces, in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub data: GeneratedData,
    pub network: Network,
    pub graph: ConstrainedGraph,
    pub assignment: ClusterAssignment,
    pub calibration: Option<Calibration>,
    pub round_model: Option<RoundModel>,
    pub jfvo: Option<JfvoResult>,
    pub plan: SharingPlan,
    pub simulation: Simulation,
    pub summary: Summary,
}

/// Writes `contents` to `dir/name`, creating parent directories.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.into(), source })?;
    }
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn positions_csv(positions: &[[f64; 2]]) -> String {
    let mut out = String::from("client_id,x,y\n");
    for (k, p) in positions.iter().enumerate() {
        let _ = writeln!(out, "{k},{},{}", p[0], p[1]);
    }
    out
}

pub fn edges_csv(graph: &ConstrainedGraph) -> String {
    let mut out = String::from("a,b,closeness,rate\n");
    for (&(a, b), e) in &graph.edges {
        let _ = writeln!(out, "{a},{b},{},{}", e.closeness, e.rate);
    }
    out
}

/// Per-cluster volume, worst-link SINR and multicast rate.
pub fn cluster_table_csv(assignment: &ClusterAssignment, plan: &SharingPlan, net: &Network) -> CliResult<String> {
    let mut out = String::from("head,members,volume,min_sinr,rate\n");
    for (m, cs) in assignment.sharing_heads() {
        let mut sinr = f64::INFINITY;
        for &c in cs {
            let d = distance(net.positions[m], net.positions[c]);
            sinr = sinr.min(net.channel.sinr(d, &net.radio).stage("report")?);
        }
        let rate = cluster_multicast_rate(m, cs, &net.positions, &net.channel, &net.radio).stage("report")?;
        let members: Vec<String> = cs.iter().map(ToString::to_string).collect();
        let vol = plan.volumes.get(&m).copied().unwrap_or(0);
        let _ = writeln!(out, "{m},{},{vol},{sinr},{rate}", members.join(" "));
    }
    Ok(out)
}

pub fn plan_json(plan: &SharingPlan) -> String {
    to_json(plan)
}

/// Runs every stage. With `out` set, artifacts are written as each stage
/// finishes, so a failing stage leaves the earlier ones on disk.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> CliResult<PipelineRun> {
    cfg.validate()?;
    let write = |name: &str, body: &str| -> CliResult<()> {
        match out {
            Some(dir) => write_artifact(dir, name, body),
            None => Ok(()),
        }
    };
    write("config.json", &cfg.to_json())?;

    let data = partition(cfg)?;
    let (stats, g) = data.heterogeneity_inputs();
    let hetero = HeterogeneityReport::compute(&stats, &g).stage("partition")?;
    if let Some(dir) = out {
        dump_clients(&dir.join("data/before"), &data.clients).stage("partition")?;
    }

    let net = network(cfg)?;
    write("positions.csv", &positions_csv(&net.positions))?;
    let (graph, assignment) = cluster(cfg, &data, &net)?;
    write("graph_edges.csv", &edges_csv(&graph))?;
    write("clusters.csv", &assignment.to_csv())?;
    write("assignment.json", &to_json(&assignment))?;

    let sharing = assignment.sharing_heads().next().is_some();
    let (calibration, round_model, jfvo_res, plan) = if sharing {
        let cal = calibrate(cfg, &assignment)?;
        write("calibration.csv", &cal.to_csv())?;
        write("rounds_curve.csv", &cal.curve_csv())?;
        let model = fit_rounds(&cal.samples())?;
        write("round_model.json", &to_json(&model))?;
        let ctx = objective_context(cfg, &data, &assignment, &net, model.clone())?;
        let res = optimize(cfg, &ctx)?;
        write("jfvo_trace.csv", &trace_to_csv(&res.trace))?;
        let plan = res.plan.clone();
        (Some(cal), Some(model), Some(res), plan)
    } else {
        log::info!("no cluster has members; running plain federated averaging");
        let empty = Calibration { fractions: vec![], curve: vec![] };
        write("calibration.csv", &empty.to_csv())?;
        write("rounds_curve.csv", &empty.curve_csv())?;
        write("round_model.json", "null\n")?;
        write("jfvo_trace.csv", &trace_to_csv(&[]))?;
        (None, None, None, SharingPlan::default())
    };

    let sim = simulate(cfg, &data, &assignment, &plan, &net)?;
    let plan = complete_plan(&plan, &net, &sim.shared)?;
    write("plan.json", &plan_json(&plan))?;
    write("cluster_table.csv", &cluster_table_csv(&assignment, &plan, &net)?)?;
    if let Some(dir) = out {
        dump_clients(&dir.join("data/after"), &sim.shared).stage("apply_sharing")?;
    }
    write("training_trace.csv", &sim.trace.to_csv())?;
    write("baseline_trace.csv", &sim.baseline.to_csv())?;

    let post = plan_emd(cfg, &data, &assignment, &plan)?;
    write("heterogeneity.csv", &hetero.clone().with_post_sharing(post).to_csv())?;
    let total = sim.trace.rounds_to_target.map(|t| sim.sharing_delay + t as f64 * sim.round_delay);
    let baseline_total = sim.baseline.rounds_to_target.map(|t| t as f64 * sim.baseline_round_delay);
    let summary = Summary {
        seed: cfg.seed,
        num_clients: data.clients.len(),
        num_heads: assignment.sharing_heads().count(),
        num_members: assignment.num_members(),
        average_emd: hetero.average_emd,
        post_sharing_emd: post,
        shared_samples: plan.volumes.values().sum(),
        predicted_rounds: jfvo_res.as_ref().map(|r| r.evaluation.rounds),
        predicted_total: jfvo_res.as_ref().map(|r| r.evaluation.total),
        sharing_delay: sim.sharing_delay,
        round_delay: sim.round_delay,
        rounds: sim.trace.rounds_to_target,
        total_delay: total,
        final_accuracy: sim.trace.final_accuracy,
        baseline_round_delay: sim.baseline_round_delay,
        baseline_rounds: sim.baseline.rounds_to_target,
        baseline_total_delay: baseline_total,
        baseline_accuracy: sim.baseline.final_accuracy,
        improvement: total.zip(baseline_total).map(|(t, b)| 1.0 - t / b),
    };
    write("summary.json", &to_json(&summary))?;
    write("summary.csv", &summary.to_csv())?;
    Ok(PipelineRun {
        data,
        network: net,
        graph,
        assignment,
        calibration,
        round_model,
        jfvo: jfvo_res,
        plan,
        simulation: sim,
        summary,
    })
}

/// Artifacts every pipeline run leaves in its output directory.
pub const PIPELINE_ARTIFACTS: &[&str] = &[
    "config.json",
    "positions.csv",
    "graph_edges.csv",
    "clusters.csv",
    "assignment.json",
    "calibration.csv",
    "rounds_curve.csv",
    "round_model.json",
    "jfvo_trace.csv",
    "plan.json",
    "cluster_table.csv",
    "training_trace.csv",
    "baseline_trace.csv",
    "heterogeneity.csv",
    "summary.json",
    "summary.csv",
    "data/before",
    "data/after",
];

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })
}

/// `emd,rounds` pairs from a CSV with a header row.
pub fn read_rounds_csv(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    let bad = |line: usize, what: &str| CliError::Config(format!("{}:{line}: {what}", path.display()));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let mut next = || -> CliResult<f64> {
            it.next()
                .ok_or_else(|| bad(i + 1, "expected two columns"))?
                .trim()
                .parse()
                .map_err(|_| bad(i + 1, "not a number"))
        };
        out.push((next()?, next()?));
    }
    Ok(out)
}

pub fn output_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| cfg.output_dir.clone())
}
