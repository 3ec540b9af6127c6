//! Subcommand dispatch.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fedshare_core::datagen::dump_clients;
use fedshare_core::jfvo::trace_to_csv;
use fedshare_core::roundsfit::RoundModel;
use fedshare_core::{ClusterAssignment, HeterogeneityReport, SharingPlan};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::pipeline::{
    calibrate, cluster, cluster_table_csv, edges_csv, fit_rounds, network, objective_context, optimize, partition,
    plan_emd, plan_json, positions_csv, read_json, read_rounds_csv, run_pipeline, simulate, to_json,
    write_artifact, Network,
};
use crate::report::report;
use crate::sweep::{run_sweep, Axis};
use crate::theory_check::run_theory;

#[derive(Debug, Parser)]
#[command(name = "fedshare", version, about = "Clustered data sharing for federated edge learning")]
pub struct Cli {
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate client datasets and their heterogeneity report.
    Partition,
    /// Build the sharing graph and cluster it.
    Cluster,
    /// Fit the rounds law from a CSV of `emd,rounds`, or calibrate it.
    FitRounds {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Optimize shared volumes and frequencies.
    Optimize {
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        round_model: Option<PathBuf>,
    },
    /// Apply a sharing plan and train, next to the no-sharing baseline.
    Simulate {
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Every stage end to end.
    Pipeline,
    /// One-parameter sweep.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Estimate the analysis constants and check the bounds.
    TheoryCheck,
    /// Summarize a pipeline output directory.
    Report {
        /// Defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// Loads the config and applies the command-line overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn thread_pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli)?;
    let pool = thread_pool(cfg.workers)?;
    pool.install(|| dispatch(&cfg, &cli.command))
}

fn assignment_for(cfg: &RunConfig, file: Option<&Path>, net: &Network) -> CliResult<ClusterAssignment> {
    match file {
        Some(p) => read_json(p),
        None => Ok(cluster(cfg, &partition(cfg)?, net)?.1),
    }
}

fn dispatch(cfg: &RunConfig, command: &Command) -> CliResult<()> {
    let out = cfg.output_dir.as_path();
    match command {
        Command::Partition => {
            write_artifact(out, "config.json", &cfg.to_json())?;
            let data = partition(cfg)?;
            let (stats, g) = data.heterogeneity_inputs();
            let h = HeterogeneityReport::compute(&stats, &g).stage("partition")?;
            write_artifact(out, "heterogeneity.csv", &h.to_csv())?;
            dump_clients(&out.join("data/before"), &data.clients).stage("partition")?;
            println!("average EMD {:.6} over {} clients", h.average_emd, stats.len());
        }
        Command::Cluster => {
            let data = partition(cfg)?;
            let net = network(cfg)?;
            let (graph, a) = cluster(cfg, &data, &net)?;
            write_artifact(out, "positions.csv", &positions_csv(&net.positions))?;
            write_artifact(out, "graph_edges.csv", &edges_csv(&graph))?;
            write_artifact(out, "clusters.csv", &a.to_csv())?;
            write_artifact(out, "assignment.json", &to_json(&a))?;
            println!("{} edges, {} sharing heads, {} members", graph.edges.len(), a.sharing_heads().count(), a.num_members());
        }
        Command::FitRounds { input } => {
            let samples = match input {
                Some(p) => read_rounds_csv(p)?,
                None => {
                    let net = network(cfg)?;
                    let a = assignment_for(cfg, None, &net)?;
                    if a.sharing_heads().next().is_none() {
                        return Err(CliError::Config("no cluster has members; nothing to calibrate".into()));
                    }
                    let cal = calibrate(cfg, &a)?;
                    write_artifact(out, "calibration.csv", &cal.to_csv())?;
                    write_artifact(out, "rounds_curve.csv", &cal.curve_csv())?;
                    cal.samples()
                }
            };
            let model = fit_rounds(&samples)?;
            write_artifact(out, "round_model.json", &to_json(&model))?;
            println!("beta {:?}, nmse {:.4}", model.beta, model.nmse);
        }
        Command::Optimize { assignment, round_model } => {
            let data = partition(cfg)?;
            let net = network(cfg)?;
            let a = assignment_for(cfg, assignment.as_deref(), &net)?;
            if a.sharing_heads().next().is_none() {
                write_artifact(out, "plan.json", &plan_json(&SharingPlan::default()))?;
                write_artifact(out, "jfvo_trace.csv", &trace_to_csv(&[]))?;
                println!("no cluster has members; empty plan");
                return Ok(());
            }
            let model: RoundModel = match round_model {
                Some(p) => read_json(p)?,
                None => fit_rounds(&calibrate(cfg, &a)?.samples())?,
            };
            let ctx = objective_context(cfg, &data, &a, &net, model)?;
            let res = optimize(cfg, &ctx)?;
            write_artifact(out, "plan.json", &plan_json(&res.plan))?;
            write_artifact(out, "jfvo_trace.csv", &trace_to_csv(&res.trace))?;
            write_artifact(out, "cluster_table.csv", &cluster_table_csv(&a, &res.plan, &net)?)?;
            println!(
                "objective {:.6} s ({} rounds predicted), shared {:?}",
                res.evaluation.total, res.evaluation.rounds, res.plan.volumes
            );
        }
        Command::Simulate { assignment, plan } => {
            let data = partition(cfg)?;
            let net = network(cfg)?;
            let a = assignment_for(cfg, assignment.as_deref(), &net)?;
            let plan: SharingPlan = match plan {
                Some(p) => read_json(p)?,
                None => SharingPlan::default(),
            };
            let sim = simulate(cfg, &data, &a, &plan, &net)?;
            write_artifact(out, "training_trace.csv", &sim.trace.to_csv())?;
            write_artifact(out, "baseline_trace.csv", &sim.baseline.to_csv())?;
            dump_clients(&out.join("data/after"), &sim.shared).stage("apply_sharing")?;
            println!(
                "post-sharing EMD {:.6}; rounds {:?} vs baseline {:?}",
                plan_emd(cfg, &data, &a, &plan)?,
                sim.trace.rounds_to_target,
                sim.baseline.rounds_to_target
            );
        }
        Command::Pipeline => {
            let run = run_pipeline(cfg, Some(out))?;
            let s = &run.summary;
            println!(
                "total delay {} s vs no sharing {} s (improvement {})",
                s.total_delay.map_or("n/a".into(), |v| format!("{v:.4}")),
                s.baseline_total_delay.map_or("n/a".into(), |v| format!("{v:.4}")),
                s.improvement.map_or("n/a".into(), |v| format!("{:.1}%", 100.0 * v)),
            );
        }
        Command::Sweep { axis, values } => {
            let axis: Axis = axis.parse()?;
            let res = run_sweep(cfg, axis, values)?;
            write_artifact(out, "config.json", &cfg.to_json())?;
            write_artifact(out, "sweep.csv", &res.points_csv())?;
            write_artifact(out, "sweep_curves.csv", &res.curves_csv())?;
            write_artifact(out, "sweep_summary.csv", &res.summary_csv())?;
            print!("{}", res.summary_csv());
        }
        Command::TheoryCheck => {
            let res = run_theory(cfg)?;
            write_artifact(out, "theory.json", &to_json(&res))?;
            write_artifact(out, "theory_trend.csv", &res.trend_csv())?;
            println!(
                "dissimilarity {} ({} checks), drift {} ({} points), rate {} (lhs {:.4e} <= bound {:.4e})",
                verdict(res.dissimilarity.passed),
                res.dissimilarity.checks,
                verdict(res.drift.passed),
                res.drift.points,
                verdict(res.rate.passed),
                res.rate.lhs,
                res.rate.bound_inflated.total
            );
        }
        Command::Report { dir } => {
            let dir = dir.as_deref().unwrap_or(out);
            print!("{}", report(dir)?);
        }
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}
