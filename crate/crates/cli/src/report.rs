//! Text summary and plot-data files from a pipeline output directory.

use std::fmt::Write as _;
use std::path::Path;

use fedshare_core::datagen::{class_histograms, ClientDataset};
use fedshare_core::roundsfit::RoundModel;

use crate::error::{CliError, CliResult};
use crate::pipeline::{read_json, write_artifact, Summary, PIPELINE_ARTIFACTS};

pub const FIGURE_FILES: &[&str] = &[
    "fig_loss_curves.csv",
    "fig_emd_rounds.csv",
    "fig_jfvo_convergence.csv",
    "fig_cluster_table.csv",
    "fig_label_histograms.csv",
];

pub fn missing_artifacts(dir: &Path) -> Vec<String> {
    PIPELINE_ARTIFACTS
        .iter()
        .filter(|name| !dir.join(name).exists())
        .map(|s| s.to_string())
        .collect()
}

fn read(dir: &Path, name: &str) -> CliResult<String> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })
}

fn body(text: &str) -> impl Iterator<Item = &str> {
    text.lines().skip(1).filter(|l| !l.is_empty())
}

fn load_clients(dir: &Path) -> CliResult<Vec<ClientDataset>> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(format!("client_{}.bin", out.len()));
        if !path.exists() {
            break;
        }
        let file = std::fs::File::open(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        out.push(ClientDataset::read_binary(&mut std::io::BufReader::new(file))?);
    }
    Ok(out)
}

fn loss_curves(dir: &Path) -> CliResult<String> {
    let mut out = String::from("run,round,loss,accuracy\n");
    for (run, file) in [("shared", "training_trace.csv"), ("baseline", "baseline_trace.csv")] {
        for line in body(&read(dir, file)?) {
            let _ = writeln!(out, "{run},{line}");
        }
    }
    Ok(out)
}

fn emd_rounds(dir: &Path) -> CliResult<String> {
    let model: Option<RoundModel> = read_json(&dir.join("round_model.json"))?;
    let mut out = String::from("fraction,emd,mean_rounds,predicted_rounds\n");
    for line in body(&read(dir, "rounds_curve.csv")?) {
        let cols: Vec<&str> = line.split(',').collect();
        let predicted = match (&model, cols.get(1).and_then(|v| v.parse::<f64>().ok())) {
            (Some(m), Some(d)) => m.predict(d).map(|t| t.to_string()).unwrap_or_default(),
            _ => String::new(),
        };
        let _ = writeln!(out, "{},{},{},{predicted}", cols[0], cols.get(1).unwrap_or(&""), cols.get(2).unwrap_or(&""));
    }
    Ok(out)
}

fn histograms(dir: &Path) -> CliResult<String> {
    let mut out = String::from("stage,client_id,class,count\n");
    for stage in ["before", "after"] {
        let clients = load_clients(&dir.join("data").join(stage))?;
        for (k, counts) in class_histograms(&clients) {
            for (c, n) in counts.iter().enumerate() {
                let _ = writeln!(out, "{stage},{k},{c},{n}");
            }
        }
    }
    Ok(out)
}

fn text_summary(dir: &Path, s: &Summary) -> CliResult<String> {
    let fmt = |v: Option<f64>| v.map_or("not reached".to_string(), |v| format!("{v:.4}"));
    let mut out = String::new();
    let _ = writeln!(out, "run directory: {}", dir.display());
    let _ = writeln!(out, "seed: {}", s.seed);
    let _ = writeln!(out, "clients: {} ({} sharing heads, {} members)", s.num_clients, s.num_heads, s.num_members);
    let _ = writeln!(out, "average EMD: {:.4} -> {:.4} after sharing", s.average_emd, s.post_sharing_emd);
    let _ = writeln!(out, "shared samples: {}", s.shared_samples);
    let _ = writeln!(out, "sharing delay: {:.4} s", s.sharing_delay);
    let _ = writeln!(
        out,
        "with sharing: {} rounds x {:.4} s, total {} s, accuracy {:.4}",
        s.rounds.map_or("-".into(), |r| r.to_string()),
        s.round_delay,
        fmt(s.total_delay),
        s.final_accuracy
    );
    let _ = writeln!(
        out,
        "no sharing:   {} rounds x {:.4} s, total {} s, accuracy {:.4}",
        s.baseline_rounds.map_or("-".into(), |r| r.to_string()),
        s.baseline_round_delay,
        fmt(s.baseline_total_delay),
        s.baseline_accuracy
    );
    if let Some(p) = s.predicted_total {
        let _ = writeln!(out, "optimizer prediction: {:.4} rounds, total {p:.4} s", s.predicted_rounds.unwrap_or(f64::NAN));
    }
    let _ = writeln!(out, "delay reduction: {}", s.improvement.map_or("n/a".into(), |v| format!("{:.1}%", 100.0 * v)));
    let clusters = read(dir, "cluster_table.csv")?;
    if body(&clusters).next().is_some() {
        let _ = writeln!(out, "\nclusters (head, members, volume, min SINR, rate):");
        for line in body(&clusters) {
            let _ = writeln!(out, "  {line}");
        }
    }
    Ok(out)
}

/// Writes `report.txt` and the figure CSVs next to the artifacts.
pub fn report(dir: &Path) -> CliResult<String> {
    let missing = missing_artifacts(dir);
    if !missing.is_empty() {
        return Err(CliError::MissingArtifacts { dir: dir.into(), missing });
    }
    write_artifact(dir, "fig_loss_curves.csv", &loss_curves(dir)?)?;
    write_artifact(dir, "fig_emd_rounds.csv", &emd_rounds(dir)?)?;
    write_artifact(dir, "fig_jfvo_convergence.csv", &read(dir, "jfvo_trace.csv")?)?;
    write_artifact(dir, "fig_cluster_table.csv", &read(dir, "cluster_table.csv")?)?;
    write_artifact(dir, "fig_label_histograms.csv", &histograms(dir)?)?;
    let summary: Summary = read_json(&dir.join("summary.json"))?;
    let text = text_summary(dir, &summary)?;
    write_artifact(dir, "report.txt", &text)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_lists_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(dir.path()).unwrap_err();
        match &err {
            CliError::MissingArtifacts { missing, .. } => assert_eq!(missing.len(), PIPELINE_ARTIFACTS.len()),
            e => panic!("unexpected {e}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("summary.json") && msg.contains("plan.json"));
        assert_eq!(err.exit_code(), 2);
    }
}
