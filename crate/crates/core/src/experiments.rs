//! Run orchestration and reporting: manifests, sweeps over the blend/threshold
//! pairs and the mixup strength, and comparison reports with accuracy curves.
//!
//! Reports are pure functions of the metrics logs they read: grouping uses
//! ordered maps and floats are printed at fixed precision, so re-running on
//! the same logs is byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex_prefix, RepPolicy, TrainConfig};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::metrics::{read_log, MetricsRecord, MetricsWriter, SCHEMA_VERSION};
use crate::trainer::{self, checkpoint_hash, EpochSummary, Trainer};

/// Everything needed to reproduce a run, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset: serde_json::Value,
    pub code_version: String,
    pub outputs: RunOutputs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutputs {
    pub metrics_log: String,
    pub checkpoint: String,
    pub report: String,
}

/// Best-effort code version: the git commit when running inside a checkout.
pub fn code_version() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Deterministic run id from config, seed and dataset description.
pub fn run_id(config: &TrainConfig, dataset: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.hash().as_bytes());
    hasher.update(config.seed.to_le_bytes());
    hasher.update(dataset.to_string().as_bytes());
    hex_prefix(&hasher.finalize(), 12)
}

pub struct RunArtifacts {
    pub manifest: RunManifest,
    pub final_summary: Option<EpochSummary>,
    pub checkpoint_hash: String,
}

/// Train once, writing metrics log, checkpoint, manifest and a short report
/// into `out_dir`.
pub fn run_training(
    config: TrainConfig,
    data: &DatasetBundle,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let dataset = data.descriptor();
    let id = run_id(&config, &dataset);
    let arm = config.arm_label();
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.json");
    let report_path = out_dir.join("report.txt");

    let mut metrics = MetricsWriter::create(&metrics_path)?;
    metrics.write(&MetricsRecord::RunHeader {
        schema: SCHEMA_VERSION,
        run_id: id.clone(),
        arm: arm.clone(),
        seed: config.seed,
        num_classes: config.num_classes,
        config: config.clone(),
        dataset: dataset.clone(),
        code_version: code_version(),
    })?;

    let mut trainer = Trainer::new(config.clone(), data)?;
    let run_result = trainer.run(data, Some(&mut metrics));
    if let Err(Error::NonFinite { epoch, step, ref report }) = run_result {
        // dump diagnostic state for post-mortem before surfacing the error
        let dump = serde_json::json!({
            "error": "non-finite loss",
            "epoch": epoch,
            "step": step,
            "losses": report,
            "config": config,
        });
        std::fs::write(
            out_dir.join("diagnostic.json"),
            serde_json::to_string_pretty(&dump)?,
        )?;
    }
    run_result?;

    let checkpoint = trainer.checkpoint();
    let ck_hash = checkpoint_hash(&checkpoint)?;
    std::fs::write(&checkpoint_path, serde_json::to_string(&checkpoint)?)?;

    let outcome_summaries = trainer.summaries().to_vec();
    let final_summary = outcome_summaries.last().cloned();
    let mut report = String::new();
    report.push_str(&format!("run {id} arm {arm} seed {}\n", config.seed));
    report.push_str(&format!("epochs: {}\n", config.epochs));
    if let Some(s) = &final_summary {
        report.push_str(&format!(
            "final target accuracy: {}\n",
            s.target_accuracy.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        ));
        report.push_str(&format!(
            "final pseudo-label accuracy: {}\n",
            s.pseudo_label_accuracy
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        ));
        report.push_str(&format!("pseudo set size: {}\n", s.pseudo_set_size));
    } else {
        report.push_str("no epochs were run\n");
    }
    report.push_str(&format!("checkpoint hash: {ck_hash}\n"));
    std::fs::write(&report_path, &report)?;

    let manifest = RunManifest {
        schema: SCHEMA_VERSION,
        run_id: id,
        arm,
        seed: config.seed,
        config_hash: config.hash(),
        config,
        dataset,
        code_version: code_version(),
        outputs: RunOutputs {
            metrics_log: metrics_path.display().to_string(),
            checkpoint: checkpoint_path.display().to_string(),
            report: report_path.display().to_string(),
        },
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(RunArtifacts {
        manifest,
        final_summary,
        checkpoint_hash: ck_hash,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Grid for the sensitivity sweeps: (gamma, delta) pairs for the blend, the
/// mixup strength values, and the seeds each point is averaged over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub gamma_delta: Vec<(f64, f64)>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            gamma_delta: vec![(0.05, 0.2), (0.1, 0.24), (0.2, 0.3), (0.3, 0.36)],
            alphas: vec![0.1, 0.2, 0.4, 0.8, 1.0],
            seeds: vec![0, 1, 2],
        }
    }
}

impl SweepSpec {
    /// Parse `sweep_*` keys out of a flat key=value config body. Keys that
    /// are not sweep-related are ignored here (the train-config parser owns
    /// them).
    pub fn from_file_contents(contents: &str) -> Result<Self> {
        let mut spec = SweepSpec::default();
        for raw in contents.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "sweep_gamma_delta" => {
                    spec.gamma_delta = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|pair| {
                            let (g, d) = pair.split_once(':').ok_or_else(|| {
                                Error::config(
                                    "sweep_gamma_delta",
                                    format!("expected gamma:delta, got `{pair}`"),
                                )
                            })?;
                            let g: f64 = g.trim().parse().map_err(|_| {
                                Error::config("sweep_gamma_delta", "bad gamma value")
                            })?;
                            let d: f64 = d.trim().parse().map_err(|_| {
                                Error::config("sweep_gamma_delta", "bad delta value")
                            })?;
                            Ok((g, d))
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
                "sweep_alphas" => {
                    spec.alphas = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| Error::config("sweep_alphas", "bad alpha value"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
                "sweep_seeds" => {
                    spec.seeds = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| Error::config("sweep_seeds", "bad seed value"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
                _ => {}
            }
        }
        Ok(spec)
    }
}

pub struct SweepOutcome {
    pub table: String,
    pub failures: Vec<(String, String)>,
}

/// One run per grid point per seed; points fail in isolation and the
/// aggregate table reports means over the seeds that succeeded.
pub fn run_sweep(
    base: &TrainConfig,
    data: &DatasetBundle,
    spec: &SweepSpec,
    out_dir: &Path,
) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut failures: Vec<(String, String)> = Vec::new();
    let mut table = String::new();

    let seed_list = spec
        .seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(", ");

    table.push_str(&format!(
        "gamma/delta sweep (final target accuracy, mean over seeds [{seed_list}])\n"
    ));
    table.push_str("gamma   delta   target_acc\n");
    for &(gamma, delta) in &spec.gamma_delta {
        let label = format!("gd_{gamma}_{delta}");
        let mut accs = Vec::new();
        for &seed in &spec.seeds {
            let mut config = base.clone();
            config.gamma = gamma;
            config.delta = delta;
            config.seed = seed;
            let dir = out_dir.join(&label).join(format!("seed{seed}"));
            match run_training(config, data, &dir) {
                Ok(art) => {
                    if let Some(acc) = art.final_summary.and_then(|s| s.target_accuracy) {
                        accs.push(acc);
                    }
                }
                Err(e) => failures.push((format!("{label}/seed{seed}"), e.to_string())),
            }
        }
        if accs.is_empty() {
            table.push_str(&format!("{gamma:<7} {delta:<7} FAILED\n"));
        } else {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            table.push_str(&format!("{gamma:<7} {delta:<7} {mean:.4}\n"));
        }
    }

    table.push_str(&format!(
        "\nalpha sweep (final target accuracy, mean over seeds [{seed_list}])\n"
    ));
    table.push_str("alpha   target_acc\n");
    for &alpha in &spec.alphas {
        let label = format!("alpha_{alpha}");
        let mut accs = Vec::new();
        for &seed in &spec.seeds {
            let mut config = base.clone();
            config.alpha = alpha;
            config.seed = seed;
            let dir = out_dir.join(&label).join(format!("seed{seed}"));
            match run_training(config, data, &dir) {
                Ok(art) => {
                    if let Some(acc) = art.final_summary.and_then(|s| s.target_accuracy) {
                        accs.push(acc);
                    }
                }
                Err(e) => failures.push((format!("{label}/seed{seed}"), e.to_string())),
            }
        }
        if accs.is_empty() {
            table.push_str(&format!("{alpha:<7} FAILED\n"));
        } else {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            table.push_str(&format!("{alpha:<7} {mean:.4}\n"));
        }
    }

    std::fs::write(out_dir.join("sweep.txt"), &table)?;
    Ok(SweepOutcome { table, failures })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// A metrics log pulled back into memory.
pub struct RunLog {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub num_classes: usize,
    pub rep_policy: RepPolicy,
    pub epochs: Vec<EpochSummary>,
}

pub fn load_run_log(path: &Path) -> Result<RunLog> {
    let records = read_log(path)?;
    let mut header: Option<(String, String, u64, usize, RepPolicy)> = None;
    let mut epochs = Vec::new();
    for record in records {
        match record {
            MetricsRecord::RunHeader {
                run_id,
                arm,
                seed,
                num_classes,
                config,
                ..
            } => header = Some((run_id, arm, seed, num_classes, config.rep_policy)),
            MetricsRecord::Epoch { summary, .. } => epochs.push(summary),
            MetricsRecord::Step { .. } => {}
        }
    }
    let (run_id, arm, seed, num_classes, rep_policy) = header.ok_or_else(|| {
        Error::IncompatibleLogs(format!("{} has no run header", path.display()))
    })?;
    Ok(RunLog {
        run_id,
        arm,
        seed,
        num_classes,
        rep_policy,
        epochs,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn fmt_opt(values: &[f64]) -> String {
    if values.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.4}", mean(values))
    }
}

/// Per-epoch series of an arm, averaged over its runs.
fn arm_series(
    runs: &[&RunLog],
    select: impl Fn(&EpochSummary) -> Option<f64>,
) -> Vec<(f64, f64)> {
    let max_epochs = runs.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    let mut series = Vec::new();
    for e in 0..max_epochs {
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.epochs.get(e).and_then(&select))
            .collect();
        if !vals.is_empty() {
            series.push((e as f64, mean(&vals)));
        }
    }
    series
}

/// Write the comparison table, per-epoch curve data and SVG plots for a set
/// of runs. All logs must agree on the class count.
pub fn write_report(logs: &[RunLog], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if logs.is_empty() {
        return Err(Error::IncompatibleLogs("no logs given".to_string()));
    }
    let c0 = logs[0].num_classes;
    for log in logs {
        if log.num_classes != c0 {
            return Err(Error::IncompatibleLogs(format!(
                "run {} has {} classes, expected {c0}",
                log.run_id, log.num_classes
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut by_arm: BTreeMap<String, Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        by_arm.entry(log.arm.clone()).or_default().push(log);
    }

    // comparison table over final-epoch values
    let mut text = String::new();
    text.push_str("arm            runs  target_acc        pseudo_acc  coverage\n");
    for (arm, runs) in &by_arm {
        let finals: Vec<&EpochSummary> =
            runs.iter().filter_map(|r| r.epochs.last()).collect();
        let target: Vec<f64> = finals.iter().filter_map(|s| s.target_accuracy).collect();
        let pseudo: Vec<f64> = finals
            .iter()
            .filter_map(|s| s.pseudo_label_accuracy)
            .collect();
        let coverage_counts: Vec<f64> = finals.iter().map(|s| s.pseudo_set_size as f64).collect();
        let target_cell = if target.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.4}+/-{:.4}", mean(&target), std_dev(&target))
        };
        text.push_str(&format!(
            "{arm:<14} {:<5} {target_cell:<17} {:<11} {:.1}\n",
            runs.len(),
            fmt_opt(&pseudo),
            mean(&coverage_counts),
        ));
    }
    text.push('\n');
    for (arm, runs) in &by_arm {
        let ids: Vec<String> = runs
            .iter()
            .map(|r| format!("{} (seed {})", r.run_id, r.seed))
            .collect();
        text.push_str(&format!("{arm}: {}\n", ids.join(", ")));
    }

    // class-representation policy comparison, when both policies appear
    let mut by_policy: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for log in logs {
        if let Some(acc) = log.epochs.last().and_then(|s| s.target_accuracy) {
            let key = match log.rep_policy {
                RepPolicy::One => "one",
                RepPolicy::Ensemble => "ensemble",
            };
            by_policy.entry(key).or_default().push(acc);
        }
    }
    if by_policy.len() == 2 {
        text.push_str("\nclass-representation policy comparison (final target accuracy)\n");
        for (policy, accs) in &by_policy {
            text.push_str(&format!(
                "{policy:<9} {:.4} over {} runs\n",
                mean(accs),
                accs.len()
            ));
        }
    }

    let comparison_path = out_dir.join("comparison.txt");
    std::fs::write(&comparison_path, &text)?;

    // per-epoch curves, columnar
    let mut curves = String::new();
    curves.push_str("arm,epoch,target_acc,pseudo_acc,coverage_count\n");
    for (arm, runs) in &by_arm {
        let max_epochs = runs.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
        for e in 0..max_epochs {
            let t: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.epochs.get(e).and_then(|s| s.target_accuracy))
                .collect();
            let p: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.epochs.get(e).and_then(|s| s.pseudo_label_accuracy))
                .collect();
            let cov: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.epochs.get(e).map(|s| s.pseudo_set_size as f64))
                .collect();
            curves.push_str(&format!(
                "{arm},{e},{},{},{}\n",
                fmt_opt(&t),
                fmt_opt(&p),
                fmt_opt(&cov)
            ));
        }
    }
    let curves_path = out_dir.join("curves.csv");
    std::fs::write(&curves_path, &curves)?;

    // vector plots
    let mut outputs = vec![comparison_path, curves_path];
    for (name, title, select) in [
        (
            "target_accuracy.svg",
            "Target accuracy by epoch",
            Box::new(|s: &EpochSummary| s.target_accuracy) as Box<dyn Fn(&EpochSummary) -> Option<f64>>,
        ),
        (
            "pseudo_accuracy.svg",
            "Pseudo-label accuracy by epoch",
            Box::new(|s: &EpochSummary| s.pseudo_label_accuracy),
        ),
        (
            "coverage.svg",
            "Pseudo-labeled set size by epoch",
            Box::new(|s: &EpochSummary| Some(s.pseudo_set_size as f64)),
        ),
    ] {
        let series: Vec<(String, Vec<(f64, f64)>)> = by_arm
            .iter()
            .map(|(arm, runs)| (arm.clone(), arm_series(runs, &select)))
            .filter(|(_, s)| !s.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = out_dir.join(name);
        svg_line_plot(title, &series, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}

/// Minimal deterministic SVG line plot: fixed canvas, fixed palette, fixed
/// float formatting.
fn svg_line_plot(title: &str, series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 60.0;
    const MR: f64 = 150.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
    ];

    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"16\">{title}</text>\n",
        ML
    ));
    out.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    for (label, value) in [("min", ymin), ("max", ymax)] {
        let y = if label == "min" { sy(ymin) } else { sy(ymax) };
        out.push_str(&format!(
            "<text x=\"4\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">{value:.3}</text>\n",
            y + 4.0
        ));
    }
    for (label, value) in [("min", xmin), ("max", xmax)] {
        let x = if label == "min" { sx(xmin) } else { sx(xmax) };
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">{value:.0}</text>\n",
            x - 8.0,
            H - MB + 18.0
        ));
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - MR + 10.0,
            MT + 16.0 * (i as f64 + 1.0)
        ));
    }
    out.push_str("</svg>\n");
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Evaluate a saved checkpoint on one domain of a dataset.
pub fn evaluate_checkpoint(checkpoint_path: &Path, data: &DatasetBundle, domain: &str) -> Result<f64> {
    let checkpoint = Trainer::load_checkpoint(checkpoint_path)?;
    let model = trainer::model_from_checkpoint(&checkpoint)?;
    let samples = data
        .domains
        .get(domain)
        .ok_or_else(|| Error::EmptyDomain(format!("domain `{domain}` not in dataset")))?;
    trainer::evaluate(&model, samples)
}
