//! CSV reports and the plotting companion. Everything written here except
//! `timings.csv` is a pure function of the report contents with one fixed
//! float formatting (shortest round-trip), so rerunning a seeded experiment
//! reproduces the files byte for byte. Wall-clock measurements are kept in
//! the separate timings file precisely so they can't break that.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::run::EvalReport;

/// Fails fast if reports could not land in `dir`: creates it, writes a
/// probe file, and removes it again. Run this before spending compute.
pub fn check_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"probe")?;
    std::fs::remove_file(&probe)?;
    Ok(())
}

/// Shortest round-trip decimal for a float; empty for missing values in
/// summary rows is handled by the callers.
fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Quotes a CSV field when it needs it (commas, quotes, newlines).
fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("step,variant,seed,loss,mean_kl,mean_target\n");
    for cell in &report.cells {
        for m in &cell.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.step,
                cell.variant,
                cell.seed,
                fmt(m.loss),
                fmt(m.mean_kl),
                fmt(m.mean_target)
            );
        }
    }
    out
}

fn kl_curves_csv(report: &EvalReport) -> String {
    let mut out = String::from("step,variant,seed,mean_kl\n");
    for cell in &report.cells {
        for m in &cell.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.step,
                cell.variant,
                cell.seed,
                fmt(m.mean_kl)
            );
        }
    }
    out
}

fn summary_csv(report: &EvalReport) -> String {
    // Channel columns cover the union over cells so every row has the same
    // shape; missing values stay empty.
    let mut channels: Vec<String> = Vec::new();
    for cell in &report.cells {
        for name in cell.channels_greedy.keys().chain(cell.channels_sample.keys()) {
            if !channels.contains(name) {
                channels.push(name.clone());
            }
        }
    }
    channels.sort();

    let mut out = String::from(
        "variant,seed,status,error,final_loss,mean_training_kl,best_checkpoint_step,return_greedy,return_sample,overestimation_bias",
    );
    for ch in &channels {
        let _ = write!(out, ",greedy_{ch}");
    }
    for ch in &channels {
        let _ = write!(out, ",sample_{ch}");
    }
    out.push('\n');

    for cell in &report.cells {
        let ok = cell.error.is_none();
        let opt = |v: f64| if ok { fmt(v) } else { String::new() };
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            cell.variant,
            cell.seed,
            if ok { "ok" } else { "error" },
            csv_field(cell.error.as_deref().unwrap_or("")),
            opt(cell.final_loss),
            opt(cell.mean_training_kl),
            if ok {
                cell.best_checkpoint_step.to_string()
            } else {
                String::new()
            },
            opt(cell.return_greedy),
            opt(cell.return_sample),
            cell.overestimation_bias.map(fmt).unwrap_or_default(),
        );
        for ch in &channels {
            let _ = write!(
                out,
                ",{}",
                cell.channels_greedy.get(ch).map(|v| fmt(*v)).unwrap_or_default()
            );
        }
        for ch in &channels {
            let _ = write!(
                out,
                ",{}",
                cell.channels_sample.get(ch).map(|v| fmt(*v)).unwrap_or_default()
            );
        }
        out.push('\n');
    }
    out
}

fn timings_csv(report: &EvalReport) -> String {
    let mut out = String::from("variant,seed,wall_clock_secs\n");
    for cell in &report.cells {
        let _ = writeln!(
            out,
            "{},{},{}",
            cell.variant,
            cell.seed,
            fmt(cell.wall_clock_secs)
        );
    }
    out
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Render the KL curves and evaluation returns for this report directory."""
import collections
import csv
import os
import sys

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit("matplotlib is required: pip install matplotlib")

HERE = os.path.dirname(os.path.abspath(__file__))


def read(name):
    with open(os.path.join(HERE, name), newline="") as fh:
        return list(csv.DictReader(fh))


curves = collections.defaultdict(list)
for row in read("kl_curves.csv"):
    if row["mean_kl"] in ("", "NaN"):
        continue
    key = (row["variant"], row["seed"])
    curves[key].append((int(row["step"]), float(row["mean_kl"])))

fig, ax = plt.subplots(figsize=(7, 4))
for (variant, seed), points in sorted(curves.items()):
    points.sort()
    ax.plot(
        [p[0] for p in points],
        [p[1] for p in points],
        label=f"{variant} s{seed}",
        alpha=0.8,
    )
ax.set_xlabel("training step")
ax.set_ylabel("KL(policy || prior)")
ax.set_title("Policy drift from the behavior prior")
if curves:
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(HERE, "kl_curves.png"), dpi=120)

rows = [r for r in read("summary.csv") if r["status"] == "ok"]
variants = sorted({r["variant"] for r in rows})
means = []
for variant in variants:
    vals = [
        float(r["return_greedy"])
        for r in rows
        if r["variant"] == variant and r["return_greedy"] not in ("", "NaN")
    ]
    means.append(sum(vals) / len(vals) if vals else 0.0)

fig, ax = plt.subplots(figsize=(7, 4))
ax.bar(range(len(variants)), means)
ax.set_xticks(range(len(variants)))
ax.set_xticklabels(variants, rotation=20)
ax.set_ylabel("mean greedy return")
ax.set_title("Evaluation returns by variant")
fig.tight_layout()
fig.savefig(os.path.join(HERE, "returns.png"), dpi=120)
print("wrote kl_curves.png and returns.png")
"#;

/// Writes the report files into `dir` and returns their paths:
/// `metrics.csv` (full training traces), `kl_curves.csv` (policy-prior KL
/// per step), `summary.csv` (one row per cell), `timings.csv` (wall clock —
/// the one non-deterministic file), and `plot_report.py`.
pub fn emit_reports(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    check_writable(dir)?;
    let files = [
        ("metrics.csv", metrics_csv(report)),
        ("kl_curves.csv", kl_curves_csv(report)),
        ("summary.csv", summary_csv(report)),
        ("timings.csv", timings_csv(report)),
        ("plot_report.py", PLOT_SCRIPT.to_string()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{StepMetrics, Variant};
    use crate::harness::run::CellReport;
    use std::collections::BTreeMap;

    fn sample_report() -> EvalReport {
        let ok_cell = CellReport {
            variant: Variant::KlPsi,
            seed: 3,
            error: None,
            metrics: vec![
                StepMetrics {
                    step: 1,
                    loss: 0.5,
                    mean_kl: 0.25,
                    mean_target: 1.5,
                },
                StepMetrics {
                    step: 2,
                    loss: f64::NAN,
                    mean_kl: f64::NAN,
                    mean_target: f64::NAN,
                },
            ],
            mean_training_kl: 0.25,
            final_loss: 0.5,
            best_checkpoint_step: 2,
            return_greedy: 1.25,
            return_sample: 1.0,
            channels_greedy: BTreeMap::from([("env".to_string(), 1.25)]),
            channels_sample: BTreeMap::from([("env".to_string(), 1.0)]),
            overestimation_bias: Some(-0.125),
            wall_clock_secs: 0.75,
        };
        let failed_cell = CellReport {
            variant: Variant::BatchQ,
            seed: 4,
            error: Some("prior has 7 actions, environment has 2".to_string()),
            metrics: Vec::new(),
            mean_training_kl: f64::NAN,
            final_loss: f64::NAN,
            best_checkpoint_step: 0,
            return_greedy: f64::NAN,
            return_sample: f64::NAN,
            channels_greedy: BTreeMap::new(),
            channels_sample: BTreeMap::new(),
            overestimation_bias: None,
            wall_clock_secs: 0.01,
        };
        EvalReport {
            experiment: "sample".to_string(),
            cells: vec![ok_cell, failed_cell],
        }
    }

    #[test]
    fn csv_fields_are_quoted_only_when_needed() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn kl_curves_use_the_fixed_schema() {
        let text = kl_curves_csv(&sample_report());
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,variant,seed,mean_kl"));
        assert_eq!(lines.next(), Some("1,kl_psi,3,0.25"));
        assert_eq!(lines.next(), Some("2,kl_psi,3,NaN"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn summary_reports_both_cells_with_errors_quoted_in_place() {
        let text = summary_csv(&sample_report());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant,seed,status,error"));
        assert!(lines[0].ends_with(",greedy_env,sample_env"));
        assert!(lines[1].starts_with("kl_psi,3,ok,,0.5,0.25,2,1.25,1,-0.125"));
        assert!(lines[2].starts_with("batch_q,4,error,\"prior has 7 actions"));
        // Failed cells carry no numbers.
        assert!(lines[2].ends_with(",,"));
    }

    #[test]
    fn emitting_twice_reproduces_every_deterministic_file() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let first = emit_reports(&report, dir.path()).unwrap();
        let snapshot: Vec<(PathBuf, String)> = first
            .iter()
            .map(|p| (p.clone(), std::fs::read_to_string(p).unwrap()))
            .collect();
        let second = emit_reports(&report, dir.path()).unwrap();
        assert_eq!(first, second);
        for (path, before) in snapshot {
            let after = std::fs::read_to_string(&path).unwrap();
            assert_eq!(before, after, "{} changed across emits", path.display());
        }
        let names: Vec<String> = first
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            vec![
                "metrics.csv",
                "kl_curves.csv",
                "summary.csv",
                "timings.csv",
                "plot_report.py"
            ]
        );
    }

    #[test]
    fn writability_probe_cleans_up_after_itself() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested/reports");
        check_writable(&target).unwrap();
        assert!(target.is_dir());
        assert!(!target.join(".write_probe").exists());
    }
}
