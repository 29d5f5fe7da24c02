use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::{RoundReport, RunOutput};
use crate::error::{Error, Result};

fn join_ids(ids: &[usize]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// `round,acc,recall,fpr,asr,delta,blocked_ids`, blocked ids ascending and
/// separated by `;`.
pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,acc,recall,fpr,asr,delta,blocked_ids\n");
    for r in reports {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.9},{}",
            r.round,
            r.acc,
            r.recall,
            r.fpr,
            r.asr,
            r.delta,
            join_ids(&r.blocked_ids)
        )
        .unwrap();
    }
    out
}

/// One row per scored client: `round,client_id,role,epsilon,accepted`.
pub fn scores_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,client_id,role,epsilon,accepted\n");
    for r in reports {
        let mut scores = r.scores.clone();
        scores.sort_by_key(|s| s.client_id);
        for s in scores {
            let role = if r.attackers.contains(&s.client_id) { "attacker" } else { "benign" };
            writeln!(out, "{},{},{},{:.9e},{}", r.round, s.client_id, role, s.epsilon, s.accepted).unwrap();
        }
    }
    out
}

/// 40 hex digits of SHA-256 over the config and the per-round metrics.
pub fn run_id(out: &RunOutput) -> String {
    let mut h = Sha256::new();
    h.update(out.config.to_toml().as_bytes());
    h.update(rounds_csv(&out.reports).as_bytes());
    h.finalize().iter().take(20).map(|b| format!("{b:02x}")).collect()
}

pub fn summary_json(out: &RunOutput) -> serde_json::Value {
    let n = out.reports.len() as f64;
    let mean = |f: fn(&RoundReport) -> f64| out.reports.iter().map(f).sum::<f64>() / n;
    let last = out.last();
    let attacked: Vec<&RoundReport> = out.reports.iter().filter(|r| !r.no_attackers).collect();
    json!({
        "run_id": run_id(out),
        "name": out.config.name,
        "rounds": out.reports.len(),
        "final": {
            "acc": last.acc,
            "recall": last.recall,
            "fpr": last.fpr,
            "asr": last.asr,
        },
        "mean": {
            "acc": mean(|r| r.acc),
            "recall": mean(|r| r.recall),
            "fpr": mean(|r| r.fpr),
            "asr": mean(|r| r.asr),
        },
        "min_recall_with_attackers": attacked.iter().map(|r| r.recall).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
        "max_fpr_with_attackers": attacked.iter().map(|r| r.fpr).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
        "rounds_without_attackers": out.reports.iter().filter(|r| r.no_attackers).map(|r| r.round).collect::<Vec<_>>(),
        "warnings": out.warnings.iter().cloned().chain(out.reports.iter().flat_map(|r| r.warnings.iter().map(move |w| format!("round {}: {w}", r.round)))).collect::<Vec<_>>(),
        "cvae_epochs": out.cvae_log.iter().map(|e| json!({"epoch": e.epoch, "beta": e.beta, "loss": e.loss.total, "mse": e.loss.mse, "kl": e.loss.kl})).collect::<Vec<_>>(),
        "wall_ms": out.reports.iter().map(|r| r.wall_ms).sum::<u64>(),
        "config": out.config,
    })
}

/// Polyline chart of `values` over rounds `1..=n` on a fixed `[0, 1]` axis.
pub fn svg_line_chart(title: &str, values: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let n = values.len().max(2) as f64;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1.0);
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(if v.is_finite() { v } else { 0.0 })))
        .collect();
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0).unwrap();
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let ty = y(tick);
        writeln!(s, r##"<line x1="{PAD}" y1="{ty:.1}" x2="{}" y2="{ty:.1}" stroke="#ddd"/>"##, W - PAD).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{tick}</text>"#, PAD - 4.0, ty + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#, W / 2.0, H - 8.0).unwrap();
    writeln!(s, r#"<text x="{PAD}" y="{}" text-anchor="middle">1</text>"#, H - PAD + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W - PAD, H - PAD + 14.0, values.len()).unwrap();
    writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, points.join(" ")).unwrap();
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `rounds.csv`, `scores.csv`, `rounds.jsonl` (full per-round
/// reports, attack parameters included), `summary.json`, `global.weights`,
/// `cvae.ckpt` (when a CVAE was trained) and, if enabled, `plots/*.svg`.
pub fn emit_reports(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("rounds.csv"), rounds_csv(&out.reports).as_bytes())?;
    write(&dir.join("scores.csv"), scores_csv(&out.reports).as_bytes())?;
    let mut jsonl = String::new();
    for r in &out.reports {
        jsonl.push_str(&serde_json::to_string(r).expect("round report serializes"));
        jsonl.push('\n');
    }
    write(&dir.join("rounds.jsonl"), jsonl.as_bytes())?;
    let summary = serde_json::to_string_pretty(&summary_json(out)).expect("summary serializes");
    write(&dir.join("summary.json"), summary.as_bytes())?;
    out.global.save(dir.join("global.weights"))?;
    if let Some(cvae) = &out.cvae {
        cvae.save(dir.join("cvae.ckpt"))?;
    }
    if out.config.plots {
        let plots = dir.join("plots");
        std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
        let series: [(&str, fn(&RoundReport) -> f64); 4] =
            [("acc", |r| r.acc), ("recall", |r| r.recall), ("fpr", |r| r.fpr), ("asr", |r| r.asr)];
        for (name, f) in series {
            let values: Vec<f64> = out.reports.iter().map(f).collect();
            write(&plots.join(format!("{name}.svg")), svg_line_chart(name, &values).as_bytes())?;
        }
    }
    Ok(())
}
