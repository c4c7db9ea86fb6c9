//! Aggregate the raw artifacts of a run directory into five tables plus a
//! plain-text summary. Everything here is recomputed from the CSV/JSON files
//! on disk — no hidden state — and the output is byte-stable.

use super::pipeline::percentile;
use crate::error::{ElaError, Result};
use crate::scene::SignClass;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const METHODS: [&str; 4] = ["agent", "random", "search", "static"];

fn method_dir(out: &Path, method: &str, class: &str) -> std::path::PathBuf {
    if method == "agent" {
        out.join("attack").join(class)
    } else {
        out.join("baselines").join(class).join(method)
    }
}

fn read_summary(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ElaError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Columns of a simple CSV as string rows (header skipped).
fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect())
}

fn fmt_rate(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

/// Build report tables from a completed run directory. Missing inputs are
/// listed exactly; partially complete runs still render with `n/a` cells.
pub fn report_stage(out: &Path) -> Result<()> {
    let report_dir = out.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let classes: Vec<String> = {
        let cfg_text = std::fs::read_to_string(out.join("config.txt")).map_err(|_| {
            ElaError::Config(format!("missing input: {}", out.join("config.txt").display()))
        })?;
        let line = cfg_text
            .lines()
            .find(|l| l.starts_with("classes = "))
            .ok_or_else(|| ElaError::Config("config.txt lacks a classes key".into()))?;
        line["classes = ".len()..]
            .split(',')
            .map(|s| s.trim().to_string())
            .collect()
    };
    let mut missing: Vec<String> = Vec::new();

    // Table 1: perception quality per class.
    let miou_path = out.join("ptn").join("miou.csv");
    let mut miou_table = String::from("class,miou_test,miou_train\n");
    match read_csv(&miou_path) {
        Ok(rows) => {
            for row in rows {
                miou_table.push_str(&row.join(","));
                miou_table.push('\n');
            }
        }
        Err(_) => missing.push(miou_path.display().to_string()),
    }
    std::fs::write(report_dir.join("miou.csv"), &miou_table)?;

    // Tables 2 + 3: ASR per method x victim, latency per method.
    let mut asr_table =
        String::from("class,method,asr_victim0,asr_victim1,surrogate_asr,clean_asr_victim0,clean_asr_victim1\n");
    let mut latency_table = String::from("class,method,median_ms,p95_ms,frames\n");
    for class in &classes {
        for method in METHODS {
            let dir = method_dir(out, method, class);
            let summary = dir.join("summary.json");
            let (mut a0, mut a1, mut sa, mut c0, mut c1) = (None, None, None, None, None);
            match read_summary(&summary) {
                Ok(v) => {
                    let frames = v["frames"].as_u64().unwrap_or(0) as usize;
                    if frames > 0 {
                        let asr = v["asr_victims"].as_array().cloned().unwrap_or_default();
                        a0 = asr.first().and_then(|x| x.as_f64());
                        a1 = asr.get(1).and_then(|x| x.as_f64());
                        sa = v["surrogate_asr"].as_f64();
                        if let Some(clean) = v["clean_asr_victims"].as_array() {
                            c0 = clean.first().and_then(|x| x.as_f64());
                            c1 = clean.get(1).and_then(|x| x.as_f64());
                        }
                    }
                }
                Err(_) => missing.push(summary.display().to_string()),
            }
            asr_table.push_str(&format!(
                "{class},{method},{},{},{},{},{}\n",
                fmt_rate(a0),
                fmt_rate(a1),
                fmt_rate(sa),
                fmt_rate(c0),
                fmt_rate(c1),
            ));
            // Latency from the raw timing rows (medians/p95, monotonic clock).
            let timing = dir.join("timing.csv");
            match read_csv(&timing) {
                Ok(rows) => {
                    let mut ms: Vec<f64> = rows
                        .iter()
                        .filter_map(|r| r.get(2).and_then(|s| s.parse().ok()))
                        .collect();
                    ms.sort_by(f64::total_cmp);
                    latency_table.push_str(&format!(
                        "{class},{method},{},{},{}\n",
                        fmt_rate(Some(percentile(&ms, 0.5)).filter(|x| x.is_finite())),
                        fmt_rate(Some(percentile(&ms, 0.95)).filter(|x| x.is_finite())),
                        ms.len(),
                    ));
                }
                Err(_) => {
                    latency_table.push_str(&format!("{class},{method},n/a,n/a,0\n"));
                }
            }
        }
    }
    std::fs::write(report_dir.join("asr.csv"), &asr_table)?;
    std::fs::write(report_dir.join("latency.csv"), &latency_table)?;

    // Table 4: top-2 mistaken victim labels per class over successful
    // agent attacks.
    let mut confusion_table = String::from("class,rank,mistaken_label,count\n");
    for class in &classes {
        let trace = method_dir(out, "agent", class).join("trace.csv");
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        if let Ok(rows) = read_csv(&trace) {
            for row in rows {
                // victim columns start at 8: label,miss pairs.
                let mut col = 8;
                while col + 1 < row.len() {
                    if row[col + 1] == "1" {
                        if let Ok(label) = row[col].parse::<usize>() {
                            let name = SignClass::from_label(label)
                                .map(|c| c.name().to_string())
                                .unwrap_or_else(|_| format!("label{label}"));
                            *counts.entry(name).or_insert(0) += 1;
                        }
                    }
                    col += 2;
                }
            }
        } else {
            missing.push(trace.display().to_string());
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (rank, (name, count)) in ranked.into_iter().take(2).enumerate() {
            confusion_table.push_str(&format!("{class},{},{name},{count}\n", rank + 1));
        }
    }
    std::fs::write(report_dir.join("confusion.csv"), &confusion_table)?;

    // Table 5: agent training curves, concatenated per class.
    let mut curves_table = String::from("class,epoch,mean_reward,mean_steps,train_asr\n");
    for class in &classes {
        let path = out.join("agent").join(class).join("curves.csv");
        match read_csv(&path) {
            Ok(rows) => {
                for row in rows {
                    curves_table.push_str(&format!("{class},{}\n", row.join(",")));
                }
            }
            Err(_) => missing.push(path.display().to_string()),
        }
    }
    std::fs::write(report_dir.join("curves.csv"), &curves_table)?;

    // Plain-text summary.
    let mut text = String::new();
    let hash = std::fs::read_to_string(out.join("config_hash.txt")).unwrap_or_default();
    writeln!(text, "run report").unwrap();
    writeln!(text, "config hash: {}", hash.trim()).unwrap();
    writeln!(text).unwrap();
    writeln!(text, "perception (held-out mIOU per class):").unwrap();
    for line in miou_table.lines().skip(1) {
        writeln!(text, "  {line}").unwrap();
    }
    writeln!(text).unwrap();
    writeln!(text, "attack success rates (victim0/victim1):").unwrap();
    for line in asr_table.lines().skip(1) {
        writeln!(text, "  {line}").unwrap();
    }
    writeln!(text).unwrap();
    writeln!(
        text,
        "latency (ms, decision loop only, disk I/O excluded):"
    )
    .unwrap();
    for line in latency_table.lines().skip(1) {
        writeln!(text, "  {line}").unwrap();
    }
    if !missing.is_empty() {
        writeln!(text).unwrap();
        writeln!(text, "missing inputs:").unwrap();
        for m in &missing {
            writeln!(text, "  {m}").unwrap();
        }
    }
    std::fs::write(report_dir.join("summary.txt"), text)?;
    Ok(())
}
