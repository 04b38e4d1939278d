//! Aggregation of run directories.

use crate::error::InputError;
use anyhow::Result;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use treerl::evalx::{CsvTable, SCHEMA_VERSION};

fn collect_csvs(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p == skip {
            continue;
        }
        if p.is_dir() {
            collect_csvs(&p, skip, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// The command recorded in `run.json` next to `csv`, else the table kind.
fn command_of(csv: &Path, table: &CsvTable) -> String {
    let run = csv.parent().map(|d| d.join("run.json"));
    run.and_then(|p| fs::read_to_string(p).ok())
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["command"].as_str().map(String::from))
        .unwrap_or_else(|| table.kind.clone())
}

fn column(t: &CsvTable, name: &str) -> Option<usize> {
    t.header.iter().position(|h| h == name)
}

fn sweep_text(t: &CsvTable, s: &mut String) {
    let idx: Option<Vec<usize>> = ["m", "n", "l", "t", "leaves", "passrate", "tokens", "error"]
        .iter()
        .map(|c| column(t, c))
        .collect();
    let Some(idx) = idx else {
        let _ = writeln!(s, "  (sweep table without the expected columns)");
        return;
    };
    let _ = writeln!(s, "  {:>14} {:>8} {:>9} {:>9}", "(M,N,L,T)", "#Leaf", "PassRate", "#Token");
    for r in &t.rows {
        let cfg = format!("({},{},{},{})", r[idx[0]], r[idx[1]], r[idx[2]], r[idx[3]]);
        if !r[idx[7]].is_empty() {
            let _ = writeln!(s, "  {cfg:>14} error: {}", r[idx[7]]);
            continue;
        }
        let num = |i: usize| r[idx[i]].parse::<f64>().unwrap_or(f64::NAN);
        let _ = writeln!(s, "  {cfg:>14} {:>8.2} {:>9.4} {:>9.1}", num(4), num(5), num(6));
    }
}

fn ablation_text(t: &CsvTable, s: &mut String) {
    let (Some(si), Some(pi)) = (column(t, "strategy"), column(t, "passrate")) else {
        return;
    };
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &t.rows {
        if let Ok(v) = r[pi].parse() {
            by.entry(r[si].as_str()).or_default().push(v);
        }
    }
    for (k, v) in by {
        let (m, se) = treerl::evalx::mean_se(&v);
        let _ = writeln!(s, "  {k:<8} PassRate {m:.4} ± {se:.4} over {} seeds", v.len());
    }
}

fn train_text(t: &CsvTable, s: &mut String) {
    if let Some(last) = t.rows.last() {
        let pairs: Vec<String> = t.header.iter().zip(last).map(|(h, v)| format!("{h}={v}")).collect();
        let _ = writeln!(s, "  final: {}", pairs.join(" "));
    }
}

/// Bar chart of a relative-position histogram.
pub fn histogram_svg(counts: &[f64], title: &str) -> String {
    let (w, h, pad) = (600.0, 300.0, 40.0);
    let max = counts.iter().copied().fold(1.0, f64::max);
    let bw = (w - 2.0 * pad) / counts.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, w / 2.0);
    for (i, &c) in counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c / max;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5" stroke="white"/>"##,
            pad + i as f64 * bw,
            h - pad - bh,
            bw,
            bh
        );
    }
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - pad, w - pad);
    for (x, label) in [(pad, "0"), (w - pad, "1")] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{label}</text>"#, h - pad + 16.0);
    }
    let _ = writeln!(s, "</svg>");
    s
}

pub fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<()> {
    if !dir.is_dir() {
        return Err(InputError(format!("{} is not a directory", dir.display())).into());
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("report"));
    let mut csvs = Vec::new();
    collect_csvs(dir, &out_dir, &mut csvs)?;
    if csvs.is_empty() {
        return Err(InputError(format!("no run artifacts under {}", dir.display())).into());
    }
    fs::create_dir_all(&out_dir)?;

    let mut groups: BTreeMap<String, Vec<(PathBuf, CsvTable)>> = BTreeMap::new();
    for path in csvs {
        let table = match File::open(&path).map_err(anyhow::Error::from).and_then(|f| {
            CsvTable::read(BufReader::new(f)).map_err(anyhow::Error::from)
        }) {
            Ok((t, bad)) => {
                for (line, why) in bad {
                    log::warn!("{}:{line}: skipped row: {why}", path.display());
                }
                t
            }
            Err(e) => {
                log::warn!("{}: skipped: {e}", path.display());
                continue;
            }
        };
        if table.schema_version != SCHEMA_VERSION {
            log::warn!(
                "{}: schema version {} does not match {SCHEMA_VERSION}; not aggregated",
                path.display(),
                table.schema_version
            );
            continue;
        }
        groups.entry(command_of(&path, &table)).or_default().push((path, table));
    }

    let mut text = String::new();
    for (command, tables) in &groups {
        let _ = writeln!(text, "== {command}");
        for (path, t) in tables {
            let rel = path.strip_prefix(dir).unwrap_or(path);
            let _ = writeln!(text, "{} [{}] config_hash={} rows={}", rel.display(), t.kind, &t.config_hash, t.rows.len());
            match t.kind.as_str() {
                "sweep" => sweep_text(t, &mut text),
                "ablation" => ablation_text(t, &mut text),
                "train" => train_text(t, &mut text),
                "fork_positions" => {
                    if let Some(ci) = column(t, "count") {
                        let counts: Vec<f64> = t.rows.iter().map(|r| r[ci].parse().unwrap_or(0.0)).collect();
                        let hash8: String = t.config_hash.chars().take(8).collect();
                        let name = format!("fork_positions-{hash8}.svg");
                        fs::write(out_dir.join(&name), histogram_svg(&counts, "fork position / branch length"))?;
                        let _ = writeln!(text, "  histogram: {name}");
                    }
                }
                _ => {}
            }
        }
    }
    fs::write(out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
