//! Renders a stored run report into tables, curves and traces. Output is a
//! pure function of the report, so re-emitting gives byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cifsed_core::harness::RunReport;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::persist::save_report;

pub const REPORT_JSON: &str = "runreport.json";
pub const TABLE_MD: &str = "report.md";
pub const SESSIONS_CSV: &str = "sessions.csv";
pub const CURVES_SVG: &str = "curves.svg";
pub const ALPHA_CSV: &str = "alpha_trace.csv";
pub const TRAINING_LOG: &str = "training_log.jsonl";

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Sessions × methods table of mean micro-F1 (percent) with an average column.
pub fn markdown_table(report: &RunReport) -> String {
    let sessions = report.config.sessions + 1;
    let mut out = String::new();
    out.push_str("| Method |");
    for m in 0..sessions {
        let _ = write!(out, " {m} |");
    }
    out.push_str(" Average | Seeds |\n|---|");
    out.push_str(&"---:|".repeat(sessions + 2));
    out.push('\n');
    for method in &report.methods {
        let _ = write!(out, "| {} |", method.spec.name);
        for (mean, std) in method.mean.iter().zip(&method.std) {
            let _ = write!(out, " {} ± {} |", pct(*mean), pct(*std));
        }
        let _ = writeln!(
            out,
            " {} ± {} | {}/{} |",
            pct(method.average_f1),
            pct(method.average_f1_std),
            method.seeds_used,
            method.per_seed.len()
        );
    }
    let failures: Vec<String> = report
        .methods
        .iter()
        .flat_map(|m| {
            m.per_seed
                .iter()
                .filter_map(move |s| s.failure.as_ref().map(|f| format!("- {} seed {}: {f}", m.spec.name, s.seed)))
        })
        .collect();
    if !failures.is_empty() {
        out.push_str("\nIncomplete seeds (excluded from the statistics):\n\n");
        for f in failures {
            out.push_str(&f);
            out.push('\n');
        }
    }
    out
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::format("<csv>", e))?;
    }
    w.into_inner().map_err(|e| Error::format("<csv>", e))
}

/// One row per (method, session): mean, std and every seed's F1.
pub fn sessions_csv(report: &RunReport) -> Result<Vec<u8>> {
    let seeds = &report.config.seeds;
    let mut header: Vec<String> = ["method", "session", "mean_f1", "std_f1", "seeds_used"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(seeds.iter().map(|s| format!("f1_seed_{s}")));
    let mut rows = vec![header];
    for method in &report.methods {
        for (m, (mean, std)) in method.mean.iter().zip(&method.std).enumerate() {
            let mut row = vec![
                method.spec.name.clone(),
                m.to_string(),
                mean.to_string(),
                std.to_string(),
                method.seeds_used.to_string(),
            ];
            row.extend(seeds.iter().map(|&seed| {
                method
                    .seed(seed)
                    .and_then(|s| s.sessions.get(m))
                    .map_or_else(String::new, |r| r.f1.to_string())
            }));
            rows.push(row);
        }
    }
    csv_bytes(rows)
}

/// Mean teacher weights per (method, seed, session).
pub fn alpha_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut rows = vec![["method", "seed", "session", "alpha_ancestor", "alpha_father"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for method in &report.methods {
        for seed in &method.per_seed {
            for s in &seed.sessions {
                if let Some(a) = s.alpha {
                    rows.push(vec![
                        method.spec.name.clone(),
                        seed.seed.to_string(),
                        s.session.to_string(),
                        a.ancestor.to_string(),
                        a.father.to_string(),
                    ]);
                }
            }
        }
    }
    csv_bytes(rows)
}

#[derive(Serialize)]
struct LogLine<'a> {
    method: &'a str,
    seed: u64,
    session: usize,
    step: usize,
    l_dis: f64,
    l_stu: f64,
    l: f64,
    alpha_ancestor: Option<f64>,
    alpha_father: Option<f64>,
}

pub fn training_log(report: &RunReport) -> Vec<u8> {
    let mut out = Vec::new();
    for method in &report.methods {
        for seed in &method.per_seed {
            for log in &seed.logs {
                for s in &log.steps {
                    let line = LogLine {
                        method: &method.spec.name,
                        seed: seed.seed,
                        session: log.session,
                        step: s.step,
                        l_dis: s.l_dis,
                        l_stu: s.l_stu,
                        l: s.l,
                        alpha_ancestor: s.alpha_ancestor,
                        alpha_father: s.alpha_father,
                    };
                    serde_json::to_writer(&mut out, &line).expect("log line serializes");
                    out.push(b'\n');
                }
            }
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line plot of mean F1 against session, one line per method.
pub fn curves_svg(report: &RunReport) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let last = report.config.sessions.max(1) as f64;
    let x = |m: usize| left + pw * m as f64 / last;
    let y = |f: f64| top + ph * (1.0 - f.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for tick in 0..=5 {
        let f = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{x2}" y2="{y:.1}" stroke="#dddddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{label}</text>"##,
            y = y(f),
            x2 = left + pw,
            tx = left - 6.0,
            ty = y(f) + 4.0,
            label = (f * 100.0).round()
        );
    }
    for m in 0..=report.config.sessions {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{m}</text>"#,
            x(m),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/><line x1="{left}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"##,
        b = top + ph,
        r = left + pw
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">session</text><text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">micro-F1 (%)</text>"#,
        left + pw / 2.0,
        h - 10.0,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, method) in report.methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = method
            .mean
            .iter()
            .enumerate()
            .map(|(m, f)| format!("{:.1},{:.1}", x(m), y(*f)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for (m, f) in method.mean.iter().enumerate() {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(m), y(*f));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            method.spec.name
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes every artifact into `dir`, returning the paths written.
pub fn emit(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let json = dir.join(REPORT_JSON);
    save_report(report, &json)?;
    let files: Vec<(&str, Vec<u8>)> = vec![
        (TABLE_MD, markdown_table(report).into_bytes()),
        (SESSIONS_CSV, sessions_csv(report)?),
        (CURVES_SVG, curves_svg(report).into_bytes()),
        (ALPHA_CSV, alpha_csv(report)?),
        (TRAINING_LOG, training_log(report)),
    ];
    let mut written = vec![json];
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(Error::io(&path))?;
        written.push(path);
    }
    Ok(written)
}
