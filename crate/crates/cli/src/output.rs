//! Tables and file output. Files are collected first and written only once
//! every run has succeeded.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context};
use serde_json::json;

use das_core::engine::{attach_speedup, SimReport, REPORT_SCHEMA};

use crate::Format;

pub fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

pub struct Outputs {
    dir: PathBuf,
    formats: Vec<Format>,
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: PathBuf, formats: &[Format]) -> Self {
        Outputs { dir, formats: formats.to_vec(), files: Vec::new() }
    }

    fn add(&mut self, f: Format, name: &str, body: String) {
        if self.formats.contains(&f) {
            self.files.push((name.to_string(), body));
        }
    }

    pub fn json(&mut self, name: &str, body: String) {
        self.add(Format::Json, name, body);
    }

    pub fn csv(&mut self, name: &str, body: String) {
        self.add(Format::Csv, name, body);
    }

    pub fn md(&mut self, name: &str, body: String) {
        self.add(Format::Md, name, body);
    }

    /// Full JSON report plus per-PE CSV.
    pub fn report(&mut self, stem: &str, r: &SimReport) -> anyhow::Result<()> {
        self.json(&format!("{stem}.json"), r.to_json());
        if self.formats.contains(&Format::Csv) {
            self.csv(&format!("{stem}.pe.csv"), r.per_pe_csv()?);
        }
        Ok(())
    }

    pub fn write(self) -> anyhow::Result<()> {
        if self.files.is_empty() {
            return Ok(());
        }
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        for (name, body) in self.files {
            let p = self.dir.join(&name);
            std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }
}

pub fn parse_report(text: &str) -> anyhow::Result<SimReport> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    match v.get("schema").and_then(|s| s.as_str()) {
        Some(REPORT_SCHEMA) => {}
        Some(other) => bail!("report schema {other:?} is not supported; expected {REPORT_SCHEMA:?}"),
        None => bail!("not a report: no schema field"),
    }
    Ok(serde_json::from_value(v)?)
}

/// Speedups from the given set only: a DAS report gets one when an
/// interleaved report of the same workload is present, and loses any it
/// carried otherwise.
pub fn pair_speedups(reports: &mut [SimReport]) {
    let key = |r: &SimReport| (r.meta.kernel.clone(), r.meta.workload.clone(), r.meta.n_parallel, r.params);
    for i in 0..reports.len() {
        reports[i].speedup = None;
        reports[i].baseline_cycles = None;
        if reports[i].meta.scheme != "das" {
            continue;
        }
        let base = reports.iter().find(|b| b.meta.scheme == "interleaved" && key(b) == key(&reports[i])).cloned();
        if let Some(b) = base {
            attach_speedup(&mut reports[i], &b);
        }
    }
}

/// Phase x stall-category fractions, ready for stacked bars.
pub fn breakdown_csv(reports: &[SimReport], axis: Option<(&str, &str)>) -> String {
    let mut s = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.breakdown_csv();
        for (j, line) in body.lines().enumerate() {
            if j == 0 && i > 0 {
                continue;
            }
            match axis {
                Some(_) if j == 0 => s.push_str("axis,value,"),
                Some((a, v)) => {
                    let _ = write!(s, "{a},{v},");
                }
                None => {}
            }
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

/// Comparison table laid out like the usual utilization/speedup tables.
/// The speedup column appears only when some report has one; reference
/// columns only when some scenario carries published figures.
pub struct Table<'a> {
    reports: &'a [SimReport],
    /// Sweep axis name and the value of each report.
    axis: Option<(&'a str, Vec<String>)>,
    speedup: bool,
    reference: bool,
}

impl<'a> Table<'a> {
    pub fn new(reports: &'a [SimReport]) -> Self {
        Table {
            reports,
            axis: None,
            speedup: reports.iter().any(|r| r.speedup.is_some()),
            reference: reports.iter().any(|r| r.reference.is_some()),
        }
    }

    pub fn with_axis(mut self, axis: &'a str, values: Vec<String>) -> Self {
        assert_eq!(values.len(), self.reports.len());
        self.axis = Some((axis, values));
        self
    }

    pub fn markdown(&self) -> String {
        let mut cols = vec![];
        if let Some((a, _)) = &self.axis {
            cols.push(*a);
        }
        cols.extend(["Mapping Scheme", "Workload Dimension", "#Parallel", "Utilization (IPC)"]);
        if self.speedup {
            cols.push("Speedup");
        }
        cols.push("Cycles");
        if self.reference {
            cols.extend(["Ref. IPC", "Ref. Speedup"]);
        }
        let mut s = format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
        for (i, r) in self.reports.iter().enumerate() {
            let mut row = vec![];
            if let Some((_, v)) = &self.axis {
                row.push(v[i].clone());
            }
            row.extend([
                r.meta.scheme.clone(),
                format!("{} {}", r.meta.kernel, r.meta.workload),
                r.meta.n_parallel.to_string(),
                format!("{:.2}", r.ipc_mean),
            ]);
            if self.speedup {
                row.push(r.speedup.map_or("-".into(), |x| format!("{x:.2}x")));
            }
            row.push(r.cycles.to_string());
            if self.reference {
                let rf = r.reference.as_ref();
                // Published figures are per scheme only for the utilization.
                let ipc = rf.and_then(|x| if r.meta.scheme == "das" { x.utilization } else { None });
                let sp = rf.and_then(|x| if r.meta.scheme == "das" { x.speedup } else { None });
                row.push(ipc.map_or("-".into(), |x| format!("{x:.2}")));
                row.push(sp.map_or("-".into(), |x| format!("{x:.2}x")));
            }
            let _ = writeln!(s, "| {} |", row.join(" | "));
        }
        s
    }

    pub fn json(&self) -> String {
        let rows: Vec<_> = self
            .reports
            .iter()
            .map(|r| {
                json!({
                    "label": r.meta.label,
                    "kernel": r.meta.kernel,
                    "scheme": r.meta.scheme,
                    "workload": r.meta.workload,
                    "n_parallel": r.meta.n_parallel,
                    "utilization": r.ipc_mean,
                    "cycles": r.cycles,
                    "speedup": r.speedup,
                })
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("table serializes")
    }
}
