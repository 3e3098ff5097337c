//! Experiment reports: per-cell results, seed means, CSV round-trip and
//! table rendering, plus the trajectory and reconstruction-log CSVs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prunekit_core::reconstruct::LayerRecord;
use prunekit_core::retrain::TrajectoryPoint;

use crate::error::{io_err, Error, Result};

/// Identity of one grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    /// `unstructured` or `n:m`.
    pub pattern: String,
    /// Nominal sparsity in basis points (5000 for 50%), so keys compare
    /// exactly.
    pub sparsity_bp: u32,
    pub method: String,
    pub seed: u64,
}

impl CellKey {
    pub fn sparsity(&self) -> f64 {
        self.sparsity_bp as f64 / 10_000.0
    }

    /// File-name friendly identifier.
    pub fn slug(&self) -> String {
        format!("{}_s{}_{}_seed{}", self.pattern.replace(':', "of"), self.sparsity_bp, self.method.replace([':', '+'], "-"), self.seed)
    }
}

pub fn sparsity_bp(s: f64) -> u32 {
    (s * 10_000.0).round() as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub pattern: String,
    pub sparsity: f64,
    pub method: String,
    pub seed: u64,
    pub test_ppl: Option<f64>,
    pub trainable_fraction: Option<f64>,
    pub optimizer_floats: Option<usize>,
    pub tokens_per_sec: Option<f64>,
    pub lr: Option<f64>,
    pub trajectory: Option<String>,
    /// Failure message; the other measurements may be missing.
    pub error: Option<String>,
}

impl CellResult {
    pub fn key(&self) -> CellKey {
        CellKey { pattern: self.pattern.clone(), sparsity_bp: sparsity_bp(self.sparsity), method: self.method.clone(), seed: self.seed }
    }

    pub fn failed(key: &CellKey, error: impl Into<String>) -> Self {
        Self {
            pattern: key.pattern.clone(),
            sparsity: key.sparsity(),
            method: key.method.clone(),
            seed: key.seed,
            test_ppl: None,
            trainable_fraction: None,
            optimizer_floats: None,
            tokens_per_sec: None,
            lr: None,
            trajectory: None,
            error: Some(error.into()),
        }
    }
}

/// Seed mean of one `(pattern, sparsity, method)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub pattern: String,
    pub sparsity: f64,
    pub method: String,
    pub mean_test_ppl: Option<f64>,
    pub trainable_fraction: Option<f64>,
    pub seeds: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    /// Cells the grid was configured with.
    pub configured: Vec<CellKey>,
    pub results: Vec<CellResult>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl ExperimentReport {
    pub fn missing(&self) -> Vec<CellKey> {
        let have: std::collections::BTreeSet<CellKey> = self.results.iter().map(CellResult::key).collect();
        self.configured.iter().filter(|k| !have.contains(k)).cloned().collect()
    }

    pub fn check_complete(&self) -> Result<()> {
        let missing = self.missing();
        if missing.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = missing.iter().map(|k| format!("{} {:.2} {} seed {}", k.pattern, k.sparsity(), k.method, k.seed)).collect();
        Err(Error::Report(format!("missing cells: {}", list.join("; "))))
    }

    /// Means over seeds in configured order. Failed seeds are excluded
    /// from the mean and counted.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(String, u32, String), Vec<&CellResult>> = BTreeMap::new();
        let mut order = Vec::new();
        for k in self.configured.iter().chain(self.results.iter().map(|r| r.key()).collect::<Vec<_>>().iter()) {
            let g = (k.pattern.clone(), k.sparsity_bp, k.method.clone());
            if !order.contains(&g) {
                order.push(g);
            }
        }
        for r in &self.results {
            groups.entry((r.pattern.clone(), sparsity_bp(r.sparsity), r.method.clone())).or_default().push(r);
        }
        order
            .into_iter()
            .map(|g| {
                let rows = groups.get(&g).cloned().unwrap_or_default();
                let ok: Vec<&CellResult> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
                let ppl: Vec<f64> = ok.iter().filter_map(|r| r.test_ppl).collect();
                let frac: Vec<f64> = ok.iter().filter_map(|r| r.trainable_fraction).collect();
                Aggregate {
                    pattern: g.0,
                    sparsity: g.1 as f64 / 10_000.0,
                    method: g.2,
                    mean_test_ppl: mean(&ppl),
                    trainable_fraction: mean(&frac),
                    seeds: rows.len(),
                    failures: rows.len() - ok.len(),
                }
            })
            .collect()
    }

    /// Per-seed rows followed by one `mean` row per cell (seed column
    /// `mean`).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pattern", "sparsity", "method", "seed", "test_ppl", "trainable_fraction", "optimizer_floats", "tokens_per_sec", "lr", "trajectory", "error"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.results {
            w.write_record([
                r.pattern.clone(),
                r.sparsity.to_string(),
                r.method.clone(),
                r.seed.to_string(),
                opt(r.test_ppl),
                opt(r.trainable_fraction),
                r.optimizer_floats.map(|v| v.to_string()).unwrap_or_default(),
                opt(r.tokens_per_sec),
                opt(r.lr),
                r.trajectory.clone().unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        for a in self.aggregates() {
            let err = if a.failures > 0 { format!("{} of {} seeds failed", a.failures, a.seeds) } else { String::new() };
            w.write_record([
                a.pattern,
                a.sparsity.to_string(),
                a.method,
                "mean".into(),
                opt(a.mean_test_ppl),
                opt(a.trainable_fraction),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                err,
            ])
            .map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?).map_err(|e| Error::Report(e.to_string()))
    }

    /// Inverse of [`to_csv`](Self::to_csv): mean rows are skipped (they
    /// are recomputed) and the configured cells are the rows present.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut results = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.get(3) == Some("mean") {
                continue;
            }
            let r: CellResult = rec.deserialize(None).map_err(csv_err)?;
            results.push(r);
        }
        let configured = results.iter().map(CellResult::key).collect();
        Ok(Self { configured, results })
    }

    /// One table per pattern: methods as rows with a `% trainable` column,
    /// sparsities as columns, seed-mean test perplexity as values.
    pub fn tables(&self, format: TableFormat) -> Result<Vec<(String, String)>> {
        self.check_complete()?;
        let aggs = self.aggregates();
        let mut patterns: Vec<String> = Vec::new();
        for a in &aggs {
            if !patterns.contains(&a.pattern) {
                patterns.push(a.pattern.clone());
            }
        }
        let mut out = Vec::new();
        for p in patterns {
            let rows: Vec<&Aggregate> = aggs.iter().filter(|a| a.pattern == p).collect();
            let mut cols: Vec<u32> = Vec::new();
            let mut methods: Vec<&str> = Vec::new();
            for a in &rows {
                let bp = sparsity_bp(a.sparsity);
                if !cols.contains(&bp) {
                    cols.push(bp);
                }
                if !methods.contains(&a.method.as_str()) {
                    methods.push(&a.method);
                }
            }
            let mut header = vec!["method".to_string(), "% trainable".to_string()];
            header.extend(cols.iter().map(|&bp| format!("{}%", bp as f64 / 100.0)));
            let mut body = Vec::new();
            for m in methods {
                let cells: Vec<&&Aggregate> = rows.iter().filter(|a| a.method == m).collect();
                let frac = cells.iter().find_map(|a| a.trainable_fraction);
                let mut line = vec![m.to_string(), frac.map(|f| format!("{:.4}", 100.0 * f)).unwrap_or_else(|| "-".into())];
                for &bp in &cols {
                    let cell = cells.iter().find(|a| sparsity_bp(a.sparsity) == bp);
                    line.push(match cell {
                        None => "n/a".into(),
                        Some(a) if a.mean_test_ppl.is_none() => "FAILED".into(),
                        Some(a) if a.failures > 0 => format!("{:.2} ({} failed)", a.mean_test_ppl.unwrap(), a.failures),
                        Some(a) => format!("{:.2}", a.mean_test_ppl.unwrap()),
                    });
                }
                body.push(line);
            }
            let text = match format {
                TableFormat::Markdown => {
                    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
                    for line in body {
                        s += &format!("| {} |\n", line.join(" | "));
                    }
                    s
                }
                TableFormat::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(&header).map_err(csv_err)?;
                    for line in body {
                        w.write_record(&line).map_err(csv_err)?;
                    }
                    String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?).expect("utf-8 table")
                }
            };
            out.push((p, text));
        }
        Ok(out)
    }

    /// Writes `report.csv` and one table file per pattern into `dir`;
    /// returns the written paths.
    pub fn emit(&self, dir: &Path, format: TableFormat) -> Result<Vec<PathBuf>> {
        let tables = self.tables(format)?;
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        let report = dir.join("report.csv");
        std::fs::write(&report, self.to_csv()?).map_err(io_err(&report))?;
        written.push(report);
        for (pattern, text) in tables {
            let ext = match format {
                TableFormat::Markdown => "md",
                TableFormat::Csv => "csv",
            };
            let path = dir.join(format!("table_{}.{ext}", pattern.replace(':', "of")));
            std::fs::write(&path, text).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

/// `iter,lr,train_loss,val_ppl` rows.
pub fn write_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iter", "lr", "train_loss", "val_ppl"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.iter.to_string(), p.lr.to_string(), p.train_loss.to_string(), p.val_ppl.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// `layer,criterion,steps,obj_initial,obj_final,obj_oracle` rows.
pub fn write_recon_log(out: impl Write, records: &[LayerRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "criterion", "steps", "obj_initial", "obj_final", "obj_oracle"]).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.layer.clone(),
            r.criterion.to_string(),
            r.steps.to_string(),
            r.obj_initial.to_string(),
            r.obj_final.to_string(),
            r.obj_oracle.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Report(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(s: f64, method: &str, seed: u64, ppl: f64) -> CellResult {
        CellResult {
            pattern: "unstructured".into(),
            sparsity: s,
            method: method.into(),
            seed,
            test_ppl: Some(ppl),
            trainable_fraction: Some(if method == "none" { 0.0 } else { 0.004535 }),
            optimizer_floats: Some(7168),
            tokens_per_sec: Some(1234.5),
            lr: Some(1e-4),
            trajectory: Some(format!("traj_{seed}.csv")),
            error: None,
        }
    }

    fn report() -> ExperimentReport {
        let mut results = Vec::new();
        for s in [0.5, 0.6, 0.7] {
            for m in ["none", "bias+ln"] {
                for seed in 0..3 {
                    results.push(row(s, m, seed, 10.0 + s * 7.0 + seed as f64 / 3.0 + (m == "none") as u8 as f64));
                }
            }
        }
        ExperimentReport { configured: results.iter().map(CellResult::key).collect(), results }
    }

    #[test]
    fn eighteen_rows_and_six_means() {
        let r = report();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 18 + 6);
        assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 6);
    }

    #[test]
    fn csv_round_trips() {
        let mut r = report();
        r.results[4].error = Some("diverged, \"badly\"".into());
        r.results[4].test_ppl = None;
        r.results[7].sparsity = 0.1 + 0.2;
        r.configured = r.results.iter().map(CellResult::key).collect();
        assert_eq!(ExperimentReport::from_csv(&r.to_csv().unwrap()).unwrap(), r);
    }

    #[test]
    fn aggregates_are_seed_means() {
        let r = report();
        for a in r.aggregates() {
            let vals: Vec<f64> = r
                .results
                .iter()
                .filter(|x| x.method == a.method && sparsity_bp(x.sparsity) == sparsity_bp(a.sparsity))
                .map(|x| x.test_ppl.unwrap())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((a.mean_test_ppl.unwrap() - m).abs() <= 1e-9 * m);
        }
    }

    #[test]
    fn markdown_layout() {
        let mut r = report();
        r.results.retain(|x| x.sparsity != 0.6);
        r.configured = r.results.iter().map(CellResult::key).collect();
        let tables = r.tables(TableFormat::Markdown).unwrap();
        assert_eq!(tables.len(), 1);
        let lines: Vec<&str> = tables[0].1.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "| method | % trainable | 50% | 70% |");
        assert!(lines[3].starts_with("| bias+ln | 0.4535 |"), "{}", lines[3]);
    }

    #[test]
    fn failures_are_marked_and_gaps_listed() {
        let mut r = report();
        for x in r.results.iter_mut().filter(|x| x.method == "none" && x.sparsity == 0.7) {
            x.test_ppl = None;
            x.error = Some("boom".into());
        }
        let md = &r.tables(TableFormat::Markdown).unwrap()[0].1;
        assert!(md.contains("FAILED"));
        r.results.remove(0);
        let err = r.tables(TableFormat::Csv).unwrap_err().to_string();
        assert!(err.contains("none") && err.contains("seed 0"), "{err}");
    }
}
