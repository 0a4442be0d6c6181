use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// One line of the results table. `seed` is `mean` on aggregate rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub variant: String,
    pub seed: String,
    pub nll: f64,
    pub se: f64,
    pub wall_clock_s: f64,
    pub clip_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: &str = "dataset,variant,seed,nll,se,wall_clock_s,clip_rate";

impl MetricsTable {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    /// Appends one `mean` row per (dataset, variant) pair over its seed rows.
    /// The standard error of the mean row combines the per-seed errors.
    pub fn add_means(&mut self) {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.dataset.clone(), r.variant.clone());
            if r.seed != "mean" && !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (dataset, variant) in keys {
            let group: Vec<&MetricsRow> = self
                .rows
                .iter()
                .filter(|r| r.dataset == dataset && r.variant == variant && r.seed != "mean")
                .collect();
            let n = group.len() as f64;
            let row = MetricsRow {
                dataset,
                variant,
                seed: "mean".into(),
                nll: group.iter().map(|r| r.nll).sum::<f64>() / n,
                se: group.iter().map(|r| r.se * r.se).sum::<f64>().sqrt() / n,
                wall_clock_s: group.iter().map(|r| r.wall_clock_s).sum::<f64>(),
                clip_rate: group.iter().map(|r| r.clip_rate).sum::<f64>() / n,
            };
            self.rows.push(row);
        }
    }

    pub fn mean_nll(&self, dataset: &str, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.variant == variant && r.seed == "mean")
            .map(|r| r.nll)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            return Ok(format!("{CSV_HEADER}\n"));
        }
        let bytes = w.into_inner().map_err(|e| TrainError::Dataset(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes the CSV through a temporary file renamed into place.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("csv.tmp");
        let text = self.to_csv_string()?;
        let io = |source| TrainError::Io { path: path.into(), source };
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            io(e)
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Column-aligned text rendering for terminals.
    pub fn to_aligned(&self) -> String {
        let header = ["dataset", "variant", "seed", "nll", "se", "wall_clock_s", "clip_rate"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.dataset.clone(),
                    r.variant.clone(),
                    r.seed.clone(),
                    format!("{:.4}", r.nll),
                    format!("{:.4}", r.se),
                    format!("{:.1}", r.wall_clock_s),
                    format!("{:.2e}", r.clip_rate),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}
