//! Conversion of regularly sampled CSV recordings into irregular datasets.

use std::path::Path;


use crate::autodiff::Array;
use crate::processes::{sample_poisson_grid, sequence_rng, Dataset, DatasetMeta, TimeGrid, TimeSeries};

/// Shift applied to every ingested timestamp so that none sits at zero.
pub const TIME_SHIFT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub id_column: String,
    /// Length `L` of the rescaled index range.
    pub interval: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// Reads a CSV with a header row. The `id_column` delimits sequences (a new
/// sequence starts whenever the id changes); every other column is one
/// observed dimension.
pub fn read_recordings(path: &Path, id_column: &str) -> Result<Vec<Array>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let id_idx = headers
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| format!("column `{id_column}` not found in {:?}", headers.iter().collect::<Vec<_>>()))?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err("the CSV needs at least one value column besides the id".into());
    }
    let mut sequences: Vec<(String, Vec<f64>)> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("row {}: {e}", line + 2))?;
        if rec.len() != headers.len() {
            return Err(format!("row {} has {} fields, expected {}", line + 2, rec.len(), headers.len()));
        }
        let id = rec[id_idx].to_string();
        let mut values = Vec::with_capacity(d);
        for (c, field) in rec.iter().enumerate() {
            if c == id_idx {
                continue;
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format!("row {}: `{field}` is not a number", line + 2))?;
            if !v.is_finite() {
                return Err(format!("row {}: non-finite value", line + 2));
            }
            values.push(v);
        }
        match sequences.last_mut() {
            Some((last, data)) if *last == id => data.extend(values),
            _ => sequences.push((id, values)),
        }
    }
    if sequences.is_empty() {
        return Err("the CSV holds no rows".into());
    }
    Ok(sequences.into_iter().map(|(_, data)| Array::from_vec(data.len() / d, d, data)).collect())
}

/// Index `j` sits at time `j * L / P` for a recording of `P` rows. Returns
/// the nearest index to `t`, ties going to the earlier one.
pub fn nearest_index(t: f64, rows: usize, interval: f64) -> usize {
    let pos = t * rows as f64 / interval;
    let lo = pos.floor();
    let j = if pos - lo > 0.5 { lo + 1.0 } else { lo };
    (j.max(0.0) as usize).min(rows - 1)
}

/// Samples Poisson timestamps on `[0, L]`, maps each to the nearest index,
/// keeps the first of any repeated index and shifts times by [`TIME_SHIFT`].
pub fn ingest(recordings: &[Array], opts: &IngestOptions, source: &str) -> Result<Dataset, String> {
    if !(opts.interval > 0.0) || !(opts.lambda > 0.0) {
        return Err("interval and lambda must be positive".into());
    }
    let d = recordings.first().map(Array::cols).ok_or("no sequences to ingest")?;
    let horizon = opts.interval + TIME_SHIFT;
    let mut series = Vec::with_capacity(recordings.len());
    for (k, rec) in recordings.iter().enumerate() {
        if rec.rows() == 0 {
            return Err(format!("sequence {k} is empty"));
        }
        let mut rng = sequence_rng(opts.seed, k as u64);
        let grid = sample_poisson_grid(opts.lambda, opts.interval, &mut rng).map_err(|e| e.to_string())?;
        let mut last = None;
        let (mut times, mut values) = (Vec::new(), Vec::new());
        for &t in grid.times() {
            let j = nearest_index(t, rec.rows(), opts.interval);
            if last.is_some_and(|l| l >= j) {
                continue;
            }
            last = Some(j);
            times.push(j as f64 * opts.interval / rec.rows() as f64 + TIME_SHIFT);
            values.extend_from_slice(rec.row_slice(j));
        }
        let n = times.len();
        let grid = TimeGrid::new(times, horizon).map_err(|e| e.to_string())?;
        series.push(TimeSeries::new(grid, Array::from_vec(n, d, values)).map_err(|e| e.to_string())?);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            process: "ingested".into(),
            params: serde_json::json!({ "source": source, "interval": opts.interval, "id_column": opts.id_column }),
            lambda: opts.lambda,
            horizon,
            seed: opts.seed,
            d,
            n_sequences: series.len(),
        },
        series,
    })
}
