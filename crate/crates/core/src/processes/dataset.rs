use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{em_advance, gbm_exact_sample, sample_poisson_grid, standard_normal, ProcessError, SdeSpec, TimeGrid, TimeSeries};
use crate::autodiff::Array;

/// Euler–Maruyama step used when simulating the benchmark processes.
pub const GENERATION_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    Gbm,
    Lsde,
    Car,
    Slc,
}

impl ProcessKind {
    pub fn name(self) -> &'static str {
        match self {
            ProcessKind::Gbm => "gbm",
            ProcessKind::Lsde => "lsde",
            ProcessKind::Car => "car",
            ProcessKind::Slc => "slc",
        }
    }

    /// Observation dimension.
    pub fn dim(self) -> usize {
        match self {
            ProcessKind::Slc => 3,
            _ => 1,
        }
    }

    pub fn default_horizon(self) -> f64 {
        match self {
            ProcessKind::Slc => 2.0,
            _ => 30.0,
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            ProcessKind::Slc => 20.0,
            _ => 2.0,
        }
    }
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProcessKind {
    type Err = ProcessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gbm" => Ok(ProcessKind::Gbm),
            "lsde" => Ok(ProcessKind::Lsde),
            "car" => Ok(ProcessKind::Car),
            "slc" => Ok(ProcessKind::Slc),
            _ => Err(ProcessError::UnknownProcess(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub mu: f64,
    pub sigma: f64,
    pub x0: f64,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self { mu: 0.2, sigma: 0.1, x0: 1.0 }
    }
}

/// `dX = (a sin t X + b cos t) dt + c / (1 + e^{-t}) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub x0: f64,
    pub em_step: f64,
}

impl Default for LsdeParams {
    fn default() -> Self {
        Self { a: 0.5, b: 0.5, c: 0.2, x0: 0.0, em_step: GENERATION_STEP }
    }
}

/// Companion-form linear SDE `dY = A Y dt + e dW` observed through `Y_1`,
/// with the last row of `A` equal to `a` and `e = (0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub a: [f64; 4],
    pub em_step: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self { a: [0.002, 0.005, -0.003, -0.002], em_step: GENERATION_STEP }
    }
}

/// Stochastic Lorenz system with additive per-coordinate noise `alpha` and
/// initial state `N(0, init_std² I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlcParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub alpha: [f64; 3],
    pub init_std: f64,
    pub em_step: f64,
}

impl Default for SlcParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            alpha: [0.1, 0.28, 0.3],
            init_std: 1.0,
            em_step: GENERATION_STEP,
        }
    }
}

/// A benchmark process with concrete parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProcessSpec {
    Gbm(GbmParams),
    Lsde(LsdeParams),
    Car(CarParams),
    Slc(SlcParams),
}

struct LsdeSde(LsdeParams);
struct CarSde(CarParams);
struct SlcSde(SlcParams);

impl SdeSpec for LsdeSde {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        out[0] = self.0.a * t.sin() * z[0] + self.0.b * t.cos();
    }
    fn diffusion(&self, _z: &[f64], t: f64, out: &mut [f64]) {
        out[0] = self.0.c / (1.0 + (-t).exp());
    }
}

impl SdeSpec for CarSde {
    fn dim(&self) -> usize {
        4
    }
    fn drift(&self, z: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = z[1];
        out[1] = z[2];
        out[2] = z[3];
        out[3] = self.0.a.iter().zip(z).map(|(a, y)| a * y).sum();
    }
    fn diffusion(&self, _z: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
    }
}

impl SdeSpec for SlcSde {
    fn dim(&self) -> usize {
        3
    }
    fn drift(&self, z: &[f64], _t: f64, out: &mut [f64]) {
        let p = &self.0;
        out[0] = p.sigma * (z[1] - z[0]);
        out[1] = z[0] * (p.rho - z[2]) - z[1];
        out[2] = z[0] * z[1] - p.beta * z[2];
    }
    fn diffusion(&self, _z: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0.alpha);
    }
}

impl ProcessSpec {
    pub fn default_for(kind: ProcessKind) -> Self {
        match kind {
            ProcessKind::Gbm => ProcessSpec::Gbm(GbmParams::default()),
            ProcessKind::Lsde => ProcessSpec::Lsde(LsdeParams::default()),
            ProcessKind::Car => ProcessSpec::Car(CarParams::default()),
            ProcessKind::Slc => ProcessSpec::Slc(SlcParams::default()),
        }
    }

    pub fn kind(&self) -> ProcessKind {
        match self {
            ProcessSpec::Gbm(_) => ProcessKind::Gbm,
            ProcessSpec::Lsde(_) => ProcessKind::Lsde,
            ProcessSpec::Car(_) => ProcessKind::Car,
            ProcessSpec::Slc(_) => ProcessKind::Slc,
        }
    }

    pub fn params_json(&self) -> serde_json::Value {
        let v = match self {
            ProcessSpec::Gbm(p) => serde_json::to_value(p),
            ProcessSpec::Lsde(p) => serde_json::to_value(p),
            ProcessSpec::Car(p) => serde_json::to_value(p),
            ProcessSpec::Slc(p) => serde_json::to_value(p),
        };
        v.expect("plain parameter structs serialise")
    }

    pub fn from_json(kind: ProcessKind, params: &serde_json::Value) -> Result<Self, ProcessError> {
        let bad = |e: serde_json::Error| ProcessError::Malformed { line: 1, detail: format!("{kind} params: {e}") };
        Ok(match kind {
            ProcessKind::Gbm => ProcessSpec::Gbm(serde_json::from_value(params.clone()).map_err(bad)?),
            ProcessKind::Lsde => ProcessSpec::Lsde(serde_json::from_value(params.clone()).map_err(bad)?),
            ProcessKind::Car => ProcessSpec::Car(serde_json::from_value(params.clone()).map_err(bad)?),
            ProcessKind::Slc => ProcessSpec::Slc(serde_json::from_value(params.clone()).map_err(bad)?),
        })
    }

    /// Draws the initial latent state of the process.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ProcessSpec::Gbm(p) => vec![p.x0],
            ProcessSpec::Lsde(p) => vec![p.x0],
            ProcessSpec::Car(_) => vec![0.0; 4],
            ProcessSpec::Slc(p) => (0..3).map(|_| p.init_std * standard_normal(rng)).collect(),
        }
    }

    /// Simulates the observed values on `grid` from the time-zero state `init`.
    pub fn simulate_from<R: Rng + ?Sized>(
        &self,
        grid: &TimeGrid,
        init: &[f64],
        rng: &mut R,
    ) -> Result<Array, ProcessError> {
        let d = self.kind().dim();
        let mut values = Array::zeros(grid.len(), d);
        let mut state = init.to_vec();
        let mut t_prev = 0.0;
        for (i, &t) in grid.times().iter().enumerate() {
            match self {
                ProcessSpec::Gbm(p) => state[0] = gbm_exact_sample(state[0], t - t_prev, p.mu, p.sigma, rng)?,
                ProcessSpec::Lsde(p) => em_advance(&LsdeSde(*p), &mut state, t_prev, t, p.em_step, rng)?,
                ProcessSpec::Car(p) => em_advance(&CarSde(*p), &mut state, t_prev, t, p.em_step, rng)?,
                ProcessSpec::Slc(p) => em_advance(&SlcSde(*p), &mut state, t_prev, t, p.em_step, rng)?,
            }
            for (j, v) in state.iter().take(d).enumerate() {
                values.set(i, j, *v);
            }
            t_prev = t;
        }
        Ok(values)
    }

    fn validate(&self) -> Result<(), ProcessError> {
        let step = match self {
            ProcessSpec::Gbm(p) => {
                if !(p.sigma > 0.0 && p.x0 > 0.0) {
                    return Err(ProcessError::InvalidParam("GBM needs sigma > 0 and x0 > 0".into()));
                }
                None
            }
            ProcessSpec::Lsde(p) => Some(p.em_step),
            ProcessSpec::Car(p) => Some(p.em_step),
            ProcessSpec::Slc(p) => Some(p.em_step),
        };
        match step {
            Some(h) if !(h > 0.0) => Err(ProcessError::InvalidParam(format!("em_step must be positive, got {h}"))),
            _ => Ok(()),
        }
    }
}

/// Header line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub process: String,
    pub params: serde_json::Value,
    pub lambda: f64,
    pub horizon: f64,
    pub seed: u64,
    pub d: usize,
    pub n_sequences: usize,
}

impl DatasetMeta {
    /// The generating process, if this dataset came from a benchmark generator.
    pub fn process_spec(&self) -> Result<ProcessSpec, ProcessError> {
        ProcessSpec::from_json(self.process.parse()?, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub series: Vec<TimeSeries>,
}

impl Dataset {
    pub fn total_observations(&self) -> usize {
        self.series.iter().map(TimeSeries::len).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.total_observations() as f64 / self.series.len().max(1) as f64
    }
}

/// Per-sequence generator: stream `index` of the ChaCha8 generator seeded by `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates `n` sequences on independent Poisson grids.
pub fn generate_dataset(
    spec: &ProcessSpec,
    n: usize,
    lambda: f64,
    horizon: f64,
    seed: u64,
) -> Result<Dataset, ProcessError> {
    spec.validate()?;
    if n == 0 {
        return Err(ProcessError::InvalidParam("n_sequences must be positive".into()));
    }
    let series = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sequence_rng(seed, i as u64);
            let grid = sample_poisson_grid(lambda, horizon, &mut rng)?;
            let init = spec.initial_state(&mut rng);
            let values = spec.simulate_from(&grid, &init, &mut rng)?;
            TimeSeries::new(grid, values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            process: spec.kind().name().to_string(),
            params: spec.params_json(),
            lambda,
            horizon,
            seed,
            d: spec.kind().dim(),
            n_sequences: n,
        },
        series,
    })
}

#[derive(Serialize, Deserialize)]
struct SeriesLine {
    t: Vec<f64>,
    x: Vec<Vec<f64>>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ProcessError + '_ {
    move |source| ProcessError::Io { path: path.to_path_buf(), source }
}

/// Writes the JSONL dataset through a temporary file renamed into place.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), ProcessError> {
    let tmp = path.with_extension("jsonl.tmp");
    let result = (|| -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        serde_json::to_writer(&mut w, &data.meta)?;
        w.write_all(b"\n")?;
        for s in &data.series {
            let line = SeriesLine {
                t: s.times().to_vec(),
                x: (0..s.len()).map(|i| s.value(i).to_vec()).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, ProcessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or(ProcessError::Malformed { line: 1, detail: "empty file".into() })?
        .map_err(io_err(path))?;
    let meta: DatasetMeta =
        serde_json::from_str(&header).map_err(|e| ProcessError::Malformed { line: 1, detail: e.to_string() })?;
    let mut series = Vec::with_capacity(meta.n_sequences);
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| ProcessError::Malformed { line: line_no, detail };
        let rec: SeriesLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.x.iter().any(|row| row.len() != meta.d) {
            return Err(bad(format!("observation width differs from d = {}", meta.d)));
        }
        let values = Array::from_vec(rec.x.len(), meta.d, rec.x.concat());
        let grid = TimeGrid::new(rec.t, meta.horizon).map_err(|e| bad(e.to_string()))?;
        series.push(TimeSeries::new(grid, values).map_err(|e| bad(e.to_string()))?);
    }
    if series.len() != meta.n_sequences {
        return Err(ProcessError::Malformed {
            line: 1,
            detail: format!("header announces {} sequences, found {}", meta.n_sequences, series.len()),
        });
    }
    Ok(Dataset { meta, series })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = ProcessSpec::default_for(ProcessKind::Gbm);
        let a = generate_dataset(&spec, 20, 2.0, 30.0, 7).unwrap();
        let b = generate_dataset(&spec, 20, 2.0, 30.0, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 20, 2.0, 30.0, 8).unwrap();
        assert_ne!(a.series[1], c.series[0]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_dataset(&ProcessSpec::default_for(ProcessKind::Slc), 3, 20.0, 2.0, 1).unwrap();
        write_dataset(&path, &data).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.meta.d, 3);
        let first = fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"process\":\"slc\",\"params\":"));
        write_dataset(&path, &data).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), first);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let header = r#"{"process":"gbm","params":{},"lambda":2.0,"horizon":30.0,"seed":1,"d":1,"n_sequences":1}"#;
        fs::write(&path, format!("{header}\n{{\"t\":[1.0,0.5],\"x\":[[1.0],[2.0]]}}\n")).unwrap();
        assert!(matches!(read_dataset(&path), Err(ProcessError::Malformed { line: 2, .. })));
        fs::write(&path, format!("{header}\n{{\"t\":[1.0],\"x\":[[1.0,2.0]]}}\n")).unwrap();
        assert!(matches!(read_dataset(&path), Err(ProcessError::Malformed { line: 2, .. })));
        fs::write(&path, format!("{header}\n")).unwrap();
        assert!(matches!(read_dataset(&path), Err(ProcessError::Malformed { line: 1, .. })));
        assert!(matches!(read_dataset(&dir.path().join("none")), Err(ProcessError::Io { .. })));
    }

    #[test]
    fn unknown_process_name() {
        assert!(matches!("brownian".parse::<ProcessKind>(), Err(ProcessError::UnknownProcess(_))));
        assert_eq!("SLC".parse::<ProcessKind>().unwrap(), ProcessKind::Slc);
    }

    #[test]
    fn gbm_paths_stay_positive() {
        let data = generate_dataset(&ProcessSpec::default_for(ProcessKind::Gbm), 50, 2.0, 30.0, 3).unwrap();
        assert!(data.series.iter().all(|s| s.values.data().iter().all(|&x| x > 0.0)));
        assert_eq!(data.meta.process_spec().unwrap(), ProcessSpec::Gbm(GbmParams::default()));
    }

    #[test]
    fn car_without_feedback_stays_finite() {
        let spec = ProcessSpec::Car(CarParams { a: [0.0; 4], em_step: 1e-3 });
        let data = generate_dataset(&spec, 200, 2.0, 30.0, 2).unwrap();
        assert!(data.series.iter().all(|s| s.values.is_finite()));
        // Triple-integrated Brownian motion: Var Y1(t) = t^7 / 252. Compare the spread at late times.
        let late: Vec<f64> = data
            .series
            .iter()
            .filter_map(|s| s.times().iter().position(|&t| t > 20.0).map(|i| s.value(i)[0]))
            .collect();
        let early: Vec<f64> = data
            .series
            .iter()
            .filter_map(|s| s.times().iter().position(|&t| t > 2.0).map(|i| s.value(i)[0]))
            .collect();
        let ms = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!(ms(&late) > 100.0 * ms(&early));
    }

    #[test]
    fn noiseless_lorenz_ignores_the_noise_seed() {
        let spec = ProcessSpec::Slc(SlcParams { alpha: [0.0; 3], em_step: 1e-3, ..SlcParams::default() });
        let grid = TimeGrid::regular(0.1, 2.0).unwrap();
        let init = [1.0, 1.0, 1.0];
        let a = spec.simulate_from(&grid, &init, &mut sequence_rng(1, 0)).unwrap();
        let b = spec.simulate_from(&grid, &init, &mut sequence_rng(99, 5)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().any(|v| v.abs() > 5.0));
    }

    #[test]
    fn slc_and_lsde_generate() {
        let slc = generate_dataset(&ProcessSpec::default_for(ProcessKind::Slc), 4, 20.0, 2.0, 5).unwrap();
        assert!(slc.series.iter().all(|s| s.dim() == 3 && s.values.is_finite()));
        let lsde = generate_dataset(&ProcessSpec::default_for(ProcessKind::Lsde), 4, 2.0, 30.0, 5).unwrap();
        assert!(lsde.series.iter().all(|s| s.dim() == 1 && s.values.is_finite()));
    }
}
