use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::ProcessError;
use crate::autodiff::Array;

/// Strictly increasing observation times inside `(0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, horizon: f64) -> Result<Self, ProcessError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ProcessError::InvalidParam(format!("horizon must be positive, got {horizon}")));
        }
        if times.is_empty() {
            return Err(ProcessError::InvalidParam("a time grid needs at least one point".into()));
        }
        if !(times[0] > 0.0) || times[times.len() - 1] > horizon {
            return Err(ProcessError::InvalidParam(format!(
                "grid times must lie in (0, {horizon}], got [{}, {}]",
                times[0],
                times[times.len() - 1]
            )));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(ProcessError::InvalidParam(format!(
                "grid times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { times, horizon })
    }

    /// `step, 2 step, ..` up to and including `horizon` (within rounding).
    pub fn regular(step: f64, horizon: f64) -> Result<Self, ProcessError> {
        if !(step > 0.0) {
            return Err(ProcessError::InvalidParam(format!("grid step must be positive, got {step}")));
        }
        let n = (horizon / step + 1e-9).floor() as usize;
        let times = (1..=n).map(|k| k as f64 * step).map(|t| t.min(horizon)).collect();
        Self::new(times, horizon)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Draws a homogeneous Poisson grid on `[0, horizon]`, retrying empty draws.
pub fn sample_poisson_grid<R: Rng + ?Sized>(lambda: f64, horizon: f64, rng: &mut R) -> Result<TimeGrid, ProcessError> {
    if !(lambda > 0.0 && lambda.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(ProcessError::InvalidParam(format!(
            "Poisson grid needs lambda > 0 and horizon > 0, got {lambda}, {horizon}"
        )));
    }
    let gap = Exp::new(lambda).map_err(|e| ProcessError::InvalidParam(e.to_string()))?;
    loop {
        let mut times = Vec::new();
        let mut t = 0.0;
        loop {
            t += gap.sample(rng);
            if t > horizon {
                break;
            }
            if t > 0.0 && times.last().is_none_or(|&prev| t > prev) {
                times.push(t);
            }
        }
        if !times.is_empty() {
            return TimeGrid::new(times, horizon);
        }
    }
}

/// Observations `values` (`n x d`) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub grid: TimeGrid,
    pub values: Array,
}

impl TimeSeries {
    pub fn new(grid: TimeGrid, values: Array) -> Result<Self, ProcessError> {
        if values.rows() != grid.len() {
            return Err(ProcessError::InvalidParam(format!(
                "{} value rows for {} grid points",
                values.rows(),
                grid.len()
            )));
        }
        if values.cols() == 0 || !values.is_finite() {
            return Err(ProcessError::InvalidParam("series values must be finite with d >= 1".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        self.values.row_slice(i)
    }
}
