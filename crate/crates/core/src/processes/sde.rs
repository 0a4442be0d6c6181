use rand::Rng;

use super::{standard_normal, ProcessError};

/// A diffusion with diagonal noise: `dZ = drift(Z, t) dt + diffusion(Z, t) ⊙ dW`.
pub trait SdeSpec {
    fn dim(&self) -> usize;
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]);
    fn diffusion(&self, z: &[f64], t: f64, out: &mut [f64]);
}

type Field = Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// An [`SdeSpec`] assembled from closures.
pub struct FnSde {
    dim: usize,
    drift: Field,
    diffusion: Field,
}

impl FnSde {
    pub fn new(
        dim: usize,
        drift: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
        }
    }
}

impl SdeSpec for FnSde {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        (self.drift)(z, t, out)
    }
    fn diffusion(&self, z: &[f64], t: f64, out: &mut [f64]) {
        (self.diffusion)(z, t, out)
    }
}

/// Brownian increments over consecutive step boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    /// Step boundaries; `times.len() == increments.len() + 1` unless empty.
    pub times: Vec<f64>,
    /// One `k`-vector of increments per step.
    pub increments: Vec<Vec<f64>>,
}

impl WienerPath {
    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }

    pub fn dim(&self) -> usize {
        self.increments.first().map_or(0, Vec::len)
    }

    /// `W` at the final boundary relative to the first.
    pub fn endpoint(&self, k: usize) -> Vec<f64> {
        let mut w = vec![0.0; k];
        for inc in &self.increments {
            for (a, b) in w.iter_mut().zip(inc) {
                *a += b;
            }
        }
        w
    }
}

/// Samples `N(0, Δt I_k)` increments between consecutive entries of `times`.
/// Fewer than two boundaries give an empty path.
pub fn wiener_path<R: Rng + ?Sized>(k: usize, times: &[f64], rng: &mut R) -> Result<WienerPath, ProcessError> {
    if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(ProcessError::InvalidParam(format!(
            "Wiener step sizes must be positive ({} then {})",
            w[0], w[1]
        )));
    }
    let increments = times
        .windows(2)
        .map(|w| {
            let sd = (w[1] - w[0]).sqrt();
            (0..k).map(|_| sd * standard_normal(rng)).collect()
        })
        .collect();
    Ok(WienerPath {
        times: if times.len() < 2 { Vec::new() } else { times.to_vec() },
        increments,
    })
}

/// Euler–Maruyama along a pre-sampled path; returns every state including `z0`.
pub fn euler_maruyama<S: SdeSpec + ?Sized>(
    spec: &S,
    z0: &[f64],
    path: &WienerPath,
) -> Result<Vec<Vec<f64>>, ProcessError> {
    let m = spec.dim();
    if z0.len() != m || (path.n_steps() > 0 && path.dim() != m) {
        return Err(ProcessError::InvalidParam(format!(
            "state dim {} / path dim {} do not match SDE dim {m}",
            z0.len(),
            path.dim()
        )));
    }
    let mut out = Vec::with_capacity(path.n_steps() + 1);
    out.push(z0.to_vec());
    let mut mu = vec![0.0; m];
    let mut sigma = vec![0.0; m];
    for (k, dw) in path.increments.iter().enumerate() {
        let t = path.times[k];
        let dt = path.times[k + 1] - t;
        let z = out.last().expect("non-empty");
        spec.drift(z, t, &mut mu);
        spec.diffusion(z, t, &mut sigma);
        let next: Vec<f64> = (0..m).map(|j| z[j] + mu[j] * dt + sigma[j] * dw[j]).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ProcessError::NonFinite { step: k });
        }
        out.push(next);
    }
    Ok(out)
}

/// Number of equal Euler–Maruyama steps covering `dt` with step at most `h`.
pub fn em_steps(dt: f64, h: f64) -> usize {
    ((dt / h) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Advances `z` in place from `t0` to `t1` with [`em_steps`] equal steps,
/// drawing increments from `rng`.
pub fn em_advance<S: SdeSpec + ?Sized, R: Rng + ?Sized>(
    spec: &S,
    z: &mut [f64],
    t0: f64,
    t1: f64,
    h: f64,
    rng: &mut R,
) -> Result<(), ProcessError> {
    if !(t1 > t0) || !(h > 0.0) {
        return Err(ProcessError::InvalidParam(format!("need t1 > t0 and h > 0, got [{t0}, {t1}], h={h}")));
    }
    let m = spec.dim();
    let n = em_steps(t1 - t0, h);
    let dt = (t1 - t0) / n as f64;
    let sd = dt.sqrt();
    let mut mu = vec![0.0; m];
    let mut sigma = vec![0.0; m];
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        spec.drift(z, t, &mut mu);
        spec.diffusion(z, t, &mut sigma);
        for j in 0..m {
            z[j] += mu[j] * dt + sigma[j] * sd * standard_normal(rng);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ProcessError::NonFinite { step: k });
        }
    }
    Ok(())
}
