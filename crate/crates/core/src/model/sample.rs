//! Generation of observation paths from the prior.
//!
//! The latent state and the base process are simulated on the fixed lattice
//! `j * h` (with `h` the Euler–Maruyama step) from one random stream. A grid
//! time off the lattice is filled in by a bridge between its two lattice
//! neighbours, using a random stream keyed by the time itself. Grid times
//! therefore receive the same values whatever other times the grid holds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dynamics::Dynamics;
use super::{ClpfModel, ModelError, Result};
use crate::autodiff::{Array, Tape};
use crate::processes::{TimeGrid, TimeSeries};

/// One generated path with the latent and base values behind it.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub series: TimeSeries,
    /// `n x m` latent states; empty columns without a latent SDE.
    pub latent: Array,
    /// `n x d` base-process values; zero for the Gaussian decoder.
    pub base: Array,
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn keyed_rng(seed: u64, t: f64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a_5a5a_5a5a);
    rng.set_stream(t.to_bits());
    rng
}

/// Position of `t` on the lattice: `Ok(j)` if `t == j * h` exactly, else
/// `Err(j)` with `j * h < t < (j + 1) * h`.
fn lattice_index(t: f64, h: f64) -> std::result::Result<usize, usize> {
    let j = (t / h).round() as usize;
    if j as f64 * h == t {
        return Ok(j);
    }
    let mut lo = (t / h).floor() as usize;
    while lo as f64 * h > t {
        lo -= 1;
    }
    while (lo + 1) as f64 * h <= t {
        lo += 1;
    }
    Err(lo)
}

/// Draws one trajectory of the generative model on `grid`.
pub fn sample_trajectory(model: &ClpfModel, grid: &TimeGrid, seed: u64) -> Result<SampledTrajectory> {
    let cfg = model.config();
    let (d, m, h) = (cfg.data_dim, cfg.latent_dim, cfg.em_step);
    let wiener = cfg.variant.wiener_base();
    let tape = Tape::no_grad();
    let mt = model.bind(&tape)?;
    let t_last = *grid.times().last().ok_or_else(|| ModelError::Data("empty grid".into()))?;
    let n_lattice = match lattice_index(t_last, h) {
        Ok(j) => j + 1,
        Err(j) => j + 2,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_lattice);
    let mut sigmas: Vec<Vec<f64>> = Vec::with_capacity(n_lattice);
    let mut os: Vec<Vec<f64>> = Vec::with_capacity(n_lattice);
    os.push(if wiener { vec![0.0; d] } else { normals(d, &mut rng) });
    let (decay, step_sd) = if wiener {
        (1.0, h.sqrt())
    } else {
        ((-h).exp(), (-(-2.0 * h).exp_m1()).sqrt())
    };
    let mut z = if m > 0 { Some(mt.initial_latent(1)?) } else { None };
    for j in 0..n_lattice {
        if let Some(zt) = &z {
            let (mu, sigma) = mt.prior(zt, j as f64 * h)?;
            zs.push(zt.value().data().to_vec());
            sigmas.push(sigma.value().data().to_vec());
            if j + 1 < n_lattice {
                let dw = normals(m, &mut rng);
                let next: Vec<f64> = (0..m)
                    .map(|c| zt.value().data()[c] + mu.value().data()[c] * h + sigma.value().data()[c] * h.sqrt() * dw[c])
                    .collect();
                z = Some(tape.constant(Array::row(&next)));
            }
        }
        if j + 1 < n_lattice {
            let xi = normals(d, &mut rng);
            let prev = &os[j];
            let next = (0..d).map(|c| prev[c] * decay + step_sd * xi[c]).collect();
            os.push(next);
        }
    }

    let n = grid.len();
    let mut z_rows = Vec::with_capacity(n);
    let mut o_rows = Vec::with_capacity(n);
    for &t in grid.times() {
        match lattice_index(t, h) {
            Ok(j) => {
                z_rows.push(zs.get(j).cloned().unwrap_or_default());
                o_rows.push(os[j].clone());
            }
            Err(j) => {
                let mut krng = keyed_rng(seed, t);
                let (a, b) = (j as f64 * h, (j + 1) as f64 * h);
                let (s, r) = (t - a, b - t);
                if m > 0 {
                    let sd = (s * r / h).sqrt();
                    let xi = normals(m, &mut krng);
                    z_rows.push(
                        (0..m)
                            .map(|c| zs[j][c] + s / h * (zs[j + 1][c] - zs[j][c]) + sigmas[j][c] * sd * xi[c])
                            .collect(),
                    );
                } else {
                    z_rows.push(Vec::new());
                }
                let xi = normals(d, &mut krng);
                let (oa, ob) = (&os[j], &os[j + 1]);
                let o = if wiener {
                    let sd = (s * r / h).sqrt();
                    (0..d).map(|c| oa[c] + s / h * (ob[c] - oa[c]) + sd * xi[c]).collect()
                } else {
                    let (es, er) = ((-s).exp(), (-r).exp());
                    let (v1, v2) = (-(-2.0 * s).exp_m1(), -(-2.0 * r).exp_m1());
                    let prec = 1.0 / v1 + er * er / v2;
                    (0..d)
                        .map(|c| (oa[c] * es / v1 + ob[c] * er / v2) / prec + prec.sqrt().recip() * xi[c])
                        .collect()
                };
                o_rows.push(o);
            }
        }
    }

    let latent = Array::from_vec(n, m, z_rows.concat());
    let base = Array::from_rows(&o_rows);
    let zt = (m > 0).then(|| tape.constant(latent.clone()));
    let values = if mt.has_flow() {
        mt.decode_rows(&tape.constant(base.clone()), zt.as_ref(), grid.times())?
    } else {
        let (mean, logvar) = mt.gaussian_params(zt.as_ref().expect("gaussian decoder has a latent"))?;
        let mut rows = Vec::with_capacity(n);
        for (i, &t) in grid.times().iter().enumerate() {
            let xi = normals(d, &mut keyed_rng(seed.wrapping_add(1), t));
            let y: Vec<f64> = (0..d)
                .map(|c| mean.value().get(i, c) + (0.5 * logvar.value().get(i, c)).exp() * xi[c])
                .collect();
            rows.push(cfg.denormalise(&y));
        }
        Array::from_rows(&rows)
    };
    let base = if mt.has_flow() { base } else { Array::zeros(n, d) };
    let series = TimeSeries::new(grid.clone(), values)?;
    Ok(SampledTrajectory { series, latent, base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn lag1_autocorr(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = v.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        cov / var
    }

    #[test]
    fn identity_flow_gives_ou_paths() {
        let model = ClpfModel::new(ModelConfig::new(Variant::Clpf, 1, 2), 0).unwrap();
        let grid = TimeGrid::regular(0.1, 400.0).unwrap();
        let traj = sample_trajectory(&model, &grid, 3).unwrap();
        let x = traj.series.values.data();
        assert_eq!(x, traj.base.data());
        let rho = lag1_autocorr(x);
        // Lag-1 sample autocorrelation SE is about sqrt((1 - rho^2) / n).
        let exact = (-0.1f64).exp();
        let se = ((1.0 - exact * exact) / x.len() as f64).sqrt();
        assert!((rho - exact).abs() < 3.0 * se, "{rho} vs {exact}");
    }

    #[test]
    fn superset_grid_agrees_at_shared_times() {
        let mut cfg = ModelConfig::new(Variant::Clpf, 2, 2);
        cfg.flow_kind = crate::flows::FlowKind::Affine;
        let mut model = ClpfModel::new(cfg, 1).unwrap();
        // Move off the identity so decoding depends on z and t.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in model.store().ids().collect::<Vec<_>>() {
            let v = model.store_mut().value_mut(id);
            for x in v.data_mut() {
                *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let coarse = TimeGrid::new(vec![0.013, 0.5, 1.0, 1.2345], 2.0).unwrap();
        let fine = TimeGrid::new(vec![0.005, 0.013, 0.2, 0.5, 0.77, 1.0, 1.1, 1.2345, 1.9], 2.0).unwrap();
        let a = sample_trajectory(&model, &coarse, 11).unwrap();
        let b = sample_trajectory(&model, &fine, 11).unwrap();
        for (i, &t) in coarse.times().iter().enumerate() {
            let j = fine.times().iter().position(|&u| u == t).unwrap();
            assert_eq!(a.series.value(i), b.series.value(j), "t = {t}");
            assert_eq!(a.latent.row_slice(i), b.latent.row_slice(j));
        }
    }

    #[test]
    fn dense_grid_and_variants() {
        let grid = TimeGrid::regular(0.01, 3.0).unwrap();
        for v in Variant::ALL {
            let model = ClpfModel::new(ModelConfig::new(v, 3, 2), 0).unwrap();
            let traj = sample_trajectory(&model, &grid, 5).unwrap();
            assert_eq!(traj.series.len(), 300);
            assert_eq!(traj.series.dim(), 3);
            assert!(traj.series.values.is_finite(), "{v}");
        }
    }

    #[test]
    fn wiener_base_starts_near_zero() {
        let model = ClpfModel::new(ModelConfig::new(Variant::Ctfp, 1, 0), 0).unwrap();
        let grid = TimeGrid::new(vec![1e-6], 1.0).unwrap();
        let x: Vec<f64> = (0..200)
            .map(|s| sample_trajectory(&model, &grid, s).unwrap().series.value(0)[0])
            .collect();
        assert!(x.iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn lattice_positions() {
        assert_eq!(lattice_index(3.0 * 0.01, 0.01), Ok(3));
        assert_eq!(lattice_index(0.035, 0.01), Err(3));
        assert_eq!(lattice_index(5.0 * 0.01, 0.01), Ok(5));
    }
}
