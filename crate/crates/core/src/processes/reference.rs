use std::f64::consts::PI;

use rand::Rng;

use super::{standard_normal, ProcessError};

/// Smallest time step accepted by the transition densities.
pub const DT_MIN: f64 = 1e-9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_dt(dt: f64) -> Result<(), ProcessError> {
    if dt >= DT_MIN {
        Ok(())
    } else {
        Err(ProcessError::InvalidParam(format!("time step {dt} is below the minimum {DT_MIN}")))
    }
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * var.ln() - 0.5 * (x - mean).powi(2) / var
}

/// Log-density of the unit OU transition `N(o_prev e^{-Δ}, 1 - e^{-2Δ})`,
/// summed over dimensions.
pub fn ou_transition_logpdf(o_prev: &[f64], o_next: &[f64], dt: f64) -> Result<f64, ProcessError> {
    check_dt(dt)?;
    if o_prev.len() != o_next.len() {
        return Err(ProcessError::InvalidParam("OU states differ in dimension".into()));
    }
    let decay = (-dt).exp();
    let var = -(-2.0 * dt).exp_m1();
    Ok(o_prev
        .iter()
        .zip(o_next)
        .map(|(&a, &b)| normal_logpdf(b, a * decay, var))
        .sum())
}

/// Log-density of the stationary marginal `N(0, I)`.
pub fn ou_stationary_logpdf(o: &[f64]) -> f64 {
    o.iter().map(|&v| normal_logpdf(v, 0.0, 1.0)).sum()
}

/// Log-density of the Wiener transition `N(o_prev, Δ I)`.
pub fn wiener_transition_logpdf(o_prev: &[f64], o_next: &[f64], dt: f64) -> Result<f64, ProcessError> {
    check_dt(dt)?;
    if o_prev.len() != o_next.len() {
        return Err(ProcessError::InvalidParam("Wiener states differ in dimension".into()));
    }
    Ok(o_prev.iter().zip(o_next).map(|(&a, &b)| normal_logpdf(b, a, dt)).sum())
}

/// Exact OU transition draw.
pub fn ou_sample<R: Rng + ?Sized>(o_prev: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>, ProcessError> {
    check_dt(dt)?;
    let decay = (-dt).exp();
    let sd = (-(-2.0 * dt).exp_m1()).sqrt();
    Ok(o_prev.iter().map(|&a| a * decay + sd * standard_normal(rng)).collect())
}

fn check_gbm(x_prev: f64, dt: f64, sigma: f64) -> Result<(), ProcessError> {
    check_dt(dt)?;
    if !(x_prev > 0.0) || !(sigma > 0.0) {
        return Err(ProcessError::InvalidParam(format!(
            "GBM needs positive state and volatility, got x={x_prev}, sigma={sigma}"
        )));
    }
    Ok(())
}

/// Exact GBM transition: `log X' ~ N(log x + (μ - σ²/2)Δ, σ²Δ)`.
pub fn gbm_exact_sample<R: Rng + ?Sized>(
    x_prev: f64,
    dt: f64,
    mu: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<f64, ProcessError> {
    check_gbm(x_prev, dt, sigma)?;
    let drift = (mu - 0.5 * sigma * sigma) * dt;
    Ok(x_prev * (drift + sigma * dt.sqrt() * standard_normal(rng)).exp())
}

/// Lognormal transition log-density, including the `-log x_next` Jacobian.
pub fn gbm_exact_logpdf(x_prev: f64, x_next: f64, dt: f64, mu: f64, sigma: f64) -> Result<f64, ProcessError> {
    check_gbm(x_prev, dt, sigma)?;
    if !(x_next > 0.0) {
        return Err(ProcessError::InvalidParam(format!("GBM density needs x_next > 0, got {x_next}")));
    }
    let mean = x_prev.ln() + (mu - 0.5 * sigma * sigma) * dt;
    let var = sigma * sigma * dt;
    let y = x_next.ln();
    Ok(-0.5 * (2.0 * PI * var).ln() - 0.5 * (y - mean).powi(2) / var - y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn stationary_limit() {
        let lp = ou_transition_logpdf(&[0.0], &[0.0], 1e3).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((ou_stationary_logpdf(&[0.0, 0.0]) + 2.0 * 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn tiny_steps() {
        let lp = ou_transition_logpdf(&[0.4], &[0.4], DT_MIN).unwrap();
        assert!(lp.is_finite() && lp > 0.0);
        assert!(ou_transition_logpdf(&[0.4], &[0.4], 1e-12).is_err());
        assert!(ou_transition_logpdf(&[0.4], &[0.4], 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = ou_sample(&[0.7], DT_MIN, &mut rng).unwrap();
        assert!((o[0] - 0.7).abs() < 1e-3);
        assert!(ou_sample(&[0.7], -1.0, &mut rng).is_err());
    }

    #[test]
    fn ou_sampler_matches_density_ks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (o0, dt) = (1.3, 0.5);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| ou_sample(&[o0], dt, &mut rng).unwrap()[0]).collect();
        xs.sort_by(f64::total_cmp);
        // Reference CDF built from the closed-form transition parameters.
        let dist = Normal::new(o0 * (-dt).exp(), (1.0 - (-2.0 * dt).exp()).sqrt()).unwrap();
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = dist.cdf(x);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max);
        let crit = 1.628 / (n as f64).sqrt();
        assert!(ks < crit, "KS {ks} vs {crit}");
        // The density integrates to one on a fine grid.
        let h = 1e-3;
        let mass: f64 = (-8000..8000)
            .map(|k| ou_transition_logpdf(&[o0], &[k as f64 * h], dt).unwrap().exp() * h)
            .sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ou_long_step_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mean = (0..n).map(|_| ou_sample(&[5.0], 50.0, &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn ou_lag_one_autocorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut o = ou_sample(&[0.0], 50.0, &mut rng).unwrap();
        let mut chain = Vec::with_capacity(n);
        for _ in 0..n {
            o = ou_sample(&o, 1.0, &mut rng).unwrap();
            chain.push(o[0]);
        }
        let mean = chain.iter().sum::<f64>() / n as f64;
        let var = chain.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let cov = chain.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1) as f64;
        let rho = cov / var;
        // Bartlett SE for an AR(1) lag-1 estimate: sqrt((1 - rho²) / n).
        let se = ((1.0 - (-2.0f64).exp()) / n as f64).sqrt();
        assert!((rho - (-1.0f64).exp()).abs() < 3.0 * se, "rho {rho}");
    }

    #[test]
    fn gbm_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let dt = 1.5;
        let xs: Vec<f64> = (0..n).map(|_| gbm_exact_sample(1.0, dt, 0.2, 0.1, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - (0.2 * dt).exp()).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn gbm_density_normalises_and_peaks() {
        let (x0, dt, mu, sigma) = (1.0, 0.5, 0.2, 0.1);
        // Quadrature in log-space: dx = x du.
        let du = 1e-4;
        let mass: f64 = (-20_000..20_000)
            .map(|k| {
                let x = (k as f64 * du).exp();
                gbm_exact_logpdf(x0, x, dt, mu, sigma).unwrap().exp() * x * du
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");

        let s = 1e-3;
        let at_prev = gbm_exact_logpdf(2.0, 2.0, 1.0, 0.0, s).unwrap();
        assert!(at_prev.is_finite());
        for k in -50..=50 {
            let x = 2.0 * (1.0 + k as f64 * 1e-4);
            // Lognormal mode sits at exp(m - v); with tiny σ it is within 1e-6 of x_prev.
            if (x - 2.0).abs() > 1e-5 {
                assert!(gbm_exact_logpdf(2.0, x, 1.0, 0.0, s).unwrap() < at_prev);
            }
        }
        assert!(gbm_exact_logpdf(1.0, -1.0, 1.0, 0.2, 0.1).is_err());
        assert!(gbm_exact_logpdf(0.0, 1.0, 1.0, 0.2, 0.1).is_err());
    }

    #[test]
    fn wiener_density() {
        let lp = wiener_transition_logpdf(&[0.0], &[0.0], 1.0).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }
}
