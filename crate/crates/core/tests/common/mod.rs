//! Brute-force oracles shared by the integration tests and the acceptance
//! target. None of them reuse the library's closed forms.
#![allow(dead_code)]

use mgcp_core::inference::VariationalState;
use mgcp_core::kernel::joint_covariance;
use mgcp_core::{EventDataset, Hyperparameters, InducingPoints, ObservationWindow, UnitRecord};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(x: f64, sd: f64) -> f64 {
    (-0.5 * (x / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫∫ G_i(t - s) G_j(u - s') κ(s - s') ds ds'` with `G_i = α_i N(0, ξ_i²)`,
/// by the 2-D trapezoid rule on ±8 kernel widths around `t` and `u`.
pub fn convolution_oracle(i: usize, j: usize, t: f64, u: f64, theta: &Hyperparameters) -> f64 {
    let ell = theta.length_scale();
    let (xi, xj) = (theta.widths()[i], theta.widths()[j]);
    let h = xi.min(xj).min(ell) / 6.0;
    let axis = |c: f64, w: f64| -> Vec<f64> {
        let n = (16.0 * w / h).ceil() as usize;
        let step = 16.0 * w / n as f64;
        (0..=n).map(|k| c - 8.0 * w + step * k as f64).collect()
    };
    let s_axis = axis(t, xi);
    let r_axis = axis(u, xj);
    let trap = |k: usize, n: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
    let hs = s_axis[1] - s_axis[0];
    let hr = r_axis[1] - r_axis[0];
    let gi: Vec<f64> = s_axis.iter().map(|s| gauss(t - s, xi)).collect();
    let gj: Vec<f64> = r_axis.iter().map(|r| gauss(u - r, xj)).collect();
    let mut total = 0.0;
    for (a, s) in s_axis.iter().enumerate() {
        let mut inner = 0.0;
        for (b, r) in r_axis.iter().enumerate() {
            inner += trap(b, r_axis.len()) * gj[b] * (-(s - r).powi(2) / (2.0 * ell * ell)).exp();
        }
        total += trap(a, s_axis.len()) * gi[a] * inner;
    }
    theta.scales()[i] * theta.scales()[j] * total * hs * hr
}

/// Monte Carlo estimate `(mean, standard error)` of `E_q[log q(X) - log p(X)]`.
pub fn kl_monte_carlo(m: &DVector<f64>, l: &DMatrix<f64>, k: &DMatrix<f64>, samples: usize, seed: u64) -> (f64, f64) {
    let n = m.len();
    let kc = k.clone().cholesky().expect("prior covariance is positive definite");
    let log_det_k: f64 = 2.0 * kc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_det_s: f64 = 2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    let mut r = rng(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
        let x = m + l * &eps;
        let log_q = -0.5 * eps.norm_squared() - 0.5 * log_det_s;
        let log_p = -0.5 * x.dot(&kc.solve(&x)) - 0.5 * log_det_k;
        let d = log_q - log_p;
        sum += d;
        sum2 += d * d;
    }
    let mean = sum / samples as f64;
    let var = (sum2 / samples as f64 - mean * mean) * samples as f64 / (samples - 1) as f64;
    (mean, (var / samples as f64).sqrt())
}

/// `∫_a^b f` by the midpoint rule with `n` cells.
pub fn midpoint<F: FnMut(f64) -> f64>(a: f64, b: f64, n: usize, mut f: F) -> f64 {
    let h = (b - a) / n as f64;
    (0..n).map(|k| f(a + h * (k as f64 + 0.5))).sum::<f64>() * h
}

/// Importance-sampling estimate of `log p(D)` for the full (non-sparse)
/// model, with proposal `q(X) p(f | X)`. Returns `(estimate, standard error)`
/// by the delta method. Intensity integrals use `nodes_per_unit` midpoint
/// cells on each unit's exposure.
pub fn log_marginal_is(
    ds: &EventDataset,
    theta: &Hyperparameters,
    vstate: &VariationalState,
    nodes_per_unit: usize,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let z = vstate.inducing();
    let m_ind = z.len();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, (a, b)) in ds.exposures().into_iter().enumerate() {
        let h = (b - a) / nodes_per_unit as f64;
        for k in 0..nodes_per_unit {
            points.push((i, a + h * (k as f64 + 0.5)));
            weights.push(h);
        }
    }
    let n_nodes = points.len();
    for (i, u) in ds.units().iter().enumerate() {
        for &t in &u.event_times {
            points.push((i, t));
        }
    }
    let n_f = points.len();
    // Joint prior over [X; f] and the conditional f | X.
    let joint = joint_covariance(&points, z, theta);
    let kxx = joint.view((n_f, n_f), (m_ind, m_ind)).into_owned();
    let kfx = joint.view((0, n_f), (n_f, m_ind)).into_owned();
    let kff = joint.view((0, 0), (n_f, n_f)).into_owned();
    let kxx_c = kxx.clone().cholesky().expect("K_XX positive definite");
    let a = kxx_c.solve(&kfx.transpose());
    let cond = &kff - &kfx * &a;
    let cond = 0.5 * (&cond + cond.transpose());
    // The conditional is typically numerically rank deficient; a clipped
    // eigendecomposition gives an exact square root of its PSD part.
    let eig = cond.symmetric_eigen();
    let sqrt_d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let cond_l = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_d);
    let kxx_l = kxx_c.l();
    let log_det_k: f64 = 2.0 * kxx_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let l = vstate.chol_s();
    let log_det_s: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let mut r = rng(seed);
    let mut logw = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = DVector::from_fn(m_ind, |_, _| StandardNormal.sample(&mut r));
        let x = vstate.mean() + l * &eps;
        let nu = DVector::from_fn(n_f, |_, _| StandardNormal.sample(&mut r));
        let f = a.transpose() * &x + &cond_l * nu;
        let mut ll = 0.0;
        for k in 0..n_nodes {
            ll -= weights[k] * f[k].exp();
        }
        for k in n_nodes..n_f {
            ll += f[k];
        }
        let log_q = -0.5 * eps.norm_squared() - 0.5 * log_det_s;
        let log_p = -0.5 * x.dot(&kxx_c.solve(&x)) - 0.5 * log_det_k;
        logw.push(ll + log_p - log_q);
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|v| (v - top).exp()).collect();
    let n = samples as f64;
    let mean_w = w.iter().sum::<f64>() / n;
    let var_w = w.iter().map(|v| (v - mean_w).powi(2)).sum::<f64>() / (n - 1.0);
    (top + mean_w.ln(), (var_w / n).sqrt() / mean_w)
}

pub fn random_theta<R: Rng>(r: &mut R, n_units: usize) -> Hyperparameters {
    let ell = r.random_range(0.5..3.0);
    let widths = (0..n_units).map(|_| r.random_range(0.2..2.0)).collect();
    let scales = (0..n_units)
        .map(|_| {
            let s: f64 = r.random_range(0.3..2.0);
            if r.random_bool(0.2) {
                -s
            } else {
                s
            }
        })
        .collect();
    Hyperparameters::new(ell, widths, scales).unwrap()
}

/// Random `q(X)` with a well-conditioned factor.
pub fn random_state<R: Rng>(r: &mut R, z: InducingPoints) -> VariationalState {
    let m = z.len();
    let mean = DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0));
    let l = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            r.random_range(0.2..1.0)
        } else if i > j {
            r.random_range(-0.3..0.3)
        } else {
            0.0
        }
    });
    VariationalState::new(mean, l, z).unwrap()
}

/// Random small dataset on `window` with `n_units` units and at most
/// `max_events` events per unit.
pub fn random_dataset<R: Rng>(r: &mut R, window: ObservationWindow, n_units: usize, max_events: usize) -> EventDataset {
    let units = (0..n_units)
        .map(|i| {
            let k = r.random_range(0..=max_events);
            let times = (0..k).map(|_| r.random_range(window.start()..window.end())).collect();
            UnitRecord::new(format!("u{}", i + 1), times)
        })
        .collect();
    EventDataset::new(units, window).unwrap()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
