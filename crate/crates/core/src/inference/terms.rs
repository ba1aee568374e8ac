//! The three terms of the evidence lower bound and the closed-form `q(f)`
//! moments they are built from.

use nalgebra::{DMatrix, DVector};

use super::{FitConfig, VariationalState};
use crate::error::{Error, Result};
use crate::events::EventDataset;
use crate::kernel::{build_gram, Hyperparameters, JitteredCholesky};
use crate::quadrature::CompositeRule;

pub(crate) const VARIANCE_FLOOR: f64 = 1e-12;
pub(crate) const EXPONENT_GUARD: f64 = 700.0;

/// Marginal mean and variance of the latent log-intensity at each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Intermediate products shared by the moments and their gradient.
pub(crate) struct MomentParts {
    /// `K_XX^{-1} K_Xf`, `M x P`.
    pub a: DMatrix<f64>,
    /// `L^T a`.
    pub lt_a: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub clamped: Vec<bool>,
}

/// `mu = K_fX K_XX^{-1} m`,
/// `var = k_ff - K_fX K_XX^{-1} (I - S K_XX^{-1}) K_Xf` (diagonal only).
pub(crate) fn moment_parts(
    kfx: &DMatrix<f64>,
    k_diag: &[f64],
    chol: &JitteredCholesky,
    m: &DVector<f64>,
    l: &DMatrix<f64>,
) -> MomentParts {
    let p = kfx.nrows();
    let a = chol.solve(&kfx.transpose());
    let lt_a = l.transpose() * &a;
    let mut mu = Vec::with_capacity(p);
    let mut var = Vec::with_capacity(p);
    let mut clamped = Vec::with_capacity(p);
    for (n, kd) in k_diag.iter().enumerate().take(p) {
        let col = a.column(n);
        mu.push(col.dot(m));
        let explained: f64 = kfx.row(n).iter().zip(col.iter()).map(|(k, a)| k * a).sum();
        let v = kd - explained + lt_a.column(n).norm_squared();
        if v < VARIANCE_FLOOR || !v.is_finite() {
            var.push(VARIANCE_FLOOR);
            clamped.push(true);
        } else {
            var.push(v);
            clamped.push(false);
        }
    }
    MomentParts {
        a,
        lt_a,
        mu,
        var,
        clamped,
    }
}

/// Moments with an already factored `K_XX`.
pub(crate) fn moments_with_factor(
    points: &[(usize, f64)],
    theta: &Hyperparameters,
    vstate: &VariationalState,
    chol: &JitteredCholesky,
) -> Result<Moments> {
    check_points(points, theta)?;
    let kfx = crate::kernel::output_latent_gram(points, vstate.inducing(), theta);
    let k_diag: Vec<f64> = points.iter().map(|&(i, _)| theta.prior_variance(i)).collect();
    let parts = moment_parts(&kfx, &k_diag, chol, vstate.mean(), vstate.chol_s());
    Ok(Moments {
        mu: parts.mu,
        var: parts.var,
    })
}

fn check_points(points: &[(usize, f64)], theta: &Hyperparameters) -> Result<()> {
    for &(i, t) in points {
        if i >= theta.num_units() {
            return Err(Error::InvalidArgument(format!(
                "unit index {i} out of range for {} units",
                theta.num_units()
            )));
        }
        if t.is_nan() {
            return Err(Error::InvalidArgument("NaN time".into()));
        }
    }
    Ok(())
}

/// Closed-form marginals of `q(f) = ∫ p(f | X) q(X) dX`.
pub fn posterior_moments(
    points: &[(usize, f64)],
    theta: &Hyperparameters,
    vstate: &VariationalState,
) -> Result<Moments> {
    check_points(points, theta)?;
    let gram = build_gram(points, vstate.inducing(), theta)?;
    moments_with_factor(points, theta, vstate, &gram.kxx_chol)
}

/// `KL(N(m, S) || N(0, K_XX))`.
pub fn kl_term(vstate: &VariationalState, kxx: &DMatrix<f64>) -> Result<f64> {
    if kxx.shape() != (vstate.dim(), vstate.dim()) {
        return Err(Error::InvalidArgument("K_XX dimension does not match the state".into()));
    }
    let chol = JitteredCholesky::new(kxx)?;
    Ok(kl_with_factor(vstate.mean(), vstate.chol_s(), &chol))
}

/// Accepts a factor with either sign on its diagonal.
pub(crate) fn kl_with_factor(m: &DVector<f64>, l: &DMatrix<f64>, chol: &JitteredCholesky) -> f64 {
    let dim = m.len() as f64;
    let b = chol.solve_lower(l);
    let trace = b.norm_squared();
    let c = chol.solve_lower(&DMatrix::from_column_slice(m.len(), 1, m.as_slice()));
    let maha = c.norm_squared();
    let ln_s: f64 = l.diagonal().iter().map(|d| (d * d).ln()).sum();
    0.5 * (trace + maha - dim + chol.ln_determinant() - ln_s)
}

/// Expected integrated intensity per unit and in total.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralTerm {
    pub per_unit: Vec<f64>,
    pub total: f64,
}

/// `Σ_i ∫_{region_i} exp(mu_i(u) + var_i(u) / 2) du`, by composite
/// Gauss–Legendre quadrature. `regions[i]` is unit `i`'s integration interval.
pub fn expected_integral_term(
    theta: &Hyperparameters,
    vstate: &VariationalState,
    regions: &[(f64, f64)],
    rule: &CompositeRule,
) -> Result<IntegralTerm> {
    if regions.len() != theta.num_units() {
        return Err(Error::InvalidArgument(format!(
            "{} integration regions for {} units",
            regions.len(),
            theta.num_units()
        )));
    }
    let mut points = Vec::with_capacity(regions.len() * rule.num_nodes());
    let mut weights = Vec::with_capacity(points.capacity());
    for (i, &(a, b)) in regions.iter().enumerate() {
        for (x, w) in rule.nodes(a, b) {
            points.push((i, x));
            weights.push(w);
        }
    }
    let mom = posterior_moments(&points, theta, vstate)?;
    let mut per_unit = vec![0.0; regions.len()];
    for (n, &(i, t)) in points.iter().enumerate() {
        per_unit[i] += weights[n] * guarded_exp(mom.mu[n] + 0.5 * mom.var[n], t)?;
    }
    let total = per_unit.iter().fold(0.0, |acc, v| acc + v);
    Ok(IntegralTerm { per_unit, total })
}

#[inline]
pub(crate) fn guarded_exp(exponent: f64, time: f64) -> Result<f64> {
    if exponent > EXPONENT_GUARD || exponent.is_nan() {
        return Err(Error::Overflow { exponent, time });
    }
    Ok(exponent.exp())
}

/// Event points `(unit, time)` in dataset order.
pub(crate) fn event_points(ds: &EventDataset) -> Vec<(usize, f64)> {
    ds.units()
        .iter()
        .enumerate()
        .flat_map(|(i, u)| u.event_times.iter().map(move |&t| (i, t)))
        .collect()
}

/// `Σ_i Σ_p mu_i(t_i^(p))`.
pub fn data_term(ds: &EventDataset, theta: &Hyperparameters, vstate: &VariationalState) -> Result<f64> {
    check_units(ds, theta)?;
    let points = event_points(ds);
    if points.is_empty() {
        return Ok(0.0);
    }
    let mom = posterior_moments(&points, theta, vstate)?;
    Ok(mom.mu.iter().fold(0.0, |acc, v| acc + v))
}

fn check_units(ds: &EventDataset, theta: &Hyperparameters) -> Result<()> {
    if ds.num_units() != theta.num_units() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} units but hyperparameters cover {}",
            ds.num_units(),
            theta.num_units()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub integral: IntegralTerm,
    pub data: f64,
    pub kl: f64,
    pub value: f64,
}

/// `-(expected integral) + (data term) - KL`.
pub fn elbo(
    ds: &EventDataset,
    theta: &Hyperparameters,
    vstate: &VariationalState,
    config: &FitConfig,
) -> Result<ElboBreakdown> {
    check_units(ds, theta)?;
    let rule = config.quadrature()?;
    let integral = expected_integral_term(theta, vstate, &ds.exposures(), &rule)?;
    let data = data_term(ds, theta, vstate)?;
    let kxx = crate::kernel::inducing_gram(vstate.inducing(), theta.length_scale());
    let kl = kl_term(vstate, &kxx)?;
    let value = -integral.total + data - kl;
    Ok(ElboBreakdown {
        integral,
        data,
        kl,
        value,
    })
}
