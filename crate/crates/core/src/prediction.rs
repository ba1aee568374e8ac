//! Extrapolation for a (partially observed) unit: latent posterior at new
//! times, intensity statistics, expected and distributional event counts,
//! and the evaluation metrics used by the experiments.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::inference::{moments_with_factor, FittedModel, Moments};
use crate::kernel::{output_latent_gram, JitteredCholesky};
use crate::quadrature::CompositeRule;

const BAND_Z: f64 = 1.96;
const TAIL_BOUND: f64 = 1e-12;
const MAX_COUNT: usize = 100_000;

/// Posterior mean and variance of `f_unit` at `times` under the fitted
/// `q(X)`; the same computation as [`crate::inference::posterior_moments`].
pub fn predict_latent(model: &FittedModel, unit: usize, times: &[f64]) -> Result<Moments> {
    check_unit(model, unit)?;
    if times.iter().any(|t| t.is_nan()) {
        return Err(Error::InvalidArgument("NaN prediction time".into()));
    }
    let points: Vec<(usize, f64)> = times.iter().map(|&t| (unit, t)).collect();
    moments_with_factor(&points, model.theta(), model.vstate(), model.kxx_factor())
}

fn check_unit(model: &FittedModel, unit: usize) -> Result<()> {
    if unit >= model.unit_ids().len() {
        return Err(Error::InvalidArgument(format!(
            "unit index {unit} out of range for {} units",
            model.unit_ids().len()
        )));
    }
    Ok(())
}

/// Log-normal summaries of the intensity `exp(f)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityCurve {
    pub grid: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    /// `exp(mu + var / 2)`.
    pub mean_intensity: Vec<f64>,
    /// `exp(mu)`.
    pub median_intensity: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntensityCurve {
    pub fn from_moments(grid: Vec<f64>, mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if grid.len() != mu.len() || mu.len() != var.len() {
            return Err(Error::InvalidArgument("grid, mu and var lengths differ".into()));
        }
        let mean_intensity = mu.iter().zip(&var).map(|(m, v)| (m + 0.5 * v).exp()).collect();
        let median_intensity = mu.iter().map(|m| m.exp()).collect();
        let lower = mu
            .iter()
            .zip(&var)
            .map(|(m, v)| (m - BAND_Z * v.sqrt()).exp())
            .collect();
        let upper = mu
            .iter()
            .zip(&var)
            .map(|(m, v)| (m + BAND_Z * v.sqrt()).exp())
            .collect();
        Ok(Self {
            grid,
            mu,
            var,
            mean_intensity,
            median_intensity,
            lower,
            upper,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// CSV with header `time,mu,var,mean_intensity,lo,hi`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "mu", "var", "mean_intensity", "lo", "hi"])?;
        for k in 0..self.len() {
            w.write_record(
                [
                    self.grid[k],
                    self.mu[k],
                    self.var[k],
                    self.mean_intensity[k],
                    self.lower[k],
                    self.upper[k],
                ]
                .map(|v| format!("{v:?}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn intensity_curve(model: &FittedModel, unit: usize, grid: &[f64]) -> Result<IntensityCurve> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("grid must be sorted".into()));
    }
    let mom = predict_latent(model, unit, grid)?;
    IntensityCurve::from_moments(grid.to_vec(), mom.mu, mom.var)
}

/// `∫_a^b exp(mu(u) + var(u) / 2) du` for one unit.
fn integrated_mean_intensity(model: &FittedModel, unit: usize, a: f64, b: f64, rule: &CompositeRule) -> Result<f64> {
    let nodes = rule.nodes(a, b);
    let times: Vec<f64> = nodes.iter().map(|(x, _)| *x).collect();
    let mom = predict_latent(model, unit, &times)?;
    let mut total = 0.0;
    for (k, (t, w)) in nodes.iter().enumerate() {
        total += w * crate::inference::guarded_exp(mom.mu[k] + 0.5 * mom.var[k], *t)?;
    }
    Ok(total)
}

/// Expected number of events in `[t_star, t_star + horizon]`.
pub fn expected_count(
    model: &FittedModel,
    unit: usize,
    t_star: f64,
    horizon: f64,
    rule: &CompositeRule,
) -> Result<f64> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    if !t_star.is_finite() {
        return Err(Error::InvalidArgument("t_star must be finite".into()));
    }
    integrated_mean_intensity(model, unit, t_star, t_star + horizon, rule)
}

/// Smallest `y >= lambda` with Chernoff bound `P(Y > y) < 1e-12`, capped at 1e5.
pub fn poisson_cutoff(lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let mut y = lambda.ceil() as usize;
    while y < MAX_COUNT {
        let k = (y + 1) as f64;
        let ln_bound = -lambda + k * (1.0 + lambda.ln() - k.ln());
        if ln_bound < TAIL_BOUND.ln() {
            return y;
        }
        y += 1;
    }
    MAX_COUNT
}

/// Poisson probabilities `P(0..=y_max)` evaluated in log space.
pub fn count_pmf_truncated(lambda: f64, y_max: usize) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Poisson mean must be >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        let mut out = vec![0.0; y_max + 1];
        out[0] = 1.0;
        return Ok(out);
    }
    let ln_l = lambda.ln();
    Ok((0..=y_max)
        .map(|y| {
            let yf = y as f64;
            (-lambda + yf * ln_l - ln_gamma(yf + 1.0)).exp()
        })
        .collect())
}

/// Poisson pmf truncated where the tail drops below 1e-12.
pub fn count_pmf(lambda: f64) -> Result<Vec<f64>> {
    count_pmf_truncated(lambda, poisson_cutoff(lambda.max(0.0)))
}

/// Plug-in count forecast for a window after `t_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountForecast {
    pub t_star: f64,
    pub horizon: f64,
    pub lambda: f64,
    pub pmf: Vec<f64>,
}

impl CountForecast {
    pub fn mean(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(y, p)| y as f64 * p).sum()
    }
}

pub fn forecast_counts(
    model: &FittedModel,
    unit: usize,
    t_star: f64,
    horizon: f64,
    rule: &CompositeRule,
) -> Result<CountForecast> {
    let lambda = expected_count(model, unit, t_star, horizon, rule)?;
    Ok(CountForecast {
        t_star,
        horizon,
        lambda,
        pmf: count_pmf(lambda)?,
    })
}

/// Long-format CSV `t_star,L,lambda,y,prob`.
pub fn write_forecasts_csv<W: Write>(forecasts: &[CountForecast], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t_star", "L", "lambda", "y", "prob"])?;
    for f in forecasts {
        for (y, p) in f.pmf.iter().enumerate() {
            w.write_record([
                format!("{:?}", f.t_star),
                format!("{:?}", f.horizon),
                format!("{:?}", f.lambda),
                y.to_string(),
                format!("{p:?}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Count distribution that integrates over posterior uncertainty in the
/// intensity: latent paths are drawn jointly on a grid over the horizon,
/// integrated by the trapezoid rule, and the resulting Poisson laws mixed.
pub fn sampled_count_pmf(
    model: &FittedModel,
    unit: usize,
    t_star: f64,
    horizon: f64,
    n_paths: usize,
    grid_points: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_unit(model, unit)?;
    if !(horizon > 0.0) || n_paths == 0 || grid_points < 2 {
        return Err(Error::InvalidArgument(
            "sampled forecast needs a positive horizon, paths and at least two grid points".into(),
        ));
    }
    let h = horizon / (grid_points - 1) as f64;
    let times: Vec<f64> = (0..grid_points).map(|k| t_star + h * k as f64).collect();
    let (mean, chol) = joint_posterior(model, unit, &times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lambdas = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let eps = DVector::from_fn(grid_points, |_, _| StandardNormal.sample(&mut rng));
        let f = &mean + &chol * eps;
        let mut integral = 0.0;
        for k in 0..grid_points - 1 {
            integral += 0.5 * h * (f[k].exp() + f[k + 1].exp());
        }
        lambdas.push(integral);
    }
    let y_max = lambdas.iter().map(|&l| poisson_cutoff(l)).max().unwrap_or(0);
    let mut pmf = vec![0.0; y_max + 1];
    for &l in &lambdas {
        for (acc, p) in pmf.iter_mut().zip(count_pmf_truncated(l, y_max)?) {
            *acc += p / n_paths as f64;
        }
    }
    Ok(pmf)
}

/// Smallest `y` with cumulative probability at least one half.
pub fn pmf_median(pmf: &[f64]) -> usize {
    let mut acc = 0.0;
    for (y, p) in pmf.iter().enumerate() {
        acc += p;
        if acc >= 0.5 {
            return y;
        }
    }
    pmf.len().saturating_sub(1)
}

/// Mean and lower factor of the joint `q(f_unit)` over `times`.
fn joint_posterior(model: &FittedModel, unit: usize, times: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let theta = model.theta();
    let vs = model.vstate();
    let points: Vec<(usize, f64)> = times.iter().map(|&t| (unit, t)).collect();
    let kfx = output_latent_gram(&points, vs.inducing(), theta);
    let a = model.kxx_factor().solve(&kfx.transpose());
    let mean = a.transpose() * vs.mean();
    let lt_a = vs.chol_s().transpose() * &a;
    let n = times.len();
    let kff = DMatrix::from_fn(n, n, |r, c| theta.cross(unit, unit, times[r] - times[c]));
    let cov = kff - &kfx * &a + lt_a.transpose() * &lt_a;
    let cov = 0.5 * (&cov + cov.transpose());
    Ok((mean, JitteredCholesky::new(&cov)?.l()))
}

/// Bound on the held-out log-likelihood, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveLogLik {
    pub integral: f64,
    pub data: f64,
    pub value: f64,
}

/// `-∫_region exp(mu + var / 2) du + Σ_p mu(t_p)` for held-out events of one unit.
pub fn predictive_loglik(
    model: &FittedModel,
    unit: usize,
    heldout: &[f64],
    region: (f64, f64),
    rule: &CompositeRule,
) -> Result<PredictiveLogLik> {
    let (a, b) = region;
    if !(b > a) {
        return Err(Error::InvalidArgument(format!("empty evaluation region ({a}, {b}]")));
    }
    if let Some(t) = heldout.iter().find(|&&t| t < a || t > b) {
        return Err(Error::InvalidArgument(format!(
            "held-out event {t} outside evaluation region ({a}, {b}]"
        )));
    }
    let integral = integrated_mean_intensity(model, unit, a, b, rule)?;
    let data = if heldout.is_empty() {
        0.0
    } else {
        predict_latent(model, unit, heldout)?
            .mu
            .iter()
            .fold(0.0, |acc, v| acc + v)
    };
    Ok(PredictiveLogLik {
        integral,
        data,
        value: -integral + data,
    })
}

/// Root-mean-square difference between two curves on a common grid.
pub fn rms_intensity(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::InvalidArgument(
            "RMS needs two nonempty curves of equal length".into(),
        ));
    }
    let ss: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Mean absolute error between forecast and realized counts.
pub fn mae_counts(forecasts: &[f64], actual: &[f64]) -> Result<f64> {
    if forecasts.len() != actual.len() || forecasts.is_empty() {
        return Err(Error::InvalidArgument(
            "MAE needs two nonempty sequences of equal length".into(),
        ));
    }
    let s: f64 = forecasts.iter().zip(actual).map(|(f, a)| (f - a).abs()).sum();
    Ok(s / forecasts.len() as f64)
}
