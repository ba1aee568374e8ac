//! Covariance algebra of the convolution-process prior.
//!
//! A single latent process `X` with squared-exponential covariance
//! `exp(-(t - u)^2 / (2 l^2))` is smoothed per unit by a scaled Gaussian
//! kernel `alpha_i * N(t; 0, xi_i^2)`. Every covariance needed by inference
//! has a closed form:
//!
//! * `cov(f_i(t), f_j(u)) = alpha_i alpha_j sqrt(l^2 / eta_ij^2) exp(-(t-u)^2 / (2 eta_ij^2))`
//!   with `eta_ij^2 = xi_i^2 + xi_j^2 + l^2`;
//! * `cov(f_i(t), X(z)) = alpha_i sqrt(l^2 / eta_i^2) exp(-(t-z)^2 / (2 eta_i^2))`
//!   with `eta_i^2 = xi_i^2 + l^2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::ObservationWindow;

/// Kernel parameters: one shared latent length-scale plus a width and a
/// signed scale per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HyperRepr", into = "HyperRepr")]
pub struct Hyperparameters {
    length_scale: f64,
    widths: Vec<f64>,
    scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HyperRepr {
    latent_length_scale: f64,
    kernel_widths: Vec<f64>,
    kernel_scales: Vec<f64>,
}

impl TryFrom<HyperRepr> for Hyperparameters {
    type Error = Error;
    fn try_from(r: HyperRepr) -> Result<Self> {
        Hyperparameters::new(r.latent_length_scale, r.kernel_widths, r.kernel_scales)
    }
}

impl From<Hyperparameters> for HyperRepr {
    fn from(h: Hyperparameters) -> Self {
        HyperRepr {
            latent_length_scale: h.length_scale,
            kernel_widths: h.widths,
            kernel_scales: h.scales,
        }
    }
}

impl Hyperparameters {
    pub fn new(length_scale: f64, widths: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "latent length-scale must be positive, got {length_scale}"
            )));
        }
        if widths.len() != scales.len() || widths.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "need one (width, scale) pair per unit, got {} widths and {} scales",
                widths.len(),
                scales.len()
            )));
        }
        if let Some(w) = widths.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "kernel widths must be positive, got {w}"
            )));
        }
        if scales.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("kernel scales must be finite".into()));
        }
        Ok(Self {
            length_scale,
            widths,
            scales,
        })
    }

    /// The same width and scale for every unit.
    pub fn uniform(n_units: usize, length_scale: f64, width: f64, scale: f64) -> Result<Self> {
        Self::new(length_scale, vec![width; n_units], vec![scale; n_units])
    }

    pub fn num_units(&self) -> usize {
        self.widths.len()
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn check_unit(&self, i: usize) -> Result<()> {
        if i >= self.num_units() {
            return Err(Error::InvalidArgument(format!(
                "unit index {i} out of range for {} units",
                self.num_units()
            )));
        }
        Ok(())
    }

    /// Unchecked `cov(f_i(t), f_j(u))` as a function of `d = t - u`.
    #[inline]
    pub(crate) fn cross(&self, i: usize, j: usize, d: f64) -> f64 {
        let l2 = self.length_scale * self.length_scale;
        let eta2 = self.widths[i] * self.widths[i] + self.widths[j] * self.widths[j] + l2;
        self.scales[i] * self.scales[j] * (l2 / eta2).sqrt() * (-0.5 * d * d / eta2).exp()
    }

    /// Unchecked `cov(f_i(t), X(z))` as a function of `d = t - z`.
    #[inline]
    pub(crate) fn latent_cross(&self, i: usize, d: f64) -> f64 {
        self.scales[i] * self.latent_cross_unscaled(i, d)
    }

    /// `latent_cross` with `alpha_i = 1`.
    #[inline]
    pub(crate) fn latent_cross_unscaled(&self, i: usize, d: f64) -> f64 {
        let l2 = self.length_scale * self.length_scale;
        let eta2 = self.widths[i] * self.widths[i] + l2;
        (l2 / eta2).sqrt() * (-0.5 * d * d / eta2).exp()
    }

    /// Prior variance of `f_i(t)`; constant in `t`.
    #[inline]
    pub fn prior_variance(&self, i: usize) -> f64 {
        self.cross(i, i, 0.0)
    }
}

/// Squared-exponential covariance of the latent process.
pub fn latent_kernel(t: f64, u: f64, ell: f64) -> Result<f64> {
    if !(ell > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "length-scale must be positive, got {ell}"
        )));
    }
    Ok(se(t - u, ell))
}

#[inline]
pub(crate) fn se(d: f64, ell: f64) -> f64 {
    (-0.5 * d * d / (ell * ell)).exp()
}

/// `cov(f_i(t), f_j(u))`.
pub fn output_cross_kernel(i: usize, j: usize, t: f64, u: f64, theta: &Hyperparameters) -> Result<f64> {
    theta.check_unit(i)?;
    theta.check_unit(j)?;
    Ok(theta.cross(i, j, t - u))
}

/// `cov(f_i(t), X(z))`.
pub fn output_latent_cross_kernel(i: usize, t: f64, z: f64, theta: &Hyperparameters) -> Result<f64> {
    theta.check_unit(i)?;
    Ok(theta.latent_cross(i, t - z))
}

/// Locations of the latent process used as inducing variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct InducingPoints(Vec<f64>);

impl TryFrom<Vec<f64>> for InducingPoints {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        InducingPoints::new(v)
    }
}

impl From<InducingPoints> for Vec<f64> {
    fn from(z: InducingPoints) -> Self {
        z.0
    }
}

impl InducingPoints {
    pub fn new(locations: Vec<f64>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InvalidArgument("need at least one inducing point".into()));
        }
        if locations.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("inducing points must be finite".into()));
        }
        if locations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "inducing points must be strictly increasing".into(),
            ));
        }
        Ok(Self(locations))
    }

    /// `m` equally spaced locations spanning the window (its midpoint if `m == 1`).
    pub fn equally_spaced(window: &ObservationWindow, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one inducing point".into()));
        }
        Self::new(window.grid(m))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn locations(&self) -> &[f64] {
        &self.0
    }
}

/// Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    factor: Cholesky<f64, Dyn>,
    jitter: f64,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

impl JitteredCholesky {
    /// Tries jitter `1e-10 * mean(diag)`, escalating by 10x up to
    /// `1e-4 * mean(diag)`.
    pub fn new(mat: &DMatrix<f64>) -> Result<Self> {
        let n = mat.nrows();
        if n == 0 || n != mat.ncols() {
            return Err(Error::InvalidArgument("Cholesky needs a nonempty square matrix".into()));
        }
        let mean_diag = mat.diagonal().mean();
        if !(mean_diag > 0.0 && mean_diag.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!(
                "mean diagonal {mean_diag} is not positive"
            )));
        }
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * 1.000_001 {
            let jitter = rel * mean_diag;
            let mut shifted = mat.clone();
            for k in 0..n {
                shifted[(k, k)] += jitter;
            }
            if let Some(factor) = Cholesky::new(shifted) {
                if factor.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                    return Ok(Self { factor, jitter });
                }
            }
            rel *= 10.0;
        }
        Err(Error::IllConditioned {
            condition_estimate: condition_estimate(mat),
            max_jitter: JITTER_MAX * mean_diag,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.factor.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    /// `L^{-1} b` by forward substitution.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.factor.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    pub fn ln_determinant(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

fn condition_estimate(mat: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (mat + mat.transpose());
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Covariance among inducing variables.
pub fn inducing_gram(z: &InducingPoints, length_scale: f64) -> DMatrix<f64> {
    inducing_gram_at(z.locations(), length_scale)
}

pub(crate) fn inducing_gram_at(loc: &[f64], length_scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(loc.len(), loc.len(), |a, b| se(loc[a] - loc[b], length_scale))
}

/// Output–latent cross-covariance rows for `(unit, time)` points.
pub fn output_latent_gram(points: &[(usize, f64)], z: &InducingPoints, theta: &Hyperparameters) -> DMatrix<f64> {
    output_latent_gram_at(points, z.locations(), theta)
}

pub(crate) fn output_latent_gram_at(points: &[(usize, f64)], loc: &[f64], theta: &Hyperparameters) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), loc.len(), |n, a| {
        let (i, t) = points[n];
        theta.latent_cross(i, t - loc[a])
    })
}

/// Matrices needed to condition unit outputs on the inducing variables.
#[derive(Debug, Clone)]
pub struct GramBundle {
    pub kxx: DMatrix<f64>,
    pub kxx_chol: JitteredCholesky,
    /// `|points| x M`.
    pub kfx: DMatrix<f64>,
    pub k_diag: DVector<f64>,
}

pub fn build_gram(points: &[(usize, f64)], z: &InducingPoints, theta: &Hyperparameters) -> Result<GramBundle> {
    if let Some(&(i, _)) = points.iter().find(|(i, _)| *i >= theta.num_units()) {
        theta.check_unit(i)?;
    }
    let kxx = inducing_gram(z, theta.length_scale());
    let kxx_chol = JitteredCholesky::new(&kxx)?;
    let kfx = output_latent_gram(points, z, theta);
    let k_diag = DVector::from_iterator(points.len(), points.iter().map(|&(i, _)| theta.prior_variance(i)));
    Ok(GramBundle {
        kxx,
        kxx_chol,
        kfx,
        k_diag,
    })
}

/// Full prior covariance of `[f(points); X(z)]`.
pub fn joint_covariance(points: &[(usize, f64)], z: &InducingPoints, theta: &Hyperparameters) -> DMatrix<f64> {
    let p = points.len();
    let loc = z.locations();
    let n = p + loc.len();
    DMatrix::from_fn(n, n, |r, c| match (r < p, c < p) {
        (true, true) => {
            let (i, t) = points[r];
            let (j, u) = points[c];
            theta.cross(i, j, t - u)
        }
        (true, false) => {
            let (i, t) = points[r];
            theta.latent_cross(i, t - loc[c - p])
        }
        (false, true) => {
            let (j, u) = points[c];
            theta.latent_cross(j, u - loc[r - p])
        }
        (false, false) => se(loc[r - p] - loc[c - p], theta.length_scale()),
    })
}
