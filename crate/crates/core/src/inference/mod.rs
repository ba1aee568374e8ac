//! Variational inference over the inducing variables of the shared latent
//! process, jointly with the kernel hyperparameters.

mod fit;
mod objective;
pub mod optimize;
mod terms;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{inducing_gram, Hyperparameters, InducingPoints, JitteredCholesky};
use crate::quadrature::CompositeRule;

pub use fit::{fit, FittedModel};
pub use objective::{elbo_gradient, ElboObjective, ParamLayout};
pub use terms::{
    data_term, elbo, expected_integral_term, kl_term, posterior_moments, ElboBreakdown, IntegralTerm, Moments,
};
pub(crate) use terms::{guarded_exp, moments_with_factor};

/// Gaussian `q(X) = N(m, L L^T)` over the latent process at the inducing points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateRepr", into = "StateRepr")]
pub struct VariationalState {
    mean: DVector<f64>,
    chol_s: DMatrix<f64>,
    inducing: InducingPoints,
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    inducing_points: InducingPoints,
    mean: Vec<f64>,
    /// Row-major lower-triangular factor.
    chol_s: Vec<Vec<f64>>,
}

impl TryFrom<StateRepr> for VariationalState {
    type Error = Error;
    fn try_from(r: StateRepr) -> Result<Self> {
        let m = r.inducing_points.len();
        if r.chol_s.len() != m || r.chol_s.iter().any(|row| row.len() != m) {
            return Err(Error::Validation(format!("chol_s must be {m}x{m}")));
        }
        let l = DMatrix::from_fn(m, m, |i, j| r.chol_s[i][j]);
        VariationalState::new(DVector::from_vec(r.mean), l, r.inducing_points)
    }
}

impl From<VariationalState> for StateRepr {
    fn from(s: VariationalState) -> Self {
        let m = s.chol_s.nrows();
        StateRepr {
            mean: s.mean.iter().copied().collect(),
            chol_s: (0..m).map(|i| (0..m).map(|j| s.chol_s[(i, j)]).collect()).collect(),
            inducing_points: s.inducing,
        }
    }
}

impl VariationalState {
    pub fn new(mean: DVector<f64>, chol_s: DMatrix<f64>, inducing: InducingPoints) -> Result<Self> {
        let m = inducing.len();
        if mean.len() != m || chol_s.shape() != (m, m) {
            return Err(Error::InvalidArgument(format!(
                "variational state dimensions do not match {m} inducing points"
            )));
        }
        for i in 0..m {
            if !(chol_s[(i, i)] > 0.0 && chol_s[(i, i)].is_finite()) {
                return Err(Error::NotPositiveDefinite(format!(
                    "diagonal entry {i} of chol_s is {}",
                    chol_s[(i, i)]
                )));
            }
            for j in (i + 1)..m {
                if chol_s[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument("chol_s must be lower triangular".into()));
                }
            }
        }
        if mean.iter().chain(chol_s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("variational parameters must be finite".into()));
        }
        Ok(Self { mean, chol_s, inducing })
    }

    /// `q(X)` equal to the prior, optionally with the factor scaled by `scale`.
    pub fn from_prior(theta: &Hyperparameters, inducing: InducingPoints, scale: f64) -> Result<Self> {
        let chol = JitteredCholesky::new(&inducing_gram(&inducing, theta.length_scale()))?;
        let m = inducing.len();
        Self::new(DVector::zeros(m), chol.l() * scale, inducing)
    }

    /// Lower-triangular factor with any sign pattern on the diagonal,
    /// normalized by flipping columns so the diagonal is positive.
    pub fn from_signed_factor(mean: DVector<f64>, mut l: DMatrix<f64>, inducing: InducingPoints) -> Result<Self> {
        for c in 0..l.ncols() {
            if l[(c, c)] < 0.0 {
                l.column_mut(c).neg_mut();
            }
        }
        Self::new(mean, l, inducing)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol_s(&self) -> &DMatrix<f64> {
        &self.chol_s
    }

    pub fn inducing(&self) -> &InducingPoints {
        &self.inducing
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol_s * self.chol_s.transpose()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Limited-memory BFGS with a strong-Wolfe line search, falling back to
    /// Adam steps when the line search fails.
    Lbfgs,
    /// Adam only.
    Adam,
}

/// Starting point of the optimizer, relative to the data window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    /// Latent length-scale as a fraction of the window length.
    pub length_scale_fraction: f64,
    /// Kernel widths as a fraction of the length-scale.
    pub width_ratio: f64,
    pub scale: f64,
    /// Multiplier on `chol(K_XX)` for the initial factor.
    pub chol_factor: f64,
    /// Standard deviation of a seeded perturbation of the initial mean.
    pub mean_perturbation: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            length_scale_fraction: 0.1,
            width_ratio: 0.5,
            scale: 1.0,
            chol_factor: 0.5,
            mean_perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Gauss–Legendre order per panel.
    pub quad_order: usize,
    pub quad_panels: usize,
    pub max_iters: usize,
    /// Relative ELBO change below which the optimizer stops.
    pub tol: f64,
    pub seed: u64,
    pub num_inducing: usize,
    pub optimize_inducing: bool,
    pub optimizer: OptimizerKind,
    pub lbfgs_memory: usize,
    pub init: InitSpec,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            quad_order: 10,
            quad_panels: 20,
            max_iters: 1000,
            tol: 1e-9,
            seed: 0,
            num_inducing: 10,
            optimize_inducing: false,
            optimizer: OptimizerKind::Lbfgs,
            lbfgs_memory: 10,
            init: InitSpec::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.quadrature()?;
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.num_inducing == 0 {
            return Err(Error::InvalidArgument("num_inducing must be at least 1".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::InvalidArgument("lbfgs_memory must be at least 1".into()));
        }
        let i = &self.init;
        if !(i.length_scale_fraction > 0.0 && i.width_ratio > 0.0 && i.chol_factor > 0.0 && i.mean_perturbation >= 0.0)
        {
            return Err(Error::InvalidArgument("initialization factors must be positive".into()));
        }
        Ok(())
    }

    pub fn quadrature(&self) -> Result<CompositeRule> {
        CompositeRule::new(self.quad_panels, self.quad_order)
    }
}
