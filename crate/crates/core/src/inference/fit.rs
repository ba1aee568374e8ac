use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::ElboObjective;
use super::optimize::{adam, lbfgs, AdamOptions, LbfgsOptions, Minimum};
use super::{FitConfig, OptimizerKind, VariationalState};
use crate::error::{Error, Result};
use crate::events::{EventDataset, ObservationWindow};
use crate::kernel::{inducing_gram, Hyperparameters, InducingPoints, JitteredCholesky};

/// Optimized hyperparameters and variational state, with the factorization
/// of `K_XX` cached for prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct FittedModel {
    theta: Hyperparameters,
    vstate: VariationalState,
    window: ObservationWindow,
    unit_ids: Vec<String>,
    observed_until: Vec<Option<f64>>,
    elbo: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    kxx_chol: JitteredCholesky,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    theta: Hyperparameters,
    variational: VariationalState,
    window: ObservationWindow,
    unit_ids: Vec<String>,
    #[serde(default)]
    observed_until: Vec<Option<f64>>,
    elbo: f64,
    iterations: usize,
    converged: bool,
    #[serde(default)]
    elbo_trace: Vec<f64>,
}

impl TryFrom<ModelRepr> for FittedModel {
    type Error = Error;
    fn try_from(r: ModelRepr) -> Result<Self> {
        let observed_until = if r.observed_until.is_empty() {
            vec![None; r.unit_ids.len()]
        } else {
            r.observed_until
        };
        let mut model = FittedModel::new(r.theta, r.variational, r.window, r.unit_ids, observed_until, r.elbo)?;
        model.iterations = r.iterations;
        model.converged = r.converged;
        model.trace = r.elbo_trace;
        Ok(model)
    }
}

impl From<FittedModel> for ModelRepr {
    fn from(m: FittedModel) -> Self {
        ModelRepr {
            theta: m.theta,
            variational: m.vstate,
            window: m.window,
            unit_ids: m.unit_ids,
            observed_until: m.observed_until,
            elbo: m.elbo,
            iterations: m.iterations,
            converged: m.converged,
            elbo_trace: m.trace,
        }
    }
}

impl FittedModel {
    pub fn new(
        theta: Hyperparameters,
        vstate: VariationalState,
        window: ObservationWindow,
        unit_ids: Vec<String>,
        observed_until: Vec<Option<f64>>,
        elbo: f64,
    ) -> Result<Self> {
        if unit_ids.len() != theta.num_units() || observed_until.len() != unit_ids.len() {
            return Err(Error::Validation(format!(
                "model lists {} unit ids for {} kernel parameter pairs",
                unit_ids.len(),
                theta.num_units()
            )));
        }
        let kxx_chol = JitteredCholesky::new(&inducing_gram(vstate.inducing(), theta.length_scale()))?;
        Ok(Self {
            theta,
            vstate,
            window,
            unit_ids,
            observed_until,
            elbo,
            trace: Vec::new(),
            iterations: 0,
            converged: true,
            kxx_chol,
        })
    }

    pub fn theta(&self) -> &Hyperparameters {
        &self.theta
    }

    pub fn vstate(&self) -> &VariationalState {
        &self.vstate
    }

    pub fn window(&self) -> ObservationWindow {
        self.window
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn observed_until(&self) -> &[Option<f64>] {
        &self.observed_until
    }

    pub fn elbo(&self) -> f64 {
        self.elbo
    }

    /// Best-so-far ELBO after each optimizer iteration.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn kxx_factor(&self) -> &JitteredCholesky {
        &self.kxx_chol
    }

    pub fn unit_index(&self, unit_id: &str) -> Result<usize> {
        self.unit_ids
            .iter()
            .position(|u| u == unit_id)
            .ok_or_else(|| Error::UnknownUnit {
                unit: unit_id.to_string(),
                available: self.unit_ids.join(", "),
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Initial `(theta, state)` for a dataset.
pub(crate) fn initial_state(ds: &EventDataset, config: &FitConfig) -> Result<(Hyperparameters, VariationalState)> {
    let window = ds.window();
    let init = &config.init;
    let ell = init.length_scale_fraction * window.length();
    let theta = Hyperparameters::uniform(ds.num_units(), ell, init.width_ratio * ell, init.scale)?;
    let z = InducingPoints::equally_spaced(&window, config.num_inducing)?;
    let mut vs = VariationalState::from_prior(&theta, z.clone(), init.chol_factor)?;
    if init.mean_perturbation > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mean = DVector::from_fn(z.len(), |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            init.mean_perturbation * e
        });
        vs = VariationalState::new(mean, vs.chol_s().clone(), z)?;
    }
    Ok((theta, vs))
}

/// Maximizes the ELBO jointly over kernel parameters and `q(X)`.
///
/// The returned model holds the best state visited; `converged()` is false
/// when the iteration budget ran out first.
pub fn fit(ds: &EventDataset, config: &FitConfig) -> Result<FittedModel> {
    config.validate()?;
    let rule = config.quadrature()?;
    let (theta0, vs0) = initial_state(ds, config)?;
    let objective = ElboObjective::new(ds, vs0.inducing(), &rule, config.optimize_inducing);
    let layout = objective.layout();
    let x0 = layout.pack(&theta0, &vs0);
    // The initial state must be evaluable; report why if it is not.
    objective.value(&x0)?;

    let mut neg = |x: &[f64]| {
        objective
            .value_and_gradient(x)
            .ok()
            .map(|(v, g)| (-v, g.into_iter().map(|d| -d).collect()))
    };
    let result: Option<Minimum> = match config.optimizer {
        OptimizerKind::Lbfgs => {
            let opts = LbfgsOptions {
                memory: config.lbfgs_memory,
                max_iters: config.max_iters,
                rel_tol: config.tol,
                ..LbfgsOptions::default()
            };
            lbfgs(&mut neg, &x0, &opts)
        }
        OptimizerKind::Adam => {
            let opts = AdamOptions {
                steps: config.max_iters,
                ..AdamOptions::default()
            };
            adam(&mut neg, &x0, &opts)
        }
    };
    let min = result.ok_or_else(|| Error::Validation("objective undefined at the initial state".into()))?;

    let (theta, vstate) = layout.unpack(&min.x, objective.fixed_inducing())?;
    let mut model = FittedModel::new(
        theta,
        vstate,
        ds.window(),
        ds.unit_ids(),
        ds.units().iter().map(|u| u.observed_until).collect(),
        -min.f,
    )?;
    model.trace = min.trace.iter().map(|f| -f).collect();
    model.iterations = min.iterations;
    model.converged = min.converged;
    Ok(model)
}
