//! The ELBO as a function of the unconstrained parameter vector
//! `[log l, log xi_1..N, alpha_1..N, m, vech(L), (z)]`, with its gradient.
//!
//! The gradient is assembled by reverse accumulation: adjoints of the
//! per-point moments are pushed back to `K_fX`, `k_ff`, `K_XX`, `m` and
//! `L`, and from the Gram matrices to the kernel parameters.

use nalgebra::{DMatrix, DVector};

use super::terms::{event_points, guarded_exp, kl_with_factor, moment_parts};
use super::{FitConfig, VariationalState};
use crate::error::{Error, Result};
use crate::events::EventDataset;
use crate::kernel::{inducing_gram_at, output_latent_gram_at, Hyperparameters, InducingPoints, JitteredCholesky};
use crate::quadrature::CompositeRule;

/// Positions of each parameter block within the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_units: usize,
    pub n_inducing: usize,
    pub optimize_inducing: bool,
}

impl ParamLayout {
    pub fn width_offset(&self) -> usize {
        1
    }

    pub fn scale_offset(&self) -> usize {
        1 + self.n_units
    }

    pub fn mean_offset(&self) -> usize {
        1 + 2 * self.n_units
    }

    pub fn chol_offset(&self) -> usize {
        self.mean_offset() + self.n_inducing
    }

    pub fn chol_len(&self) -> usize {
        self.n_inducing * (self.n_inducing + 1) / 2
    }

    pub fn inducing_offset(&self) -> usize {
        self.chol_offset() + self.chol_len()
    }

    pub fn len(&self) -> usize {
        self.inducing_offset() + if self.optimize_inducing { self.n_inducing } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattens `theta` and the state; `L` is stored row-major over its lower triangle.
    pub fn pack(&self, theta: &Hyperparameters, vstate: &VariationalState) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(theta.length_scale().ln());
        out.extend(theta.widths().iter().map(|w| w.ln()));
        out.extend_from_slice(theta.scales());
        out.extend(vstate.mean().iter());
        let l = vstate.chol_s();
        for r in 0..self.n_inducing {
            for c in 0..=r {
                out.push(l[(r, c)]);
            }
        }
        if self.optimize_inducing {
            out.extend_from_slice(vstate.inducing().locations());
        }
        out
    }

    pub fn theta(&self, raw: &[f64]) -> Result<Hyperparameters> {
        let n = self.n_units;
        Hyperparameters::new(
            raw[0].exp(),
            raw[self.width_offset()..self.width_offset() + n]
                .iter()
                .map(|v| v.exp())
                .collect(),
            raw[self.scale_offset()..self.scale_offset() + n].to_vec(),
        )
    }

    pub fn mean(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&raw[self.mean_offset()..self.mean_offset() + self.n_inducing])
    }

    /// Lower-triangular factor, diagonal signs as stored.
    pub fn chol(&self, raw: &[f64]) -> DMatrix<f64> {
        let m = self.n_inducing;
        let mut l = DMatrix::zeros(m, m);
        let mut k = self.chol_offset();
        for r in 0..m {
            for c in 0..=r {
                l[(r, c)] = raw[k];
                k += 1;
            }
        }
        l
    }

    /// Rebuilds `(theta, state)`; inducing locations are sorted, with the
    /// mean and covariance permuted to match.
    pub fn unpack(&self, raw: &[f64], fixed: &InducingPoints) -> Result<(Hyperparameters, VariationalState)> {
        let theta = self.theta(raw)?;
        let mean = self.mean(raw);
        let l = self.chol(raw);
        if !self.optimize_inducing {
            let vs = VariationalState::from_signed_factor(mean, l, fixed.clone())?;
            return Ok((theta, vs));
        }
        let z = &raw[self.inducing_offset()..self.inducing_offset() + self.n_inducing];
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
        let sorted = InducingPoints::new(order.iter().map(|&k| z[k]).collect())?;
        if order.iter().enumerate().all(|(k, &o)| k == o) {
            return Ok((theta, VariationalState::from_signed_factor(mean, l, sorted)?));
        }
        let m = self.n_inducing;
        let s = &l * l.transpose();
        let s_perm = DMatrix::from_fn(m, m, |r, c| s[(order[r], order[c])]);
        let mean_perm = DVector::from_fn(m, |r, _| mean[order[r]]);
        let l_perm = JitteredCholesky::new(&s_perm)?.l();
        Ok((theta, VariationalState::new(mean_perm, l_perm, sorted)?))
    }
}

/// Quadrature nodes and events for a dataset, ready for repeated ELBO
/// evaluations.
#[derive(Debug, Clone)]
pub struct ElboObjective {
    layout: ParamLayout,
    fixed_inducing: InducingPoints,
    n_units: usize,
    /// Quadrature nodes (unit-major) followed by events.
    points: Vec<(usize, f64)>,
    weights: Vec<f64>,
    n_nodes: usize,
}

impl ElboObjective {
    pub fn new(ds: &EventDataset, inducing: &InducingPoints, rule: &CompositeRule, optimize_inducing: bool) -> Self {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (i, (a, b)) in ds.exposures().into_iter().enumerate() {
            for (x, w) in rule.nodes(a, b) {
                points.push((i, x));
                weights.push(w);
            }
        }
        let n_nodes = points.len();
        points.extend(event_points(ds));
        Self {
            layout: ParamLayout {
                n_units: ds.num_units(),
                n_inducing: inducing.len(),
                optimize_inducing,
            },
            fixed_inducing: inducing.clone(),
            n_units: ds.num_units(),
            points,
            weights,
            n_nodes,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn fixed_inducing(&self) -> &InducingPoints {
        &self.fixed_inducing
    }

    pub fn value(&self, raw: &[f64]) -> Result<f64> {
        Ok(self.evaluate(raw, false)?.0)
    }

    pub fn value_and_gradient(&self, raw: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.evaluate(raw, true)?;
        Ok((v, g.unwrap_or_default()))
    }

    fn evaluate(&self, raw: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let lay = &self.layout;
        if raw.len() != lay.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has length {}, expected {}",
                raw.len(),
                lay.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        let n_units = self.n_units;
        let dim = lay.n_inducing;
        let theta = lay.theta(raw)?;
        let ell = theta.length_scale();
        let mean = lay.mean(raw);
        let l = lay.chol(raw);
        if (0..dim).any(|k| l[(k, k)] == 0.0) {
            return Err(Error::NotPositiveDefinite("zero on the diagonal of L".into()));
        }
        let z: &[f64] = if lay.optimize_inducing {
            &raw[lay.inducing_offset()..lay.inducing_offset() + dim]
        } else {
            self.fixed_inducing.locations()
        };

        let kxx = inducing_gram_at(z, ell);
        let chol = JitteredCholesky::new(&kxx)?;
        let kfx = output_latent_gram_at(&self.points, z, &theta);
        let k_diag: Vec<f64> = self.points.iter().map(|&(i, _)| theta.prior_variance(i)).collect();
        let parts = moment_parts(&kfx, &k_diag, &chol, &mean, &l);

        let p = self.points.len();
        let mut g_mu = vec![0.0; p];
        let mut g_var = vec![0.0; p];
        let mut per_unit = vec![0.0; n_units];
        for n in 0..self.n_nodes {
            let (i, t) = self.points[n];
            let e = self.weights[n] * guarded_exp(parts.mu[n] + 0.5 * parts.var[n], t)?;
            per_unit[i] += e;
            g_mu[n] = -e;
            if !parts.clamped[n] {
                g_var[n] = -0.5 * e;
            }
        }
        let integral = per_unit.iter().fold(0.0, |acc, v| acc + v);
        let mut data = 0.0;
        for (mu, g) in parts.mu[self.n_nodes..p].iter().zip(&mut g_mu[self.n_nodes..p]) {
            data += mu;
            *g = 1.0;
        }
        let kl = kl_with_factor(&mean, &l, &chol);
        let value = -integral + data - kl;
        if !value.is_finite() {
            return Err(Error::Overflow {
                exponent: value,
                time: f64::NAN,
            });
        }
        if !want_grad {
            return Ok((value, None));
        }

        let a = &parts.a;
        let a_inv = chol.inverse();
        let am = chol.solve_vec(&mean);

        // a scaled column-wise by the variance adjoints.
        let mut a_gv = a.clone();
        for (n, mut col) in a_gv.column_iter_mut().enumerate() {
            col *= g_var[n];
        }
        let u = a * DVector::from_column_slice(&g_mu);
        let w = &a_gv * a.transpose();

        let mut grad = vec![0.0; lay.len()];

        let grad_m = &u - &am;
        grad[lay.mean_offset()..lay.mean_offset() + dim].copy_from_slice(grad_m.as_slice());

        // d/dL of tr(G_S S) is 2 G_S L; the log|S| part contributes diag(1/L_kk).
        let gl = 2.0 * &w * &l - &a_inv * &l;
        let mut k = lay.chol_offset();
        for r in 0..dim {
            for c in 0..=r {
                grad[k] = gl[(r, c)] + if r == c { 1.0 / l[(r, r)] } else { 0.0 };
                k += 1;
            }
        }

        // b = S a; adjoint of K_fX rows is A (g_mu m + 2 g_var b) - 2 g_var a.
        let b = &l * &parts.lt_a;
        let mut r = b.clone();
        for (n, mut col) in r.column_iter_mut().enumerate() {
            col *= 2.0 * g_var[n];
            col.axpy(g_mu[n], &mean, 1.0);
        }
        let ar = chol.solve(&r);
        let g_kfx = ar - 2.0 * &a_gv;

        // Adjoint of K_XX.
        let c = chol.solve(&b);
        let a_s = &a_inv * &l;
        let mut g_kxx = -(&u * am.transpose()) + &w - &a_gv * c.transpose() - &c * a_gv.transpose();
        g_kxx -= 0.5 * (&a_inv - &a_s * a_s.transpose() - &am * am.transpose());

        let l2 = ell * ell;
        let mut g_log_ell = 0.0;
        let mut g_log_width = vec![0.0; n_units];
        let mut g_scale = vec![0.0; n_units];
        let mut g_z = vec![0.0; dim];
        let widths = theta.widths();
        let scales = theta.scales();
        for n in 0..p {
            let (i, t) = self.points[n];
            let xi2 = widths[i] * widths[i];
            let eta2 = xi2 + l2;
            let alpha = scales[i];
            for q in 0..dim {
                let g = g_kfx[(q, n)];
                if g == 0.0 {
                    continue;
                }
                let d = t - z[q];
                let base = theta.latent_cross_unscaled(i, d);
                let kv = alpha * base;
                let dk_deta2 = kv * (d * d - eta2) / (2.0 * eta2 * eta2);
                g_scale[i] += g * base;
                g_log_ell += g * (kv + 2.0 * l2 * dk_deta2);
                g_log_width[i] += g * 2.0 * xi2 * dk_deta2;
                if lay.optimize_inducing {
                    g_z[q] += g * kv * d / eta2;
                }
            }
            let gv = g_var[n];
            if gv != 0.0 {
                let eta2_ii = 2.0 * xi2 + l2;
                let kff = k_diag[n];
                g_scale[i] += gv * 2.0 * alpha * (l2 / eta2_ii).sqrt();
                g_log_ell += gv * kff * (1.0 - l2 / eta2_ii);
                g_log_width[i] -= gv * 2.0 * xi2 * kff / eta2_ii;
            }
        }
        for qa in 0..dim {
            for qb in 0..dim {
                let d = z[qa] - z[qb];
                let kab = kxx[(qa, qb)];
                let g = g_kxx[(qa, qb)];
                g_log_ell += g * kab * d * d / l2;
                if lay.optimize_inducing {
                    let dz = g * kab * d / l2;
                    g_z[qa] -= dz;
                    g_z[qb] += dz;
                }
            }
        }

        grad[0] = g_log_ell;
        grad[lay.width_offset()..lay.width_offset() + n_units].copy_from_slice(&g_log_width);
        grad[lay.scale_offset()..lay.scale_offset() + n_units].copy_from_slice(&g_scale);
        if lay.optimize_inducing {
            grad[lay.inducing_offset()..lay.inducing_offset() + dim].copy_from_slice(&g_z);
        }
        Ok((value, Some(grad)))
    }
}

/// Gradient of the ELBO over the unconstrained vector, evaluated at
/// `(theta, vstate)` with the state's inducing points held fixed.
pub fn elbo_gradient(
    ds: &EventDataset,
    theta: &Hyperparameters,
    vstate: &VariationalState,
    config: &FitConfig,
) -> Result<Vec<f64>> {
    let rule = config.quadrature()?;
    let obj = ElboObjective::new(ds, vstate.inducing(), &rule, config.optimize_inducing);
    let raw = obj.layout().pack(theta, vstate);
    Ok(obj.value_and_gradient(&raw)?.1)
}
