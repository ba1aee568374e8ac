//! Synthetic fleets: parametric intensity families with random per-unit
//! parameters, sigmoid-linked draws from the multi-output prior, and exact
//! event sampling by thinning.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventDataset, ObservationWindow, UnitRecord};
use crate::kernel::Hyperparameters;

/// Points on which thinning bounds are validated.
pub const BOUND_GRID: usize = 10_001;
/// Headroom applied to the grid maximum when choosing a thinning bound.
pub const BOUND_HEADROOM: f64 = 1.05;
const MAX_REJECTIONS: usize = 100;

/// Mixes a stream index into a base seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// `a exp(-x/b) + exp(-((x - c)/15)^2)`.
pub fn intensity_form1(x: f64, a: f64, b: f64, c: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "form-1 decay b must be positive, got {b}"
        )));
    }
    Ok(form1(x, a, b, c))
}

/// `a' sin(b' x^2) exp(-x/c') + 1`, clamped at zero.
pub fn intensity_form2(x: f64, a: f64, b: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "form-2 decay c' must be positive, got {c}"
        )));
    }
    Ok(form2(x, a, b, c))
}

fn form1(x: f64, a: f64, b: f64, c: f64) -> f64 {
    let z = (x - c) / 15.0;
    a * (-x / b).exp() + (-z * z).exp()
}

fn form2(x: f64, a: f64, b: f64, c: f64) -> f64 {
    (a * (b * x * x).sin() * (-x / c).exp() + 1.0).max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormFamily {
    Form1,
    Form2,
}

impl FormFamily {
    /// Index of the parameter that must be positive.
    fn positive_index(self) -> usize {
        match self {
            FormFamily::Form1 => 1,
            FormFamily::Form2 => 2,
        }
    }
}

/// A parametric intensity family with Gaussian unit-to-unit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricForm {
    family: FormFamily,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    factor: Matrix3<f64>,
}

impl ParametricForm {
    /// Symmetrizes `cov` and clips negative eigenvalues to zero.
    pub fn new(family: FormFamily, mean: [f64; 3], cov: [[f64; 3]; 3]) -> Result<Self> {
        let raw = Matrix3::from_fn(|r, c| cov[r][c]);
        if raw.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "parameter mean and covariance must be finite".into(),
            ));
        }
        let sym = 0.5 * (raw + raw.transpose());
        let eig = SymmetricEigen::new(sym);
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let cov = eig.eigenvectors * Matrix3::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let cov = 0.5 * (cov + cov.transpose());
        let factor = eig.eigenvectors * Matrix3::from_diagonal(&clipped.map(f64::sqrt));
        Ok(Self {
            family,
            mean: Vector3::from(mean),
            cov,
            factor,
        })
    }

    /// Sum of an exponential and a Gaussian bump, with the published
    /// parameter distribution.
    pub fn form1_default() -> Self {
        Self::new(
            FormFamily::Form1,
            [3.0, 20.0, 65.0],
            [[5e-1, 4e-4, -1e-5], [4e-4, 2.5e-1, 3e-7], [1e-5, 3e-7, 1.0]],
        )
        .expect("finite constants")
    }

    /// Sinusoid with increasing frequency, with the published parameter
    /// distribution.
    pub fn form2_default() -> Self {
        Self::new(
            FormFamily::Form2,
            [2.0, 2e-3, 50.0],
            [[1.0, -1e-7, 2e-4], [-1e-7, 1e-2, 3e-7], [1e-5, 3e-7, 1.0]],
        )
        .expect("finite constants")
    }

    pub fn family(&self) -> FormFamily {
        self.family
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean.into()
    }

    /// Repaired covariance.
    pub fn cov(&self) -> Matrix3<f64> {
        self.cov
    }

    /// One multivariate normal draw, redrawn until the decay parameter is
    /// positive.
    pub fn draw_unit_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 3]> {
        let k = self.family.positive_index();
        for _ in 0..MAX_REJECTIONS {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            let p = self.mean + self.factor * z;
            if p[k] > 0.0 {
                return Ok(p.into());
            }
        }
        Err(Error::RejectionExhausted(MAX_REJECTIONS))
    }

    pub fn intensity(&self, params: [f64; 3]) -> TrueIntensity {
        let [a, b, c] = params;
        match self.family {
            FormFamily::Form1 => TrueIntensity::Form1 { a, b, c },
            FormFamily::Form2 => TrueIntensity::Form2 { a, b, c },
        }
    }
}

/// Ground-truth intensity of a simulated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrueIntensity {
    Form1 {
        a: f64,
        b: f64,
        c: f64,
    },
    Form2 {
        a: f64,
        b: f64,
        c: f64,
    },
    /// Values on a uniform grid, linearly interpolated and held constant
    /// outside it.
    Grid {
        start: f64,
        step: f64,
        values: Vec<f64>,
    },
}

impl TrueIntensity {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TrueIntensity::Form1 { a, b, c } => form1(t, *a, *b, *c),
            TrueIntensity::Form2 { a, b, c } => form2(t, *a, *b, *c),
            TrueIntensity::Grid { start, step, values } => {
                let last = values.len() - 1;
                let s = (t - start) / step;
                if s <= 0.0 {
                    return values[0];
                }
                let k = s.floor() as usize;
                if k >= last {
                    return values[last];
                }
                let w = s - k as f64;
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }

    /// Largest value on an `n`-point grid over the window.
    pub fn grid_max(&self, window: &ObservationWindow, n: usize) -> f64 {
        window.grid(n).into_iter().map(|t| self.eval(t)).fold(0.0, f64::max)
    }
}

/// Generator settings for sigmoid-linked draws from the multi-output prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidLinkSpec {
    pub theta: Hyperparameters,
    pub lambda_star: f64,
    pub grid_points: usize,
}

impl SigmoidLinkSpec {
    pub const DEFAULT_LAMBDA_STAR: f64 = 4.0;
    pub const DEFAULT_GRID: usize = 1000;
    pub const DEFAULT_LENGTH_SCALE: f64 = 10.0;
    pub const WIDTH_RANGE: (f64, f64) = (2.0, 4.0);
    pub const SCALE_RANGE: (f64, f64) = (1.5, 2.5);

    pub fn new(theta: Hyperparameters, lambda_star: f64, grid_points: usize) -> Result<Self> {
        if !(lambda_star > 0.0 && lambda_star.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_star must be positive, got {lambda_star}"
            )));
        }
        if grid_points < 2 {
            return Err(Error::InvalidArgument("path grid needs at least two points".into()));
        }
        Ok(Self {
            theta,
            lambda_star,
            grid_points,
        })
    }

    /// Default generator: length-scale 10, widths uniform on [2, 4] and
    /// scales uniform on [1.5, 2.5], drawn per unit.
    pub fn random<R: Rng + ?Sized>(n_units: usize, lambda_star: f64, rng: &mut R) -> Result<Self> {
        let widths = Uniform::new(Self::WIDTH_RANGE.0, Self::WIDTH_RANGE.1).expect("valid range");
        let scales = Uniform::new(Self::SCALE_RANGE.0, Self::SCALE_RANGE.1).expect("valid range");
        let xi: Vec<f64> = (0..n_units).map(|_| widths.sample(rng)).collect();
        let alpha: Vec<f64> = (0..n_units).map(|_| scales.sample(rng)).collect();
        let theta = Hyperparameters::new(Self::DEFAULT_LENGTH_SCALE, xi, alpha)?;
        Self::new(theta, lambda_star, Self::DEFAULT_GRID)
    }
}

/// Low-rank factor `F` with `K ≈ F Fᵀ` by greedy pivoted Cholesky; stops once
/// the largest residual diagonal falls below `rel_tol * max(diag)`.
pub fn pivoted_cholesky<K: Fn(usize, usize) -> f64>(n: usize, kernel: K, rel_tol: f64) -> DMatrix<f64> {
    let mut diag: Vec<f64> = (0..n).map(|k| kernel(k, k)).collect();
    let stop = rel_tol * diag.iter().cloned().fold(0.0, f64::max);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let (p, &dmax) = diag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        if dmax <= stop || dmax <= 0.0 {
            break;
        }
        let root = dmax.sqrt();
        let mut col: Vec<f64> = (0..n).map(|k| kernel(k, p)).collect();
        for prev in &cols {
            let f = prev[p];
            for (c, v) in col.iter_mut().zip(prev) {
                *c -= f * v;
            }
        }
        for (k, c) in col.iter_mut().enumerate() {
            *c /= root;
            diag[k] = (diag[k] - *c * *c).max(0.0);
        }
        diag[p] = 0.0;
        cols.push(col);
    }
    DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r])
}

/// Joint latent paths `f_i` on a uniform grid; row `i` is unit `i`.
pub fn sample_latent_paths<R: Rng + ?Sized>(theta: &Hyperparameters, grid: &[f64], rng: &mut R) -> DMatrix<f64> {
    let n_units = theta.num_units();
    let g = grid.len();
    let factor = pivoted_cholesky(
        n_units * g,
        |r, c| theta.cross(r / g, c / g, grid[r % g] - grid[c % g]),
        1e-10,
    );
    let eps: Vec<f64> = (0..factor.ncols()).map(|_| StandardNormal.sample(rng)).collect();
    let f = factor * nalgebra::DVector::from_vec(eps);
    DMatrix::from_fn(n_units, g, |i, k| f[i * g + k])
}

/// `λ* σ(f_i)` on the spec grid for every unit.
pub fn sample_mgcp_sigmoid<R: Rng + ?Sized>(
    spec: &SigmoidLinkSpec,
    window: &ObservationWindow,
    rng: &mut R,
) -> Vec<TrueIntensity> {
    let grid = window.grid(spec.grid_points);
    let step = window.length() / (spec.grid_points - 1) as f64;
    let paths = sample_latent_paths(&spec.theta, &grid, rng);
    (0..spec.theta.num_units())
        .map(|i| TrueIntensity::Grid {
            start: window.start(),
            step,
            values: paths.row(i).iter().map(|f| spec.lambda_star * sigmoid(*f)).collect(),
        })
        .collect()
}

/// Lewis thinning. The bound is checked on a dense grid first and at every
/// candidate point.
pub fn thinning_sample<F, R>(lambda: F, lambda_max: f64, window: &ObservationWindow, rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "thinning bound must be positive, got {lambda_max}"
        )));
    }
    for t in window.grid(BOUND_GRID) {
        check_bound(&lambda, t, lambda_max)?;
    }
    let gap = Exp::new(lambda_max).expect("positive rate");
    let mut events = Vec::new();
    let mut t = window.start();
    loop {
        t += gap.sample(rng);
        if t > window.end() {
            break;
        }
        let rate = check_bound(&lambda, t, lambda_max)?;
        let u: f64 = rng.random();
        if u * lambda_max < rate {
            events.push(t);
        }
    }
    Ok(events)
}

fn check_bound<F: Fn(f64) -> f64>(lambda: &F, t: f64, bound: f64) -> Result<f64> {
    let rate = lambda(t);
    if !(rate >= 0.0) || rate > bound {
        return Err(Error::BoundViolation { time: t, rate, bound });
    }
    Ok(rate)
}

/// Same as [`thinning_sample`] with a seeded generator.
pub fn thinning_sample_seeded<F: Fn(f64) -> f64>(
    lambda: F,
    lambda_max: f64,
    window: &ObservationWindow,
    seed: u64,
) -> Result<Vec<f64>> {
    thinning_sample(lambda, lambda_max, window, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FleetKind {
    MgcpSigmoid,
    Form1,
    Form2,
}

impl FleetKind {
    pub const ALL: [FleetKind; 3] = [FleetKind::MgcpSigmoid, FleetKind::Form1, FleetKind::Form2];
}

impl fmt::Display for FleetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FleetKind::MgcpSigmoid => "mgcp-sigmoid",
            FleetKind::Form1 => "form1",
            FleetKind::Form2 => "form2",
        })
    }
}

impl FromStr for FleetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mgcp-sigmoid" => Ok(FleetKind::MgcpSigmoid),
            "form1" => Ok(FleetKind::Form1),
            "form2" => Ok(FleetKind::Form2),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator kind '{other}' (expected mgcp-sigmoid, form1 or form2)"
            ))),
        }
    }
}

/// A simulated fleet with its ground truth. Units are named `u1..uN`.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub dataset: EventDataset,
    pub truth: Vec<TrueIntensity>,
    pub lambda_max: Vec<f64>,
}

impl Fleet {
    /// CSV `unit_id,time,lambda` on `grid`.
    pub fn write_truth_csv<W: Write>(&self, grid: &[f64], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "time", "lambda"])?;
        for (unit, truth) in self.dataset.units().iter().zip(&self.truth) {
            for &t in grid {
                w.write_record([unit.unit_id.clone(), format!("{t:?}"), format!("{:?}", truth.eval(t))])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn unit_name(i: usize) -> String {
    format!("u{}", i + 1)
}

fn truths_for<R: Rng + ?Sized>(
    kind: FleetKind,
    n: usize,
    window: &ObservationWindow,
    rng: &mut R,
) -> Result<Vec<TrueIntensity>> {
    Ok(match kind {
        FleetKind::MgcpSigmoid => {
            let spec = SigmoidLinkSpec::random(n, SigmoidLinkSpec::DEFAULT_LAMBDA_STAR, rng)?;
            sample_mgcp_sigmoid(&spec, window, rng)
        }
        FleetKind::Form1 | FleetKind::Form2 => {
            let form = if kind == FleetKind::Form1 {
                ParametricForm::form1_default()
            } else {
                ParametricForm::form2_default()
            };
            (0..n)
                .map(|_| Ok(form.intensity(form.draw_unit_params(rng)?)))
                .collect::<Result<_>>()?
        }
    })
}

fn sample_units<R: Rng + ?Sized>(
    truth: &[TrueIntensity],
    window: &ObservationWindow,
    rng: &mut R,
) -> Result<(Vec<UnitRecord>, Vec<f64>)> {
    let mut units = Vec::with_capacity(truth.len());
    let mut bounds = Vec::with_capacity(truth.len());
    for (i, lam) in truth.iter().enumerate() {
        let bound = BOUND_HEADROOM * lam.grid_max(window, BOUND_GRID);
        let events = if bound > 0.0 {
            thinning_sample(|t| lam.eval(t), bound, window, rng)?
        } else {
            Vec::new()
        };
        units.push(UnitRecord::new(unit_name(i), events));
        bounds.push(bound);
    }
    Ok((units, bounds))
}

/// Draws `n` ground-truth intensities of the given kind and their events.
pub fn generate_fleet(kind: FleetKind, n: usize, window: &ObservationWindow, seed: u64) -> Result<Fleet> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a fleet needs at least 2 units, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = truths_for(kind, n, window, &mut rng)?;
    let (units, lambda_max) = sample_units(&truth, window, &mut rng)?;
    Ok(Fleet {
        dataset: EventDataset::new(units, *window)?,
        truth,
        lambda_max,
    })
}

/// Settings for the synthetic stand-in of the field study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub n_units: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub lambda_star: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            n_units: 20,
            min_events: 6,
            max_events: 23,
            lambda_star: 0.3,
        }
    }
}

/// A sigmoid-linked fleet whose units each carry between `min_events` and
/// `max_events` events. A unit's events are redrawn from its own intensity
/// until the count fits; if that keeps failing the whole fleet is redrawn.
pub fn case_study_surrogate(spec: &SurrogateSpec, window: &ObservationWindow, seed: u64) -> Result<Fleet> {
    if spec.n_units < 3 || spec.min_events > spec.max_events {
        return Err(Error::InvalidArgument(
            "surrogate needs at least 3 units and min_events <= max_events".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'fleet: for _ in 0..MAX_REJECTIONS {
        let sig = SigmoidLinkSpec::random(spec.n_units, spec.lambda_star, &mut rng)?;
        let truth = sample_mgcp_sigmoid(&sig, window, &mut rng);
        let mut units = Vec::with_capacity(spec.n_units);
        for (i, lam) in truth.iter().enumerate() {
            let mut accepted = None;
            for _ in 0..MAX_REJECTIONS {
                let events = thinning_sample(|t| lam.eval(t), spec.lambda_star, window, &mut rng)?;
                if (spec.min_events..=spec.max_events).contains(&events.len()) {
                    accepted = Some(events);
                    break;
                }
            }
            match accepted {
                Some(events) => units.push(UnitRecord::new(unit_name(i), events)),
                None => continue 'fleet,
            }
        }
        return Ok(Fleet {
            dataset: EventDataset::new(units, *window)?,
            truth,
            lambda_max: vec![spec.lambda_star; spec.n_units],
        });
    }
    Err(Error::RejectionExhausted(MAX_REJECTIONS))
}
