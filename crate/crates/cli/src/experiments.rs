//! Simulation benchmark and leave-one-out study drivers.

use std::fmt;
use std::str::FromStr;

use mgcp_core::prediction::{
    expected_count, intensity_curve, pmf_median, predictive_loglik, rms_intensity, sampled_count_pmf,
};
use mgcp_core::simulation::{derive_seed, generate_fleet, FleetKind};
use mgcp_core::{fit, EventDataset, FitConfig, FittedModel, ObservationWindow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stats::{mean, std_error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MgcpPp,
    IndependentBaseline,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::MgcpPp, Method::IndependentBaseline];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::MgcpPp => "mgcp-pp",
            Method::IndependentBaseline => "independent-baseline",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mgcp-pp" => Ok(Method::MgcpPp),
            "independent-baseline" => Ok(Method::IndependentBaseline),
            other => Err(format!(
                "unknown method '{other}' (expected mgcp-pp or independent-baseline)"
            )),
        }
    }
}

/// Fits `method` for the test unit and returns the model with the test
/// unit's index in it. The baseline sees only the test unit's events.
pub fn fit_for_test_unit(
    method: Method,
    ds: &EventDataset,
    test_unit: &str,
    config: &FitConfig,
) -> mgcp_core::Result<(FittedModel, usize)> {
    let view = match method {
        Method::MgcpPp => ds.clone(),
        Method::IndependentBaseline => ds.only(test_unit)?,
    };
    let model = fit(&view, config)?;
    let idx = model.unit_index(test_unit)?;
    Ok((model, idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub kind: FleetKind,
    pub replications: usize,
    pub percentiles: Vec<f64>,
    pub n_units: usize,
    pub window: ObservationWindow,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub rms_grid: usize,
    pub fit: FitConfig,
}

impl BenchmarkSpec {
    pub fn new(kind: FleetKind, replications: usize, seed: u64) -> Self {
        Self {
            kind,
            replications,
            percentiles: vec![0.3, 0.6],
            n_units: 10,
            window: ObservationWindow::new(0.0, 100.0).expect("valid window"),
            seed,
            methods: Method::ALL.to_vec(),
            rms_grid: 200,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.replications == 0 {
            return Err("replications must be at least 1".into());
        }
        if self.percentiles.is_empty() || self.percentiles.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err("percentiles must lie in (0, 1)".into());
        }
        if self.n_units < 2 {
            return Err(format!("a fleet needs at least 2 units, got {}", self.n_units));
        }
        if self.methods.is_empty() {
            return Err("at least one method is required".into());
        }
        if self.rms_grid < 2 {
            return Err("RMS grid needs at least two points".into());
        }
        Ok(())
    }
}

/// One row of the benchmark table; `ll`/`rms` are `None` for a failed fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub replicate: usize,
    pub percentile: f64,
    pub method: Method,
    pub ll: Option<f64>,
    pub rms: Option<f64>,
    pub error: Option<String>,
}

fn evaluate_replicate(spec: &BenchmarkSpec, replicate: usize) -> Vec<BenchmarkRow> {
    let seed = derive_seed(spec.seed, replicate as u64);
    let fleet = match generate_fleet(spec.kind, spec.n_units, &spec.window, seed) {
        Ok(f) => f,
        Err(e) => {
            return spec
                .percentiles
                .iter()
                .flat_map(|&p| spec.methods.iter().map(move |&m| (p, m)))
                .map(|(percentile, method)| BenchmarkRow {
                    replicate,
                    percentile,
                    method,
                    ll: None,
                    rms: None,
                    error: Some(e.to_string()),
                })
                .collect()
        }
    };
    let test = fleet.dataset.unit_ids().last().cloned().expect("fleet has units");
    let test_idx = fleet.dataset.num_units() - 1;
    let truth = &fleet.truth[test_idx];
    let grid = spec.window.grid(spec.rms_grid);
    let true_curve: Vec<f64> = grid.iter().map(|&t| truth.eval(t)).collect();
    let all_events = fleet.dataset.units()[test_idx].event_times.clone();

    let mut rows = Vec::new();
    for &percentile in &spec.percentiles {
        let t_star = spec.window.percentile_time(percentile);
        let heldout: Vec<f64> = all_events.iter().copied().filter(|&t| t > t_star).collect();
        for &method in &spec.methods {
            let mut config = spec.fit.clone();
            config.seed = derive_seed(seed, 1 + method as u64);
            let outcome = (|| -> mgcp_core::Result<(f64, f64)> {
                let ds = fleet.dataset.truncate_at_percentile(&test, percentile)?;
                let (model, idx) = fit_for_test_unit(method, &ds, &test, &config)?;
                let curve = intensity_curve(&model, idx, &grid)?;
                let rms = rms_intensity(&curve.mean_intensity, &true_curve)?;
                let rule = config.quadrature()?;
                let ll = predictive_loglik(&model, idx, &heldout, (t_star, spec.window.end()), &rule)?;
                Ok((ll.value, rms))
            })();
            rows.push(match outcome {
                Ok((ll, rms)) => BenchmarkRow {
                    replicate,
                    percentile,
                    method,
                    ll: Some(ll),
                    rms: Some(rms),
                    error: None,
                },
                Err(e) => BenchmarkRow {
                    replicate,
                    percentile,
                    method,
                    ll: None,
                    rms: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    rows
}

/// Runs every replicate; rows come back sorted by (replicate, percentile, method).
pub fn run_benchmark(spec: &BenchmarkSpec) -> Vec<BenchmarkRow> {
    let mut rows: Vec<BenchmarkRow> = (0..spec.replications)
        .into_par_iter()
        .flat_map_iter(|r| evaluate_replicate(spec, r))
        .collect();
    rows.sort_by(|a, b| {
        a.replicate
            .cmp(&b.replicate)
            .then(a.percentile.total_cmp(&b.percentile))
            .then(a.method.cmp(&b.method))
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSummary {
    pub percentile: f64,
    pub method: Method,
    pub n: usize,
    pub failures: usize,
    pub mean_rms: f64,
    pub se_rms: f64,
    pub mean_ll: f64,
    pub se_ll: f64,
}

pub fn summarize_benchmark(rows: &[BenchmarkRow], spec: &BenchmarkSpec) -> Vec<BenchmarkSummary> {
    let mut out = Vec::new();
    for &percentile in &spec.percentiles {
        for &method in &spec.methods {
            let sel: Vec<&BenchmarkRow> = rows
                .iter()
                .filter(|r| r.percentile == percentile && r.method == method)
                .collect();
            let rms: Vec<f64> = sel.iter().filter_map(|r| r.rms).collect();
            let ll: Vec<f64> = sel.iter().filter_map(|r| r.ll).collect();
            out.push(BenchmarkSummary {
                percentile,
                method,
                n: rms.len(),
                failures: sel.len() - rms.len(),
                mean_rms: mean(&rms),
                se_rms: std_error(&rms),
                mean_ll: mean(&ll),
                se_ll: std_error(&ll),
            });
        }
    }
    out
}

/// Paired RMS values `(first, second)` for replicates where both succeeded.
pub fn paired_rms(rows: &[BenchmarkRow], first: (f64, Method), second: (f64, Method)) -> (Vec<f64>, Vec<f64>) {
    let lookup = |rep: usize, (p, m): (f64, Method)| {
        rows.iter()
            .find(|r| r.replicate == rep && r.percentile == p && r.method == m)
            .and_then(|r| r.rms)
    };
    let mut reps: Vec<usize> = rows.iter().map(|r| r.replicate).collect();
    reps.dedup();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for rep in reps {
        if let (Some(x), Some(y)) = (lookup(rep, first), lookup(rep, second)) {
            a.push(x);
            b.push(y);
        }
    }
    (a, b)
}

/// How the case study turns a fitted model into a point count forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastStat {
    /// Expected count under the posterior-mean intensity.
    Expected,
    /// Median of the sampled mixed-Poisson predictive.
    SampledMedian,
}

impl FromStr for ForecastStat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "expected" => Ok(ForecastStat::Expected),
            "sampled-median" => Ok(ForecastStat::SampledMedian),
            other => Err(format!(
                "unknown forecast statistic '{other}' (expected or sampled-median)"
            )),
        }
    }
}

impl fmt::Display for ForecastStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForecastStat::Expected => "expected",
            ForecastStat::SampledMedian => "sampled-median",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseStudySpec {
    pub percentile: f64,
    pub horizons: Vec<f64>,
    pub methods: Vec<Method>,
    pub forecast_stat: ForecastStat,
    pub sample_paths: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl CaseStudySpec {
    pub fn new(seed: u64) -> Self {
        Self {
            percentile: 0.5,
            horizons: vec![5.0, 10.0, 15.0, 20.0, 25.0],
            methods: Method::ALL.to_vec(),
            forecast_stat: ForecastStat::Expected,
            sample_paths: 500,
            seed,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(format!("percentile must lie in (0, 1), got {}", self.percentile));
        }
        if self.horizons.is_empty()
            || self.horizons.iter().any(|h| !(*h > 0.0 && h.is_finite()))
            || self.horizons.windows(2).any(|w| w[1] <= w[0])
        {
            return Err("horizons must be positive and strictly increasing".into());
        }
        if self.methods.is_empty() {
            return Err("at least one method is required".into());
        }
        if self.sample_paths == 0 {
            return Err("sample_paths must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudyRow {
    pub fold: usize,
    pub horizon: f64,
    pub method: Method,
    pub lambda_hat: Option<f64>,
    pub actual: usize,
    pub error: Option<String>,
}

impl CaseStudyRow {
    pub fn abs_err(&self) -> Option<f64> {
        self.lambda_hat.map(|l| (l - self.actual as f64).abs())
    }
}

fn evaluate_fold(ds: &EventDataset, spec: &CaseStudySpec, fold: usize) -> Vec<CaseStudyRow> {
    let unit = &ds.units()[fold];
    let window = ds.window();
    let t_star = window.percentile_time(spec.percentile);
    let actual: Vec<usize> = spec
        .horizons
        .iter()
        .map(|&h| unit.count_in(t_star, t_star + h))
        .collect();
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let mut config = spec.fit.clone();
        config.seed = derive_seed(derive_seed(spec.seed, fold as u64), 1 + method as u64);
        let forecasts = (|| -> mgcp_core::Result<Vec<f64>> {
            let truncated = ds.truncate_at_percentile(&unit.unit_id, spec.percentile)?;
            let (model, idx) = fit_for_test_unit(method, &truncated, &unit.unit_id, &config)?;
            let rule = config.quadrature()?;
            spec.horizons
                .iter()
                .enumerate()
                .map(|(k, &h)| match spec.forecast_stat {
                    ForecastStat::Expected => expected_count(&model, idx, t_star, h, &rule),
                    ForecastStat::SampledMedian => {
                        let pmf = sampled_count_pmf(
                            &model,
                            idx,
                            t_star,
                            h,
                            spec.sample_paths,
                            SAMPLE_GRID,
                            derive_seed(config.seed, k as u64),
                        )?;
                        Ok(pmf_median(&pmf) as f64)
                    }
                })
                .collect()
        })();
        for (k, &horizon) in spec.horizons.iter().enumerate() {
            let (lambda_hat, error) = match &forecasts {
                Ok(v) => (Some(v[k]), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(CaseStudyRow {
                fold,
                horizon,
                method,
                lambda_hat,
                actual: actual[k],
                error,
            });
        }
    }
    rows
}

/// Grid points per sampled path in the mixed-Poisson forecast.
pub const SAMPLE_GRID: usize = 101;

/// Leave-one-out over every unit; rows sorted by (fold, horizon, method).
pub fn run_case_study(ds: &EventDataset, spec: &CaseStudySpec) -> mgcp_core::Result<Vec<CaseStudyRow>> {
    if ds.num_units() < 3 {
        return Err(mgcp_core::Error::Validation(format!(
            "leave-one-out needs at least 3 units, got {}",
            ds.num_units()
        )));
    }
    let mut rows: Vec<CaseStudyRow> = (0..ds.num_units())
        .into_par_iter()
        .flat_map_iter(|fold| evaluate_fold(ds, spec, fold))
        .collect();
    rows.sort_by(|a, b| {
        a.fold
            .cmp(&b.fold)
            .then(a.horizon.total_cmp(&b.horizon))
            .then(a.method.cmp(&b.method))
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeRow {
    pub horizon: f64,
    pub method: Method,
    pub folds: usize,
    pub mae: f64,
    pub se: f64,
}

pub fn summarize_case_study(rows: &[CaseStudyRow], spec: &CaseStudySpec) -> Vec<MaeRow> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        for &horizon in &spec.horizons {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.horizon == horizon)
                .filter_map(|r| r.abs_err())
                .collect();
            out.push(MaeRow {
                horizon,
                method,
                folds: errs.len(),
                mae: mean(&errs),
                se: std_error(&errs),
            });
        }
    }
    out
}
