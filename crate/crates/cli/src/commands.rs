//! Subcommand implementations. Each writes its tables plus a `meta.json`
//! describing every setting used, so reruns with the same flags produce
//! identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mgcp_core::prediction::{forecast_counts, intensity_curve, sampled_count_pmf, write_forecasts_csv, CountForecast};
use mgcp_core::quadrature::CompositeRule;
use mgcp_core::simulation::{case_study_surrogate, derive_seed, generate_fleet, SurrogateSpec};
use mgcp_core::{fit, EventDataset, FitConfig, FittedModel};
use serde::Serialize;
use serde_json::json;

use crate::args::{BenchmarkArgs, CaseStudyArgs, Cli, Command, FitArgs, FitOverrides, PredictArgs, SimulateArgs};
use crate::experiments::{
    run_benchmark, run_case_study, summarize_benchmark, summarize_case_study, BenchmarkRow, BenchmarkSpec,
    CaseStudyRow, CaseStudySpec,
};
use crate::UsageError;

pub fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .context("building worker pool")?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Fit(a) => fit_cmd(cli, a),
        Command::Predict(a) => predict(cli, a),
        Command::Benchmark(a) => benchmark(cli, a),
        Command::CaseStudy(a) => case_study(cli, a),
    })
}

/// Reads the `--config` TOML (if any) and applies flag overrides.
pub fn fit_config(cli: &Cli, o: &FitOverrides) -> Result<FitConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<FitConfig>(&text)
                .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };
    if let Some(v) = o.num_inducing {
        cfg.num_inducing = v;
    }
    if let Some(v) = o.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = o.optimizer {
        cfg.optimizer = v;
    }
    if o.optimize_inducing {
        cfg.optimize_inducing = true;
    }
    if let Some(v) = o.quad_order {
        cfg.quad_order = v;
    }
    if let Some(v) = o.quad_panels {
        cfg.quad_panels = v;
    }
    cfg.seed = cli.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating output directory {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path: PathBuf = dir.join(name);
    let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_meta(dir: &Path, command: &str, cli: &Cli, settings: impl Serialize) -> Result<()> {
    let meta = json!({
        "tool": "mgcp",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": mgcp_core::VERSION,
        "command": command,
        "seed": cli.seed,
        "settings": settings,
    });
    let mut w = create(dir, "meta.json")?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let fleet = generate_fleet(a.kind, a.n, &a.window, cli.seed)?;
    if a.truth_grid < 2 {
        return Err(UsageError("--truth-grid needs at least two points".into()).into());
    }
    let dir = out_dir(cli)?;
    fleet.dataset.write_csv(create(dir, "events.csv")?)?;
    fleet.write_truth_csv(&a.window.grid(a.truth_grid), create(dir, "truth.csv")?)?;
    write_meta(
        dir,
        "simulate",
        cli,
        json!({
            "kind": a.kind.to_string(),
            "n": a.n,
            "window": a.window.to_string(),
            "truth_grid": a.truth_grid,
            "lambda_star": mgcp_core::simulation::SigmoidLinkSpec::DEFAULT_LAMBDA_STAR,
            "path_grid": mgcp_core::simulation::SigmoidLinkSpec::DEFAULT_GRID,
            "sigmoid_length_scale": mgcp_core::simulation::SigmoidLinkSpec::DEFAULT_LENGTH_SCALE,
            "sigmoid_width_range": mgcp_core::simulation::SigmoidLinkSpec::WIDTH_RANGE,
            "sigmoid_scale_range": mgcp_core::simulation::SigmoidLinkSpec::SCALE_RANGE,
            "thinning_bound_headroom": mgcp_core::simulation::BOUND_HEADROOM,
            "truth": fleet.truth,
            "lambda_max": fleet.lambda_max,
        }),
    )?;
    println!("simulated {} units of kind {}", a.n, a.kind);
    for u in fleet.dataset.units() {
        println!("  {}: {} events", u.unit_id, u.len());
    }
    Ok(())
}

fn load(path: &Path, window: mgcp_core::ObservationWindow, align_zero: bool) -> Result<EventDataset> {
    EventDataset::load_events(path, window, align_zero).with_context(|| format!("loading {}", path.display()))
}

fn fit_cmd(cli: &Cli, a: &FitArgs) -> Result<()> {
    let cfg = fit_config(cli, &a.fit)?;
    let mut ds = load(&a.data, a.window, a.align_zero)?;
    if let (Some(unit), Some(p)) = (&a.truncate_unit, a.percentile) {
        ds = ds.truncate_at_percentile(unit, p)?;
    }
    let model = fit(&ds, &cfg)?;
    let dir = out_dir(cli)?;
    let mut w = create(dir, "model.json")?;
    w.write_all(model.to_json()?.as_bytes())?;
    writeln!(w)?;
    w.flush()?;
    write_meta(
        dir,
        "fit",
        cli,
        json!({
            "data": a.data.display().to_string(),
            "window": ds.window().to_string(),
            "align_zero": a.align_zero,
            "truncate_unit": a.truncate_unit,
            "percentile": a.percentile,
            "fit": cfg,
        }),
    )?;
    println!(
        "elbo {:.6} after {} iterations ({})",
        model.elbo(),
        model.iterations(),
        if model.converged() {
            "converged"
        } else {
            "iteration budget reached"
        }
    );
    Ok(())
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let model = FittedModel::from_json(&text).with_context(|| format!("parsing model {}", a.model.display()))?;
    let unit = model.unit_index(&a.unit)?;
    if a.grid_points < 2 {
        return Err(UsageError("--grid-points needs at least two points".into()).into());
    }
    let rule = CompositeRule::new(a.quad_panels, a.quad_order)?;
    let curve = intensity_curve(&model, unit, &model.window().grid(a.grid_points))?;
    let mut forecast = forecast_counts(&model, unit, a.t_star, a.horizon, &rule)?;
    if let Some(paths) = a.sampled_paths {
        forecast.pmf = sampled_count_pmf(&model, unit, a.t_star, a.horizon, paths, 101, derive_seed(cli.seed, 0))?;
    }
    let dir = out_dir(cli)?;
    curve.write_csv(create(dir, "intensity.csv")?)?;
    write_forecasts_csv(std::slice::from_ref(&forecast), create(dir, "forecast.csv")?)?;
    write_meta(
        dir,
        "predict",
        cli,
        json!({
            "model": a.model.display().to_string(),
            "unit": a.unit,
            "t_star": a.t_star,
            "horizon": a.horizon,
            "grid_points": a.grid_points,
            "intensity_statistic": "posterior mean exp(mu + var/2); band exp(mu +- 1.96 sd)",
            "predictive": if a.sampled_paths.is_some() { "sampled-mixture" } else { "plug-in-poisson" },
            "sampled_paths": a.sampled_paths,
            "quad_order": a.quad_order,
            "quad_panels": a.quad_panels,
        }),
    )?;
    print_forecast(&a.unit, &forecast);
    Ok(())
}

fn print_forecast(unit: &str, f: &CountForecast) {
    println!(
        "unit {unit}: expected {:.6} events in [{}, {}]",
        f.lambda,
        f.t_star,
        f.t_star + f.horizon
    );
    let mode = f
        .pmf
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(y, _)| y)
        .unwrap_or(0);
    println!("  most likely count {mode}, pmf support 0..={}", f.pmf.len() - 1);
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> Result<()> {
    let spec = BenchmarkSpec {
        kind: a.kind,
        replications: a.replications,
        percentiles: a.percentiles.clone(),
        n_units: a.n,
        window: a.window,
        seed: cli.seed,
        methods: a.methods.clone(),
        rms_grid: a.rms_grid,
        fit: fit_config(cli, &a.fit)?,
    };
    spec.validate().map_err(UsageError)?;
    let rows = run_benchmark(&spec);
    let dir = out_dir(cli)?;
    write_benchmark_rows(&rows, create(dir, "benchmark.csv")?)?;
    let mut fw = csv::Writer::from_writer(create(dir, "failures.csv")?);
    fw.write_record(["replicate", "percentile", "method", "error"])?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        fw.write_record([
            r.replicate.to_string(),
            num(r.percentile),
            r.method.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    fw.flush()?;
    let summary = summarize_benchmark(&rows, &spec);
    let mut sw = csv::Writer::from_writer(create(dir, "summary.csv")?);
    sw.write_record([
        "percentile",
        "method",
        "n",
        "failures",
        "mean_rms",
        "se_rms",
        "mean_ll",
        "se_ll",
    ])?;
    for s in &summary {
        sw.write_record([
            num(s.percentile),
            s.method.to_string(),
            s.n.to_string(),
            s.failures.to_string(),
            num(s.mean_rms),
            num(s.se_rms),
            num(s.mean_ll),
            num(s.se_ll),
        ])?;
    }
    sw.flush()?;
    write_meta(
        dir,
        "benchmark",
        cli,
        json!({ "spec": spec, "rms_region": "full window" }),
    )?;
    println!(
        "{:>10}  {:<22} {:>4} {:>12} {:>10} {:>12} {:>10}",
        "percentile", "method", "n", "mean_rms", "se", "mean_ll", "se"
    );
    for s in &summary {
        println!(
            "{:>10}  {:<22} {:>4} {:>12.6} {:>10.6} {:>12.4} {:>10.4}",
            s.percentile,
            s.method.to_string(),
            s.n,
            s.mean_rms,
            s.se_rms,
            s.mean_ll,
            s.se_ll
        );
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        eprintln!("{failures} fits failed; see failures.csv");
    }
    Ok(())
}

/// Long-format `replicate,percentile,method,ll,rms`; failed fits leave
/// `ll` and `rms` empty.
pub fn write_benchmark_rows<W: Write>(rows: &[BenchmarkRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "percentile", "method", "ll", "rms"])?;
    for r in rows {
        w.write_record([
            r.replicate.to_string(),
            num(r.percentile),
            r.method.to_string(),
            opt(r.ll),
            opt(r.rms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format `fold,L,method,lambda_hat,actual,abs_err`.
pub fn write_case_study_rows<W: Write>(rows: &[CaseStudyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["fold", "L", "method", "lambda_hat", "actual", "abs_err"])?;
    for r in rows {
        w.write_record([
            r.fold.to_string(),
            num(r.horizon),
            r.method.to_string(),
            opt(r.lambda_hat),
            r.actual.to_string(),
            opt(r.abs_err()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn case_study(cli: &Cli, a: &CaseStudyArgs) -> Result<()> {
    let spec = CaseStudySpec {
        percentile: a.percentile,
        horizons: a.horizons.clone(),
        methods: a.methods.clone(),
        forecast_stat: a.forecast_stat,
        sample_paths: a.sample_paths,
        seed: cli.seed,
        fit: fit_config(cli, &a.fit)?,
    };
    spec.validate().map_err(UsageError)?;
    let dir = out_dir(cli)?;
    let (ds, source) = match &a.data {
        Some(path) => (load(path, a.window, false)?, path.display().to_string()),
        None => {
            let fleet = case_study_surrogate(&SurrogateSpec::default(), &a.window, cli.seed)?;
            fleet.dataset.write_csv(create(dir, "surrogate_events.csv")?)?;
            (fleet.dataset, "synthetic surrogate".to_string())
        }
    };
    let rows = run_case_study(&ds, &spec)?;
    write_case_study_rows(&rows, create(dir, "case_study.csv")?)?;
    let mae = summarize_case_study(&rows, &spec);
    let mut w = csv::Writer::from_writer(create(dir, "mae.csv")?);
    w.write_record(["L", "method", "folds", "mae", "se"])?;
    for m in &mae {
        w.write_record([
            num(m.horizon),
            m.method.to_string(),
            m.folds.to_string(),
            num(m.mae),
            num(m.se),
        ])?;
    }
    w.flush()?;
    write_meta(
        dir,
        "case-study",
        cli,
        json!({
            "data": source,
            "window": ds.window().to_string(),
            "units": ds.num_units(),
            "surrogate": if a.data.is_none() { Some(SurrogateSpec::default()) } else { None },
            "spec": spec,
        }),
    )?;
    println!("{:>6}  {:<22} {:>10} {:>10}", "L", "method", "mae", "se");
    for m in &mae {
        println!(
            "{:>6}  {:<22} {:>10.4} {:>10.4}",
            m.horizon,
            m.method.to_string(),
            m.mae,
            m.se
        );
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        eprintln!("{failures} forecasts failed");
    }
    Ok(())
}
