mod common;

use common::rng;
use mgcp_core::quadrature::CompositeRule;
use mgcp_core::simulation::{
    case_study_surrogate, derive_seed, generate_fleet, sample_latent_paths, thinning_sample, thinning_sample_seeded,
    FleetKind, ParametricForm, SigmoidLinkSpec, SurrogateSpec, TrueIntensity,
};
use mgcp_core::{Hyperparameters, ObservationWindow};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn window() -> ObservationWindow {
    ObservationWindow::new(0.0, 100.0).unwrap()
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn homogeneous_thinning_is_poisson() {
    let mut r = rng(1);
    let counts: Vec<f64> = (0..2000)
        .map(|_| thinning_sample(|_| 2.0, 2.0, &window(), &mut r).unwrap().len() as f64)
        .collect();
    let (mean, var) = moments(&counts);
    let se = (200.0f64 / 2000.0).sqrt();
    assert!((mean - 200.0).abs() < 4.0 * se, "mean {mean}");
    assert!((var / 200.0 - 1.0).abs() < 0.15, "variance {var}");
}

#[test]
fn form1_counts_match_integrated_intensity() {
    let truth = TrueIntensity::Form1 {
        a: 3.0,
        b: 20.0,
        c: 65.0,
    };
    let expected = CompositeRule::new(50, 10)
        .unwrap()
        .integrate(0.0, 100.0, |t| truth.eval(t));
    let bound = 1.05 * truth.grid_max(&window(), 10_001);
    let mut r = rng(2);
    let counts: Vec<f64> = (0..2000)
        .map(|_| {
            thinning_sample(|t| truth.eval(t), bound, &window(), &mut r)
                .unwrap()
                .len() as f64
        })
        .collect();
    let (mean, _) = moments(&counts);
    let se = (expected / 2000.0).sqrt();
    assert!((mean - expected).abs() < 4.0 * se, "mean {mean} vs {expected}");
}

#[test]
fn pooled_event_times_follow_the_intensity() {
    let truth = TrueIntensity::Form2 {
        a: 2.0,
        b: 2e-3,
        c: 50.0,
    };
    let bound = 1.05 * truth.grid_max(&window(), 10_001);
    let bins = 20;
    let rule = CompositeRule::new(4, 10).unwrap();
    let mut r = rng(3);
    let mut observed = vec![0.0; bins];
    let reps = 400;
    for _ in 0..reps {
        for t in thinning_sample(|t| truth.eval(t), bound, &window(), &mut r).unwrap() {
            observed[((t / 5.0) as usize).min(bins - 1)] += 1.0;
        }
    }
    let chi2: f64 = (0..bins)
        .map(|k| {
            let e = reps as f64 * rule.integrate(5.0 * k as f64, 5.0 * (k + 1) as f64, |t| truth.eval(t));
            (observed[k] - e).powi(2) / e
        })
        .sum();
    // 0.999 quantile of chi-square with 20 degrees of freedom.
    assert!(chi2 < 45.31, "chi-square {chi2}");
}

#[test]
fn latent_paths_have_the_prior_cross_covariance() {
    let theta = Hyperparameters::new(3.0, vec![1.0, 2.0], vec![1.2, -0.8]).unwrap();
    let grid = vec![0.0, 1.5, 4.0];
    let mut r = rng(4);
    let n = 20_000;
    let draws: Vec<_> = (0..n).map(|_| sample_latent_paths(&theta, &grid, &mut r)).collect();
    for (i, j, a, b) in [(0, 0, 0, 0), (0, 1, 0, 1), (1, 0, 2, 0), (1, 1, 1, 2)] {
        let prods: Vec<f64> = draws.iter().map(|d| d[(i, a)] * d[(j, b)]).collect();
        let (emp, var) = moments(&prods);
        let exact = mgcp_core::kernel::output_cross_kernel(i, j, grid[a], grid[b], &theta).unwrap();
        assert!(
            (emp - exact).abs() < 4.0 * (var / n as f64).sqrt(),
            "({i},{j}) {emp} vs {exact}"
        );
    }
}

#[test]
fn unit_parameters_follow_the_population() {
    let form = ParametricForm::form1_default();
    let mut r = rng(5);
    let n = 100_000;
    let draws: Vec<[f64; 3]> = (0..n).map(|_| form.draw_unit_params(&mut r).unwrap()).collect();
    let cov = form.cov();
    for k in 0..3 {
        let (mean, _) = moments(&draws.iter().map(|d| d[k]).collect::<Vec<_>>());
        assert!((mean - form.mean()[k]).abs() < 4.0 * (cov[(k, k)] / n as f64).sqrt());
    }
}

#[test]
fn superposition_matches_merged_draws() {
    let w = ObservationWindow::new(0.0, 5.0).unwrap();
    let la = |t: f64| 1.0 + (0.8 * t).sin();
    let lb = |t: f64| 0.5 * (-t / 2.0).exp();
    let reps = 10_000;
    let mut joint = Vec::with_capacity(reps);
    let mut merged = Vec::with_capacity(reps);
    for k in 0..reps as u64 {
        joint.push(
            thinning_sample_seeded(|t| la(t) + lb(t), 2.6, &w, derive_seed(1, k))
                .unwrap()
                .len(),
        );
        let a = thinning_sample_seeded(la, 2.1, &w, derive_seed(2, k)).unwrap().len();
        let b = thinning_sample_seeded(lb, 0.6, &w, derive_seed(3, k)).unwrap().len();
        merged.push(a + b);
    }
    // Two-sample chi-square on count bins, pooling the sparse tails.
    let bins = |c: usize| c.clamp(2, 12) - 2;
    let mut table = [[0.0f64; 11]; 2];
    for (row, counts) in [&joint, &merged].into_iter().enumerate() {
        for &c in counts {
            table[row][bins(c)] += 1.0;
        }
    }
    let n = reps as f64;
    let mut chi2 = 0.0;
    for k in 0..11 {
        let pooled = (table[0][k] + table[1][k]) / (2.0 * n);
        for row in table {
            chi2 += (row[k] - n * pooled).powi(2) / (n * pooled);
        }
    }
    let p = 1.0 - ChiSquared::new(10.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-square {chi2}, p = {p}");
}

#[test]
fn fleet_counts_match_integrated_truth() {
    let rule = CompositeRule::new(50, 10).unwrap();
    let mut diffs = Vec::new();
    for seed in 0..1000 {
        let fleet = generate_fleet(FleetKind::Form2, 2, &window(), seed).unwrap();
        for (u, lam) in fleet.dataset.units().iter().zip(&fleet.truth) {
            diffs.push(u.len() as f64 - rule.integrate(0.0, 100.0, |t| lam.eval(t)));
        }
    }
    let (mean, var) = moments(&diffs);
    assert!(
        mean.abs() < 3.0 * (var / diffs.len() as f64).sqrt(),
        "mean excess {mean}"
    );
}

#[test]
fn fleets_are_seed_deterministic() {
    for kind in FleetKind::ALL {
        let a = generate_fleet(kind, 4, &window(), 11).unwrap();
        let b = generate_fleet(kind, 4, &window(), 11).unwrap();
        let c = generate_fleet(kind, 4, &window(), 12).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.dataset, c.dataset);
        for (lam, bound) in a.truth.iter().zip(&a.lambda_max) {
            assert!(lam.grid_max(&window(), 10_001) <= *bound);
        }
    }
}

#[test]
fn surrogate_counts_are_in_range() {
    let spec = SurrogateSpec::default();
    let fleet = case_study_surrogate(&spec, &window(), 9).unwrap();
    assert_eq!(fleet.dataset.num_units(), spec.n_units);
    for u in fleet.dataset.units() {
        assert!((spec.min_events..=spec.max_events).contains(&u.len()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sigmoid_intensities_stay_below_the_ceiling(seed in 0u64..1000, lambda_star in 0.1f64..10.0) {
        let mut r = rng(seed);
        let spec = SigmoidLinkSpec::random(3, lambda_star, &mut r).unwrap();
        let spec = SigmoidLinkSpec::new(spec.theta, lambda_star, 200).unwrap();
        let truth = mgcp_core::simulation::sample_mgcp_sigmoid(&spec, &window(), &mut r);
        for lam in &truth {
            for k in 0..=500 {
                let v = lam.eval(0.2 * k as f64);
                prop_assert!(v > 0.0 && v < lambda_star);
            }
        }
    }

    #[test]
    fn thinning_stays_in_window_and_sorted(seed in 0u64..1000, rate in 0.01f64..5.0, a in -50.0f64..50.0, len in 0.1f64..50.0) {
        let w = ObservationWindow::new(a, a + len).unwrap();
        let events = mgcp_core::simulation::thinning_sample_seeded(|_| rate, rate, &w, seed).unwrap();
        prop_assert!(events.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(events.iter().all(|&t| w.contains(t)));
    }

    #[test]
    fn thinning_rejects_violated_bounds(rate in 1.0f64..5.0) {
        let res = mgcp_core::simulation::thinning_sample_seeded(|t| if t > 50.0 { rate } else { 0.1 }, 0.5, &window(), 0);
        prop_assert!(res.is_err());
    }
}
