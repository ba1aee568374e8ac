//! Shared fixtures for the benchmarks.

use mgcp_core::inference::VariationalState;
use mgcp_core::simulation::{generate_fleet, FleetKind};
use mgcp_core::{EventDataset, FitConfig, Hyperparameters, InducingPoints, ObservationWindow};

/// A simulated fleet on `[0, 100]` with the last unit truncated at 60%.
pub fn fleet(kind: FleetKind, n: usize, seed: u64) -> EventDataset {
    let window = ObservationWindow::new(0.0, 100.0).expect("valid window");
    let ds = generate_fleet(kind, n, &window, seed).expect("fleet").dataset;
    let last = ds.unit_ids().pop().expect("non-empty fleet");
    ds.truncate_at_percentile(&last, 0.6).expect("truncation")
}

/// The initial parameters the fit starts from.
pub fn initial_state(ds: &EventDataset, config: &FitConfig) -> (Hyperparameters, VariationalState) {
    let window = ds.window();
    let ell = 0.1 * window.length();
    let theta = Hyperparameters::uniform(ds.num_units(), ell, ell / 2.0, 1.0).expect("valid hyperparameters");
    let z = InducingPoints::equally_spaced(&window, config.num_inducing).expect("inducing points");
    let vs = VariationalState::from_prior(&theta, z, 0.5).expect("prior state");
    (theta, vs)
}
