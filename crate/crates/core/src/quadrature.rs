//! Composite Gauss–Legendre quadrature on finite intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodes and weights of the `order`-point Gauss–Legendre rule on [-1, 1].
///
/// Roots are found by Newton iteration on the three-term recurrence,
/// starting from the Tricomi approximation.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// P_n(x) and P_n'(x).
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// `panels` equal sub-intervals, each integrated with an `order`-point rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeRule {
    pub panels: usize,
    pub order: usize,
}

impl Default for CompositeRule {
    fn default() -> Self {
        Self { panels: 20, order: 10 }
    }
}

impl CompositeRule {
    pub fn new(panels: usize, order: usize) -> Result<Self> {
        if order < 4 {
            return Err(Error::InvalidArgument(format!(
                "quadrature order must be at least 4, got {order}"
            )));
        }
        if panels == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one panel".into()));
        }
        Ok(Self { panels, order })
    }

    pub fn num_nodes(&self) -> usize {
        self.panels * self.order
    }

    /// Absolute nodes and weights on `[a, b]`, ordered by position.
    pub fn nodes(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let (x, w) = gauss_legendre(self.order);
        let h = (b - a) / self.panels as f64;
        let mut out = Vec::with_capacity(self.num_nodes());
        for p in 0..self.panels {
            let lo = a + h * p as f64;
            let mid = lo + 0.5 * h;
            for (xi, wi) in x.iter().zip(&w) {
                out.push((mid + 0.5 * h * xi, 0.5 * h * wi));
            }
        }
        out
    }

    /// Sums `f` over the nodes in a fixed order.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.nodes(a, b).into_iter().map(|(x, w)| w * f(x)).sum()
    }
}
