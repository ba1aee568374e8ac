//! Unconstrained minimization: L-BFGS with a strong-Wolfe line search and
//! an Adam fallback for when the line search cannot make progress.

use std::collections::VecDeque;

/// Value and gradient, or `None` where the objective is undefined.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

impl<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>> Objective for F {
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Relative change in the objective below which an iteration counts as stalled.
    pub rel_tol: f64,
    /// Absolute infinity-norm gradient tolerance.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    pub adam_steps: usize,
    pub adam_learning_rate: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 1000,
            rel_tol: 1e-9,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            adam_steps: 200,
            adam_learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    /// Best objective value after each iteration (nonincreasing).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + alpha * d).collect()
}

struct Counter<'a, O: Objective> {
    obj: &'a mut O,
    evals: usize,
}

impl<O: Objective> Counter<'_, O> {
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.evals += 1;
        self.obj
            .eval(x)
            .filter(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()))
    }
}

struct Step {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Line search for the strong Wolfe conditions (bracketing then zoom).
/// Falls back to the best sufficient-decrease point if the curvature
/// condition cannot be met within the budget.
fn strong_wolfe<O: Objective>(
    obj: &mut Counter<'_, O>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    opts: &LbfgsOptions,
) -> Option<Step> {
    let dphi0 = dot(g0, d);
    if dphi0 >= 0.0 {
        return None;
    }
    let armijo = |a: f64, f: f64| f <= f0 + opts.c1 * a * dphi0;
    let curvature = |dphi: f64| dphi.abs() <= -opts.c2 * dphi0;
    let mut best: Option<Step> = None;
    let keep_best = |s: &Step, best: &mut Option<Step>| {
        if armijo(s.alpha, s.f) && best.as_ref().is_none_or(|b| s.f < b.f) {
            *best = Some(Step {
                alpha: s.alpha,
                x: s.x.clone(),
                f: s.f,
                g: s.g.clone(),
            });
        }
    };

    // (alpha, f, dphi) at the low end; hi end may be undefined (f = inf).
    let mut lo = (0.0, f0, dphi0);
    let mut hi: (f64, f64, f64);
    let mut alpha = alpha0;
    let mut iter = 0;
    loop {
        let xa = axpy(x, alpha, d);
        match obj.eval(&xa) {
            None => {
                hi = (alpha, f64::INFINITY, f64::NAN);
                break;
            }
            Some((fa, ga)) => {
                let dphi = dot(&ga, d);
                let step = Step {
                    alpha,
                    x: xa,
                    f: fa,
                    g: ga,
                };
                keep_best(&step, &mut best);
                if !armijo(alpha, fa) || (iter > 0 && fa >= lo.1) {
                    hi = (alpha, fa, dphi);
                    break;
                }
                if curvature(dphi) {
                    return Some(step);
                }
                if dphi >= 0.0 {
                    hi = lo;
                    lo = (alpha, fa, dphi);
                    break;
                }
                lo = (alpha, fa, dphi);
            }
        }
        iter += 1;
        if iter >= opts.max_line_search {
            return best;
        }
        alpha *= 2.0;
    }

    // zoom
    for _ in 0..opts.max_line_search {
        let trial = interpolate(lo, hi);
        let xa = axpy(x, trial, d);
        match obj.eval(&xa) {
            None => hi = (trial, f64::INFINITY, f64::NAN),
            Some((fa, ga)) => {
                let dphi = dot(&ga, d);
                let step = Step {
                    alpha: trial,
                    x: xa,
                    f: fa,
                    g: ga,
                };
                keep_best(&step, &mut best);
                if !armijo(trial, fa) || fa >= lo.1 {
                    hi = (trial, fa, dphi);
                } else {
                    if curvature(dphi) {
                        return Some(step);
                    }
                    if dphi * (hi.0 - lo.0) >= 0.0 {
                        hi = lo;
                    }
                    lo = (trial, fa, dphi);
                }
            }
        }
        if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1e-16) {
            break;
        }
    }
    best
}

/// Safeguarded cubic (or quadratic) interpolation inside the bracket.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, d0) = lo;
    let (a1, f1, d1) = hi;
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let width = right - left;
    let guard_lo = left + 0.1 * width;
    let guard_hi = right - 0.1 * width;
    let mut cand = f64::NAN;
    if f1.is_finite() && d1.is_finite() {
        let e1 = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
        let disc = e1 * e1 - d0 * d1;
        if disc >= 0.0 {
            let e2 = (a1 - a0).signum() * disc.sqrt();
            cand = a1 - (a1 - a0) * (d1 + e2 - e1) / (d1 - d0 + 2.0 * e2);
        }
    } else if f1.is_finite() {
        let h = a1 - a0;
        let denom = 2.0 * (f1 - f0 - d0 * h);
        if denom > 0.0 {
            cand = a0 - d0 * h * h / denom;
        }
    }
    if cand.is_finite() && cand > guard_lo && cand < guard_hi {
        cand
    } else {
        0.5 * (left + right)
    }
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(q, s)| *q += (a - b) * s);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes with L-BFGS. Returns `None` only if the objective is undefined at `x0`.
pub fn lbfgs<O: Objective>(obj: &mut O, x0: &[f64], opts: &LbfgsOptions) -> Option<Minimum> {
    let mut obj = Counter { obj, evals: 0 };
    let (mut f, mut g) = obj.eval(x0)?;
    let mut x = x0.to_vec();
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut used_fallback = false;

    while iterations < opts.max_iters {
        if inf_norm(&g) <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = two_loop(&g, &mem);
        if dot(&d, &g) >= 0.0 {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let alpha0 = if mem.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let step = match strong_wolfe(&mut obj, &x, f, &g, &d, alpha0, opts) {
            Some(s) => Some(s),
            None if !mem.is_empty() => {
                mem.clear();
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                strong_wolfe(&mut obj, &x, f, &g, &sd, (1.0 / inf_norm(&g)).min(1.0), opts)
            }
            None => None,
        };
        let Some(step) = step else {
            if used_fallback {
                trace.push(f);
                break;
            }
            used_fallback = true;
            let adam_opts = AdamOptions {
                steps: opts.adam_steps,
                learning_rate: opts.adam_learning_rate,
                ..AdamOptions::default()
            };
            let res = adam_inner(&mut obj, &x, f, &g, &adam_opts);
            let improved = res.f < f;
            if improved {
                x = res.x;
                f = res.f;
                g = res.grad;
                mem.clear();
            }
            trace.push(f);
            if !improved {
                break;
            }
            continue;
        };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let rel = (f - step.f).abs() / f.abs().max(1.0);
        x = step.x;
        f = step.f;
        g = step.g;
        trace.push(f);
        if rel < opts.rel_tol {
            stalled += 1;
            if stalled >= 2 {
                converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }
    if !converged && inf_norm(&g) <= opts.grad_tol {
        converged = true;
    }
    Some(Minimum {
        x,
        f,
        grad: g,
        trace,
        iterations,
        evaluations: obj.evals,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct AdamOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Fixed-step Adam; returns the best point visited.
pub fn adam<O: Objective>(obj: &mut O, x0: &[f64], opts: &AdamOptions) -> Option<Minimum> {
    let mut obj = Counter { obj, evals: 0 };
    let (f, g) = obj.eval(x0)?;
    let mut res = adam_inner(&mut obj, x0, f, &g, opts);
    res.evaluations = obj.evals;
    Some(res)
}

fn adam_inner<O: Objective>(obj: &mut Counter<'_, O>, x0: &[f64], f0: f64, g0: &[f64], opts: &AdamOptions) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = g0.to_vec();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let (mut best_x, mut best_f, mut best_g) = (x.clone(), f0, g.clone());
    let mut trace = Vec::with_capacity(opts.steps);
    let mut steps = 0;
    for t in 1..=opts.steps {
        steps = t;
        let b1 = 1.0 - opts.beta1.powi(t as i32);
        let b2 = 1.0 - opts.beta2.powi(t as i32);
        for k in 0..n {
            m1[k] = opts.beta1 * m1[k] + (1.0 - opts.beta1) * g[k];
            m2[k] = opts.beta2 * m2[k] + (1.0 - opts.beta2) * g[k] * g[k];
            x[k] -= opts.learning_rate * (m1[k] / b1) / ((m2[k] / b2).sqrt() + opts.eps);
        }
        match obj.eval(&x) {
            Some((f, gn)) => {
                if f < best_f {
                    best_f = f;
                    best_x.clone_from(&x);
                    best_g.clone_from(&gn);
                }
                g = gn;
            }
            None => {
                // Undefined region: restart from the best point with fresh moments.
                x.clone_from(&best_x);
                g.clone_from(&best_g);
                m1.iter_mut().for_each(|v| *v = 0.0);
                m2.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        trace.push(best_f);
    }
    Minimum {
        x: best_x,
        f: best_f,
        grad: best_g,
        trace,
        iterations: steps,
        evaluations: 0,
        converged: false,
    }
}
