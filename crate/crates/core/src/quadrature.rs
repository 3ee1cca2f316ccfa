//! Adaptive Gauss-Legendre quadrature.
//!
//! Panels are evaluated with a 61-point rule; the error estimate on each
//! panel is the difference against the embedded-in-spirit 30-point rule.
//! Nodes and weights are computed once at startup by Newton iteration on
//! the Legendre recurrence, which is accurate to machine precision.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Gauss-Legendre rule of a fixed order on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 2);
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order as f64;
        // Roots come in +/- pairs; solve for the positive half.
        for k in 0..(order + 1) / 2 {
            // Chebyshev-like initial guess.
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_and_derivative(order, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[k] = -x;
            nodes[order - 1 - k] = x;
            weights[k] = w;
            weights[order - 1 - k] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrate `f` over `[a, b]` with a single panel.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

fn legendre_and_derivative(order: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=order {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = order as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn rule_61() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(61))
}

fn rule_30() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(30))
}

/// Result of an adaptive integration: value plus the accumulated error estimate.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub error_estimate: f64,
    pub panels: usize,
}

/// Adaptive bisection with a 61-point rule per panel.
///
/// A panel is accepted when the 61-vs-30 point discrepancy is below the
/// tolerance prorated by panel width. Fails with the residual estimate if
/// the depth limit is hit before the tolerance is met.
pub fn integrate_adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Quadrature> {
    if !(b > a) {
        return Err(Error::invalid("integrate_adaptive: empty interval"));
    }
    const MAX_DEPTH: usize = 48;
    let rough = rule_61().integrate(a, b, &mut f).abs();
    let budget = abs_tol + rel_tol * rough.max(1e-300);

    let mut stack = vec![(a, b, 0usize)];
    let mut value = 0.0;
    let mut err_acc = 0.0;
    let mut panels = 0usize;
    while let Some((lo, hi, depth)) = stack.pop() {
        let coarse = rule_30().integrate(lo, hi, &mut f);
        let fine = rule_61().integrate(lo, hi, &mut f);
        let err = (fine - coarse).abs();
        let local_budget = budget * (hi - lo) / (b - a);
        if err <= local_budget || depth >= MAX_DEPTH {
            if depth >= MAX_DEPTH && err > local_budget {
                return Err(Error::NonConvergence {
                    iterations: MAX_DEPTH,
                    message: format!(
                        "quadrature panel [{lo}, {hi}] residual {err:.3e} above budget {local_budget:.3e}"
                    ),
                });
            }
            value += fine;
            err_acc += err;
            panels += 1;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    Ok(Quadrature {
        value,
        error_estimate: err_acc,
        panels,
    })
}
