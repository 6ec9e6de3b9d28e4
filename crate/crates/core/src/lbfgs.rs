//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub const ARMIJO_C1: f64 = 1e-4;
pub const BACKTRACK: f64 = 0.5;
pub const MIN_STEP: f64 = 1e-12;
/// Curvature pairs with `sᵀy` at or below this are discarded.
pub const CURVATURE_EPS: f64 = 1e-10;

/// A differentiable scalar function.
pub trait Objective {
    /// Loss and gradient at `x`.
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Called once `x` is accepted as the next iterate. Objectives with
    /// internal state that line-search trials keep fixed (such as pooling
    /// switches) refresh it here and return the re-evaluated loss and
    /// gradient; `None` keeps the trial evaluation.
    fn accept(&mut self, _x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        Ok(None)
    }
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for F {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(self(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub history_size: usize,
    /// Stop once the gradient norm falls below this; `None` runs all iterations.
    pub tolerance: Option<f64>,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 1000,
            history_size: 10,
            tolerance: None,
        }
    }
}

/// Loss of one iterate and the lowest loss seen up to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    /// Lowest-loss iterate seen.
    pub x: Vec<f64>,
    pub loss: f64,
    /// Row 0 is the starting point.
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
    /// Search direction of the first iteration.
    pub first_direction: Option<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion: `−H·g` for the inverse Hessian approximation built
/// from `(s, y)` pairs, scaled by `sᵀy / yᵀy` of the newest pair.
fn direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn lbfgs_minimize(
    objective: &mut dyn Objective,
    x0: &[f64],
    opts: &LbfgsOptions,
) -> Result<LbfgsResult> {
    let (mut f, mut g) = objective.evaluate(x0)?;
    if let Some(fresh) = objective.accept(x0)? {
        (f, g) = fresh;
    }
    if !f.is_finite() {
        return Err(Error::Optimization(format!(
            "loss at the starting point is {f}"
        )));
    }
    let mut x = x0.to_vec();
    let mut best = (x.clone(), f);
    let mut trace = vec![TraceRow {
        iter: 0,
        loss: f,
        best: f,
    }];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut first_direction = None;
    let mut iterations = 0;

    for k in 0..opts.max_iters {
        if opts.tolerance.is_some_and(|t| norm(&g) < t) {
            converged = true;
            break;
        }
        let mut d = direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        if slope == 0.0 {
            converged = true;
            break;
        }
        if k == 0 {
            first_direction = Some(d.clone());
        }
        // without curvature information the unit step has no natural scale
        let mut step = if history.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let (x_new, mut f_new, mut g_new) = loop {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = objective.evaluate(&trial)?;
            if ft.is_finite() && ft <= f + ARMIJO_C1 * step * slope {
                break (trial, ft, gt);
            }
            step *= BACKTRACK;
            if step < MIN_STEP {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(&d)
                    .map(|(xi, di)| xi + MIN_STEP * di)
                    .collect();
                let (ft, gt) = objective.evaluate(&trial)?;
                break (trial, ft, gt);
            }
        };
        if !f_new.is_finite() {
            break;
        }
        if let Some(fresh) = objective.accept(&x_new)? {
            (f_new, g_new) = fresh;
        }
        iterations = k + 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if opts.history_size > 0 && sy > CURVATURE_EPS {
            if history.len() == opts.history_size {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        if f < best.1 {
            best = (x.clone(), f);
        }
        trace.push(TraceRow {
            iter: k + 1,
            loss: f,
            best: best.1,
        });
    }
    if !converged && opts.tolerance.is_some_and(|t| norm(&g) < t) {
        converged = true;
    }
    Ok(LbfgsResult {
        x: best.0,
        loss: best.1,
        trace,
        iterations,
        converged,
        first_direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isotropic_quadratic() {
        let mut f = |x: &[f64]| (0.5 * dot(x, x), x.to_vec());
        let x0 = [3.0, -4.0, 1.0];
        let r = lbfgs_minimize(
            &mut f,
            &x0,
            &LbfgsOptions {
                max_iters: 50,
                history_size: 10,
                tolerance: Some(1e-12),
            },
        )
        .unwrap();
        assert!(norm(&r.x) < 1e-10);
        assert!(r.converged);
        // first direction is the negative gradient
        let d = r.first_direction.unwrap();
        for (di, xi) in d.iter().zip(&x0) {
            assert_eq!(*di, -xi);
        }
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut f = |_: &[f64]| (f64::NAN, vec![0.0]);
        assert!(lbfgs_minimize(&mut f, &[0.0], &LbfgsOptions::default()).is_err());
    }

    #[test]
    fn best_record_never_increases() {
        // non-smooth objective where Armijo can stall
        let mut f = |x: &[f64]| {
            (
                x[0].abs() + 0.1 * x[1] * x[1],
                vec![x[0].signum(), 0.2 * x[1]],
            )
        };
        let r = lbfgs_minimize(
            &mut f,
            &[1.3, 2.0],
            &LbfgsOptions {
                max_iters: 60,
                history_size: 5,
                tolerance: None,
            },
        )
        .unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].best <= w[0].best);
        }
        assert_eq!(r.loss, r.trace.last().unwrap().best);
    }
}
