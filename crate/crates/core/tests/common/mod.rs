//! Independent oracles shared by the integration tests.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

pub mod gradcheck;
pub mod roundtrip;

use minex_core::evaluation::Tolerance;
use minex_core::minutia::{angular_distance, Minutia};
use minex_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal samples kept away from zero, so ReLU kinks stay out of reach of
/// the finite-difference step.
pub fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() < 1e-2 {
            v.signum() * 1e-2 + v
        } else {
            v
        }
    })
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + EPS;
        let up = f(&probe);
        probe.data_mut()[i] = orig - EPS;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * EPS);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Greedy suppression written directly from its definition: visit indices in
/// descending score (ties by index), keep any index no kept one suppresses.
pub fn nms_oracle(cands: &[Minutia], dist: f64, angle: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    for i in 0..order.len() {
        for j in 0..order.len() - 1 - i {
            let (a, b) = (order[j], order[j + 1]);
            if cands[b].score > cands[a].score {
                order.swap(j, j + 1);
            }
        }
    }
    let mut removed = vec![false; cands.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            let (a, b) = (&cands[i], &cands[j]);
            let dx = a.x - b.x;
            let dy = a.y - b.y;
            let close = (dx * dx + dy * dy).sqrt() <= dist;
            let aligned = match (a.theta, b.theta) {
                (Some(s), Some(t)) => {
                    let d = (s - t).abs() % 360.0;
                    d.min(360.0 - d) <= angle
                }
                _ => true,
            };
            if close && aligned {
                removed[j] = true;
            }
        }
    }
    kept
}

/// Size of the largest one-to-one matching under `tol`, by exhaustive
/// search over subsets of truth minutiae.
pub fn max_matching(extracted: &[Minutia], truth: &[Minutia], tol: &Tolerance) -> usize {
    assert!(truth.len() <= 16);
    let ok = |e: &Minutia, t: &Minutia| {
        let d = ((e.x - t.x).powi(2) + (e.y - t.y).powi(2)).sqrt();
        d < tol.dist
            && (!tol.use_angle
                || matches!((e.theta, t.theta), (Some(a), Some(b)) if angular_distance(a, b) < tol.angle))
    };
    let m = truth.len();
    // best[mask] = max matches of processed extracted using truth set `mask`
    let mut best = vec![i64::MIN; 1 << m];
    best[0] = 0;
    for e in extracted {
        let mut next = best.clone();
        for mask in 0..(1usize << m) {
            if best[mask] < 0 {
                continue;
            }
            for (j, t) in truth.iter().enumerate() {
                if mask & (1 << j) == 0 && ok(e, t) {
                    let nm = mask | (1 << j);
                    next[nm] = next[nm].max(best[mask] + 1);
                }
            }
        }
        best = next;
    }
    best.into_iter().max().unwrap_or(0) as usize
}

pub fn random_minutiae(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Minutia> {
    (0..n)
        .map(|_| {
            Minutia::new(
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
                rng.random_range(0.0..360.0),
            )
            .with_score(rng.random_range(0.0..1.0))
        })
        .collect()
}

/// Random SPD matrix `MᵀM + I` and right-hand side.
pub fn spd_problem(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng(seed);
    let m: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let a = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let b = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    (a, b)
}

/// Direct solve by Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, v)| [row.clone(), vec![*v]].concat())
        .collect();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, p);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

pub fn quadratic(a: &[Vec<f64>], b: &[f64]) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) {
    let (a, b) = (a.to_vec(), b.to_vec());
    move |x: &[f64]| {
        let ax: Vec<f64> = a
            .iter()
            .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect();
        let f = 0.5 * ax.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
            - b.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
        (f, ax.iter().zip(&b).map(|(p, q)| p - q).collect())
    }
}

pub fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
    let (a, b) = (x[0], x[1]);
    let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
    (
        f,
        vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ],
    )
}
