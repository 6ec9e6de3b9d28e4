//! Region head against a per-crop slow path, and whole-pipeline invariants.

mod common;

use common::rng;
use minex_core::minutia::Minutia;
use minex_core::model::{BackboneConfig, StageConfig, REGION_SIZE, ROI_BINS, STRIDE};
use minex_core::postprocess::{
    extract_detailed, nms, suppresses, ExtractOptions, NmsParams, Thresholds,
};
use minex_core::tensor::{roi_pool, Roi};
use minex_core::{Model, Tensor};
use rand::Rng;

fn small_model(seed: u64) -> Model {
    let config = BackboneConfig {
        stages: [4, 6, 8, 8]
            .into_iter()
            .map(|channels| StageConfig {
                channels,
                kernel: 3,
            })
            .collect(),
        head_channels: 8,
        fc_width: 12,
    };
    let mut model = Model::init(config, seed).unwrap();
    let mut r = rng(seed + 77);
    for (_, t) in model.params.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.05..0.05));
    }
    model
}

fn random_image(r: &mut impl Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[1, h, w], |_| r.random_range(0.0..1.0))
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor, relu: bool) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|o| {
            let v = b.data()[o]
                + (0..cols)
                    .map(|i| w.data()[o * cols + i] * x[i])
                    .sum::<f64>();
            if relu {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect()
}

/// Region outputs `(prob, dx, dy, orientation)` from a crop of the feature
/// map covering the proposal's clamped 32×32 window.
fn per_crop(model: &Model, map: &Tensor, p: &Minutia, width: usize, height: usize) -> [f64; 4] {
    let half = REGION_SIZE / 2.0;
    let x0 = (p.x - half).clamp(0.0, width as f64);
    let x1 = (p.x + half).clamp(0.0, width as f64);
    let y0 = (p.y - half).clamp(0.0, height as f64);
    let y1 = (p.y + half).clamp(0.0, height as f64);
    let (c, rows, cols) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let s = STRIDE as f64;
    let r0 = (y0 / s).floor() as usize;
    let r1 = ((y1 / s).ceil() as usize).min(rows);
    let c0 = (x0 / s).floor() as usize;
    let c1 = ((x1 / s).ceil() as usize).min(cols);
    let (nh, nw) = (r1 - r0, c1 - c0);
    let crop = Tensor::from_fn(&[c, nh, nw], |i| {
        let (ch, rest) = (i / (nh * nw), i % (nh * nw));
        map.at3(ch, r0 + rest / nw, c0 + rest % nw)
    });
    let whole = Roi {
        x0: 0.0,
        y0: 0.0,
        x1: (nw * STRIDE) as f64,
        y1: (nh * STRIDE) as f64,
    };
    let pooled = roi_pool(&crop, &whole, STRIDE, ROI_BINS).unwrap().0;
    let get = |n: &str| model.params.get(n).unwrap();
    let h1 = dense(
        pooled.data(),
        get("region.fc1.weight"),
        get("region.fc1.bias"),
        true,
    );
    let h2 = dense(&h1, get("region.fc2.weight"), get("region.fc2.bias"), true);
    let logits = dense(&h2, get("region.cls.weight"), get("region.cls.bias"), false);
    let reg = dense(&h2, get("region.reg.weight"), get("region.reg.bias"), false);
    let prob = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
    [prob, reg[0], reg[1], reg[2] * 180.0]
}

#[test]
fn region_head_matches_per_crop_path() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let model = small_model(seed);
        let (h, w) = (r.random_range(2..5) * 16, r.random_range(2..5) * 16);
        let image = random_image(&mut r, h, w);
        let mut proposals: Vec<Minutia> = (0..12)
            .map(|_| {
                Minutia::proposal(
                    r.random_range(0.0..w as f64),
                    r.random_range(0.0..h as f64),
                    0.5,
                )
            })
            .collect();
        // corners exercise the clamping
        proposals.push(Minutia::proposal(0.0, 0.0, 0.5));
        proposals.push(Minutia::proposal(w as f64, h as f64, 0.5));
        let outputs = model.forward_region(&image, &proposals).unwrap();
        let f = model.features(&image).unwrap();
        for (p, o) in proposals.iter().zip(&outputs) {
            let slow = per_crop(&model, f.map(), p, w, h);
            let fast = [o.prob, o.dx, o.dy, o.orientation];
            for (a, b) in fast.iter().zip(&slow) {
                assert!(
                    (a - b).abs() < 1e-9 * (1.0 + b.abs()),
                    "{fast:?} vs {slow:?}"
                );
            }
        }
    }
}

#[test]
fn duplicate_proposals_get_identical_outputs() {
    let model = small_model(3);
    let image = random_image(&mut rng(3), 48, 64);
    let p = Minutia::proposal(21.5, 30.0, 0.7);
    let out = model
        .forward_region(&image, &[p, Minutia::proposal(5.0, 5.0, 0.2), p])
        .unwrap();
    assert_eq!(out[0], out[2]);
}

#[test]
fn extraction_output_is_suppressed_and_a_fixpoint() {
    let opts = ExtractOptions {
        thresholds: Thresholds {
            proposal: 0.0,
            final_: 0.0,
        },
        ..ExtractOptions::default()
    };
    for seed in 0..4 {
        let model = small_model(10 + seed);
        let image = random_image(&mut rng(seed), 64, 80);
        let e = extract_detailed(&model, &image, &opts).unwrap();
        assert!(!e.minutiae.is_empty());
        for (i, a) in e.minutiae.iter().enumerate() {
            assert!(a.x >= 0.0 && a.x < 80.0 && a.y >= 0.0 && a.y < 64.0);
            let t = a.theta.unwrap();
            assert!((0.0..360.0).contains(&t));
            for b in &e.minutiae[i + 1..] {
                assert!(!suppresses(a, b, &NmsParams::default()));
            }
        }
        assert_eq!(nms(&e.minutiae, &NmsParams::default()), e.minutiae);
        // proposals carry no orientation, so they are at least 16 px apart
        for (i, a) in e.proposals.iter().enumerate() {
            for b in &e.proposals[i + 1..] {
                assert!(a.distance(b) > 16.0);
            }
        }
    }
}

#[test]
fn thresholds_are_monotone() {
    let model = small_model(21);
    let image = random_image(&mut rng(21), 64, 64);
    let count = |proposal: f64, final_: f64| {
        let opts = ExtractOptions::from(Thresholds { proposal, final_ });
        extract_detailed(&model, &image, &opts).unwrap()
    };
    let loose = count(0.0, 0.0);
    let strict = count(1.1, 0.0);
    assert!(strict.proposals.is_empty() && strict.minutiae.is_empty());
    assert!(loose.proposals.len() >= count(0.5, 0.0).proposals.len());
}
