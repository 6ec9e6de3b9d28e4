//! Byte-level round trips of every persisted format, as property checks
//! that return the first counterexample instead of panicking.

use std::path::Path;

use minex_core::config::RunConfig;
use minex_core::dataset::{read_manifest, write_manifest, ManifestEntry};
use minex_core::image::{GrayImage, RgbImage};
use minex_core::minutia::{format_minutiae, parse_minutiae, Minutia};
use minex_core::model::{decode_checkpoint, encode_checkpoint};
use minex_core::{NetworkParams, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn params_strategy() -> impl Strategy<Value = NetworkParams> {
    let tensor = prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<f64>(), n))
    });
    prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", tensor, 0..5).prop_map(|m| {
        let mut p = NetworkParams::new();
        for (name, (shape, data)) in m {
            p.insert(name, Tensor::new(&shape, data).unwrap()).unwrap();
        }
        p
    })
}

fn minutia_strategy() -> impl Strategy<Value = Minutia> {
    (
        -1e4f64..1e4,
        -1e4f64..1e4,
        prop::option::of(0f64..360.0),
        0f64..1.0,
    )
        .prop_map(|(x, y, theta, score)| Minutia {
            theta,
            ..Minutia::proposal(x, y, score)
        })
}

fn gray_strategy() -> impl Strategy<Value = GrayImage> {
    (1usize..20, 1usize..20).prop_flat_map(|(width, height)| {
        prop::collection::vec(any::<u8>(), width * height).prop_map(move |pixels| GrayImage {
            width,
            height,
            pixels,
        })
    })
}

fn rgb_strategy() -> impl Strategy<Value = RgbImage> {
    (1usize..16, 1usize..16).prop_flat_map(|(width, height)| {
        prop::collection::vec(any::<[u8; 3]>(), width * height).prop_map(move |pixels| RgbImage {
            width,
            height,
            pixels,
        })
    })
}

fn manifest_strategy() -> impl Strategy<Value = Vec<ManifestEntry>> {
    prop::collection::vec(
        (
            "\\PC{0,12}",
            "[a-z_/]{1,12}\\.pgm",
            "[a-z_/]{1,12}\\.txt",
            "good|bad|ugly",
        )
            .prop_map(|(id, image_path, minutia_path, quality)| ManifestEntry {
                id,
                image_path,
                minutia_path,
                quality,
            }),
        0..6,
    )
}

fn config_strategy() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        0f64..=1.0,
        0f64..=1.0,
        1e-5f64..1.0,
        1usize..10_000,
        1f64..40.0,
    )
        .prop_map(|(seed, proposal, final_, lr, iters, dist)| {
            let mut c = RunConfig::default().with_seed(seed);
            c.thresholds.proposal = proposal;
            c.thresholds.final_ = final_;
            c.train.lr_initial = lr;
            c.train.lr_drop = lr / 10.0;
            c.train.fcn_iterations = iters;
            c.eval.dist = dist;
            c
        })
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn origin() -> &'static Path {
    Path::new("<memory>")
}

pub fn checkpoint(cases: u32) -> Result<(), String> {
    run(cases, params_strategy(), |p| {
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        prop_assert_eq!(back.len(), p.len());
        for ((na, a), (nb, b)) in back.iter().zip(p.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        Ok(())
    })
}

pub fn minutia_text(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            prop::collection::vec(minutia_strategy(), 0..20),
            any::<bool>(),
        ),
        |(ms, with_score)| {
            let text = format_minutiae(&ms, with_score);
            let back = parse_minutiae(&text, origin()).unwrap();
            prop_assert_eq!(format_minutiae(&back, with_score), text);
            if with_score {
                prop_assert_eq!(back, ms);
            }
            Ok(())
        },
    )
}

pub fn pgm(cases: u32) -> Result<(), String> {
    run(cases, gray_strategy(), |g| {
        let bytes = g.encode();
        let back = GrayImage::decode(&bytes, origin()).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, g);
        Ok(())
    })
}

pub fn ppm(cases: u32) -> Result<(), String> {
    run(cases, rgb_strategy(), |g| {
        let bytes = g.encode();
        let back = RgbImage::decode(&bytes, origin()).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, g);
        Ok(())
    })
}

pub fn manifest(cases: u32) -> Result<(), String> {
    run(cases, manifest_strategy(), |entries| {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &entries).unwrap();
        let bytes = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        prop_assert_eq!(&back, &entries);
        write_manifest(dir.path(), &back).unwrap();
        prop_assert_eq!(
            std::fs::read(dir.path().join("manifest.json")).unwrap(),
            bytes
        );
        Ok(())
    })
}

pub fn config(cases: u32) -> Result<(), String> {
    run(cases, config_strategy(), |c| {
        let text = c.to_json();
        let back = RunConfig::from_json(&text, origin()).unwrap();
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back, c);
        Ok(())
    })
}

/// Every round trip with `cases` cases each.
pub fn all(cases: u32) -> Result<(), String> {
    checkpoint(cases)?;
    minutia_text(cases)?;
    pgm(cases)?;
    ppm(cases)?;
    manifest(cases)?;
    config(cases)
}
