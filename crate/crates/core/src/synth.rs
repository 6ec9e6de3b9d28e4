//! Synthetic fingerprints with exactly known minutiae.
//!
//! Ridges are the cosine of a phase field. A smooth base phase (a gently
//! bent parallel flow or concentric arcs around a far-away centre) gives the
//! ridge flow; every planted minutia adds a ±1 winding term `atan2(p − m)`,
//! which inserts exactly one ridge on one side of `m`: a ridge ending or a
//! bifurcation depending on the local phase. The minutia direction is the
//! ridge tangent pointing towards the side holding the extra ridge.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{quantize, write_manifest, ManifestEntry, Sample};
use crate::error::{Error, Result};
use crate::image::{write_pgm, GrayImage};
use crate::minutia::{write_minutiae, Minutia};
use crate::tensor::Tensor;
use crate::training::derive_seed;

/// Ground truth never comes closer than this to the image border.
pub const BORDER: f64 = 16.0;
/// Minimum distance between planted minutiae.
pub const MIN_SEPARATION: f64 = 24.0;
const PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub ridge_period: f64,
    /// Inclusive range of planted minutiae per print.
    pub minutia_count: (usize, usize),
    /// Corruption strength in `[0, 1]`; each print draws its own level
    /// uniformly in `[0, noiseLevel]`.
    pub noise_level: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: (128, 128),
            ridge_period: 9.0,
            minutia_count: (4, 8),
            noise_level: 0.5,
            blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    // negated comparisons so that NaN fails validation
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h, w) = self.image_size;
        if h < 48 || w < 48 {
            return bad(format!("imageSize {h}x{w} is too small (minimum 48x48)"));
        }
        if !(self.ridge_period >= 4.0) {
            return bad(format!(
                "ridgePeriod must be at least 4, got {}",
                self.ridge_period
            ));
        }
        if self.minutia_count.0 > self.minutia_count.1 {
            return bad("minutiaCount range is empty".into());
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!(
                "noiseLevel must lie in [0, 1], got {}",
                self.noise_level
            ));
        }
        if !(self.blur_sigma >= 0.0) {
            return bad("blurSigma must be non-negative".into());
        }
        Ok(())
    }
}

/// One generated print.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPrint {
    /// `[1, H, W]`, on the 8-bit grid.
    pub image: Tensor,
    /// The uncorrupted ridge rendering.
    pub clean: Tensor,
    pub truth: Vec<Minutia>,
    /// Corruption level actually applied, in `[0, noiseLevel]`.
    pub noise: f64,
}

/// Smooth base phase, in pixels of ridge-normal travel.
#[derive(Debug, Clone, Copy)]
enum Flow {
    /// `n·q + κ(t·q)²/2` with `q` relative to the image centre.
    Bent {
        n: [f64; 2],
        kappa: f64,
        centre: [f64; 2],
    },
    /// `|p − c|` for a centre outside the image.
    Arcs { centre: [f64; 2] },
}

impl Flow {
    fn random(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Flow {
        let a = rng.random_range(0.0..TAU);
        if rng.random_bool(0.6) {
            let span = w.max(h);
            Flow::Bent {
                n: [a.cos(), a.sin()],
                kappa: rng.random_range(-1.0..1.0) / span,
                centre: [w / 2.0, h / 2.0],
            }
        } else {
            let r = rng.random_range(0.8..1.6) * w.max(h);
            Flow::Arcs {
                centre: [w / 2.0 + r * a.cos(), h / 2.0 + r * a.sin()],
            }
        }
    }

    fn phase(&self, x: f64, y: f64) -> f64 {
        match *self {
            Flow::Bent { n, kappa, centre } => {
                let (qx, qy) = (x - centre[0], y - centre[1]);
                let u = n[0] * qx + n[1] * qy;
                let v = -n[1] * qx + n[0] * qy;
                u + kappa * v * v / 2.0
            }
            Flow::Arcs { centre } => (x - centre[0]).hypot(y - centre[1]),
        }
    }

    fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        match *self {
            Flow::Bent { n, kappa, centre } => {
                let (qx, qy) = (x - centre[0], y - centre[1]);
                let v = -n[1] * qx + n[0] * qy;
                [n[0] - kappa * v * n[1], n[1] + kappa * v * n[0]]
            }
            Flow::Arcs { centre } => {
                let (dx, dy) = (x - centre[0], y - centre[1]);
                let r = dx.hypot(dy);
                [dx / r, dy / r]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Planted {
    x: f64,
    y: f64,
    /// Winding sign, ±1.
    sign: f64,
}

/// Phase in radians at `(x, y)`.
fn phase(flow: &Flow, planted: &[Planted], period: f64, x: f64, y: f64) -> f64 {
    let mut p = TAU * flow.phase(x, y) / period;
    for m in planted {
        p += m.sign * (y - m.y).atan2(x - m.x);
    }
    p
}

/// Direction of `planted[i]`: the ridge tangent towards the side where its
/// winding term adds a ridge. Along a path crossing the ridges through the
/// `+t` side (`t` = gradient rotated by +90°) the winding contributes
/// `−sign·π`, through `−t` it contributes `+sign·π`; the extra ridge sits
/// where the contribution is positive, i.e. on `−sign·t`.
fn planted_direction(flow: &Flow, planted: &[Planted], period: f64, i: usize) -> f64 {
    let m = planted[i];
    let fg = flow.gradient(m.x, m.y);
    let mut g = [TAU * fg[0] / period, TAU * fg[1] / period];
    for (j, o) in planted.iter().enumerate() {
        if j != i {
            let (dx, dy) = (m.x - o.x, m.y - o.y);
            let r2 = dx * dx + dy * dy;
            g[0] += o.sign * -dy / r2;
            g[1] += o.sign * dx / r2;
        }
    }
    let t = [-g[1], g[0]];
    (-m.sign * t[1]).atan2(-m.sign * t[0]).to_degrees()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(pixels: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return pixels.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * pixels[y * w + mirror(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[mirror(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn place_minutiae(rng: &mut ChaCha8Rng, count: usize, w: f64, h: f64) -> Result<Vec<Planted>> {
    let mut planted: Vec<Planted> = Vec::with_capacity(count);
    let mut tries = 0;
    while planted.len() < count {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return Err(Error::InvalidArgument(format!(
                "could not place {count} minutiae {MIN_SEPARATION} px apart in a {w}x{h} print"
            )));
        }
        let x = rng.random_range(BORDER..w - BORDER);
        let y = rng.random_range(BORDER..h - BORDER);
        if planted
            .iter()
            .all(|m| (m.x - x).hypot(m.y - y) >= MIN_SEPARATION)
        {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            planted.push(Planted { x, y, sign });
        }
    }
    Ok(planted)
}

/// Generates one print; a pure function of `(config, seed)` (`config.seed`
/// is ignored here).
pub fn generate_print(config: &SynthConfig, seed: u64) -> Result<SynthPrint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = config.image_size;
    let (wf, hf) = (w as f64, h as f64);
    let flow = Flow::random(&mut rng, wf, hf);
    let (lo, hi) = config.minutia_count;
    let count = rng.random_range(lo..=hi);
    let planted = place_minutiae(&mut rng, count, wf, hf)?;
    let period = config.ridge_period;

    // ridges dark on a light background
    let mut clean = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = phase(&flow, &planted, period, x as f64, y as f64);
            clean[y * w + x] = 0.5 + 0.5 * p.cos();
        }
    }
    let truth: Vec<Minutia> = (0..planted.len())
        .map(|i| {
            Minutia::new(
                planted[i].x,
                planted[i].y,
                planted_direction(&flow, &planted, period, i),
            )
        })
        .collect();

    let noise = config.noise_level * rng.random_range(0.0..=1.0);
    let mut img = gaussian_blur(&clean, w, h, config.blur_sigma);

    // contrast and brightness drift
    let contrast = 1.0 - 0.6 * noise * rng.random_range(0.0..=1.0);
    let shift = 0.2 * noise * rng.random_range(-1.0..=1.0);
    for v in &mut img {
        *v = 0.5 + contrast * (*v - 0.5) + shift;
    }

    // occlusion blobs fading ridges towards a flat smudge value
    let blobs = rng.random_range(0..=3usize);
    for _ in 0..blobs {
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let r = rng.random_range(0.08..0.25) * wf.min(hf);
        let level = rng.random_range(0.3..0.8);
        let strength = 0.8 * noise;
        for y in 0..h {
            for x in 0..w {
                let d = (x as f64 - cx).hypot(y as f64 - cy) / r;
                let a = strength * (-d * d).exp();
                let v = &mut img[y * w + x];
                *v = (1.0 - a) * *v + a * level;
            }
        }
    }

    let normal =
        Normal::new(0.0, 0.25 * noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for v in &mut img {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }

    let image = quantize(&Tensor::new(&[1, h, w], img)?);
    Ok(SynthPrint {
        image,
        clean: Tensor::new(&[1, h, w], clean)?,
        truth,
        noise,
    })
}

/// Seed of print `index` under master seed `seed`.
pub fn print_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0x5EED, index as u64)
}

pub fn print_id(index: usize) -> String {
    format!("print_{index:05}")
}

/// Quality stratum from the corruption level: terciles of `[0, noiseLevel]`.
pub fn quality_stratum(noise: f64, noise_level: f64) -> &'static str {
    if noise_level <= 0.0 || noise < noise_level / 3.0 {
        "good"
    } else if noise < 2.0 * noise_level / 3.0 {
        "bad"
    } else {
        "ugly"
    }
}

/// Print `index` of the dataset with master seed `seed`.
pub fn generate_sample(config: &SynthConfig, seed: u64, index: usize) -> Result<Sample> {
    let p = generate_print(config, print_seed(seed, index))?;
    Ok(Sample {
        id: print_id(index),
        image: p.image,
        truth: p.truth,
        quality: Some(quality_stratum(p.noise, config.noise_level).to_string()),
    })
}

/// The in-memory equivalent of [`generate_dataset`].
pub fn generate_samples(config: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n).map(|i| generate_sample(config, seed, i)).collect()
}

/// Writes `<id>.pgm` and `<id>.txt` for one sample into `dir`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<ManifestEntry> {
    let image_path = format!("{}.pgm", sample.id);
    let minutia_path = format!("{}.txt", sample.id);
    write_pgm(
        &dir.join(&image_path),
        &GrayImage::from_tensor(&sample.image),
    )?;
    write_minutiae(&dir.join(&minutia_path), &sample.truth, false)?;
    Ok(ManifestEntry {
        id: sample.id.clone(),
        image_path,
        minutia_path,
        quality: sample.quality.clone().unwrap_or_default(),
    })
}

/// Writes `n` prints and the manifest into `dir`.
pub fn generate_dataset(
    config: &SynthConfig,
    n: usize,
    seed: u64,
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = (0..n)
        .map(|i| write_sample(dir, &generate_sample(config, seed, i)?))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Undirected local orientation (degrees in `[0, 180)`, the ridge tangent)
/// from the Gaussian-weighted structure tensor of `pixels` around `(x, y)`.
pub fn structure_orientation(
    pixels: &[f64],
    w: usize,
    h: usize,
    x: f64,
    y: f64,
    sigma: f64,
) -> f64 {
    let r = (3.0 * sigma).ceil() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let (px, py) = (cx + dx, cy + dy);
            if px < 1 || py < 1 || px >= w as isize - 1 || py >= h as isize - 1 {
                continue;
            }
            let at = |xx: isize, yy: isize| pixels[yy as usize * w + xx as usize];
            let gx = (at(px + 1, py) - at(px - 1, py)) / 2.0;
            let gy = (at(px, py + 1) - at(px, py - 1)) / 2.0;
            let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            jxx += wgt * gx * gx;
            jyy += wgt * gy * gy;
            jxy += wgt * gx * gy;
        }
    }
    // dominant gradient direction, rotated by 90° onto the ridges
    let normal = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
    (normal + PI / 2.0).to_degrees().rem_euclid(180.0)
}
