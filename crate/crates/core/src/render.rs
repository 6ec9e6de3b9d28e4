//! Annotated overlays: ground truth in green, correct extractions in blue,
//! false extractions in red.

use crate::evaluation::{match_minutiae, Tolerance};
use crate::image::{GrayImage, RgbImage};
use crate::minutia::Minutia;

pub const GREEN: [u8; 3] = [0, 200, 0];
pub const BLUE: [u8; 3] = [0, 80, 255];
pub const RED: [u8; 3] = [230, 0, 0];
pub const RADIUS: i64 = 5;
pub const TICK: f64 = 12.0;

fn draw(canvas: &mut RgbImage, m: &Minutia, color: [u8; 3]) {
    canvas.circle(m.x, m.y, RADIUS, color);
    if let Some(t) = m.theta {
        let t = t.to_radians();
        canvas.line(m.x, m.y, m.x + TICK * t.cos(), m.y + TICK * t.sin(), color);
    }
}

/// Draws every truth minutia, then each extraction coloured by whether
/// [`match_minutiae`] paired it.
pub fn render_annotated(
    image: &GrayImage,
    truth: &[Minutia],
    extracted: &[Minutia],
    tol: &Tolerance,
) -> RgbImage {
    let report = match_minutiae(extracted, truth, tol);
    let mut matched = vec![false; extracted.len()];
    for p in &report.pairs {
        matched[p.extracted] = true;
    }
    let mut canvas = RgbImage::from_gray(image);
    for m in truth {
        draw(&mut canvas, m, GREEN);
    }
    for (m, ok) in extracted.iter().zip(matched) {
        draw(&mut canvas, m, if ok { BLUE } else { RED });
    }
    canvas
}
