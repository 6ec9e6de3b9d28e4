use super::Tensor;
use crate::error::{Error, Result};

/// Axis-aligned region in image pixel coordinates; `x1`/`y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Roi {
    /// Square region of side `size` centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, size: f64) -> Self {
        let h = size / 2.0;
        Roi {
            x0: cx - h,
            y0: cy - h,
            x1: cx + h,
            y1: cy + h,
        }
    }

    pub fn clamp_to(self, width: f64, height: f64) -> Self {
        Roi {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }
}

/// Half-open block of feature-map cells covered by a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureWindow {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl FeatureWindow {
    /// Left/top edges round down and right/bottom edges round up when divided
    /// by the stride. A region that collapses after clamping snaps to the
    /// single cell nearest its centre.
    pub fn from_roi(roi: &Roi, stride: usize, rows: usize, cols: usize) -> Self {
        let s = stride as f64;
        let axis = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
            let a = ((lo / s).floor().max(0.0) as usize).min(n);
            let b = ((hi / s).ceil().max(0.0) as usize).min(n);
            if b > a {
                (a, b)
            } else {
                let c = ((((lo + hi) / 2.0) / s).floor().max(0.0) as usize).min(n - 1);
                (c, c + 1)
            }
        };
        let (row0, row1) = axis(roi.y0, roi.y1, rows);
        let (col0, col1) = axis(roi.x0, roi.x1, cols);
        FeatureWindow {
            row0,
            row1,
            col0,
            col1,
        }
    }

    /// Cells `[start, end)` of bin `i` out of `bins` along an axis of `n` cells.
    fn bin(start: usize, n: usize, i: usize, bins: usize) -> (usize, usize) {
        let lo = start + (i * n) / bins;
        let hi = start + ((i + 1) * n).div_ceil(bins);
        (lo, hi.max(lo + 1))
    }
}

/// Max-pools the feature cells under `roi` into an `out_size × out_size` grid
/// per channel. Bins repeat cells when the region spans fewer cells than
/// `out_size`. Returns the pooled `[C,out,out]` tensor and the flat feature
/// index chosen for every output element.
pub fn roi_pool(
    featmap: &Tensor,
    roi: &Roi,
    stride: usize,
    out_size: usize,
) -> Result<(Tensor, Vec<usize>)> {
    featmap.expect_rank(3, "roi_pool feature map")?;
    if stride == 0 || out_size == 0 {
        return Err(Error::invalid(
            "roi_pool: stride and output size must be positive",
        ));
    }
    let &[c, h, w] = featmap.shape() else {
        unreachable!()
    };
    let win = FeatureWindow::from_roi(roi, stride, h, w);
    let (nh, nw) = (win.row1 - win.row0, win.col1 - win.col0);
    let src = featmap.data();
    let mut out = Vec::with_capacity(c * out_size * out_size);
    let mut switches = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        let base = ch * h * w;
        for by in 0..out_size {
            let (r0, r1) = FeatureWindow::bin(win.row0, nh, by, out_size);
            for bx in 0..out_size {
                let (c0, c1) = FeatureWindow::bin(win.col0, nw, bx, out_size);
                let mut best = base + r0 * w + c0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        let idx = base + r * w + col;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                switches.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, out_size, out_size], out)?, switches))
}

/// Scatters the upstream gradient of [`roi_pool`] back onto the feature map.
pub fn roi_pool_backward(
    featmap_shape: &[usize],
    switches: &[usize],
    upstream: &Tensor,
) -> Result<Tensor> {
    super::maxpool_backward(featmap_shape, switches, upstream)
}
