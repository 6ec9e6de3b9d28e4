//! The minutia point type and its plain-text file format.
//!
//! One minutia per line: `x y theta [score]`, space separated. An unknown
//! orientation is written as `-`. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MinutiaKind {
    Ending,
    Bifurcation,
    #[default]
    Unknown,
}

/// A point feature with optional direction. `x` is the column and `y` the
/// row, both in pixels; `theta` is in degrees within `[0, 360)`, measured
/// from the +x axis towards +y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    pub theta: Option<f64>,
    pub score: f64,
    pub kind: MinutiaKind,
}

impl Minutia {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Minutia {
            x,
            y,
            theta: Some(normalize_degrees(theta)),
            score: 1.0,
            kind: MinutiaKind::Unknown,
        }
    }

    /// A location-only candidate, as produced by the proposal stage.
    pub fn proposal(x: f64, y: f64, score: f64) -> Self {
        Minutia {
            x,
            y,
            theta: None,
            score,
            kind: MinutiaKind::Unknown,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn distance(&self, other: &Minutia) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Maps any angle in degrees into `[0, 360)`.
pub fn normalize_degrees(theta: f64) -> f64 {
    let r = theta.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Unsigned angle between two directions, in `[0, 180]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn format_minutiae(minutiae: &[Minutia], with_score: bool) -> String {
    let mut s = String::new();
    for m in minutiae {
        let _ = write!(s, "{} {} ", m.x, m.y);
        match m.theta {
            Some(t) => {
                let _ = write!(s, "{t}");
            }
            None => s.push('-'),
        }
        if with_score {
            let _ = write!(s, " {}", m.score);
        }
        s.push('\n');
    }
    s
}

pub fn parse_minutiae(text: &str, origin: &Path) -> Result<Vec<Minutia>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!(
                "expected `x y theta [score]`, got {} fields",
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| err(format!("bad {what} {s:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("non-finite {what}")))
            }
        };
        let theta = match fields[2] {
            "-" => None,
            s => Some(num(s, "theta")?),
        };
        let score = match fields.get(3) {
            Some(s) => num(s, "score")?,
            None => 1.0,
        };
        out.push(Minutia {
            x: num(fields[0], "x")?,
            y: num(fields[1], "y")?,
            theta,
            score,
            kind: MinutiaKind::Unknown,
        });
    }
    Ok(out)
}

pub fn write_minutiae(path: &Path, minutiae: &[Minutia], with_score: bool) -> Result<()> {
    std::fs::write(path, format_minutiae(minutiae, with_score)).map_err(|e| Error::io(path, e))
}

pub fn read_minutiae(path: &Path) -> Result<Vec<Minutia>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_minutiae(&text, path)
}
