//! Shape rasterizers for the synthetic benchmark.
//!
//! Every shape fills a `size`×`size` box whose extents are exact: the
//! rasterized pixels always touch all four box edges, so a placement
//! rectangle can be recovered from the mask alone. Inclusion tests use
//! pixel centers with a half-pixel slack where needed to keep that
//! guarantee for even sizes.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Geometric vocabulary for foreground objects. The first four are the
/// default in-distribution assignment; the rest exist so held-out shape
/// sets are always available for semantic-shift generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

/// All shape identifiers the renderer understands, in catalog order.
pub const SHAPE_CATALOG: [&str; 6] = ["square", "circle", "triangle", "cross", "diamond", "ring"];

impl ShapeKind {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "square" => Ok(ShapeKind::Square),
            "circle" => Ok(ShapeKind::Circle),
            "triangle" => Ok(ShapeKind::Triangle),
            "cross" => Ok(ShapeKind::Cross),
            "diamond" => Ok(ShapeKind::Diamond),
            "ring" => Ok(ShapeKind::Ring),
            other => Err(Error::Config(format!("unknown shape id '{other}'"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
        }
    }

    /// Rasterize into a `size`×`size` binary box (1 = shape pixel).
    pub fn rasterize(&self, size: usize) -> Array2<u8> {
        assert!(size >= 1, "shape size must be at least 1");
        if size == 1 {
            return Array2::from_elem((1, 1), 1);
        }
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let r = (s - 1.0) / 2.0;
        // Half-pixel slack so even-sized boxes still reach their edges.
        let eps = 1e-9;
        Array2::from_shape_fn((size, size), |(i, j)| {
            let di = i as f64 - c;
            let dj = j as f64 - c;
            let inside = match self {
                ShapeKind::Square => true,
                ShapeKind::Circle => di * di + dj * dj <= r * r + 0.25 + eps,
                ShapeKind::Triangle => {
                    // Apex at the top row, base spanning the bottom row.
                    let halfw = 0.5 + i as f64 * (r - 0.5) / (s - 1.0);
                    dj.abs() <= halfw + eps
                }
                ShapeKind::Cross => {
                    // Integer bar width avoids parity flapping that would
                    // make area non-monotone in size.
                    let bar = ((s / 3.0).round() as usize).max(1);
                    let start = (size - bar) / 2;
                    let in_v = j >= start && j < start + bar;
                    let in_h = i >= start && i < start + bar;
                    in_v || in_h
                }
                ShapeKind::Diamond => di.abs() + dj.abs() <= r + 0.5 + eps,
                ShapeKind::Ring => {
                    let d2 = di * di + dj * dj;
                    let inner = r / 2.0;
                    d2 <= r * r + 0.25 + eps && d2 > inner * inner
                }
            };
            u8::from(inside)
        })
    }

    /// Foreground pixel count at a given box size.
    pub fn area(&self, size: usize) -> usize {
        self.rasterize(size).iter().filter(|&&v| v == 1).count()
    }
}

/// Sizes whose rasterized area lands the foreground fraction in
/// `[lo, hi]` for an `h`×`w` frame. Empty when the range is unreachable.
pub fn feasible_sizes(kind: ShapeKind, h: usize, w: usize, lo: f64, hi: f64) -> Vec<usize> {
    let total = (h * w) as f64;
    (1..=h.min(w))
        .filter(|&s| {
            let frac = kind.area(s) as f64 / total;
            frac >= lo && frac <= hi
        })
        .collect()
}
