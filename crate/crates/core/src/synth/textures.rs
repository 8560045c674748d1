//! Procedural background textures. Each texture id names a family with
//! fixed structural parameters and a fixed value band; per-example
//! variation (phase, offsets, orientation, channel tint) comes from the
//! caller's RNG so the same id still yields diverse backgrounds.
//!
//! The first three catalog families live in a mid-gray band and form the
//! usual in-distribution pool. The remaining families deviate from that
//! band in several statistics at once — brightness extremes, contrast,
//! curvature, saturated color — so a held-out pool drawn from them shifts
//! background appearance the way a sensor or scene change would.
//!
//! Identifier grammar:
//!   noise | stripes:<period>:<angle_deg> | checker:<cell> | gradient
//!   | rings:<period> | dots:<spacing>

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synth::CHANNELS;
use ndarray::{Array2, Array3};
use rand::Rng as _;

/// Texture ids available to dataset specs, in catalog order. Specs choose
/// their ID subset; the remainder is the held-out pool for domain shift.
pub const TEXTURE_CATALOG: [&str; 7] = [
    "noise",
    "stripes:4:0",
    "checker:4",
    "gradient",
    "stripes:6:45",
    "rings:6",
    "dots:3",
];

/// Mid-band channel tint: offsets in [TINT_OFFSET_LO, TINT_OFFSET_HI],
/// structural amplitude in [TINT_AMP_LO, TINT_AMP_HI]. Mid-band values
/// stay inside offset ± amplitude, i.e. [56, 200].
pub const TINT_OFFSET_LO: u32 = 112;
pub const TINT_OFFSET_HI: u32 = 144;
pub const TINT_AMP_LO: f64 = 24.0;
pub const TINT_AMP_HI: f64 = 56.0;

/// Wide-band amplitude for the high-contrast families; values reach
/// [16, 240] at the tint-offset extremes.
pub const WIDE_AMP_LO: f64 = 64.0;
pub const WIDE_AMP_HI: f64 = 96.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Noise,
    Stripes { period: f64, angle_deg: f64 },
    Checker { cell: usize },
    Gradient,
    Rings { period: f64 },
    Dots { spacing: usize },
}

impl Texture {
    pub fn parse(id: &str) -> Result<Self> {
        let parts: Vec<&str> = id.split(':').collect();
        match parts.as_slice() {
            ["noise"] => Ok(Texture::Noise),
            ["gradient"] => Ok(Texture::Gradient),
            ["stripes", period, angle] => {
                let period: f64 = period
                    .parse()
                    .map_err(|_| Error::Config(format!("bad stripe period in '{id}'")))?;
                let angle_deg: f64 = angle
                    .parse()
                    .map_err(|_| Error::Config(format!("bad stripe angle in '{id}'")))?;
                if period <= 0.0 {
                    return Err(Error::Config(format!("stripe period must be > 0 in '{id}'")));
                }
                Ok(Texture::Stripes { period, angle_deg })
            }
            ["checker", cell] => {
                let cell: usize = cell
                    .parse()
                    .map_err(|_| Error::Config(format!("bad checker cell in '{id}'")))?;
                if cell == 0 {
                    return Err(Error::Config(format!("checker cell must be > 0 in '{id}'")));
                }
                Ok(Texture::Checker { cell })
            }
            ["rings", period] => {
                let period: f64 = period
                    .parse()
                    .map_err(|_| Error::Config(format!("bad ring period in '{id}'")))?;
                if period < 2.0 {
                    return Err(Error::Config(format!("ring period must be >= 2 in '{id}'")));
                }
                Ok(Texture::Rings { period })
            }
            ["dots", spacing] => {
                let spacing: usize = spacing
                    .parse()
                    .map_err(|_| Error::Config(format!("bad dot spacing in '{id}'")))?;
                if spacing < 2 {
                    return Err(Error::Config(format!("dot spacing must be >= 2 in '{id}'")));
                }
                Ok(Texture::Dots { spacing })
            }
            _ => Err(Error::Config(format!("unknown texture id '{id}'"))),
        }
    }

    /// Structural field in [-1, 1]; the family's spatial identity.
    fn field(&self, h: usize, w: usize, rng: &mut Rng) -> Array2<f64> {
        match self {
            Texture::Noise => {
                let mut out = Array2::zeros((h, w));
                for v in out.iter_mut() {
                    *v = rng.gen_range(-1.0..=1.0);
                }
                out
            }
            Texture::Stripes { period, angle_deg } => {
                let phase: f64 = rng.gen_range(0.0..*period);
                let theta = angle_deg.to_radians();
                let (cos_t, sin_t) = (theta.cos(), theta.sin());
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let t = j as f64 * cos_t + i as f64 * sin_t + phase;
                    (2.0 * std::f64::consts::PI * t / period).sin()
                })
            }
            Texture::Checker { cell } => {
                let oy = rng.gen_range(0..*cell);
                let ox = rng.gen_range(0..*cell);
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let parity = ((i + oy) / cell + (j + ox) / cell) % 2;
                    if parity == 0 {
                        -1.0
                    } else {
                        1.0
                    }
                })
            }
            Texture::Gradient => {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (cos_t, sin_t) = (theta.cos(), theta.sin());
                // Project pixel centers onto the gradient axis, then span
                // [-1, 1] across the occupied projection range.
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..h {
                    for j in 0..w {
                        let t = j as f64 * cos_t + i as f64 * sin_t;
                        lo = lo.min(t);
                        hi = hi.max(t);
                    }
                }
                let span = (hi - lo).max(1e-9);
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let t = (j as f64 * cos_t + i as f64 * sin_t - lo) / span;
                    2.0 * t - 1.0
                })
            }
            Texture::Rings { period } => {
                let cy: f64 = rng.gen_range(0.0..h as f64);
                let cx: f64 = rng.gen_range(0.0..w as f64);
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let r = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                    (2.0 * std::f64::consts::PI * r / period).sin()
                })
            }
            // Dots renders in full color below; no scalar field.
            Texture::Dots { .. } => Array2::zeros((h, w)),
        }
    }

    /// Structural amplitude band (gray levels around the tint offset).
    /// Axis-aligned stripes stay mid-band; angled stripes are one of the
    /// high-contrast families.
    fn amp_band(&self) -> (f64, f64) {
        match self {
            Texture::Noise | Texture::Checker { .. } => (TINT_AMP_LO, TINT_AMP_HI),
            Texture::Stripes { angle_deg, .. } if *angle_deg == 0.0 => (TINT_AMP_LO, TINT_AMP_HI),
            _ => (WIDE_AMP_LO, WIDE_AMP_HI),
        }
    }

    /// Render an `h`×`w` color texture. Field families share one path:
    /// the structural field under a random per-channel tint, all channels
    /// sharing the field so the pattern reads as one tinted material.
    /// Dots overlays a lattice of saturated color on a flat tinted base.
    pub fn render(&self, h: usize, w: usize, rng: &mut Rng) -> Array3<u8> {
        if let Texture::Dots { spacing } = self {
            return render_dots(*spacing, h, w, rng);
        }
        let (amp_lo, amp_hi) = self.amp_band();
        let field = self.field(h, w, rng);
        let mut offsets = [0.0f64; CHANNELS];
        let mut amps = [0.0f64; CHANNELS];
        for c in 0..CHANNELS {
            offsets[c] = rng.gen_range(TINT_OFFSET_LO..=TINT_OFFSET_HI) as f64;
            amps[c] = rng.gen_range(amp_lo..=amp_hi);
        }
        Array3::from_shape_fn((CHANNELS, h, w), |(c, i, j)| {
            (offsets[c] + amps[c] * field[(i, j)]).round().clamp(0.0, 255.0) as u8
        })
    }
}

/// Saturated dots on a flat mid-band base: one channel hot, the others
/// cold, on a lattice with random phase. The dot colors deliberately
/// occupy the same gamut as foreground paint.
fn render_dots(spacing: usize, h: usize, w: usize, rng: &mut Rng) -> Array3<u8> {
    let mut base = [0u8; CHANNELS];
    for v in &mut base {
        *v = rng.gen_range(TINT_OFFSET_LO..=TINT_OFFSET_HI) as u8;
    }
    let hot = rng.gen_range(0..CHANNELS);
    let hot_value = rng.gen_range(208..=255u32) as u8;
    let cold_value = rng.gen_range(16..=64u32) as u8;
    let oy = rng.gen_range(0..spacing);
    let ox = rng.gen_range(0..spacing);
    Array3::from_shape_fn((CHANNELS, h, w), |(c, i, j)| {
        if i % spacing == oy && j % spacing == ox {
            if c == hot {
                hot_value
            } else {
                cold_value
            }
        } else {
            base[c]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn catalog_ids_all_parse() {
        for id in TEXTURE_CATALOG {
            Texture::parse(id).unwrap();
        }
    }

    #[test]
    fn malformed_ids_are_config_errors() {
        for id in [
            "plaid",
            "stripes:0:0",
            "stripes:4",
            "checker:0",
            "checker:x",
            "rings:1",
            "dots:1",
            "dots:x",
            "",
        ] {
            assert!(Texture::parse(id).is_err(), "'{id}' should fail");
        }
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        for id in TEXTURE_CATALOG {
            let tex = Texture::parse(id).unwrap();
            let a = tex.render(16, 16, &mut rng_for(7, id));
            let b = tex.render(16, 16, &mut rng_for(7, id));
            assert_eq!(a, b, "texture '{id}' not reproducible");
        }
    }

    #[test]
    fn id_families_stay_in_the_mid_band() {
        let lo = (TINT_OFFSET_LO as f64 - TINT_AMP_HI) as u8;
        let hi = (TINT_OFFSET_HI as f64 + TINT_AMP_HI) as u8;
        for id in ["noise", "stripes:4:0", "checker:4"] {
            let tex = Texture::parse(id).unwrap();
            let img = tex.render(24, 24, &mut rng_for(3, id));
            for &v in img.iter() {
                assert!((lo..=hi).contains(&v), "texture '{id}' value {v} out of band");
            }
        }
    }

    #[test]
    fn held_out_families_leave_the_mid_band() {
        let lo = (TINT_OFFSET_LO as f64 - TINT_AMP_HI) as u8;
        let hi = (TINT_OFFSET_HI as f64 + TINT_AMP_HI) as u8;
        for id in ["gradient", "stripes:6:45", "rings:6", "dots:3"] {
            let tex = Texture::parse(id).unwrap();
            let img = tex.render(24, 24, &mut rng_for(9, id));
            let out = img.iter().any(|&v| v < lo || v > hi);
            assert!(out, "texture '{id}' never leaves the ID value band");
        }
    }

    #[test]
    fn dots_carry_saturated_paint_like_colors() {
        let tex = Texture::parse("dots:3").unwrap();
        let img = tex.render(24, 24, &mut rng_for(5, "dots"));
        let mut hot = false;
        let mut cold = false;
        for &v in img.iter() {
            hot |= v >= 208;
            cold |= v <= 64;
        }
        assert!(hot && cold, "dots should reach both paint extremes");
    }

    #[test]
    fn channels_share_structure_but_differ_in_tint() {
        let tex = Texture::parse("checker:4").unwrap();
        let img = tex.render(16, 16, &mut rng_for(11, "checker"));
        // Per channel, a checker is two-tone; across channels the tones
        // differ (independent tints), while the cell layout is shared.
        for c in 0..CHANNELS {
            let distinct: std::collections::HashSet<u8> =
                img.index_axis(ndarray::Axis(0), c).iter().copied().collect();
            assert_eq!(distinct.len(), 2, "channel {c} should be two-tone");
        }
        let r = img.index_axis(ndarray::Axis(0), 0);
        let g = img.index_axis(ndarray::Axis(0), 1);
        let r_hi = *r.iter().max().unwrap();
        let g_hi = *g.iter().max().unwrap();
        let same_layout = r.iter().zip(g.iter()).all(|(&a, &b)| (a == r_hi) == (b == g_hi));
        assert!(same_layout, "channels should share the cell layout");
    }

    #[test]
    fn vertical_stripes_are_constant_down_columns() {
        let tex = Texture::parse("stripes:4:0").unwrap();
        let img = tex.render(12, 12, &mut rng_for(5, "stripes"));
        for c in 0..CHANNELS {
            for j in 0..12 {
                for i in 1..12 {
                    assert_eq!(img[(c, 0, j)], img[(c, i, j)]);
                }
            }
        }
    }
}
