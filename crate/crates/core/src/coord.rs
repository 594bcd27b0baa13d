//! Coordinate codec: continuous pixels <-> discrete location-token offsets.
//!
//! A point is encoded relative to an anchor (a normalized location, usually an
//! image token's l_i) as an integer offset in `[-R, R]`, where offset `i`
//! means a relative displacement of `i/R` of the image width or height. The
//! arithmetic runs in `f64` regardless of the scalar type carrying the inputs,
//! so quantization decisions are identical across `f32` and `f64` models.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalized anchor location in `[0,1]²` (an image token's l_i, or an image
/// corner/center for whole-image coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
}

impl Anchor {
    pub fn new(x: f64, y: f64) -> Result<Anchor> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Coord(format!(
                "anchor ({x}, {y}) outside [0,1] x [0,1]"
            )));
        }
        Ok(Anchor { x, y })
    }

    /// Top-left corner; offsets then encode absolute positions.
    pub fn origin() -> Anchor {
        Anchor { x: 0.0, y: 0.0 }
    }

    /// Image center.
    pub fn center() -> Anchor {
        Anchor { x: 0.5, y: 0.5 }
    }
}

fn check_args(image_size: (usize, usize), range: i64) -> Result<()> {
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(Error::Coord("image size must be positive".into()));
    }
    if range < 1 {
        return Err(Error::Coord(format!("range must be >= 1, got {range}")));
    }
    Ok(())
}

/// Rounds half away from zero, the fixed rounding mode of the codec
/// (`f64::round` has exactly this behavior).
fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Quantizes a pixel point to integer offsets relative to `anchor`:
/// `ix = clamp(round((x/W − anchor.x)·R), −R, R)`, `iy` likewise with `H`.
pub fn quantize<F: Scalar>(
    point: (F, F),
    anchor: Anchor,
    image_size: (usize, usize),
    range: i64,
) -> Result<(i64, i64)> {
    check_args(image_size, range)?;
    let (x, y) = (point.0.as_f64(), point.1.as_f64());
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Coord(format!("non-finite point ({x}, {y})")));
    }
    let axis = |v: f64, dim: usize, a: f64| -> i64 {
        let raw = round_half_away((v / dim as f64 - a) * range as f64);
        // Clamp keeps out-of-window points at the border tokens; they never wrap.
        (raw as i64).clamp(-range, range)
    };
    Ok((
        axis(x, image_size.0, anchor.x),
        axis(y, image_size.1, anchor.y),
    ))
}

/// Inverse map: `x = (anchor.x + ix/R)·W`, `y` likewise with `H`.
pub fn dequantize<F: Scalar>(
    offset: (i64, i64),
    anchor: Anchor,
    image_size: (usize, usize),
    range: i64,
) -> Result<(F, F)> {
    check_args(image_size, range)?;
    let (ix, iy) = offset;
    if ix < -range || ix > range || iy < -range || iy > range {
        return Err(Error::Coord(format!(
            "offset ({ix}, {iy}) outside [-{range}, {range}]"
        )));
    }
    let axis = |i: i64, dim: usize, a: f64| (a + i as f64 / range as f64) * dim as f64;
    Ok((
        F::of(axis(ix, image_size.0, anchor.x)),
        F::of(axis(iy, image_size.1, anchor.y)),
    ))
}

/// Worst-case reconstruction error per axis for in-window points:
/// half a bin, `dim / (2R)`.
pub fn quantization_bound(dim: usize, range: i64) -> f64 {
    dim as f64 / (2.0 * range as f64)
}
