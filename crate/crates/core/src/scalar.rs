//! Scalar abstraction: every numeric component is generic over one float type.
//!
//! `Scalar` bundles the ndarray and num-traits bounds needed for linear
//! algebra, plus conversions to and from `f64`. Random draws are always made
//! in `f64` and converted, so a seeded run produces the same stream of
//! numbers (up to rounding) regardless of the scalar the model runs in.

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate (`f32` or `f64`).
pub trait Scalar: NdFloat + FromPrimitive + ToPrimitive + serde::Serialize {
    /// Lossy conversion from `f64`; the only way values enter the graph.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any scalar")
    }

    /// Widening (for `f32`) or identity (for `f64`) conversion out.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip<F: Scalar>(x: f64) -> f64 {
        F::of(x).as_f64()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        for &x in &[0.0, -1.5, 3.25e10, f64::MIN_POSITIVE] {
            assert_eq!(round_trip::<f64>(x), x);
        }
    }

    #[test]
    fn f32_round_trip_preserves_representable_values() {
        for &x in &[0.0, 0.5, -2.0, 1024.25] {
            assert_eq!(round_trip::<f32>(x), x);
        }
    }
}
