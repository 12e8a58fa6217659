//! Floating point abstraction used by the scoring, selection and reporting code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar a score can be computed in.
///
/// Log-probabilities arrive from backends as `f64`; they are converted once at
/// the scoring boundary and all downstream arithmetic stays in `Self`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from a backend log-probability.
    fn from_f64_lossy(value: f64) -> Self;

    /// Widening conversion for serialization and reporting.
    fn to_f64_lossy(self) -> f64;

    /// The `f64` nearest to this value's shortest decimal form, so an `f32`
    /// grid point of 0.15 counts tokens the way 0.15 does.
    fn to_f64_decimal(self) -> f64;

    fn from_count(count: usize) -> Self {
        Self::from_usize(count).unwrap_or_else(Self::infinity)
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64_lossy(value: f64) -> Self {
                value as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            #[inline]
            fn to_f64_decimal(self) -> f64 {
                self.to_string().parse().unwrap_or(self as f64)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(S::zero(), |acc, &v| acc + v);
    Some(sum / S::from_count(values.len()))
}

/// Population standard deviation; zero for fewer than two values.
pub fn std_dev<S: Scalar>(values: &[S]) -> S {
    match mean(values) {
        Some(m) if values.len() > 1 => {
            let var = values
                .iter()
                .fold(S::zero(), |acc, &v| acc + (v - m) * (v - m))
                / S::from_count(values.len());
            var.sqrt()
        }
        _ => S::zero(),
    }
}

/// `ceil(fraction * total)` with a tolerance so that e.g. `0.3 * 10` yields 3.
pub fn ceil_fraction(fraction: f64, total: usize) -> usize {
    let raw = fraction * total as f64;
    let slack = 1e-9 * (total.max(1) as f64);
    let n = (raw - slack).ceil();
    if n <= 0.0 {
        0
    } else {
        (n as usize).min(total)
    }
}

/// `floor(fraction * total)` with the same tolerance as [`ceil_fraction`].
pub fn floor_fraction(fraction: f64, total: usize) -> usize {
    let raw = fraction * total as f64;
    let slack = 1e-9 * (total.max(1) as f64);
    let n = (raw + slack).floor();
    if n <= 0.0 {
        0
    } else {
        (n as usize).min(total)
    }
}
