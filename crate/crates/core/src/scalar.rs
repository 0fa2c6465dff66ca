//! Scalar abstraction shared by the numerical modules.
//!
//! Everything that does arithmetic on voltages, powers or utilization
//! ratios is written against [`Scalar`] so the same code runs in `f64`
//! (the default, used by the scenario runner) and `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real floating point scalar: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal, panicking only if the value is not representable.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Clamps `x` into `[lo, hi]`.
pub fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    x.max(lo).min(hi)
}

/// Projection onto `[0, +inf)`.
pub fn pos<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}
