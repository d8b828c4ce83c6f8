//! Scalar abstraction shared by the Lie-group and camera math.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating point scalar usable by the geometric core: `f32` or `f64`.
pub trait Real: RealField + Copy + ToPrimitive {
    /// Tolerance used for structural checks (orthonormality, degeneracy).
    fn structural_tolerance() -> Self {
        let floor: Self = nalgebra::convert(1e-9);
        let scaled = Self::default_epsilon() * nalgebra::convert(100.0);
        if scaled > floor {
            scaled
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

#[inline]
pub(crate) fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
