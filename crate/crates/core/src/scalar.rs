//! Scalar abstraction: the whole engine is generic over the floating-point
//! type through this trait.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the engine works over: `f32` or `f64`.
pub trait Real: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy {
    /// Convert an `f64` literal into the scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts into any Real scalar")
    }

    /// Lossy view of the scalar as `f64`, for diagnostics and output.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
