use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the bandit and metric arithmetic is written against.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {
    /// Convert from an `f64` constant.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Convert a count.
    fn count(n: u64) -> Self {
        Self::from_u64(n).expect("count fits")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
