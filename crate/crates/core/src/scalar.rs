//! Scalar abstraction: every solver kernel is generic over `Scalar`,
//! which is any IEEE float that `num-traits` knows how to convert.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt;

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + fmt::Debug
        + fmt::Display
        + fmt::LowerExp
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Convert an f64 literal into the working scalar type.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal not representable in scalar type")
}

/// Convert a usize (grid size, counter) into the working scalar type.
#[inline]
pub fn cast_usize<T: Scalar>(x: usize) -> T {
    T::from_usize(x).expect("count not representable in scalar type")
}

/// Neumaier-compensated accumulator. The toolkit checks conservation and
/// compatibility identities down to 1e-12 on ~1e5-term sums, which plain
/// summation cannot guarantee.
#[derive(Clone, Copy, Debug)]
pub struct KahanSum<T: Scalar> {
    sum: T,
    comp: T,
}

impl<T: Scalar> Default for KahanSum<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> KahanSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            comp: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, value: T) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator.
pub fn ksum<T: Scalar, I: IntoIterator<Item = T>>(iter: I) -> T {
    let mut acc = KahanSum::new();
    for v in iter {
        acc.add(v);
    }
    acc.value()
}

/// Mean of a slice (compensated).
pub fn kmean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    ksum(values.iter().copied()) / cast_usize(values.len())
}
