use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for the numeric stages: `f32` or `f64`.
///
/// Interchange bundles always store `f32`; the conversion helpers here are the
/// only place the two meet.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to every Scalar")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product with the summation order fixed left to right.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// In-place softmax with max-subtraction.
pub fn softmax_in_place<T: Scalar>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total = total + *z;
    }
    for z in logits.iter_mut() {
        *z = *z / total;
    }
}

/// Index of the largest entry; ties go to the lowest index. `None` for an empty slice.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in row.iter().enumerate() {
        match best {
            Some((_, b)) if v.partial_cmp(&b) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Checks that `row` is a probability vector: finite, nonnegative, summing to one within `tol`.
pub fn is_stochastic<T: Scalar>(row: &[T], tol: f64) -> bool {
    if row.is_empty() {
        return false;
    }
    let mut total = 0.0f64;
    for &v in row {
        let v = v.to_f64_lossy();
        if !v.is_finite() || v < 0.0 {
            return false;
        }
        total += v;
    }
    (total - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.5f32, 0.5]), Some(0));
        assert_eq!(argmax(&[0.2f32, 0.8]), Some(1));
        assert_eq!(argmax::<f32>(&[]), None);
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), Some(1));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut z = [1000.0f64, 1000.0];
        softmax_in_place(&mut z);
        assert_eq!(z, [0.5, 0.5]);
    }

    #[test]
    fn stochastic_check() {
        assert!(is_stochastic(&[0.25f32, 0.75], 1e-6));
        assert!(!is_stochastic(&[0.5f32, 0.6], 1e-6));
        assert!(!is_stochastic(&[-0.1f64, 1.1], 1e-6));
        assert!(!is_stochastic::<f64>(&[], 1e-6));
    }
}
