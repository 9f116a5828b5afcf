use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt::{Debug, Display};

/// Real scalar used for ratios, accuracies and log-likelihoods.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Tolerance used when checking that a group of ratios sums to one.
    fn sum_tolerance() -> Self {
        let floor = Self::from_f64(1e-9).unwrap();
        let eps = Self::epsilon() * Self::from_u8(16).unwrap();
        if eps > floor {
            eps
        } else {
            floor
        }
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    fn hundred() -> Self {
        Self::from_u8(100).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `part / whole`, zero when `whole` is zero.
pub fn fraction<S: Scalar>(part: usize, whole: usize) -> S {
    if whole == 0 {
        S::zero()
    } else {
        S::from_usize_lossy(part) / S::from_usize_lossy(whole)
    }
}

/// Unweighted arithmetic mean; zero for an empty slice.
pub fn mean<S: Scalar>(values: &[S]) -> S {
    if values.is_empty() {
        return S::zero();
    }
    let sum = values.iter().fold(S::zero(), |acc, &v| acc + v);
    sum / S::from_usize_lossy(values.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_is_type_aware() {
        assert_eq!(f64::sum_tolerance(), 1e-9);
        assert!(f32::sum_tolerance() > 1e-7);
    }

    #[test]
    fn fraction_of_empty_is_zero() {
        assert_eq!(fraction::<f64>(0, 0), 0.0);
        assert_eq!(fraction::<f32>(1, 2), 0.5);
    }

    #[test]
    fn mean_matches_hand_sum() {
        assert_eq!(mean(&[1.0f64, 2.0, 6.0]), 3.0);
        assert_eq!(mean::<f64>(&[]), 0.0);
    }
}
