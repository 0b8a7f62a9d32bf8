//! Scalar abstractions: the underlying float type and the generic scalar
//! that field, rendering, and loss code is written against.
//!
//! [`Real`] is the concrete float (f32 or f64, backed by num-traits).
//! [`Scalar`] is the type the math runs on: either a bare `Real`, or a tape
//! variable from [`crate::autodiff`] recording the same operations for
//! reverse-mode differentiation. Writing the forward code once and
//! instantiating it for both is what guarantees taped and untaped
//! evaluations agree bit for bit.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// A value the differentiable math runs on.
///
/// Implemented by every [`Real`] (plain evaluation) and by
/// [`crate::autodiff::Var`] (taped evaluation). The operation set is the
/// registered primitive vocabulary of the tape; generic code restricted to
/// these operations is differentiable by construction.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    type R: Real;

    /// The forward value, independent of any recording.
    fn primal(self) -> Self::R;

    /// A constant with the same scalar kind as `self` (for a tape variable,
    /// a constant bound to the same tape). Constants carry no gradient.
    fn lift(self, v: Self::R) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn recip(self) -> Self;
    /// Pointwise maximum; on ties the gradient flows to `self`.
    fn max(self, other: Self) -> Self;
}

/// Floating-point scalar: f32 or f64.
///
/// Every `Real` is also a [`Scalar`] over itself, so code generic over
/// `Scalar` runs directly on bare floats. The extra methods here are the
/// non-differentiable float operations (comparisons, rounding, classify)
/// that only plain-float code paths need.
pub trait Real:
    Scalar<R = Self>
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + fmt::Display
    + fmt::LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, for literals in generic code.
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn floor(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn atan2(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar_for_float {
    ($f:ty) => {
        impl Scalar for $f {
            type R = $f;

            #[inline]
            fn primal(self) -> $f {
                self
            }
            #[inline]
            fn lift(self, v: $f) -> $f {
                v
            }
            #[inline]
            fn exp(self) -> Self {
                <$f>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$f>::ln(self)
            }
            #[inline]
            fn sin(self) -> Self {
                <$f>::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                <$f>::cos(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$f>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$f>::tanh(self)
            }
            #[inline]
            fn recip(self) -> Self {
                <$f>::recip(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$f>::max(self, other)
            }
        }

        impl Real for $f {
            #[inline]
            fn of(v: f64) -> Self {
                v as $f
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$f>::abs(self)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$f>::min(self, other)
            }
            #[inline]
            fn floor(self) -> Self {
                <$f>::floor(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$f>::powi(self, n)
            }
            #[inline]
            fn atan2(self, other: Self) -> Self {
                <$f>::atan2(self, other)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$f>::is_nan(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$f>::is_finite(self)
            }
        }
    };
}

impl_scalar_for_float!(f32);
impl_scalar_for_float!(f64);

/// Numerically stable softplus built from registered primitives only:
/// `softplus(x) = m + ln(exp(-m) + exp(x - m))` with `m = max(x, 0)`.
///
/// Both exponent arguments are non-positive, so the composition never
/// overflows; used as the density head activation.
pub fn softplus<S: Scalar>(x: S) -> S {
    let m = x.max(x.lift(S::R::of(0.0)));
    m + ((-m).exp() + (x - m).exp()).ln()
}

/// Sigmoid written through tanh so saturated inputs keep finite adjoints:
/// `0.5 * (tanh(x / 2) + 1)`. Used as the color head activation.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let half = x.lift(S::R::of(0.5));
    let one = x.lift(S::R::of(1.0));
    half * ((x * half).tanh() + one)
}
