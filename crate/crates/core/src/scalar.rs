//! Scalar abstraction so the whole stack runs at f32 (training) or f64
//! (finite-difference checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use num_traits::Float;

pub trait Scalar: Float + Debug + Display + Sum + Send + Sync + 'static {
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64s(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64s(self) -> f64 {
        self
    }
}

/// Scalars that can live in a lock-free shared parameter store.
///
/// Loads and stores go through an atomic of the same width, so concurrent
/// writers can race on a block but never tear an individual element.
pub trait AtomicScalar: Scalar {
    type Atom: Send + Sync;

    fn atom(v: Self) -> Self::Atom;
    fn load(a: &Self::Atom) -> Self;
    fn store(a: &Self::Atom, v: Self);
}

impl AtomicScalar for f32 {
    type Atom = AtomicU32;

    fn atom(v: Self) -> Self::Atom {
        AtomicU32::new(v.to_bits())
    }

    fn load(a: &Self::Atom) -> Self {
        f32::from_bits(a.load(Ordering::Relaxed))
    }

    fn store(a: &Self::Atom, v: Self) {
        a.store(v.to_bits(), Ordering::Relaxed);
    }
}

impl AtomicScalar for f64 {
    type Atom = AtomicU64;

    fn atom(v: Self) -> Self::Atom {
        AtomicU64::new(v.to_bits())
    }

    fn load(a: &Self::Atom) -> Self {
        f64::from_bits(a.load(Ordering::Relaxed))
    }

    fn store(a: &Self::Atom, v: Self) {
        a.store(v.to_bits(), Ordering::Relaxed);
    }
}
