//! Working precision of the tensor engine.
//!
//! Buffers are stored as `f64`. In [`Precision::Single`] (the default) every
//! value produced by an op or an optimizer update is rounded to the nearest
//! `f32`, so training behaves like 32-bit arithmetic and parameters serialize
//! losslessly to 32-bit checkpoints. [`Precision::Double`] keeps full 64-bit
//! values and is what the gradient checker runs under.
//!
//! The setting is per thread so concurrent runs (and parallel tests) do not
//! observe each other's mode.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

thread_local! {
    static CURRENT: Cell<Precision> = const { Cell::new(Precision::Single) };
}

pub fn precision() -> Precision {
    CURRENT.with(|c| c.get())
}

pub fn set_precision(p: Precision) {
    CURRENT.with(|c| c.set(p));
}

/// Runs `f` with the given precision, restoring the previous mode afterwards.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            set_precision(self.0);
        }
    }
    let _restore = Restore(precision());
    set_precision(p);
    f()
}

#[inline]
pub fn round(x: f64) -> f64 {
    match precision() {
        Precision::Single => x as f32 as f64,
        Precision::Double => x,
    }
}

pub fn round_slice(xs: &mut [f64]) {
    if precision() == Precision::Single {
        for x in xs {
            *x = *x as f32 as f64;
        }
    }
}
