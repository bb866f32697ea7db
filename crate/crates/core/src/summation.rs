//! Compensated accumulation.
//!
//! Sums are accumulated with the error-free transformation TwoSum: every
//! addition carries its exact rounding error into a second accumulator. The
//! result is independent of how work is split across threads as long as
//! each accumulator sees its terms in a fixed order.

use crate::Vec2;

/// Scalar TwoSum accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    err: f64,
}

impl CompensatedSum {
    pub const fn new() -> Self {
        Self { sum: 0.0, err: 0.0 }
    }

    #[inline(always)]
    pub fn add(&mut self, value: f64) {
        let s = self.sum + value;
        let bp = s - self.sum;
        self.err += (self.sum - (s - bp)) + (value - bp);
        self.sum = s;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.err
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Componentwise compensated accumulator for plane vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedVec2 {
    x: CompensatedSum,
    y: CompensatedSum,
}

impl CompensatedVec2 {
    pub const fn new() -> Self {
        Self {
            x: CompensatedSum::new(),
            y: CompensatedSum::new(),
        }
    }

    #[inline(always)]
    pub fn add(&mut self, v: Vec2) {
        self.x.add(v.x);
        self.y.add(v.y);
    }

    #[inline]
    pub fn value(&self) -> Vec2 {
        Vec2::new(self.x.value(), self.y.value())
    }
}

/// Compensated sum of a slice in index order.
pub fn compensated_sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<CompensatedSum>().value()
}
