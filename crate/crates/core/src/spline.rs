//! Uniform cubic B-spline basis on a bounded interval.
//!
//! The knot vector extends `DEGREE` steps past each end of the domain, so a
//! grid of `G` intervals carries `G + DEGREE` basis functions and every
//! in-domain point sits under exactly `DEGREE + 1` of them. Inputs are
//! clamped to the domain before evaluation; outside it the spline continues
//! as the boundary value, which keeps activations bounded no matter what the
//! preceding layer emits.

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;

#[derive(Clone, Debug)]
pub struct SplineGrid {
    lo: f64,
    step: f64,
    intervals: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, intervals: usize) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::config("spline", format!("empty domain [{lo}, {hi}]")));
        }
        if intervals == 0 {
            return Err(Error::config("spline", "need at least one interval"));
        }
        let step = (hi - lo) / intervals as f64;
        let knots = (0..intervals + 2 * DEGREE + 1)
            .map(|i| lo + (i as f64 - DEGREE as f64) * step)
            .collect();
        Ok(SplineGrid { lo, step, intervals, knots })
    }

    /// Grid used by every spline activation in the model: eight intervals on
    /// `[-3, 3]`, eleven basis functions.
    pub fn standard() -> Self {
        SplineGrid::new(-3.0, 3.0, 8).expect("standard grid")
    }

    pub fn num_basis(&self) -> usize {
        self.intervals + DEGREE
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.lo + self.step * self.intervals as f64)
    }

    fn clamp(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        x.clamp(lo, hi)
    }

    /// Index of the knot span containing the (clamped) point, expressed in
    /// knot-vector coordinates: `knots[span] <= x < knots[span + 1]`.
    fn find_span(&self, x: f64) -> usize {
        let cell = ((x - self.lo) / self.step).floor();
        let cell = (cell.max(0.0) as usize).min(self.intervals - 1);
        cell + DEGREE
    }

    /// Nonzero basis values at `x`: returns the first basis index and the
    /// `DEGREE + 1` values `B[first], ..., B[first + DEGREE]`.
    pub fn basis_nonzero(&self, x: f64) -> (usize, [f64; DEGREE + 1]) {
        let x = self.clamp(x);
        let span = self.find_span(x);
        let mut vals = [0.0; DEGREE + 1];
        vals[0] = 1.0;
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        for j in 1..=DEGREE {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        (span - DEGREE, vals)
    }

    /// Nonzero basis values and derivatives at `x`. The derivative of a
    /// degree-k spline over a uniform grid is the scaled difference of the
    /// two degree-(k-1) splines it straddles. Clamped points report the
    /// one-sided interior derivative.
    pub fn basis_and_deriv_nonzero(&self, x: f64) -> (usize, [f64; DEGREE + 1], [f64; DEGREE + 1]) {
        let x = self.clamp(x);
        let span = self.find_span(x);
        // Degree DEGREE-1 values over the same span.
        let mut lower = [0.0; DEGREE];
        lower[0] = 1.0;
        let mut left = [0.0; DEGREE];
        let mut right = [0.0; DEGREE];
        for j in 1..DEGREE {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = lower[r] / (right[r + 1] + left[j - r]);
                lower[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            lower[j] = saved;
        }
        // One more Cox-de Boor step lifts to degree DEGREE.
        let mut vals = [0.0; DEGREE + 1];
        vals[..DEGREE].copy_from_slice(&lower);
        {
            let j = DEGREE;
            let mut leftj = [0.0; DEGREE + 1];
            let mut rightj = [0.0; DEGREE + 1];
            for jj in 1..=DEGREE {
                leftj[jj] = x - self.knots[span + 1 - jj];
                rightj[jj] = self.knots[span + jj] - x;
            }
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (rightj[r + 1] + leftj[j - r]);
                vals[r] = saved + rightj[r + 1] * tmp;
                saved = leftj[j - r] * tmp;
            }
            vals[j] = saved;
        }
        // d/dx B_{m,k} = (B_{m,k-1} - B_{m+1,k-1}) / step on a uniform grid.
        let mut derivs = [0.0; DEGREE + 1];
        for r in 0..=DEGREE {
            let a = if r == 0 { 0.0 } else { lower[r - 1] };
            let b = if r < DEGREE { lower[r] } else { 0.0 };
            derivs[r] = (a - b) / self.step;
        }
        (span - DEGREE, vals, derivs)
    }

    /// Evaluate `sum_m coefs[m] * B_m(x)`.
    pub fn eval(&self, coefs: &[f64], x: f64) -> f64 {
        debug_assert_eq!(coefs.len(), self.num_basis());
        let (first, vals) = self.basis_nonzero(x);
        vals.iter().enumerate().map(|(r, v)| v * coefs[first + r]).sum()
    }

    pub fn eval_with_deriv(&self, coefs: &[f64], x: f64) -> (f64, f64) {
        debug_assert_eq!(coefs.len(), self.num_basis());
        let (first, vals, ders) = self.basis_and_deriv_nonzero(x);
        let mut y = 0.0;
        let mut dy = 0.0;
        for r in 0..=DEGREE {
            y += vals[r] * coefs[first + r];
            dy += ders[r] * coefs[first + r];
        }
        (y, dy)
    }
}
