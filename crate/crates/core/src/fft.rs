//! Two-dimensional FFT on row-major `n × n` grids.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    /// `x̂(k) = Σ_ℓ x(ℓ) e^{−2πi k·ℓ/n}` in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.fwd);
    }

    /// Unnormalized inverse, `Σ_k x̂(k) e^{+2πi k·ℓ/n}`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inv);
    }

    fn run(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        assert_eq!(data.len(), n * n);
        plan.process(data);
        transpose(data, n);
        plan.process(data);
        transpose(data, n);
    }
}

fn transpose(d: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            d.swap(i * n + j, j * n + i);
        }
    }
}

/// Signed frequency of index `i` on an `n`-point grid.
pub fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}
