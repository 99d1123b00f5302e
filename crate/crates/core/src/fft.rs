//! Multidimensional FFTs on the periodic lattice, built from 1D `rustfft` plans
//! applied axis by axis.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::LatticeGrid;

/// Forward/inverse transform pair for one lattice. Plans are immutable and
/// shared freely across threads.
#[derive(Clone)]
pub struct Spectral {
    grid: LatticeGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: LatticeGrid) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            grid,
            forward: planner.plan_fft_forward(grid.side()),
            inverse: planner.plan_fft_inverse(grid.side()),
        }
    }

    pub fn grid(&self) -> LatticeGrid {
        self.grid
    }

    /// Unnormalized forward transform `u^(k) = sum_x u(x) e^{-i k.x}`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.forward);
    }

    /// Inverse transform including the `1/N^d` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inverse);
        let scale = 1.0 / self.grid.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut data: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut data);
        data.into_iter().map(|v| v.re).collect()
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.grid.side();
        assert_eq!(data.len(), self.grid.len(), "buffer does not match grid");
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        let mut block = Vec::new();
        for axis in 0..self.grid.dim() {
            let stride = self.grid.stride(axis);
            if stride == 1 {
                plan.process_with_scratch(data, &mut scratch);
                continue;
            }
            // Transpose each (n x stride) block so the axis becomes contiguous.
            let block_len = n * stride;
            block.resize(block_len, Complex64::new(0.0, 0.0));
            for chunk in data.chunks_exact_mut(block_len) {
                for k in 0..n {
                    for s in 0..stride {
                        block[s * n + k] = chunk[k * stride + s];
                    }
                }
                plan.process_with_scratch(&mut block, &mut scratch);
                for k in 0..n {
                    for s in 0..stride {
                        chunk[k * stride + s] = block[s * n + k];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_direct_dft_in_2d() {
        let grid = LatticeGrid::new(2, 4).unwrap();
        let spec = Spectral::new(grid);
        let u: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
        let hat = spec.forward_real(&u);
        for k0 in 0..4 {
            for k1 in 0..4 {
                let mut acc = Complex64::new(0.0, 0.0);
                for x0 in 0..4 {
                    for x1 in 0..4 {
                        let phase = -grid.frequency(k0) * x0 as f64 - grid.frequency(k1) * x1 as f64;
                        acc += u[grid.index(&[x0, x1])] * Complex64::from_polar(1.0, phase);
                    }
                }
                let got = hat[grid.index(&[k0, k1])];
                assert!((got - acc).norm() < 1e-12);
            }
        }
        let back = spec.inverse_real(hat);
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
