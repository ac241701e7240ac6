//! Discrete Fourier transform over a torus.
//!
//! Convention: `f^(theta_j) = sum_u exp(-i theta_j . u) f(u)` and the inverse
//! carries the `1/N`. For real even tables (everything the moment formulas
//! transform) both directions are real.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::kernel::{KernelSpec, TorusGrid};

fn transform_axes(grid: &TorusGrid, data: &mut [Complex64], inverse: bool) {
    let sides = grid.sides();
    let mut planner = FftPlanner::<f64>::new();
    let total = data.len();
    let mut stride = 1usize;
    for &len in sides.iter().rev() {
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let block = stride * len;
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = data[outer + inner + k * stride];
                }
                fft.process(&mut line);
                for (k, v) in line.iter().enumerate() {
                    data[outer + inner + k * stride] = *v;
                }
            }
        }
        stride = block;
    }
}

pub fn forward(grid: &TorusGrid, table: &[f64]) -> Vec<Complex64> {
    assert_eq!(table.len(), grid.num_sites());
    let mut data: Vec<Complex64> = table.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform_axes(grid, &mut data, false);
    data
}

pub fn inverse(grid: &TorusGrid, spectrum: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(spectrum.len(), grid.num_sites());
    let mut data = spectrum.to_vec();
    transform_axes(grid, &mut data, true);
    let scale = 1.0 / grid.num_sites() as f64;
    data.iter_mut().for_each(|v| *v *= scale);
    data
}

/// Inverse transform of a real even spectrum; the imaginary part is dropped.
pub fn inverse_real(grid: &TorusGrid, spectrum: &[f64]) -> Vec<f64> {
    let data: Vec<Complex64> = spectrum.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    inverse(grid, &data).into_iter().map(|c| c.re).collect()
}

/// `a^(theta_j)` at every torus frequency, evaluated from the kernel entries.
pub fn symbol_table(kernel: &KernelSpec, grid: &TorusGrid) -> Vec<f64> {
    (0..grid.num_sites())
        .map(|j| kernel.fourier_symbol(&grid.frequency(j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_two_dimensional() {
        let grid = TorusGrid::new(vec![4, 6]).unwrap();
        let f: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = inverse(&grid, &forward(&grid, &f));
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12);
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let grid = TorusGrid::new(vec![5, 3]).unwrap();
        let mut f = vec![0.0; 15];
        f[0] = 1.0;
        for c in forward(&grid, &f) {
            assert!((c.re - 1.0).abs() < 1e-14 && c.im.abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_direct_sum() {
        let grid = TorusGrid::new(vec![3, 4]).unwrap();
        let f: Vec<f64> = (0..12).map(|i| (i * i % 7) as f64).collect();
        let fast = forward(&grid, &f);
        for j in 0..12 {
            let theta = grid.frequency(j);
            let mut acc = Complex64::new(0.0, 0.0);
            for (u, &fu) in f.iter().enumerate() {
                let c = grid.coords(u);
                let phase: f64 = c.iter().zip(&theta).map(|(&x, &t)| x as f64 * t).sum();
                acc += Complex64::from_polar(fu, -phase);
            }
            assert!((acc - fast[j]).norm() < 1e-11);
        }
    }
}
