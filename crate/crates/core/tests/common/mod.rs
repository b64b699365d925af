//! Independent oracles shared by the integration tests: dense DFT matrices,
//! a complex linear solver, and a brute-force circular convolution.
#![allow(dead_code)]

use std::f64::consts::PI;

use dealias_core::network::Kernel;
use dealias_core::numerics::Stack;
use dealias_core::{ComplexImageStack, SamplingMask, Shape};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub fn random_stack<D>(shape: Shape, rng: &mut ChaCha8Rng) -> Stack<D> {
    Stack::from_fn(shape, |_, _, _| random_complex(rng))
}

/// Centered unitary 1D DFT: DC sits at index `n / 2` on both sides.
pub fn centered_dft_1d(n: usize) -> Vec<Vec<Complex64>> {
    let c = (n / 2) as f64;
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|k| {
            (0..n)
                .map(|m| Complex64::from_polar(scale, -2.0 * PI * (k as f64 - c) * (m as f64 - c) / n as f64))
                .collect()
        })
        .collect()
}

/// Dense 2D centered DFT acting on row-major `h x w` vectors.
pub fn centered_dft_2d(h: usize, w: usize) -> Vec<Vec<Complex64>> {
    let (fy, fx) = (centered_dft_1d(h), centered_dft_1d(w));
    let n = h * w;
    let mut out = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for ky in 0..h {
        for kx in 0..w {
            for y in 0..h {
                for x in 0..w {
                    out[ky * w + kx][y * w + x] = fy[ky][y] * fx[kx][x];
                }
            }
        }
    }
    out
}

pub fn adjoint(a: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j].conj()).collect()).collect()
}

pub fn matvec(a: &[Vec<Complex64>], x: &[Complex64]) -> Vec<Complex64> {
    a.iter().map(|row| row.iter().zip(x).map(|(u, v)| u * v).sum()).collect()
}

pub fn matmul(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let bt = adjoint(b);
    a.iter()
        .map(|row| bt.iter().map(|col| row.iter().zip(col).map(|(u, v)| u * v.conj()).sum()).collect())
        .collect()
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<Complex64>>, mut b: Vec<Complex64>) -> Vec<Complex64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for k in col..n {
                let t = a[col][k];
                a[row][k] -= f * t;
            }
            let t = b[col];
            b[row] -= f * t;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let s: Complex64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Minimizer of `0.5 ||M F x - M y||^2 + (rho / 2) ||x - anchor||^2` for one
/// coil, via the dense normal equations `(F^H M F + rho I) x = F^H M y + rho anchor`.
pub fn dense_recon(mask: &SamplingMask, y: &[Complex64], anchor: &[Complex64], rho: f64) -> Vec<Complex64> {
    let (h, w) = (mask.height(), mask.width());
    let n = h * w;
    let f = centered_dft_2d(h, w);
    let masked: Vec<Vec<Complex64>> = f
        .iter()
        .zip(mask.bits())
        .map(|(row, &m)| if m { row.clone() } else { vec![Complex64::new(0.0, 0.0); n] })
        .collect();
    let fh = adjoint(&f);
    let mut normal = matmul(&fh, &masked);
    for (i, row) in normal.iter_mut().enumerate() {
        row[i] += rho;
    }
    let my: Vec<Complex64> = y.iter().zip(mask.bits()).map(|(&v, &m)| if m { v } else { Complex64::new(0.0, 0.0) }).collect();
    let rhs: Vec<Complex64> = matvec(&fh, &my).iter().zip(anchor).map(|(a, b)| a + b * rho).collect();
    solve(normal, rhs)
}

/// The quadratic minimized by `dense_recon`.
pub fn recon_objective(mask: &SamplingMask, y: &[Complex64], anchor: &[Complex64], rho: f64, x: &[Complex64]) -> f64 {
    let f = centered_dft_2d(mask.height(), mask.width());
    let fx = matvec(&f, x);
    let data: f64 = fx
        .iter()
        .zip(y)
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b).norm_sqr())
        .sum();
    let prox: f64 = x.iter().zip(anchor).map(|(a, b)| (a - b).norm_sqr()).sum();
    0.5 * data + 0.5 * rho * prox
}

/// `out(j,y,x) = bias(1+i) + sum_{a,b,c} w[a][b][c] * in(j+a-1, y+b-1, x+c-1)`,
/// indices wrapping in every axis.
pub fn naive_circular_conv(input: &ComplexImageStack, kernel: &Kernel, bias: f64) -> ComplexImageStack {
    let s = input.shape();
    let wrap = |i: usize, d: usize, n: usize| (i + n + d - 1) % n;
    ComplexImageStack::from_fn(s, |j, y, x| {
        let mut acc = Complex64::new(bias, bias);
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let v = input.get(wrap(j, a, s.coils), wrap(y, b, s.height), wrap(x, c, s.width));
                    acc += v * kernel[a * 9 + b * 3 + c];
                }
            }
        }
        acc
    })
}

pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> SamplingMask {
    loop {
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
        if bits.iter().any(|&b| b) {
            return SamplingMask::from_bits(h, w, bits, dealias_core::MaskPattern::Random1D, 2.0, 0, 0).unwrap();
        }
    }
}
