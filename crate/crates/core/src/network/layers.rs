//! The six layer types of one unrolled iteration, plus the circular 3D
//! correlation kernels they share with the backward pass.
//!
//! Convolutions are CNN-style correlations with periodic boundaries on all
//! three axes:
//! `out(j, y, x) = sum_{a,b,c} w[a,b,c] * in(j + a - 1, y + b - 1, x + c - 1) + bias (1 + i)`.
//! Real kernels act on the real and imaginary parts independently.

use num_complex::Complex64;

use super::params::{flipped, ConvKernelBank, Kernel, PiecewiseLinearFunction};
use crate::error::{Error, Result};
use crate::numerics::{fft2_centered, ifft2_centered, ComplexImageStack, KSpaceStack, Shape, Stack};
use crate::sampling::SamplingMask;

#[inline]
fn wrap(i: usize, offset: usize, n: usize) -> usize {
    // offset in {0, 1, 2} stands for {-1, 0, +1}
    (i + n + offset - 1) % n
}

/// `out += w (*) input` (circular correlation).
pub(crate) fn correlate_acc(out: &mut [Complex64], input: &[Complex64], kernel: &Kernel, shape: Shape) {
    let (h, w) = (shape.height, shape.width);
    for j in 0..shape.coils {
        for a in 0..3 {
            let src_coil = wrap(j, a, shape.coils);
            for b in 0..3 {
                let taps = [kernel[a * 9 + b * 3], kernel[a * 9 + b * 3 + 1], kernel[a * 9 + b * 3 + 2]];
                if taps == [0.0; 3] {
                    continue;
                }
                for y in 0..h {
                    let sy = wrap(y, b, h);
                    let src = &input[(src_coil * h + sy) * w..(src_coil * h + sy + 1) * w];
                    let dst = &mut out[(j * h + y) * w..(j * h + y + 1) * w];
                    shifted_axpy(dst, src, taps);
                }
            }
        }
    }
}

/// `dst[x] += t0 src[x-1] + t1 src[x] + t2 src[x+1]`, periodic in `x`.
#[inline]
fn shifted_axpy(dst: &mut [Complex64], src: &[Complex64], taps: [f64; 3]) {
    let w = dst.len();
    let [t0, t1, t2] = taps;
    if t1 != 0.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s * t1;
        }
    }
    if t0 != 0.0 {
        dst[0] += src[w - 1] * t0;
        for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
            *d += s * t0;
        }
    }
    if t2 != 0.0 {
        for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
            *d += s * t2;
        }
        dst[w - 1] += src[0] * t2;
    }
}

/// `out += w^T (*) input`, the adjoint of [`correlate_acc`].
pub(crate) fn correlate_adjoint_acc(out: &mut [Complex64], input: &[Complex64], kernel: &Kernel, shape: Shape) {
    correlate_acc(out, input, &flipped(kernel), shape);
}

#[inline]
fn real_dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// `grad[a,b,c] += sum Re(conj(upstream) * input(shifted by (a,b,c)))`.
pub(crate) fn kernel_grad_acc(grad: &mut Kernel, upstream: &[Complex64], input: &[Complex64], shape: Shape) {
    let (h, w) = (shape.height, shape.width);
    for j in 0..shape.coils {
        for a in 0..3 {
            let src_coil = wrap(j, a, shape.coils);
            for b in 0..3 {
                let mut acc = [0.0; 3];
                for y in 0..h {
                    let sy = wrap(y, b, h);
                    let src = &input[(src_coil * h + sy) * w..(src_coil * h + sy + 1) * w];
                    let g = &upstream[(j * h + y) * w..(j * h + y + 1) * w];
                    acc[1] += real_dot(g, src);
                    acc[0] += g[0].re * src[w - 1].re + g[0].im * src[w - 1].im + real_dot(&g[1..], &src[..w - 1]);
                    acc[2] += real_dot(&g[..w - 1], &src[1..]) + g[w - 1].re * src[0].re + g[w - 1].im * src[0].im;
                }
                for c in 0..3 {
                    grad[a * 9 + b * 3 + c] += acc[c];
                }
            }
        }
    }
}

/// Gradient of a bias added to both parts: the sum of real and imaginary upstream gradients.
pub(crate) fn bias_grad(upstream: &[Complex64]) -> f64 {
    upstream.iter().map(|z| z.re + z.im).sum()
}

fn check_shape<D>(a: &Stack<D>, b: &Stack<D>, what: &str) -> Result<()> {
    a.check_same_shape(b, what)
}

fn check_mask(mask: &SamplingMask, shape: Shape) -> Result<()> {
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs data {shape}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Intermediate k-space quantities of a Recon layer, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ReconCache {
    /// `F (V - b)`.
    pub anchor: KSpaceStack,
}

pub(crate) fn recon_forward(
    measured: &KSpaceStack,
    weights: &[f64],
    v: &ComplexImageStack,
    b: &ComplexImageStack,
    rho: f64,
) -> (ComplexImageStack, ReconCache) {
    let shape = v.shape();
    let plane = shape.plane();
    let anchor = fft2_centered(&v.sub(b));
    let mut xhat = KSpaceStack::zeros(shape);
    for ((out, (y, g)), i) in xhat
        .as_mut_slice()
        .iter_mut()
        .zip(measured.as_slice().iter().zip(anchor.as_slice()))
        .zip(0..)
    {
        let m = weights[i % plane];
        *out = (y * m + g * rho) / (m + rho);
    }
    (ifft2_centered(&xhat), ReconCache { anchor })
}

/// Data-consistency layer
/// `X = F^H (M^T M + rho I)^{-1} [M^T Y + rho F (V - b)]`, evaluated
/// elementwise in k-space.
pub fn recon_layer(
    y: &KSpaceStack,
    mask: &SamplingMask,
    v: &ComplexImageStack,
    b: &ComplexImageStack,
    rho: f64,
) -> Result<ComplexImageStack> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho must be > 0, got {rho}")));
    }
    let shape = y.shape();
    check_mask(mask, shape)?;
    if v.shape() != shape || b.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "recon inputs: Y {shape}, V {}, b {}",
            v.shape(),
            b.shape()
        )));
    }
    let weights: Vec<f64> = (0..shape.plane()).map(|i| mask.weight(i)).collect();
    let measured = crate::numerics::apply_mask(y, mask)?;
    Ok(recon_forward(&measured, &weights, v, b, rho).0)
}

pub(crate) fn conv_bank_forward(v: &ComplexImageStack, bank: &ConvKernelBank) -> Vec<ComplexImageStack> {
    let shape = v.shape();
    bank.kernels
        .iter()
        .zip(&bank.bias)
        .map(|(k, &bias)| {
            let mut out = vec![Complex64::new(bias, bias); shape.len()];
            correlate_acc(&mut out, v.as_slice(), k, shape);
            Stack::from_vec_unchecked(shape, out)
        })
        .collect()
}

/// Conv1: one feature stack per filter, `C_l = w_l (*) V + b_l`.
pub fn conv3_forward(v: &ComplexImageStack, bank: &ConvKernelBank) -> Result<Vec<ComplexImageStack>> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty kernel bank".into()));
    }
    Ok(conv_bank_forward(v, bank))
}

pub(crate) fn plf_apply(feature: &ComplexImageStack, plf: &PiecewiseLinearFunction) -> ComplexImageStack {
    Stack::from_vec_unchecked(
        feature.shape(),
        feature
            .as_slice()
            .iter()
            .map(|z| Complex64::new(plf.evaluate(z.re), plf.evaluate(z.im)))
            .collect(),
    )
}

/// Nonlinear layer: the piecewise-linear function applied to every real and
/// imaginary part of every feature.
pub fn plf_forward(features: &[ComplexImageStack], plf: &PiecewiseLinearFunction) -> Vec<ComplexImageStack> {
    features.iter().map(|f| plf_apply(f, plf)).collect()
}

pub(crate) fn conv_bank_fuse(features: &[ComplexImageStack], bank: &ConvKernelBank) -> ComplexImageStack {
    let shape = features[0].shape();
    let total_bias: f64 = bank.bias.iter().sum();
    let mut out = vec![Complex64::new(total_bias, total_bias); shape.len()];
    for (f, k) in features.iter().zip(&bank.kernels) {
        correlate_acc(&mut out, f.as_slice(), k, shape);
    }
    Stack::from_vec_unchecked(shape, out)
}

/// Conv2: `C_2 = sum_l (w_l (*) h_l + b_l)`, fusing `L` features into one stack.
pub fn conv3_fuse(features: &[ComplexImageStack], bank: &ConvKernelBank) -> Result<ComplexImageStack> {
    if features.len() != bank.len() || features.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} features for a bank of {} filters",
            features.len(),
            bank.len()
        )));
    }
    let shape = features[0].shape();
    if features.iter().any(|f| f.shape() != shape) {
        return Err(Error::ShapeMismatch("features differ in shape".into()));
    }
    Ok(conv_bank_fuse(features, bank))
}

/// Addition layer: `V_new = mu1 V_prev + mu2 (X + b) - C_2`.
pub fn addition_layer(
    v_prev: &ComplexImageStack,
    x: &ComplexImageStack,
    b: &ComplexImageStack,
    c2: &ComplexImageStack,
    mu1: f64,
    mu2: f64,
) -> Result<ComplexImageStack> {
    check_shape(v_prev, x, "addition X")?;
    check_shape(v_prev, b, "addition b")?;
    check_shape(v_prev, c2, "addition C2")?;
    let data = v_prev
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .zip(b.as_slice().iter().zip(c2.as_slice()))
        .map(|((v, x), (b, c))| v * mu1 + (x + b) * mu2 - c)
        .collect();
    Ok(Stack::from_vec_unchecked(v_prev.shape(), data))
}

/// Multiplier update: `b_new = b_prev + eta (X - V)`.
pub fn multiplier_layer(
    b_prev: &ComplexImageStack,
    x: &ComplexImageStack,
    v: &ComplexImageStack,
    eta: f64,
) -> Result<ComplexImageStack> {
    check_shape(b_prev, x, "multiplier X")?;
    check_shape(b_prev, v, "multiplier V")?;
    let data = b_prev
        .as_slice()
        .iter()
        .zip(x.as_slice().iter().zip(v.as_slice()))
        .map(|(b, (x, v))| b + (x - v) * eta)
        .collect();
    Ok(Stack::from_vec_unchecked(b_prev.shape(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::{tap, KERNEL_TAPS};
    use crate::sampling::gen_uniform_1d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack<D>(shape: Shape, rng: &mut ChaCha8Rng) -> Stack<D> {
        Stack::from_fn(shape, |_, _, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn random_kernel(rng: &mut ChaCha8Rng) -> Kernel {
        std::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }

    /// Naive triple loop with modular indexing.
    fn naive_correlate(input: &ComplexImageStack, k: &Kernel, bias: f64) -> ComplexImageStack {
        let s = input.shape();
        let (jn, hn, wn) = (s.coils as isize, s.height as isize, s.width as isize);
        ComplexImageStack::from_fn(s, |j, y, x| {
            let mut acc = Complex64::new(bias, bias);
            for a in 0..3isize {
                for b in 0..3isize {
                    for c in 0..3isize {
                        let jj = (j as isize + a - 1).rem_euclid(jn) as usize;
                        let yy = (y as isize + b - 1).rem_euclid(hn) as usize;
                        let xx = (x as isize + c - 1).rem_euclid(wn) as usize;
                        acc += input.get(jj, yy, xx) * k[(a * 9 + b * 3 + c) as usize];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn correlation_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [(2, 4, 4), (1, 3, 5), (3, 6, 2), (4, 8, 8)] {
            let shape = Shape::new(shape.0, shape.1, shape.2).unwrap();
            let v: ComplexImageStack = random_stack(shape, &mut rng);
            let k = random_kernel(&mut rng);
            let bank = ConvKernelBank::new(vec![k], vec![0.3]).unwrap();
            let fast = conv3_forward(&v, &bank).unwrap();
            assert!(fast[0].max_abs_diff(&naive_correlate(&v, &k, 0.3)) < 1e-12);
        }
    }

    #[test]
    fn impulse_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(2, 5, 5).unwrap();
        let v: ComplexImageStack = random_stack(shape, &mut rng);
        let mut k = [0.0; KERNEL_TAPS];
        k[tap(1, 1, 1)] = 1.0;
        let bank = ConvKernelBank::new(vec![k], vec![0.0]).unwrap();
        assert_eq!(conv3_forward(&v, &bank).unwrap()[0], v);
        let fused = conv3_fuse(&[v.clone()], &bank).unwrap();
        assert_eq!(fused, v);
    }

    #[test]
    fn bias_only_outputs() {
        let shape = Shape::new(2, 4, 4).unwrap();
        let zero = ComplexImageStack::zeros(shape);
        let bank = ConvKernelBank::new(vec![[0.5; KERNEL_TAPS]], vec![0.25]).unwrap();
        let out = conv3_forward(&zero, &bank).unwrap();
        assert!(out[0].as_slice().iter().all(|z| *z == Complex64::new(0.25, 0.25)));
        let two = ConvKernelBank::new(vec![[0.5; KERNEL_TAPS]; 2], vec![0.25, 0.5]).unwrap();
        let fused = conv3_fuse(&[zero.clone(), zero.clone()], &two).unwrap();
        assert!(fused.as_slice().iter().all(|z| *z == Complex64::new(0.75, 0.75)));
        assert!(conv3_fuse(&[zero], &two).is_err());
    }

    #[test]
    fn adjoint_correlation_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(2, 4, 4).unwrap();
        for _ in 0..10 {
            let x: ComplexImageStack = random_stack(shape, &mut rng);
            let kernels: Vec<Kernel> = (0..3).map(|_| random_kernel(&mut rng)).collect();
            let phi = ConvKernelBank::new(kernels, vec![0.0; 3]).unwrap();
            let phi_t = phi.adjoint_scaled(1.0);
            let features = conv3_forward(&x, &phi).unwrap();
            let back = conv3_fuse(&features, &phi_t).unwrap();
            let lhs = back.real_dot(&x);
            let rhs: f64 = features.iter().map(|f| f.norm_sqr()).sum();
            assert!((lhs - rhs).abs() < 1e-10 * rhs.max(1.0));
        }
    }

    #[test]
    fn kernel_gradient_matches_inner_products() {
        // d/dw_t <g, w (*) v> = <g, e_t (*) v>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(3, 4, 5).unwrap();
        let v: ComplexImageStack = random_stack(shape, &mut rng);
        let g: ComplexImageStack = random_stack(shape, &mut rng);
        let mut grad = [0.0; KERNEL_TAPS];
        kernel_grad_acc(&mut grad, g.as_slice(), v.as_slice(), shape);
        for t in 0..KERNEL_TAPS {
            let mut e = [0.0; KERNEL_TAPS];
            e[t] = 1.0;
            let expected = g.real_dot(&naive_correlate(&v, &e, 0.0));
            assert!((grad[t] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_kernel_annihilates_coil_constant_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plane: ComplexImageStack = random_stack(Shape::new(1, 6, 6).unwrap(), &mut rng);
        let shape = Shape::new(4, 6, 6).unwrap();
        let v = ComplexImageStack::from_fn(shape, |_, y, x| plane.get(0, y, x));
        let tv = crate::network::params::initial_filter_bank()[8];
        let bank = ConvKernelBank::new(vec![tv], vec![0.0]).unwrap();
        assert_eq!(conv3_forward(&v, &bank).unwrap()[0].norm(), 0.0);
    }

    #[test]
    fn plf_layer_identity_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = Shape::new(2, 4, 4).unwrap();
        let f: ComplexImageStack = random_stack(shape, &mut rng);
        let id = PiecewiseLinearFunction::identity(63, 1.0).unwrap();
        let out = plf_forward(std::slice::from_ref(&f), &id);
        assert!(out[0].max_abs_diff(&f) < 1e-15);
        let g = PiecewiseLinearFunction::new(vec![-1.0, 1.0], vec![0.0, 2.0]).unwrap();
        let z = ComplexImageStack::from_fn(shape, |_, _, _| Complex64::new(0.0, 3.0));
        assert!(plf_forward(&[z], &g)[0]
            .as_slice()
            .iter()
            .all(|v| *v == Complex64::new(1.0, 4.0)));
    }

    #[test]
    fn addition_and_multiplier_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(2, 4, 4).unwrap();
        let v: ComplexImageStack = random_stack(shape, &mut rng);
        let x: ComplexImageStack = random_stack(shape, &mut rng);
        let b: ComplexImageStack = random_stack(shape, &mut rng);
        let c: ComplexImageStack = random_stack(shape, &mut rng);
        let zero = ComplexImageStack::zeros(shape);

        assert_eq!(addition_layer(&v, &x, &b, &zero, 1.0, 0.0).unwrap(), v);
        assert_eq!(addition_layer(&v, &x, &zero, &zero, 0.0, 1.0).unwrap(), x);
        let out = addition_layer(&v, &x, &b, &c, 0.94, 0.06).unwrap();
        for i in 0..shape.len() {
            let (vi, xi, bi, ci) = (v.as_slice()[i], x.as_slice()[i], b.as_slice()[i], c.as_slice()[i]);
            let expected = Complex64::new(
                0.94 * vi.re + 0.06 * (xi.re + bi.re) - ci.re,
                0.94 * vi.im + 0.06 * (xi.im + bi.im) - ci.im,
            );
            assert!((out.as_slice()[i] - expected).norm() < 1e-14);
        }

        assert_eq!(multiplier_layer(&b, &x, &v, 0.0).unwrap(), b);
        assert_eq!(multiplier_layer(&b, &x, &x, 1.8).unwrap(), b);
        let m = multiplier_layer(&b, &x, &v, 1.8).unwrap();
        for i in 0..shape.len() {
            let expected = b.as_slice()[i] + (x.as_slice()[i] - v.as_slice()[i]) * 1.8;
            assert!((m.as_slice()[i] - expected).norm() < 1e-14);
        }
        let other = ComplexImageStack::zeros(Shape::new(1, 4, 4).unwrap());
        assert!(multiplier_layer(&b, &x, &other, 1.0).is_err());
    }

    #[test]
    fn recon_layer_closed_form_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape::new(2, 8, 8).unwrap();
        let y: KSpaceStack = random_stack(shape, &mut rng);
        let zero = ComplexImageStack::zeros(shape);
        let full = SamplingMask::full(8, 8).unwrap();
        let x = recon_layer(&y, &full, &zero, &zero, 1.0).unwrap();
        assert!(x.max_abs_diff(&ifft2_centered(&y).scaled(0.5)) < 1e-14);

        let mask = gen_uniform_1d(8, 8, 2.0, 2, 0).unwrap();
        let v: ComplexImageStack = random_stack(shape, &mut rng);
        let b: ComplexImageStack = random_stack(shape, &mut rng);
        let kx = fft2_centered(&recon_layer(&y, &mask, &v, &b, 0.2).unwrap());
        let g = fft2_centered(&v.sub(&b));
        for j in 0..2 {
            for r in 0..8 {
                for c in 0..8 {
                    if !mask.get(r, c) {
                        assert!((kx.get(j, r, c) - g.get(j, r, c)).norm() < 1e-13);
                    }
                }
            }
        }
        assert!(recon_layer(&y, &mask, &v, &b, 0.0).is_err());
        assert!(recon_layer(&y, &mask, &v, &b, -1.0).is_err());
    }
}
