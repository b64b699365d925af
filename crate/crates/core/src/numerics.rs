//! Multi-coil complex arrays and the centered unitary 2D Fourier transform.
//!
//! Arrays are stored coil-major, row-major: element `(j, y, x)` lives at
//! `(j * height + y) * width + x`. The Fourier domain is centered, with the DC
//! component at `(height / 2, width / 2)` (floor division), and the transform is
//! scaled by `1 / sqrt(height * width)` so that it is unitary.

use std::cell::RefCell;
use std::collections::HashMap;
use std::marker::PhantomData;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::sampling::SamplingMask;

/// Dimensions of a multi-coil stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub coils: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(coils: usize, height: usize, width: usize) -> Result<Self> {
        if coils < 1 || height < 2 || width < 2 {
            return Err(Error::InvalidShape(format!(
                "need coils >= 1, height >= 2, width >= 2; got ({coils}, {height}, {width})"
            )));
        }
        Ok(Self {
            coils,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.coils * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, coil: usize, y: usize, x: usize) -> usize {
        (coil * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.coils, self.height, self.width)
    }
}

/// Marker for image-domain stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Image;

/// Marker for (centered) frequency-domain stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KSpace;

/// A `coils x height x width` array of complex values tagged with its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<D> {
    shape: Shape,
    data: Vec<Complex64>,
    _domain: PhantomData<D>,
}

pub type ComplexImageStack = Stack<Image>;
pub type KSpaceStack = Stack<KSpace>;

impl<D> Stack<D> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.len()],
            _domain: PhantomData,
        }
    }

    /// Wraps `data`, rejecting length mismatches and non-finite entries.
    pub fn from_vec(shape: Shape, data: Vec<Complex64>) -> Result<Self> {
        Shape::new(shape.coils, shape.height, shape.width)?;
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("stack data".into()));
        }
        Ok(Self {
            shape,
            data,
            _domain: PhantomData,
        })
    }

    /// Builds a stack from an element generator `f(coil, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for j in 0..shape.coils {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(j, y, x));
                }
            }
        }
        Self {
            shape,
            data,
            _domain: PhantomData,
        }
    }

    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self {
            shape,
            data,
            _domain: PhantomData,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, coil: usize, y: usize, x: usize) -> Complex64 {
        self.data[self.shape.index(coil, y, x)]
    }

    pub fn set(&mut self, coil: usize, y: usize, x: usize, value: Complex64) {
        let i = self.shape.index(coil, y, x);
        self.data[i] = value;
    }

    pub fn coil(&self, coil: usize) -> &[Complex64] {
        let n = self.shape.plane();
        &self.data[coil * n..(coil + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Euclidean norm over all real and imaginary parts.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real inner product `Re <self, other>`, i.e. the dot product of the
    /// stacks viewed as real vectors of twice the length.
    pub fn real_dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    /// Complex inner product `sum conj(self) * other`.
    pub fn inner(&self, other: &Self) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_vec_unchecked(self.shape, self.data.iter().map(|z| z * factor).collect())
    }

    /// `self + factor * other`, elementwise.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_vec_unchecked(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b * factor)
                .collect(),
        )
    }

    pub fn axpy_in_place(&mut self, factor: f64, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * factor;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add_scaled(other, -1.0)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.add_scaled(other, 1.0)
    }

    /// Reinterprets the buffer in the other domain without transforming it.
    pub(crate) fn retag<E>(self) -> Stack<E> {
        Stack {
            shape: self.shape,
            data: self.data,
            _domain: PhantomData,
        }
    }
}

struct Plan2d {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, usize), Arc<Plan2d>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan_for(height: usize, width: usize) -> Arc<Plan2d> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        if let Some(plan) = cache.get(&(height, width)) {
            return Arc::clone(plan);
        }
        let plan = Arc::new(Plan2d {
            rows: planner.plan_fft_forward(width),
            cols: planner.plan_fft_forward(height),
            rows_inv: planner.plan_fft_inverse(width),
            cols_inv: planner.plan_fft_inverse(height),
        });
        cache.insert((height, width), Arc::clone(&plan));
        plan
    })
}

/// Unshifted 2D transform of one `height x width` plane, in place, unscaled.
fn transform_plane(
    plane: &mut [Complex64],
    height: usize,
    width: usize,
    rows: &dyn Fft<f64>,
    cols: &dyn Fft<f64>,
    column: &mut Vec<Complex64>,
) {
    rows.process(plane);
    column.resize(height, Complex64::new(0.0, 0.0));
    for x in 0..width {
        for y in 0..height {
            column[y] = plane[y * width + x];
        }
        cols.process(column);
        for y in 0..height {
            plane[y * width + x] = column[y];
        }
    }
}

/// Circularly shifts every plane by `(dy, dx)`: `out[y][x] = in[y - dy][x - dx]`.
fn roll_planes(data: &[Complex64], shape: Shape, dy: usize, dx: usize) -> Vec<Complex64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for j in 0..shape.coils {
        let base = j * h * w;
        for y in 0..h {
            let ty = (y + dy) % h;
            for x in 0..w {
                let tx = (x + dx) % w;
                out[base + ty * w + tx] = data[base + y * w + x];
            }
        }
    }
    out
}

fn centered_transform(data: &[Complex64], shape: Shape, inverse: bool) -> Vec<Complex64> {
    let (h, w) = (shape.height, shape.width);
    let plan = plan_for(h, w);
    let (rows, cols) = if inverse {
        (&plan.rows_inv, &plan.cols_inv)
    } else {
        (&plan.rows, &plan.cols)
    };
    // ifftshift moves index floor(n/2) to 0; fftshift moves 0 back to floor(n/2).
    let mut buf = roll_planes(data, shape, h - h / 2, w - w / 2);
    let mut column = Vec::with_capacity(h);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for plane in buf.chunks_mut(h * w) {
        transform_plane(plane, h, w, rows.as_ref(), cols.as_ref(), &mut column);
    }
    for z in buf.iter_mut() {
        *z *= scale;
    }
    roll_planes(&buf, shape, h / 2, w / 2)
}

/// Centered, unitary forward transform applied to every coil independently.
pub fn fft2_centered(img: &ComplexImageStack) -> KSpaceStack {
    Stack::from_vec_unchecked(img.shape, centered_transform(&img.data, img.shape, false))
}

/// Exact inverse (and adjoint) of [`fft2_centered`].
pub fn ifft2_centered(ksp: &KSpaceStack) -> ComplexImageStack {
    Stack::from_vec_unchecked(ksp.shape, centered_transform(&ksp.data, ksp.shape, true))
}

/// Row-major `height x width` real map.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "real image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Root-sum-of-squares coil combination.
pub fn rss_combine(img: &ComplexImageStack) -> RealImage {
    let shape = img.shape;
    let n = shape.plane();
    let mut out = vec![0.0; n];
    for j in 0..shape.coils {
        for (acc, z) in out.iter_mut().zip(img.coil(j)) {
            *acc += z.norm_sqr();
        }
    }
    for v in out.iter_mut() {
        *v = v.sqrt();
    }
    RealImage {
        height: shape.height,
        width: shape.width,
        data: out,
    }
}

/// Zeroes every unsampled location; the same mask applies to every coil.
pub fn apply_mask(ksp: &KSpaceStack, mask: &SamplingMask) -> Result<KSpaceStack> {
    let shape = ksp.shape;
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, k-space is {}x{}",
            mask.height(),
            mask.width(),
            shape.height,
            shape.width
        )));
    }
    let bits = mask.bits();
    let n = shape.plane();
    let mut data = ksp.data.clone();
    for plane in data.chunks_mut(n) {
        for (z, &b) in plane.iter_mut().zip(bits) {
            if !b {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }
    Ok(Stack::from_vec_unchecked(shape, data))
}

/// Zero-filled reconstruction `F^H M^T Y`.
pub fn zero_filled(ksp: &KSpaceStack, mask: &SamplingMask) -> Result<ComplexImageStack> {
    Ok(ifft2_centered(&apply_mask(ksp, mask)?))
}
