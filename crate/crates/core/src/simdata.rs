//! Synthetic multi-coil data: Shepp-Logan phantoms, smooth coil sensitivities,
//! the undersampled forward model, and the `PMRD` dataset container.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{
    apply_mask, fft2_centered, ComplexImageStack, KSpaceStack, RealImage, Shape,
};
use crate::sampling::SamplingMask;

// intensity, semi-axis x, semi-axis y, center x, center y, rotation (degrees)
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

const JITTER: f64 = 0.05;

/// Ten-ellipse Shepp-Logan phantom (high-contrast intensities) clamped to [0, 1].
///
/// `variant_seed == 0` gives the canonical phantom; any other seed jitters
/// every ellipse's center, axes and rotation by up to 5%. The skull pair
/// (first two ellipses) shares one jitter draw so the rim stays closed.
pub fn shepp_logan(height: usize, width: usize, variant_seed: u64) -> Result<RealImage> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidShape(format!(
            "phantom needs at least 16x16, got {height}x{width}"
        )));
    }
    let mut ellipses = SHEPP_LOGAN;
    if variant_seed != 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(variant_seed);
        let mut draw = || -> [f64; 5] {
            std::array::from_fn(|_| rng.random_range(-JITTER..=JITTER))
        };
        let skull = draw();
        for (i, e) in ellipses.iter_mut().enumerate() {
            let d = if i < 2 { skull } else { draw() };
            e[1] *= 1.0 + d[0];
            e[2] *= 1.0 + d[1];
            e[3] += d[2];
            e[4] += d[3];
            e[5] += d[4] * 180.0;
        }
    }
    let mut data = vec![0.0; height * width];
    for row in 0..height {
        let y = 1.0 - (2 * row + 1) as f64 / height as f64;
        for col in 0..width {
            let x = (2 * col + 1) as f64 / width as f64 - 1.0;
            let mut value = 0.0;
            for &[intensity, a, b, x0, y0, deg] in &ellipses {
                let (s, c) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - x0, y - y0);
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    value += intensity;
                }
            }
            data[row * width + col] = value.clamp(0.0, 1.0);
        }
    }
    RealImage::new(height, width, data)
}

/// Smooth, root-sum-of-squares normalized receive sensitivities.
#[derive(Debug, Clone)]
pub struct CoilSensitivitySet {
    pub maps: ComplexImageStack,
    /// Coil-center angles on the placement circle, radians.
    pub angles: Vec<f64>,
    /// Coil centers `(y, x)` in pixel coordinates.
    pub centers: Vec<(f64, f64)>,
    /// Gaussian magnitude scale in pixels.
    pub sigma: f64,
}

impl CoilSensitivitySet {
    pub fn coils(&self) -> usize {
        self.maps.shape().coils
    }

    /// Coil `j` before the pointwise sum-of-squares normalization.
    pub fn unnormalized(&self, j: usize) -> Vec<Complex64> {
        let shape = self.maps.shape();
        raw_map(shape.height, shape.width, self.angles[j], self.centers[j], self.sigma)
    }
}

fn raw_map(height: usize, width: usize, angle: f64, center: (f64, f64), sigma: f64) -> Vec<Complex64> {
    let cy = (height / 2) as f64;
    let cx = (width / 2) as f64;
    let side = height.min(width) as f64;
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (yf, xf) = (y as f64, x as f64);
            let d2 = (yf - center.0).powi(2) + (xf - center.1).powi(2);
            let magnitude = (-d2 / (2.0 * sigma * sigma)).exp();
            let phase = PI * ((yf - cy) * sin + (xf - cx) * cos) / side;
            out.push(Complex64::from_polar(magnitude, phase));
        }
    }
    out
}

/// Coil `j` sits at angle `2 pi j / J` on a circle of radius `0.55 * min(H, W) / 2`
/// around the image center.
pub fn synth_sensitivities(
    coils: usize,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<CoilSensitivitySet> {
    let shape = Shape::new(coils, height, width)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sensitivity scale must be positive, got {sigma}"
        )));
    }
    let radius = 0.55 * height.min(width) as f64 / 2.0;
    let cy = (height / 2) as f64;
    let cx = (width / 2) as f64;
    let angles: Vec<f64> = (0..coils).map(|j| 2.0 * PI * j as f64 / coils as f64).collect();
    let centers: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| (cy + radius * a.sin(), cx + radius * a.cos()))
        .collect();
    let raw: Vec<Vec<Complex64>> = (0..coils)
        .map(|j| raw_map(height, width, angles[j], centers[j], sigma))
        .collect();
    let plane = height * width;
    let mut data = vec![Complex64::new(0.0, 0.0); shape.len()];
    for p in 0..plane {
        let sos: f64 = raw.iter().map(|m| m[p].norm_sqr()).sum::<f64>().sqrt();
        for j in 0..coils {
            data[j * plane + p] = raw[j][p] / sos;
        }
    }
    Ok(CoilSensitivitySet {
        maps: ComplexImageStack::from_vec(shape, data)?,
        angles,
        centers,
        sigma,
    })
}

/// One simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Ground-truth coil images `X`.
    pub coil_images: ComplexImageStack,
    /// Fully sampled k-space `F X`.
    pub full_kspace: KSpaceStack,
    /// Index of the mask (in the accompanying mask list) used for acquisition.
    pub mask_id: u32,
    /// Measured data `M (F X + noise)`.
    pub undersampled_kspace: KSpaceStack,
}

impl SampleRecord {
    pub fn shape(&self) -> Shape {
        self.coil_images.shape()
    }

    /// Rounds every array to single precision, as stored in a `PMRD` file.
    pub fn quantized(&self) -> Self {
        fn q<D>(s: &crate::numerics::Stack<D>) -> crate::numerics::Stack<D> {
            crate::numerics::Stack::from_vec_unchecked(
                s.shape(),
                s.as_slice()
                    .iter()
                    .map(|z| Complex64::new(z.re as f32 as f64, z.im as f32 as f64))
                    .collect(),
            )
        }
        Self {
            coil_images: q(&self.coil_images),
            full_kspace: q(&self.full_kspace),
            mask_id: self.mask_id,
            undersampled_kspace: q(&self.undersampled_kspace),
        }
    }
}

/// Forward model `X_j = s_j * phantom`, `Y = M (F X + n)` with complex white
/// Gaussian noise of standard deviation `noise_std` per component.
pub fn make_sample(
    phantom: &RealImage,
    sens: &CoilSensitivitySet,
    mask: &SamplingMask,
    mask_id: u32,
    noise_std: f64,
    seed: u64,
) -> Result<SampleRecord> {
    let shape = sens.maps.shape();
    if phantom.height != shape.height || phantom.width != shape.width {
        return Err(Error::ShapeMismatch(format!(
            "phantom {}x{} vs sensitivities {shape}",
            phantom.height, phantom.width
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise std must be >= 0, got {noise_std}"
        )));
    }
    let plane = shape.plane();
    let coil_images = ComplexImageStack::from_fn(shape, |j, y, x| {
        sens.maps.as_slice()[j * plane + y * shape.width + x] * phantom.get(y, x)
    });
    let full_kspace = fft2_centered(&coil_images);
    let mut measured = full_kspace.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std)
            .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for plane_data in measured.as_mut_slice().chunks_mut(plane) {
            for (z, &b) in plane_data.iter_mut().zip(mask.bits()) {
                if b {
                    *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                }
            }
        }
    }
    let undersampled_kspace = apply_mask(&measured, mask)?;
    Ok(SampleRecord {
        coil_images,
        full_kspace,
        mask_id,
        undersampled_kspace,
    })
}

/// Parameters for generating a whole synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub coils: usize,
    pub height: usize,
    pub width: usize,
    /// Sensitivity scale in pixels.
    pub sigma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(coils: usize, height: usize, width: usize) -> Self {
        Self {
            coils,
            height,
            width,
            sigma: default_sigma(height, width),
            noise_std: 0.0,
            seed: 1,
        }
    }
}

/// 24 pixels at 64x64, scaled with the image side.
pub fn default_sigma(height: usize, width: usize) -> f64 {
    0.375 * height.min(width) as f64
}

/// Phantom variant seed of record `index`; never zero, so every record is jittered.
pub fn variant_seed(seed: u64, index: usize) -> u64 {
    let s = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1);
    if s == 0 {
        1
    } else {
        s
    }
}

/// `count` records; record `i` uses mask `i mod masks.len()`.
pub fn simulate_dataset(
    config: &SimConfig,
    masks: &[SamplingMask],
    count: usize,
) -> Result<Vec<SampleRecord>> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("at least one mask is required".into()));
    }
    for m in masks {
        if m.height() != config.height || m.width() != config.width {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs dataset {}x{}",
                m.height(),
                m.width(),
                config.height,
                config.width
            )));
        }
    }
    let sens = synth_sensitivities(config.coils, config.height, config.width, config.sigma)?;
    (0..count)
        .map(|i| {
            let vs = variant_seed(config.seed, i);
            let phantom = shepp_logan(config.height, config.width, vs)?;
            let mask_id = i % masks.len();
            make_sample(
                &phantom,
                &sens,
                &masks[mask_id],
                mask_id as u32,
                config.noise_std,
                vs.rotate_left(17),
            )
        })
        .collect()
}

const DATASET_MAGIC: &[u8; 4] = b"PMRD";
const DATASET_VERSION: u32 = 1;

fn write_stack<D>(out: &mut impl Write, s: &crate::numerics::Stack<D>) -> Result<()> {
    let mut buf = Vec::with_capacity(s.as_slice().len() * 8);
    for z in s.as_slice() {
        buf.extend_from_slice(&(z.re as f32).to_le_bytes());
        buf.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_exact_or(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(input: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_stack<D>(input: &mut impl Read, shape: Shape, what: &str) -> Result<crate::numerics::Stack<D>> {
    let mut buf = vec![0u8; shape.len() * 8];
    read_exact_or(input, &mut buf, what)?;
    let data: Vec<Complex64> = buf
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    crate::numerics::Stack::from_vec(shape, data)
}

/// Serializes records in the little-endian `PMRD v1` layout.
pub fn write_records(mut out: impl Write, records: &[SampleRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot write an empty dataset".into()))?;
    let shape = first.shape();
    for (i, r) in records.iter().enumerate() {
        if r.shape() != shape
            || r.full_kspace.shape() != shape
            || r.undersampled_kspace.shape() != shape
        {
            return Err(Error::ShapeMismatch(format!(
                "record {i} has shape {}, dataset is {shape}",
                r.shape()
            )));
        }
    }
    out.write_all(DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        records.len() as u32,
        shape.coils as u32,
        shape.height as u32,
        shape.width as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for r in records {
        write_stack(&mut out, &r.coil_images)?;
        write_stack(&mut out, &r.full_kspace)?;
        write_stack(&mut out, &r.undersampled_kspace)?;
        out.write_all(&r.mask_id.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_records(mut input: impl Read) -> Result<Vec<SampleRecord>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "dataset magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: "PMRD".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut input, "dataset version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let count = read_u32(&mut input, "record count")? as usize;
    let coils = read_u32(&mut input, "coil count")? as usize;
    let height = read_u32(&mut input, "height")? as usize;
    let width = read_u32(&mut input, "width")? as usize;
    let shape = Shape::new(coils, height, width)
        .map_err(|e| Error::Malformed(format!("dataset header: {e}")))?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let coil_images = read_stack(&mut input, shape, &format!("record {i} coil images"))?;
        let full_kspace = read_stack(&mut input, shape, &format!("record {i} full k-space"))?;
        let undersampled_kspace =
            read_stack(&mut input, shape, &format!("record {i} undersampled k-space"))?;
        let mask_id = read_u32(&mut input, &format!("record {i} mask id"))?;
        records.push(SampleRecord {
            coil_images,
            full_kspace,
            mask_id,
            undersampled_kspace,
        });
    }
    Ok(records)
}

pub fn write_dataset(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot write an empty dataset".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    read_records(std::io::BufReader::new(std::fs::File::open(path)?))
}
