//! Python module `dealias`: masks, centered FFTs, metrics, simulation and
//! reconstruction over the file formats used by the command-line tool.

use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dealias_core::gradcheck::{run_gradcheck, GradcheckConfig};
use dealias_core::metrics::evaluate_images;
use dealias_core::network::load_params;
use dealias_core::numerics::{fft2_centered, ifft2_centered, rss_combine, Stack};
use dealias_core::sampling::generate;
use dealias_core::simdata::{read_dataset, simulate_dataset, write_dataset, SimConfig};
use dealias_core::training::{reconstruct, reconstruct_zero_filled, Dataset};
use dealias_core::{ComplexImageStack, Error, KSpaceStack, MaskPattern, RealImage, SamplingMask, Shape};

fn py_err(err: Error) -> PyErr {
    match err {
        Error::Io(_) | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated(_) | Error::Malformed(_) => {
            PyIOError::new_err(err.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn grid_dims<T>(rows: &[Vec<T>]) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2D list"));
    }
    Ok((h, w))
}

fn to_stack<D>(rows: Vec<Vec<Complex64>>) -> PyResult<Stack<D>> {
    let (h, w) = grid_dims(&rows)?;
    let shape = Shape::new(1, h, w).map_err(py_err)?;
    Stack::from_vec(shape, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn to_rows(data: &[Complex64], width: usize) -> Vec<Vec<Complex64>> {
    data.chunks(width).map(<[Complex64]>::to_vec).collect()
}

fn to_real(rows: Vec<Vec<f64>>) -> PyResult<RealImage> {
    let (h, w) = grid_dims(&rows)?;
    RealImage::new(h, w, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn real_rows(img: &RealImage) -> Vec<Vec<f64>> {
    img.data.chunks(img.width).map(<[f64]>::to_vec).collect()
}

fn load_masks(paths: &[PathBuf]) -> PyResult<Vec<SamplingMask>> {
    paths.iter().map(|p| SamplingMask::load(p).map_err(py_err)).collect()
}

/// A binary k-space sampling mask.
#[pyclass(name = "Mask", frozen)]
struct PyMask {
    inner: SamplingMask,
}

#[pymethods]
impl PyMask {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SamplingMask::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn pattern(&self) -> &'static str {
        self.inner.pattern().name()
    }

    #[getter]
    fn fraction(&self) -> f64 {
        self.inner.stats().fraction
    }

    #[getter]
    fn achieved_rate(&self) -> f64 {
        self.inner.stats().achieved_r
    }

    #[getter]
    fn acs_intact(&self) -> bool {
        self.inner.acs_intact()
    }

    /// Row-major nested list of booleans.
    fn bits(&self) -> Vec<Vec<bool>> {
        self.inner.bits().chunks(self.inner.width()).map(<[bool]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask({}, {}x{}, {})",
            self.inner.pattern().name(),
            self.inner.height(),
            self.inner.width(),
            self.inner.stats()
        )
    }
}

/// Generate a mask: pattern is uniform1d, random1d, poisson2d or radial2d.
#[pyfunction]
#[pyo3(signature = (pattern, height, width, rate, acs = 0, seed = 0))]
fn generate_mask(pattern: &str, height: usize, width: usize, rate: f64, acs: usize, seed: u64) -> PyResult<PyMask> {
    let pattern: MaskPattern = pattern.parse().map_err(py_err)?;
    Ok(PyMask {
        inner: generate(pattern, height, width, rate, acs, seed).map_err(py_err)?,
    })
}

/// Centered unitary 2D FFT of one complex image.
#[pyfunction]
fn fft2c(image: Vec<Vec<Complex64>>) -> PyResult<Vec<Vec<Complex64>>> {
    let img: ComplexImageStack = to_stack(image)?;
    let w = img.shape().width;
    Ok(to_rows(fft2_centered(&img).as_slice(), w))
}

/// Inverse of [`fft2c`].
#[pyfunction]
fn ifft2c(kspace: Vec<Vec<Complex64>>) -> PyResult<Vec<Vec<Complex64>>> {
    let k: KSpaceStack = to_stack(kspace)?;
    let w = k.shape().width;
    Ok(to_rows(ifft2_centered(&k).as_slice(), w))
}

/// NMSE, PSNR (dB) and SSIM of a magnitude estimate against a reference.
#[pyfunction]
fn image_metrics(estimate: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let r = evaluate_images(&to_real(estimate)?, &to_real(reference)?).map_err(py_err)?;
    Ok((r.nmse, r.psnr, r.ssim))
}

/// Simulate `count` records into a dataset file; returns the record count.
#[pyfunction]
#[pyo3(signature = (masks, output, count, coils = 4, seed = 1, noise = 0.0))]
fn simulate(masks: Vec<PathBuf>, output: PathBuf, count: usize, coils: usize, seed: u64, noise: f64) -> PyResult<usize> {
    let masks = load_masks(&masks)?;
    let first = masks.first().ok_or_else(|| PyValueError::new_err("at least one mask is required"))?;
    let mut cfg = SimConfig::new(coils, first.height(), first.width());
    cfg.seed = seed;
    cfg.noise_std = noise;
    let records = simulate_dataset(&cfg, &masks, count).map_err(py_err)?;
    write_dataset(&records, output).map_err(py_err)?;
    Ok(records.len())
}

/// RSS magnitude images of every record: network output if `model` is
/// given, zero-filled otherwise, or the stored ground truth with `truth=True`.
#[pyfunction]
#[pyo3(signature = (data, masks, model = None, truth = false))]
fn rss_images(data: PathBuf, masks: Vec<PathBuf>, model: Option<PathBuf>, truth: bool) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let records = read_dataset(data).map_err(py_err)?;
    if truth {
        return Ok(records.iter().map(|r| real_rows(&rss_combine(&r.coil_images))).collect());
    }
    let dataset = Dataset::new(records, load_masks(&masks)?).map_err(py_err)?;
    let params = model.map(load_params).transpose().map_err(py_err)?;
    (0..dataset.len())
        .map(|i| {
            let x = match &params {
                Some(p) => reconstruct(p, &dataset, i),
                None => reconstruct_zero_filled(&dataset, i),
            }
            .map_err(py_err)?;
            Ok(real_rows(&rss_combine(&x)))
        })
        .collect()
}

/// Finite-difference gradient check; returns (passed, report).
#[pyfunction]
#[pyo3(signature = (seed = 0, perturb_backward = false))]
fn gradcheck(seed: u64, perturb_backward: bool) -> PyResult<(bool, String)> {
    let report = run_gradcheck(&GradcheckConfig {
        seed,
        perturb_backward,
        ..GradcheckConfig::default()
    })
    .map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn dealias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(generate_mask, m)?)?;
    m.add_function(wrap_pyfunction!(fft2c, m)?)?;
    m.add_function(wrap_pyfunction!(ifft2c, m)?)?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(rss_images, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
