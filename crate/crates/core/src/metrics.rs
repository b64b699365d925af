//! Image quality metrics on real (RSS-combined) maps.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{rss_combine, ComplexImageStack, RealImage};

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(est: &RealImage, reference: &RealImage) -> Result<()> {
    if est.height != reference.height || est.width != reference.width {
        return Err(Error::ShapeMismatch(format!(
            "estimate {}x{} vs reference {}x{}",
            est.height, est.width, reference.height, reference.width
        )));
    }
    Ok(())
}

fn sq_err(est: &RealImage, reference: &RealImage) -> f64 {
    est.data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// `||est - ref||^2 / ||ref||^2`.
pub fn nmse(est: &RealImage, reference: &RealImage) -> Result<f64> {
    check_pair(est, reference)?;
    let denom: f64 = reference.data.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("NMSE reference is all zeros".into()));
    }
    Ok(sq_err(est, reference) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the error was zero (or tiny enough) that the value hit [`PSNR_CAP_DB`].
    pub capped: bool,
}

/// `10 log10(max(ref)^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(est: &RealImage, reference: &RealImage) -> Result<Psnr> {
    check_pair(est, reference)?;
    let mse = sq_err(est, reference) / est.data.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        });
    }
    let peak = reference.max();
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "PSNR needs a positive reference peak, got {peak}"
        )));
    }
    let db = 10.0 * (peak * peak / mse).log10();
    Ok(if db >= PSNR_CAP_DB {
        Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        }
    } else {
        Psnr { db, capped: false }
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-only separable Gaussian filtering.
fn filter_valid(data: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| win[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows, with the
/// dynamic range taken from the reference. A constant reference uses range 1.
pub fn ssim(est: &RealImage, reference: &RealImage) -> Result<f64> {
    check_pair(est, reference)?;
    let (h, w) = (reference.height, reference.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let range = reference.max() - reference.min();
    let range = if range > 0.0 { range } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let win = gaussian_window();
    let (x, y) = (&est.data, &reference.data);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &win);
    let mu_y = filter_valid(y, h, w, &win);
    let e_xx = filter_valid(&prod(x, x), h, w, &win);
    let e_yy = filter_valid(&prod(y, y), h, w, &win);
    let e_xy = filter_valid(&prod(x, y), h, w, &win);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    Ok(total / n as f64)
}

/// Metrics of one reconstruction against its reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub nmse: f64,
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
}

pub fn evaluate_images(est: &RealImage, reference: &RealImage) -> Result<MetricReport> {
    let p = psnr(est, reference)?;
    Ok(MetricReport {
        nmse: nmse(est, reference)?,
        psnr: p.db,
        psnr_capped: p.capped,
        ssim: ssim(est, reference)?,
    })
}

/// Metrics on the RSS combinations of two coil stacks.
pub fn evaluate_pair(est: &ComplexImageStack, reference: &ComplexImageStack) -> Result<MetricReport> {
    est.check_same_shape(reference, "evaluation")?;
    evaluate_images(&rss_combine(est), &rss_combine(reference))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub nmse: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
}

impl MetricSummary {
    pub fn of(reports: &[MetricReport]) -> Self {
        Self {
            count: reports.len(),
            nmse: Stat::of(reports.iter().map(|r| r.nmse)),
            psnr: Stat::of(reports.iter().map(|r| r.psnr)),
            ssim: Stat::of(reports.iter().map(|r| r.ssim)),
        }
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "NMSE {:.4} ± {:.4}  PSNR {:.2} ± {:.2} dB  SSIM {:.4} ± {:.4}  (n={})",
            self.nmse.mean, self.nmse.std, self.psnr.mean, self.psnr.std, self.ssim.mean, self.ssim.std, self.count
        )
    }
}

/// One row of an aggregate report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mask: String,
    pub rate: f64,
    pub method: String,
    pub summary: MetricSummary,
}

pub const REPORT_HEADER: &str = "mask,rate,method,nmse_mean,nmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std";

pub fn write_report_csv(mut out: impl Write, rows: &[ReportRow]) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.mask, r.rate, r.method, s.nmse.mean, s.nmse.std, s.psnr.mean, s.psnr.std, s.ssim.mean, s.ssim.std
        )?;
    }
    Ok(())
}

pub const PER_IMAGE_HEADER: &str = "index,nmse,psnr,psnr_capped,ssim";

pub fn write_per_image_csv(mut out: impl Write, reports: &[MetricReport]) -> Result<()> {
    writeln!(out, "{PER_IMAGE_HEADER}")?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{}", r.nmse, r.psnr, r.psnr_capped, r.ssim)?;
    }
    Ok(())
}
