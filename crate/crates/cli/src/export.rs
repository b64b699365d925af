//! 8-bit grayscale export of magnitude images and error maps.

use std::io::Write;
use std::path::Path;

use dealias_core::RealImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max normalization to `0..=255`. A constant image maps to 0.
pub fn normalize_minmax(img: &RealImage) -> Vec<u8> {
    let (lo, hi) = (img.min(), img.max());
    let span = hi - lo;
    img.data
        .iter()
        .map(|&v| if span > 0.0 { to_byte((v - lo) / span) } else { 0 })
        .collect()
}

/// `|est - ref|` scaled by `amplify / scale`, clipped to white.
pub fn error_map(est: &RealImage, reference: &RealImage, scale: f64, amplify: f64) -> Vec<u8> {
    est.data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| {
            if scale > 0.0 {
                to_byte(amplify * (a - b).abs() / scale)
            } else {
                0
            }
        })
        .collect()
}

pub fn write_pgm(mut out: impl Write, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)
}

pub fn save_gray(path: &Path, format: ImageFormat, width: usize, height: usize, pixels: &[u8]) -> Result<(), String> {
    match format {
        ImageFormat::Pgm => {
            let file = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let mut w = std::io::BufWriter::new(file);
            write_pgm(&mut w, width, height, pixels)
                .and_then(|_| w.flush())
                .map_err(|e| format!("{}: {e}", path.display()))
        }
        ImageFormat::Png => {
            let img = image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
                .ok_or_else(|| "pixel buffer does not match image size".to_string())?;
            img.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| format!("{}: {e}", path.display()))
        }
    }
}
