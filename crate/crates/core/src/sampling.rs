//! Cartesian undersampling masks: 1D uniform, 1D random, 2D Poisson-disc and
//! 2D radial patterns, plus the `PMRIMASK` text format.
//!
//! Columns (`x`) are the phase-encode direction for the 1D patterns. The
//! autocalibration (ACS) region is centered on the DC index
//! `(height / 2, width / 2)`: `acs` full columns for 1D patterns, an
//! `acs x acs` block for 2D patterns.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample_weighted;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Exponent of the variable-density column weighting used by [`gen_random_1d`].
pub const RANDOM_1D_DENSITY_POWER: f64 = 3.0;

/// Relative tolerance on the achieved sampling fraction, `|f - 1/R| <= tol / R`.
pub const FRACTION_TOLERANCE: f64 = 0.15;

/// Maximum number of bisection steps when calibrating the Poisson-disc radius.
pub const POISSON_MAX_BISECTIONS: usize = 50;

/// Slope of the Poisson-disc radius ramp: `r(d) = scale * (1 + slope * d)`,
/// with `d` the distance from the k-space center in units of `min(H, W) / 2`.
pub const POISSON_RADIUS_SLOPE: f64 = 2.0;

const MRI_GOLDEN_ANGLE: f64 = 1.941_611_038_725_466_4; // pi * (sqrt(5) - 1) / 2

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPattern {
    Uniform1D,
    Random1D,
    Poisson2D,
    Radial2D,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 4] = [
        MaskPattern::Uniform1D,
        MaskPattern::Random1D,
        MaskPattern::Poisson2D,
        MaskPattern::Radial2D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskPattern::Uniform1D => "uniform1d",
            MaskPattern::Random1D => "random1d",
            MaskPattern::Poisson2D => "poisson2d",
            MaskPattern::Radial2D => "radial2d",
        }
    }

    pub fn is_1d(self) -> bool {
        matches!(self, MaskPattern::Uniform1D | MaskPattern::Random1D)
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskPattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown mask pattern {s:?} (expected uniform1d, random1d, poisson2d or radial2d)"
                ))
            })
    }
}

/// A binary `height x width` k-space selector with its generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pattern: MaskPattern,
    target_acceleration: f64,
    acs: usize,
    seed: u64,
}

impl SamplingMask {
    pub fn from_bits(
        height: usize,
        width: usize,
        bits: Vec<bool>,
        pattern: MaskPattern,
        target_acceleration: f64,
        acs: usize,
        seed: u64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!("mask {height}x{width}")));
        }
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::InvalidArgument("mask samples no locations".into()));
        }
        if !(target_acceleration >= 1.0 && target_acceleration.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "acceleration must be a finite value >= 1, got {target_acceleration}"
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
            pattern,
            target_acceleration,
            acs,
            seed,
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_bits(
            height,
            width,
            vec![true; height * width],
            MaskPattern::Uniform1D,
            1.0,
            0,
            0,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    pub fn target_acceleration(&self) -> f64 {
        self.target_acceleration
    }

    pub fn acs(&self) -> usize {
        self.acs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Mask value as 0.0 / 1.0.
    #[inline]
    pub fn weight(&self, index: usize) -> f64 {
        if self.bits[index] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether the declared ACS region is fully sampled.
    pub fn acs_intact(&self) -> bool {
        if self.acs == 0 {
            return true;
        }
        if self.pattern.is_1d() {
            let cols = centered_range(self.width, self.acs);
            (0..self.height).all(|y| cols.clone().all(|x| self.get(y, x)))
        } else {
            let rows = centered_range(self.height, self.acs);
            let cols = centered_range(self.width, self.acs);
            rows.clone().all(|y| cols.clone().all(|x| self.get(y, x)))
        }
    }

    pub fn stats(&self) -> MaskStats {
        mask_stats(self)
    }

    /// Writes the `PMRIMASK v1` text representation.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "PMRIMASK v1 {} {} {} {} {} {}",
            self.height, self.width, self.pattern, self.target_acceleration, self.acs, self.seed
        )?;
        let mut line = Vec::with_capacity(self.width + 1);
        for y in 0..self.height {
            line.clear();
            line.extend(
                self.bits[y * self.width..(y + 1) * self.width]
                    .iter()
                    .map(|&b| if b { b'1' } else { b'0' }),
            );
            line.push(b'\n');
            out.write_all(&line)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl BufRead) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        if header.is_empty() {
            return Err(Error::Truncated("mask header".into()));
        }
        let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
        if fields.first() != Some(&"PMRIMASK") {
            return Err(Error::BadMagic {
                expected: "PMRIMASK".into(),
                found: fields.first().unwrap_or(&"").to_string(),
            });
        }
        if fields.get(1) != Some(&"v1") {
            let found = fields
                .get(1)
                .and_then(|v| v.strip_prefix('v'))
                .and_then(|v| v.parse().ok())
                .unwrap_or(0);
            return Err(Error::VersionMismatch { expected: 1, found });
        }
        if fields.len() != 8 {
            return Err(Error::Malformed(format!(
                "mask header needs 8 fields, found {}",
                fields.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Malformed(format!("mask header {what}: {s:?}")))
        };
        let height = parse_usize(fields[2], "height")?;
        let width = parse_usize(fields[3], "width")?;
        let pattern: MaskPattern = fields[4].parse()?;
        let accel: f64 = fields[5]
            .parse()
            .map_err(|_| Error::Malformed(format!("mask header R: {:?}", fields[5])))?;
        let acs = parse_usize(fields[6], "acs")?;
        let seed: u64 = fields[7]
            .parse()
            .map_err(|_| Error::Malformed(format!("mask header seed: {:?}", fields[7])))?;

        let mut bits = Vec::with_capacity(height * width);
        let mut line = Vec::with_capacity(width + 1);
        for y in 0..height {
            line.clear();
            let n = input.read_until(b'\n', &mut line)?;
            if n == 0 || line.last() != Some(&b'\n') {
                return Err(Error::Truncated(format!("mask row {y}")));
            }
            line.pop();
            if line.len() != width {
                return Err(Error::Malformed(format!(
                    "mask row {y} has {} characters, expected {width}",
                    line.len()
                )));
            }
            for &c in &line {
                match c {
                    b'0' => bits.push(false),
                    b'1' => bits.push(true),
                    other => {
                        return Err(Error::Malformed(format!(
                            "mask row {y} contains {:?}",
                            other as char
                        )))
                    }
                }
            }
        }
        Self::from_bits(height, width, bits, pattern, accel, acs, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    pub fraction: f64,
    pub achieved_r: f64,
    pub acs_intact: bool,
}

impl fmt::Display for MaskStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "fraction={:.6} achieved_R={:.6} acs_intact={}",
            self.fraction, self.achieved_r, self.acs_intact
        )
    }
}

pub fn mask_stats(mask: &SamplingMask) -> MaskStats {
    let fraction = mask.count() as f64 / (mask.height * mask.width) as f64;
    MaskStats {
        fraction,
        achieved_r: 1.0 / fraction,
        acs_intact: mask.acs_intact(),
    }
}

/// Indices of the `len` entries centered on `n / 2`.
pub fn centered_range(n: usize, len: usize) -> std::ops::Range<usize> {
    let len = len.min(n);
    let start = (n / 2).saturating_sub(len / 2).min(n - len);
    start..start + len
}

fn check_acceleration(r: f64) -> Result<()> {
    if !(r.is_finite() && r >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "acceleration R must be >= 1, got {r}"
        )));
    }
    Ok(())
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidShape(format!(
            "mask needs height, width >= 2; got {height}x{width}"
        )));
    }
    Ok(())
}

fn columns_to_mask(height: usize, width: usize, columns: &[bool]) -> Vec<bool> {
    let mut bits = Vec::with_capacity(height * width);
    for _ in 0..height {
        bits.extend_from_slice(columns);
    }
    bits
}

/// Equispaced phase-encode columns plus `acs` fully sampled center columns.
///
/// The lattice is anchored at the center column. Its stride is widened from
/// `R` so that lattice and ACS together sample `W / R` columns; with `acs = 0`
/// the stride is exactly `R`. `seed` is recorded but not used.
pub fn gen_uniform_1d(
    height: usize,
    width: usize,
    r: f64,
    acs: usize,
    seed: u64,
) -> Result<SamplingMask> {
    check_dims(height, width)?;
    check_acceleration(r)?;
    if acs > width {
        return Err(Error::InvalidArgument(format!(
            "acs {acs} exceeds width {width}"
        )));
    }
    let mut columns = vec![false; width];
    for x in centered_range(width, acs) {
        columns[x] = true;
    }
    let w = width as f64;
    let a = acs as f64;
    // Lattice columns outside the ACS block number (W - acs) / stride.
    if w > a * r {
        let stride = r * (w - a) / (w - a * r);
        let center = (width / 2) as f64;
        let mut i = 0f64;
        loop {
            let up = (center + i * stride).round();
            let down = (center - i * stride).round();
            let mut inside = false;
            if up < w {
                columns[up as usize] = true;
                inside = true;
            }
            if down >= 0.0 {
                columns[down as usize] = true;
                inside = true;
            }
            if !inside {
                break;
            }
            i += 1.0;
        }
    } else if acs == 0 {
        columns[width / 2] = true;
    }
    SamplingMask::from_bits(
        height,
        width,
        columns_to_mask(height, width, &columns),
        MaskPattern::Uniform1D,
        r,
        acs,
        seed,
    )
}

/// `ceil(W / R)` full columns: the ACS block plus columns drawn without
/// replacement with probability proportional to `(1 - d)^p`, where `d` is the
/// distance from the center column normalized by `W / 2 + 1`.
pub fn gen_random_1d(
    height: usize,
    width: usize,
    r: f64,
    acs: usize,
    seed: u64,
) -> Result<SamplingMask> {
    gen_random_1d_with_power(height, width, r, acs, seed, RANDOM_1D_DENSITY_POWER)
}

pub fn gen_random_1d_with_power(
    height: usize,
    width: usize,
    r: f64,
    acs: usize,
    seed: u64,
    power: f64,
) -> Result<SamplingMask> {
    check_dims(height, width)?;
    check_acceleration(r)?;
    if acs > width {
        return Err(Error::InvalidArgument(format!(
            "acs {acs} exceeds width {width}"
        )));
    }
    let total = (width as f64 / r).ceil() as usize;
    if total < acs {
        return Err(Error::InvalidArgument(format!(
            "infeasible budget: ceil(W/R) = {total} columns but acs = {acs}"
        )));
    }
    let mut columns = vec![false; width];
    for x in centered_range(width, acs) {
        columns[x] = true;
    }
    let candidates: Vec<usize> = (0..width).filter(|&x| !columns[x]).collect();
    let draw = total - acs;
    if draw > 0 {
        let center = (width / 2) as f64;
        let norm = (width / 2) as f64 + 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = sample_weighted(
            &mut rng,
            candidates.len(),
            |i| {
                let d = (candidates[i] as f64 - center).abs() / norm;
                (1.0 - d).powf(power)
            },
            draw,
        )
        .map_err(|e| Error::InvalidArgument(format!("column weighting: {e}")))?;
        for i in chosen.iter() {
            columns[candidates[i]] = true;
        }
    }
    if !columns.iter().any(|&c| c) {
        columns[width / 2] = true;
    }
    SamplingMask::from_bits(
        height,
        width,
        columns_to_mask(height, width, &columns),
        MaskPattern::Random1D,
        r,
        acs,
        seed,
    )
}

/// Local Poisson-disc radius at `(y, x)` for a given scale.
pub fn poisson_radius(height: usize, width: usize, scale: f64, y: usize, x: usize) -> f64 {
    let cy = (height / 2) as f64;
    let cx = (width / 2) as f64;
    let half = height.min(width) as f64 / 2.0;
    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / half;
    scale * (1.0 + POISSON_RADIUS_SLOPE * d)
}

/// Two points conflict if they are closer than the mean of their local radii.
pub fn poisson_pair_radius(ra: f64, rb: f64) -> f64 {
    0.5 * (ra + rb)
}

struct PoissonGrid {
    height: usize,
    width: usize,
    order: Vec<usize>,
    acs_block: Vec<bool>,
    acs_count: usize,
}

impl PoissonGrid {
    fn new(height: usize, width: usize, acs: usize, seed: u64) -> Self {
        let mut acs_block = vec![false; height * width];
        if acs > 0 {
            for y in centered_range(height, acs) {
                for x in centered_range(width, acs) {
                    acs_block[y * width + x] = true;
                }
            }
        }
        let acs_count = acs_block.iter().filter(|&&b| b).count();
        let mut order: Vec<usize> = (0..height * width).filter(|&i| !acs_block[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Self {
            height,
            width,
            order,
            acs_block,
            acs_count,
        }
    }

    /// Dart throwing in a fixed random order; returns (bits, ones count).
    fn throw(&self, scale: f64) -> (Vec<bool>, usize) {
        let (h, w) = (self.height, self.width);
        let radius: Vec<f64> = (0..h * w)
            .map(|i| poisson_radius(h, w, scale, i / w, i % w))
            .collect();
        let r_max = radius.iter().copied().fold(0.0, f64::max);
        let mut accepted = vec![false; h * w];
        let mut count = 0;
        for &idx in &self.order {
            let (cy, cx) = ((idx / w) as isize, (idx % w) as isize);
            let rc = radius[idx];
            let reach = poisson_pair_radius(rc, r_max).ceil() as isize;
            let mut ok = true;
            'scan: for dy in -reach..=reach {
                let y = cy + dy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in -reach..=reach {
                    let x = cx + dx;
                    if x < 0 || x >= w as isize || (dy == 0 && dx == 0) {
                        continue;
                    }
                    let j = y as usize * w + x as usize;
                    if accepted[j] {
                        let dist = ((dy * dy + dx * dx) as f64).sqrt();
                        if dist < poisson_pair_radius(rc, radius[j]) {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if ok {
                accepted[idx] = true;
                count += 1;
            }
        }
        for (bit, &forced) in accepted.iter_mut().zip(&self.acs_block) {
            if forced {
                *bit = true;
            }
        }
        (accepted, count + self.acs_count)
    }
}

/// Variable-density Poisson-disc mask whose radius scale is calibrated by
/// bisection to hit a sampling fraction of `1 / R`.
pub fn gen_poisson_2d(
    height: usize,
    width: usize,
    r: f64,
    acs: usize,
    seed: u64,
) -> Result<SamplingMask> {
    check_dims(height, width)?;
    check_acceleration(r)?;
    if acs > height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "acs {acs} exceeds mask side {}",
            height.min(width)
        )));
    }
    let finish = |bits| SamplingMask::from_bits(height, width, bits, MaskPattern::Poisson2D, r, acs, seed);
    if r == 1.0 {
        return finish(vec![true; height * width]);
    }
    let total = (height * width) as f64;
    let target = 1.0 / r;
    let tolerance = FRACTION_TOLERANCE / r;
    let grid = PoissonGrid::new(height, width, acs, seed);

    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        let (_, count) = grid.throw(hi);
        if (count as f64) / total <= target {
            break;
        }
        hi *= 2.0;
        if hi > (height.max(width) as f64) * 4.0 {
            return Err(Error::Calibration {
                steps: 0,
                achieved: count as f64 / total,
                target,
            });
        }
    }
    let mut best: Option<(f64, Vec<bool>)> = None;
    for _ in 0..POISSON_MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let (bits, count) = grid.throw(mid);
        let fraction = count as f64 / total;
        let err = (fraction - target).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, bits));
        }
        if err <= 0.25 * tolerance {
            break;
        }
        if fraction > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (err, bits) = best.expect("at least one bisection step");
    if err > tolerance {
        let achieved = bits.iter().filter(|&&b| b).count() as f64 / total;
        return Err(Error::Calibration {
            steps: POISSON_MAX_BISECTIONS,
            achieved,
            target,
        });
    }
    finish(bits)
}

/// Number of radial spokes used for acceleration `R` on a `height`-row grid.
pub fn radial_spoke_count(height: usize, r: f64) -> usize {
    (height as f64 * std::f64::consts::PI / (2.0 * r)).round() as usize
}

/// Angular offset of the first spoke, a golden-angle multiple of `seed`
/// folded into one inter-spoke interval.
pub fn radial_offset(seed: u64, spokes: usize) -> f64 {
    let interval = std::f64::consts::PI / spokes as f64;
    ((seed as f64) * MRI_GOLDEN_ANGLE).rem_euclid(interval)
}

/// Equally spaced full spokes through the k-space center, rasterized at
/// half-pixel steps and clipped to the grid.
pub fn gen_radial_2d(height: usize, width: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    check_dims(height, width)?;
    check_acceleration(r)?;
    let spokes = radial_spoke_count(height, r);
    if spokes < 1 {
        return Err(Error::InvalidArgument(format!(
            "R = {r} leaves fewer than one spoke for height {height}"
        )));
    }
    let offset = radial_offset(seed, spokes);
    let cy = (height / 2) as f64;
    let cx = (width / 2) as f64;
    let reach = height.max(width) as f64;
    let mut bits = vec![false; height * width];
    bits[(height / 2) * width + width / 2] = true;
    for s in 0..spokes {
        let theta = offset + s as f64 * std::f64::consts::PI / spokes as f64;
        let (sin, cos) = theta.sin_cos();
        let steps = (2.0 * reach) as i64;
        for k in -steps..=steps {
            let t = 0.5 * k as f64;
            let y = (cy + t * sin).round();
            let x = (cx + t * cos).round();
            if y >= 0.0 && y < height as f64 && x >= 0.0 && x < width as f64 {
                bits[y as usize * width + x as usize] = true;
            }
        }
    }
    SamplingMask::from_bits(height, width, bits, MaskPattern::Radial2D, r, 0, seed)
}

/// Dispatches to the generator for `pattern`; `acs` is ignored for radial masks.
pub fn generate(
    pattern: MaskPattern,
    height: usize,
    width: usize,
    r: f64,
    acs: usize,
    seed: u64,
) -> Result<SamplingMask> {
    match pattern {
        MaskPattern::Uniform1D => gen_uniform_1d(height, width, r, acs, seed),
        MaskPattern::Random1D => gen_random_1d(height, width, r, acs, seed),
        MaskPattern::Poisson2D => gen_poisson_2d(height, width, r, acs, seed),
        MaskPattern::Radial2D => gen_radial_2d(height, width, r, seed),
    }
}
