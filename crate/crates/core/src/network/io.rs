//! `PMNW v1` parameter files: little-endian header `PMNW`, version, `n, k, L, N_c`
//! as u32, the knot positions, then every learnable value as f64 in
//! [`ModelParameters::entries`] order.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{
    ConvKernelBank, ModelParameters, NetworkConfig, PiecewiseLinearFunction, StageParameters, SubstageParameters,
    KERNEL_TAPS,
};
use crate::error::{Error, Result};
use crate::simdata::{read_exact_or, read_u32};

const MAGIC: &[u8; 4] = b"PMNW";
pub const PARAMS_VERSION: u32 = 1;

/// Network dimensions as stored in a parameter file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamsHeader {
    pub stages: usize,
    pub substages: usize,
    pub filters: usize,
    pub knots: usize,
}

impl ParamsHeader {
    pub fn of(params: &ModelParameters) -> Self {
        Self {
            stages: params.stage_count(),
            substages: params.substage_count(),
            filters: params.filters(),
            knots: params.knot_count(),
        }
    }
}

pub fn write_params(mut out: impl Write, params: &ModelParameters) -> Result<()> {
    params.validate()?;
    let h = ParamsHeader::of(params);
    out.write_all(MAGIC)?;
    for v in [PARAMS_VERSION, h.stages as u32, h.substages as u32, h.filters as u32, h.knots as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in params.stages[0].substages[0].plf.knots() {
        out.write_all(&p.to_le_bytes())?;
    }
    for (_, v) in params.entries() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64(input: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or(input, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_params(mut input: impl Read) -> Result<ModelParameters> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "parameter magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "PMNW".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut input, "parameter version")?;
    if version != PARAMS_VERSION {
        return Err(Error::VersionMismatch {
            expected: PARAMS_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 4];
    for (d, what) in dims.iter_mut().zip(["n", "k", "L", "N_c"]) {
        *d = read_u32(&mut input, what)? as usize;
    }
    let [stages, substages, filters, knots] = dims;
    if stages == 0 || substages == 0 || filters == 0 || knots < 2 {
        return Err(Error::Malformed(format!(
            "parameter header n={stages} k={substages} L={filters} N_c={knots}"
        )));
    }
    let knot_values = (0..knots)
        .map(|i| read_f64(&mut input, &format!("knot {i}")))
        .collect::<Result<Vec<_>>>()?;
    let plf = PiecewiseLinearFunction::new(knot_values.clone(), knot_values)
        .map_err(|e| Error::Malformed(format!("knots: {e}")))?;
    let bank = ConvKernelBank {
        kernels: vec![[0.0; KERNEL_TAPS]; filters],
        bias: vec![0.0; filters],
    };
    let sub = SubstageParameters {
        mu1: 0.0,
        mu2: 0.0,
        conv1: bank.clone(),
        plf,
        conv2: bank,
    };
    let mut params = ModelParameters {
        stages: vec![
            StageParameters {
                rho: 0.0,
                substages: vec![sub; substages],
                eta: 0.0,
            };
            stages
        ],
    };
    for (r, _) in params.entries() {
        let v = read_f64(&mut input, &format!("{} of stage {}", r.class, r.stage))?;
        *params.get_mut(&r).expect("entry refers to an existing field") = v;
    }
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Malformed("trailing bytes after parameters".into()));
    }
    params
        .validate()
        .map_err(|e| Error::Malformed(format!("stored parameters: {e}")))?;
    Ok(params)
}

pub fn save_params(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParameters> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Reject stored parameters whose dimensions disagree with `config`.
pub fn check_header(header: ParamsHeader, config: &NetworkConfig) -> Result<()> {
    for (field, expected, found) in [
        ("n", config.stages, header.stages),
        ("k", config.substages, header.substages),
        ("L", config.filters, header.filters),
        ("N_c", config.knots, header.knots),
    ] {
        if expected != found {
            return Err(Error::ParamShape { field, expected, found });
        }
    }
    Ok(())
}

pub fn load_params_expecting(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<ModelParameters> {
    let params = load_params(path)?;
    check_header(ParamsHeader::of(&params), config)?;
    Ok(params)
}
