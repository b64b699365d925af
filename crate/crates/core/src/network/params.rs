use std::fmt;

use crate::error::{Error, Result};

/// Taps of a `3 x 3 x 3` kernel over (coil, y, x).
pub const KERNEL_TAPS: usize = 27;

/// Real `3 x 3 x 3` kernel, index `a * 9 + b * 3 + c` for the tap at offset
/// `(a - 1, b - 1, c - 1)` along (coil, y, x).
pub type Kernel = [f64; KERNEL_TAPS];

#[inline]
pub fn tap(a: usize, b: usize, c: usize) -> usize {
    a * 9 + b * 3 + c
}

/// The kernel of the adjoint (transposed) circular correlation.
pub fn flipped(k: &Kernel) -> Kernel {
    let mut out = [0.0; KERNEL_TAPS];
    for (i, v) in k.iter().enumerate() {
        out[KERNEL_TAPS - 1 - i] = *v;
    }
    out
}

/// `L` real kernels with one bias each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernelBank {
    pub kernels: Vec<Kernel>,
    pub bias: Vec<f64>,
}

impl ConvKernelBank {
    pub fn new(kernels: Vec<Kernel>, bias: Vec<f64>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidArgument("kernel bank needs L >= 1".into()));
        }
        if kernels.len() != bias.len() {
            return Err(Error::ParamShape {
                field: "bias",
                expected: kernels.len(),
                found: bias.len(),
            });
        }
        let bank = Self { kernels, bias };
        if !bank.is_finite() {
            return Err(Error::NonFinite("kernel bank".into()));
        }
        Ok(bank)
    }

    pub fn zeros(filters: usize) -> Self {
        Self {
            kernels: vec![[0.0; KERNEL_TAPS]; filters],
            bias: vec![0.0; filters],
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.kernels.iter().flatten().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }

    /// Bank whose kernels are the flipped (adjoint) kernels of `self`, scaled.
    pub fn adjoint_scaled(&self, scale: f64) -> Self {
        Self {
            kernels: self
                .kernels
                .iter()
                .map(|k| {
                    let mut f = flipped(k);
                    f.iter_mut().for_each(|v| *v *= scale);
                    f
                })
                .collect(),
            bias: vec![0.0; self.len()],
        }
    }
}

/// Scalar piecewise-linear map through control points `(p_i, q_i)`, extended
/// linearly past the end knots with the end-segment slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinearFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidArgument("piecewise-linear function needs >= 2 knots".into()));
        }
        if values.len() != knots.len() {
            return Err(Error::ParamShape {
                field: "q",
                expected: knots.len(),
                found: values.len(),
            });
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("knots must be strictly increasing".into()));
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("piecewise-linear control points".into()));
        }
        Ok(Self { knots, values })
    }

    /// `count` equispaced knots on `[-range, range]` with `q = p`.
    pub fn identity(count: usize, range: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidArgument("piecewise-linear function needs >= 2 knots".into()));
        }
        let knots: Vec<f64> = (0..count)
            .map(|i| -range + 2.0 * range * i as f64 / (count - 1) as f64)
            .collect();
        Self::new(knots.clone(), knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Segment `i` (between knots `i` and `i + 1`) used to evaluate `t`.
    #[inline]
    pub fn segment(&self, t: f64) -> usize {
        let n = self.knots.len();
        self.knots.partition_point(|&k| k <= t).clamp(1, n - 1) - 1
    }

    /// Value, segment, and interpolation weight of knot `i + 1`.
    #[inline]
    pub fn locate(&self, t: f64) -> (f64, usize, f64) {
        let i = self.segment(t);
        let (p0, p1) = (self.knots[i], self.knots[i + 1]);
        let theta = (t - p0) / (p1 - p0);
        let (q0, q1) = (self.values[i], self.values[i + 1]);
        (q0 + (q1 - q0) * theta, i, theta)
    }

    #[inline]
    pub fn evaluate(&self, t: f64) -> f64 {
        self.locate(t).0
    }

    /// Derivative with respect to the input.
    #[inline]
    pub fn slope(&self, segment: usize) -> f64 {
        (self.values[segment + 1] - self.values[segment])
            / (self.knots[segment + 1] - self.knots[segment])
    }
}

/// Parameters of one Conv1 -> Nonlinear -> Conv2 -> Addition pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstageParameters {
    pub mu1: f64,
    pub mu2: f64,
    pub conv1: ConvKernelBank,
    pub plf: PiecewiseLinearFunction,
    pub conv2: ConvKernelBank,
}

/// One unrolled iteration: Recon, `k` substages, then the multiplier update.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParameters {
    pub rho: f64,
    pub substages: Vec<SubstageParameters>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub stages: Vec<StageParameters>,
}

impl ModelParameters {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn substage_count(&self) -> usize {
        self.stages.first().map_or(0, |s| s.substages.len())
    }

    pub fn filters(&self) -> usize {
        self.stages
            .first()
            .and_then(|s| s.substages.first())
            .map_or(0, |s| s.conv1.len())
    }

    pub fn knot_count(&self) -> usize {
        self.stages
            .first()
            .and_then(|s| s.substages.first())
            .map_or(0, |s| s.plf.len())
    }

    /// Checks that every stage has the same `k`, `L`, `N_c`, shared knots and `rho > 0`.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one stage".into()));
        }
        let (k, l, nc) = (self.substage_count(), self.filters(), self.knot_count());
        if k == 0 {
            return Err(Error::InvalidArgument("stages need at least one substage".into()));
        }
        let knots = self.stages[0].substages[0].plf.knots().to_vec();
        for stage in &self.stages {
            if !(stage.rho > 0.0) || !stage.rho.is_finite() {
                return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", stage.rho)));
            }
            if !stage.eta.is_finite() {
                return Err(Error::NonFinite("eta".into()));
            }
            if stage.substages.len() != k {
                return Err(Error::ParamShape {
                    field: "k",
                    expected: k,
                    found: stage.substages.len(),
                });
            }
            for sub in &stage.substages {
                for (field, found) in [
                    ("L", sub.conv1.len()),
                    ("L", sub.conv2.len()),
                    ("L", sub.conv1.bias.len()),
                    ("L", sub.conv2.bias.len()),
                ] {
                    if found != l {
                        return Err(Error::ParamShape {
                            field,
                            expected: l,
                            found,
                        });
                    }
                }
                if sub.plf.len() != nc {
                    return Err(Error::ParamShape {
                        field: "N_c",
                        expected: nc,
                        found: sub.plf.len(),
                    });
                }
                if sub.plf.knots() != knots.as_slice() {
                    return Err(Error::InvalidArgument("knots differ between stages".into()));
                }
                if !sub.mu1.is_finite() || !sub.mu2.is_finite() {
                    return Err(Error::NonFinite("mu".into()));
                }
            }
        }
        Ok(())
    }

    /// Every learnable scalar, in file order.
    pub fn entries(&self) -> Vec<(ParamRef, f64)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let at = |substage, class, index| ParamRef {
                stage: s,
                substage,
                class,
                index,
            };
            out.push((at(0, ParamClass::Rho, 0), stage.rho));
            for (k, sub) in stage.substages.iter().enumerate() {
                out.push((at(k, ParamClass::Mu1, 0), sub.mu1));
                out.push((at(k, ParamClass::Mu2, 0), sub.mu2));
                push_bank(&mut out, |c, i| at(k, c, i), &sub.conv1, ParamClass::W1, ParamClass::B1);
                for (i, q) in sub.plf.values().iter().enumerate() {
                    out.push((at(k, ParamClass::Q, i), *q));
                }
                push_bank(&mut out, |c, i| at(k, c, i), &sub.conv2, ParamClass::W2, ParamClass::B2);
            }
            out.push((at(0, ParamClass::Eta, 0), stage.eta));
        }
        out
    }

    pub fn get_mut(&mut self, r: &ParamRef) -> Option<&mut f64> {
        let stage = self.stages.get_mut(r.stage)?;
        match r.class {
            ParamClass::Rho => Some(&mut stage.rho),
            ParamClass::Eta => Some(&mut stage.eta),
            class => {
                let sub = stage.substages.get_mut(r.substage)?;
                match class {
                    ParamClass::Mu1 => Some(&mut sub.mu1),
                    ParamClass::Mu2 => Some(&mut sub.mu2),
                    ParamClass::W1 => sub.conv1.kernels.get_mut(r.index / KERNEL_TAPS).map(|k| &mut k[r.index % KERNEL_TAPS]),
                    ParamClass::B1 => sub.conv1.bias.get_mut(r.index),
                    ParamClass::Q => sub.plf.values_mut().get_mut(r.index),
                    ParamClass::W2 => sub.conv2.kernels.get_mut(r.index / KERNEL_TAPS).map(|k| &mut k[r.index % KERNEL_TAPS]),
                    ParamClass::B2 => sub.conv2.bias.get_mut(r.index),
                    ParamClass::Rho | ParamClass::Eta => unreachable!(),
                }
            }
        }
    }

    pub fn get(&self, r: &ParamRef) -> Option<f64> {
        let stage = self.stages.get(r.stage)?;
        match r.class {
            ParamClass::Rho => Some(stage.rho),
            ParamClass::Eta => Some(stage.eta),
            class => {
                let sub = stage.substages.get(r.substage)?;
                match class {
                    ParamClass::Mu1 => Some(sub.mu1),
                    ParamClass::Mu2 => Some(sub.mu2),
                    ParamClass::W1 => sub.conv1.kernels.get(r.index / KERNEL_TAPS).map(|k| k[r.index % KERNEL_TAPS]),
                    ParamClass::B1 => sub.conv1.bias.get(r.index).copied(),
                    ParamClass::Q => sub.plf.values().get(r.index).copied(),
                    ParamClass::W2 => sub.conv2.kernels.get(r.index / KERNEL_TAPS).map(|k| k[r.index % KERNEL_TAPS]),
                    ParamClass::B2 => sub.conv2.bias.get(r.index).copied(),
                    ParamClass::Rho | ParamClass::Eta => unreachable!(),
                }
            }
        }
    }
}

fn push_bank(
    out: &mut Vec<(ParamRef, f64)>,
    at: impl Fn(ParamClass, usize) -> ParamRef,
    bank: &ConvKernelBank,
    w: ParamClass,
    b: ParamClass,
) {
    for (l, k) in bank.kernels.iter().enumerate() {
        for (t, v) in k.iter().enumerate() {
            out.push((at(w, l * KERNEL_TAPS + t), *v));
        }
    }
    for (l, v) in bank.bias.iter().enumerate() {
        out.push((at(b, l), *v));
    }
}

/// The nine learnable parameter classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Rho,
    Mu1,
    Mu2,
    W1,
    B1,
    Q,
    W2,
    B2,
    Eta,
}

impl ParamClass {
    pub const ALL: [ParamClass; 9] = [
        ParamClass::Rho,
        ParamClass::Mu1,
        ParamClass::Mu2,
        ParamClass::W1,
        ParamClass::B1,
        ParamClass::Q,
        ParamClass::W2,
        ParamClass::B2,
        ParamClass::Eta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Rho => "rho",
            ParamClass::Mu1 => "mu1",
            ParamClass::Mu2 => "mu2",
            ParamClass::W1 => "w1",
            ParamClass::B1 => "b1",
            ParamClass::Q => "q",
            ParamClass::W2 => "w2",
            ParamClass::B2 => "b2",
            ParamClass::Eta => "eta",
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Address of one learnable scalar. `substage` is 0 for `rho` and `eta`;
/// `index` is `l * 27 + tap` for kernels, `l` for biases, the knot for `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub stage: usize,
    pub substage: usize,
    pub class: ParamClass,
    pub index: usize,
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage {} substage {} {}[{}]",
            self.stage, self.substage, self.class, self.index
        )
    }
}

/// Gradients laid out like [`ModelParameters`], without the fixed knots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub stages: Vec<StageGradients>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGradients {
    pub rho: f64,
    pub substages: Vec<SubstageGradients>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstageGradients {
    pub mu1: f64,
    pub mu2: f64,
    pub w1: Vec<Kernel>,
    pub b1: Vec<f64>,
    pub q: Vec<f64>,
    pub w2: Vec<Kernel>,
    pub b2: Vec<f64>,
}

impl ParameterGradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Self {
            stages: params
                .stages
                .iter()
                .map(|s| StageGradients {
                    rho: 0.0,
                    eta: 0.0,
                    substages: s
                        .substages
                        .iter()
                        .map(|sub| SubstageGradients {
                            mu1: 0.0,
                            mu2: 0.0,
                            w1: vec![[0.0; KERNEL_TAPS]; sub.conv1.len()],
                            b1: vec![0.0; sub.conv1.len()],
                            q: vec![0.0; sub.plf.len()],
                            w2: vec![[0.0; KERNEL_TAPS]; sub.conv2.len()],
                            b2: vec![0.0; sub.conv2.len()],
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn get(&self, r: &ParamRef) -> Option<f64> {
        let stage = self.stages.get(r.stage)?;
        match r.class {
            ParamClass::Rho => Some(stage.rho),
            ParamClass::Eta => Some(stage.eta),
            class => {
                let sub = stage.substages.get(r.substage)?;
                match class {
                    ParamClass::Mu1 => Some(sub.mu1),
                    ParamClass::Mu2 => Some(sub.mu2),
                    ParamClass::W1 => sub.w1.get(r.index / KERNEL_TAPS).map(|k| k[r.index % KERNEL_TAPS]),
                    ParamClass::B1 => sub.b1.get(r.index).copied(),
                    ParamClass::Q => sub.q.get(r.index).copied(),
                    ParamClass::W2 => sub.w2.get(r.index / KERNEL_TAPS).map(|k| k[r.index % KERNEL_TAPS]),
                    ParamClass::B2 => sub.b2.get(r.index).copied(),
                    ParamClass::Rho | ParamClass::Eta => unreachable!(),
                }
            }
        }
    }

    /// Largest absolute gradient entry.
    pub fn max_abs(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| {
                let subs = s.substages.iter().flat_map(|sub| {
                    [sub.mu1, sub.mu2]
                        .into_iter()
                        .chain(sub.w1.iter().flatten().copied())
                        .chain(sub.b1.iter().copied())
                        .chain(sub.q.iter().copied())
                        .chain(sub.w2.iter().flatten().copied())
                        .chain(sub.b2.iter().copied())
                });
                [s.rho, s.eta].into_iter().chain(subs)
            })
            .fold(0.0, |m, v: f64| m.max(v.abs()))
    }
}

/// Hyperparameters of the unrolled network and its initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Unrolled iterations `n`.
    pub stages: usize,
    /// Substage repeats `k` per iteration.
    pub substages: usize,
    /// Filters `L` per convolution bank (1..=9).
    pub filters: usize,
    /// Piecewise-linear control points `N_c`.
    pub knots: usize,
    /// Knots are equispaced on `[-knot_range, knot_range]`.
    pub knot_range: f64,
    pub rho: f64,
    /// Step size; enters only through `mu2 = alpha_r * rho` and the Conv2 scale.
    pub alpha_r: f64,
    pub eta: f64,
    /// Regularization weight folded into the initial Conv2 kernels.
    pub lambda_init: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: 13,
            substages: 1,
            filters: 9,
            knots: 63,
            knot_range: 1.0,
            rho: 0.2,
            alpha_r: 0.3,
            eta: 1.8,
            lambda_init: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.stages < 1 {
            return bad("stages must be >= 1".into());
        }
        if self.substages < 1 {
            return bad("substages must be >= 1".into());
        }
        if !(1..=FILTER_BANK_SIZE).contains(&self.filters) {
            return bad(format!(
                "filters must be in 1..={FILTER_BANK_SIZE}, got {}",
                self.filters
            ));
        }
        if self.knots < 2 {
            return bad("knots must be >= 2".into());
        }
        if !(self.knot_range > 0.0 && self.knot_range.is_finite()) {
            return bad(format!("knot range must be > 0, got {}", self.knot_range));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        for (name, v) in [
            ("alpha_r", self.alpha_r),
            ("eta", self.eta),
            ("lambda_init", self.lambda_init),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Size of the full initialization bank: 8 spatial DCT filters and one coil TV filter.
pub const FILTER_BANK_SIZE: usize = 9;

/// 3-point orthonormal DCT-II basis vector `u` sampled at `n`.
fn dct3(u: usize, n: usize) -> f64 {
    let alpha = if u == 0 { (1.0f64 / 3.0).sqrt() } else { (2.0f64 / 3.0).sqrt() };
    alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * u as f64 / 6.0).cos()
}

/// The 8 non-DC 3x3 DCT-II filters in the center coil slice, then the coil-axis
/// finite difference `V(j) - V(j - 1)` at the spatial center.
pub fn initial_filter_bank() -> Vec<Kernel> {
    let mut bank = Vec::with_capacity(FILTER_BANK_SIZE);
    for u in 0..3 {
        for v in 0..3 {
            if (u, v) == (0, 0) {
                continue;
            }
            let mut k = [0.0; KERNEL_TAPS];
            for y in 0..3 {
                for x in 0..3 {
                    k[tap(1, y, x)] = dct3(u, y) * dct3(v, x);
                }
            }
            bank.push(k);
        }
    }
    let mut tv = [0.0; KERNEL_TAPS];
    tv[tap(0, 1, 1)] = -1.0;
    tv[tap(1, 1, 1)] = 1.0;
    bank.push(tv);
    bank
}

/// Initial parameters, replicated across every stage and substage.
///
/// The first `L` filters of [`initial_filter_bank`] seed Conv1; Conv2 starts as
/// their adjoint scaled by `alpha_r * lambda_init`. The nonlinearity starts as
/// the identity.
pub fn init_params(config: &NetworkConfig) -> Result<ModelParameters> {
    config.validate()?;
    let kernels: Vec<Kernel> = initial_filter_bank().into_iter().take(config.filters).collect();
    let conv1 = ConvKernelBank::new(kernels, vec![0.0; config.filters])?;
    let conv2 = conv1.adjoint_scaled(config.alpha_r * config.lambda_init);
    let plf = PiecewiseLinearFunction::identity(config.knots, config.knot_range)?;
    let mu2 = config.alpha_r * config.rho;
    let sub = SubstageParameters {
        mu1: 1.0 - mu2,
        mu2,
        conv1,
        plf,
        conv2,
    };
    let stage = StageParameters {
        rho: config.rho,
        substages: vec![sub; config.substages],
        eta: config.eta,
    };
    Ok(ModelParameters {
        stages: vec![stage; config.stages],
    })
}
