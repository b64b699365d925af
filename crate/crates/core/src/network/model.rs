//! Unrolled forward pass and hand-derived reverse-mode gradients.
//!
//! Complex quantities are treated as pairs of independent reals, so the
//! gradient of a real loss with respect to a complex stack `Z` is the stack
//! `dL/dRe Z + i dL/dIm Z`, and `<a, b>` below means `sum Re(conj(a) b)`.

use num_complex::Complex64;

use super::layers::{
    bias_grad, conv_bank_forward, conv_bank_fuse, correlate_adjoint_acc, kernel_grad_acc, plf_apply,
    recon_forward,
};
use super::params::{ModelParameters, ParameterGradients, PiecewiseLinearFunction};
use crate::error::{Error, Result};
use crate::numerics::{apply_mask, fft2_centered, ifft2_centered, ComplexImageStack, KSpaceStack, Shape, Stack};
use crate::sampling::SamplingMask;

#[derive(Debug, Clone, PartialEq)]
struct SubstageTape {
    v_in: ComplexImageStack,
    c1: Vec<ComplexImageStack>,
}

#[derive(Debug, Clone, PartialEq)]
struct StageTape {
    b_prev: ComplexImageStack,
    x: ComplexImageStack,
    anchor: KSpaceStack,
    substages: Vec<SubstageTape>,
    v_out: ComplexImageStack,
}

/// Forward intermediates needed by [`model_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct TapeCache {
    shape: Shape,
    measured: KSpaceStack,
    weights: Vec<f64>,
    stages: Vec<StageTape>,
    final_anchor: KSpaceStack,
    filters: usize,
    knots: usize,
}

impl TapeCache {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Conv1 outputs of stage `stage`, substage `substage`.
    pub fn features(&self, stage: usize, substage: usize) -> &[ComplexImageStack] {
        &self.stages[stage].substages[substage].c1
    }

    /// Zero-filled initialization the network started from.
    pub fn initial_estimate(&self) -> ComplexImageStack {
        ifft2_centered(&self.measured)
    }
}

/// Run the unrolled network on undersampled k-space `y`.
pub fn model_forward(
    y: &KSpaceStack,
    mask: &SamplingMask,
    params: &ModelParameters,
) -> Result<(ComplexImageStack, TapeCache)> {
    params.validate()?;
    let shape = y.shape();
    let measured = apply_mask(y, mask)?;
    let weights: Vec<f64> = (0..shape.plane()).map(|i| mask.weight(i)).collect();

    let mut v = ifft2_centered(&measured);
    let mut b = ComplexImageStack::zeros(shape);
    let mut stages = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        let (x, cache) = recon_forward(&measured, &weights, &v, &b, stage.rho);
        let mut subs = Vec::with_capacity(stage.substages.len());
        for sub in &stage.substages {
            let c1 = conv_bank_forward(&v, &sub.conv1);
            let h: Vec<_> = c1.iter().map(|c| plf_apply(c, &sub.plf)).collect();
            let c2 = conv_bank_fuse(&h, &sub.conv2);
            let next = addition(&v, &x, &b, &c2, sub.mu1, sub.mu2);
            subs.push(SubstageTape { v_in: v, c1 });
            v = next;
        }
        let b_next = b.add(&x.sub(&v).scaled(stage.eta));
        stages.push(StageTape {
            b_prev: std::mem::replace(&mut b, b_next),
            x,
            anchor: cache.anchor,
            substages: subs,
            v_out: v.clone(),
        });
    }
    let last_rho = params.stages.last().map(|s| s.rho).unwrap_or(1.0);
    let (out, cache) = recon_forward(&measured, &weights, &v, &b, last_rho);
    if !out.is_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    let tape = TapeCache {
        shape,
        measured,
        weights,
        stages,
        final_anchor: cache.anchor,
        filters: params.filters(),
        knots: params.knot_count(),
    };
    Ok((out, tape))
}

fn addition(
    v: &ComplexImageStack,
    x: &ComplexImageStack,
    b: &ComplexImageStack,
    c2: &ComplexImageStack,
    mu1: f64,
    mu2: f64,
) -> ComplexImageStack {
    let data = v
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .zip(b.as_slice().iter().zip(c2.as_slice()))
        .map(|((v, x), (b, c))| v * mu1 + (x + b) * mu2 - c)
        .collect();
    Stack::from_vec_unchecked(v.shape(), data)
}

/// Reverse-mode gradients of a scalar loss given `dL/dX_out`.
pub fn model_backward(
    tape: &TapeCache,
    grad_out: &ComplexImageStack,
    params: &ModelParameters,
) -> Result<ParameterGradients> {
    backward_impl(tape, grad_out, params, false)
}

/// Backward pass with the recon-layer adjoint replaced by the forward
/// transform. Only useful as a negative control for gradient checking.
#[doc(hidden)]
pub fn model_backward_faulty(
    tape: &TapeCache,
    grad_out: &ComplexImageStack,
    params: &ModelParameters,
) -> Result<ParameterGradients> {
    backward_impl(tape, grad_out, params, true)
}

fn check_tape(tape: &TapeCache, grad_out: &ComplexImageStack, params: &ModelParameters) -> Result<()> {
    let substages_match = tape
        .stages
        .iter()
        .zip(&params.stages)
        .all(|(t, p)| t.substages.len() == p.substages.len());
    if tape.stages.len() != params.stages.len()
        || !substages_match
        || tape.filters != params.filters()
        || tape.knots != params.knot_count()
    {
        return Err(Error::ShapeMismatch(
            "tape was recorded with a different network configuration".into(),
        ));
    }
    if grad_out.shape() != tape.shape {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {} vs tape {}",
            grad_out.shape(),
            tape.shape
        )));
    }
    Ok(())
}

/// Recon backward. Returns `dL/drho` and the gradient with respect to `V - b`.
fn recon_backward(
    tape: &TapeCache,
    anchor: &KSpaceStack,
    rho: f64,
    grad_x: &ComplexImageStack,
    faulty: bool,
) -> (f64, ComplexImageStack) {
    let plane = tape.shape.plane();
    let g_hat = fft2_centered(grad_x);
    let mut g_rho = 0.0;
    let mut g_anchor = KSpaceStack::zeros(tape.shape);
    for (i, ((gh, ga), (g, y))) in g_hat
        .as_slice()
        .iter()
        .zip(g_anchor.as_mut_slice())
        .zip(anchor.as_slice().iter().zip(tape.measured.as_slice()))
        .enumerate()
    {
        let m = tape.weights[i % plane];
        let denom = m + rho;
        let d_rho = (g - y) * (m / (denom * denom));
        g_rho += gh.re * d_rho.re + gh.im * d_rho.im;
        *ga = gh * (rho / denom);
    }
    let g_diff = if faulty {
        fft2_centered(&g_anchor.retag()).retag()
    } else {
        ifft2_centered(&g_anchor)
    };
    (g_rho, g_diff)
}

fn plf_backward(
    c1: &ComplexImageStack,
    grad_h: &[Complex64],
    plf: &PiecewiseLinearFunction,
    grad_q: &mut [f64],
) -> Vec<Complex64> {
    let mut part = |t: f64, g: f64| -> f64 {
        let (_, seg, theta) = plf.locate(t);
        grad_q[seg] += g * (1.0 - theta);
        grad_q[seg + 1] += g * theta;
        g * plf.slope(seg)
    };
    c1.as_slice()
        .iter()
        .zip(grad_h)
        .map(|(c, g)| Complex64::new(part(c.re, g.re), part(c.im, g.im)))
        .collect()
}

fn backward_impl(
    tape: &TapeCache,
    grad_out: &ComplexImageStack,
    params: &ModelParameters,
    faulty: bool,
) -> Result<ParameterGradients> {
    check_tape(tape, grad_out, params)?;
    let shape = tape.shape;
    let mut grads = ParameterGradients::zeros_like(params);
    let n = params.stages.len();
    if n == 0 {
        return Ok(grads);
    }

    let (g_rho, g_diff) = recon_backward(tape, &tape.final_anchor, params.stages[n - 1].rho, grad_out, faulty);
    grads.stages[n - 1].rho += g_rho;
    let mut g_v = g_diff.clone();
    let mut g_b = g_diff.scaled(-1.0);

    for s in (0..n).rev() {
        let st = &tape.stages[s];
        let p = &params.stages[s];
        let gs = &mut grads.stages[s];

        // b_s = b_prev + eta (X - V_s)
        gs.eta += g_b.real_dot(&st.x.sub(&st.v_out));
        let mut g_x = g_b.scaled(p.eta);
        g_v.axpy_in_place(-p.eta, &g_b);
        let mut g_b_prev = g_b;

        let x_plus_b = st.x.add(&st.b_prev);
        for k in (0..p.substages.len()).rev() {
            let sub = &p.substages[k];
            let sub_tape = &st.substages[k];
            let sg = &mut gs.substages[k];

            // V_out = mu1 V_in + mu2 (X + b_prev) - C2
            sg.mu1 += g_v.real_dot(&sub_tape.v_in);
            sg.mu2 += g_v.real_dot(&x_plus_b);
            g_x.axpy_in_place(sub.mu2, &g_v);
            g_b_prev.axpy_in_place(sub.mu2, &g_v);
            let g_c2: Vec<Complex64> = g_v.as_slice().iter().map(|z| -z).collect();

            let mut g_v_in = g_v.scaled(sub.mu1);
            for l in 0..sub.conv1.len() {
                let h = plf_apply(&sub_tape.c1[l], &sub.plf);
                kernel_grad_acc(&mut sg.w2[l], &g_c2, h.as_slice(), shape);
                sg.b2[l] += bias_grad(&g_c2);
                let mut g_h = vec![Complex64::new(0.0, 0.0); shape.len()];
                correlate_adjoint_acc(&mut g_h, &g_c2, &sub.conv2.kernels[l], shape);

                let g_c1 = plf_backward(&sub_tape.c1[l], &g_h, &sub.plf, &mut sg.q);
                kernel_grad_acc(&mut sg.w1[l], &g_c1, sub_tape.v_in.as_slice(), shape);
                sg.b1[l] += bias_grad(&g_c1);
                correlate_adjoint_acc(g_v_in.as_mut_slice(), &g_c1, &sub.conv1.kernels[l], shape);
            }
            g_v = g_v_in;
        }

        let (g_rho, g_diff) = recon_backward(tape, &st.anchor, p.rho, &g_x, faulty);
        gs.rho += g_rho;
        g_v.axpy_in_place(1.0, &g_diff);
        g_b_prev.axpy_in_place(-1.0, &g_diff);
        g_b = g_b_prev;
    }
    Ok(grads)
}
