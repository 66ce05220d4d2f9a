//! Central finite-difference checks for network gradients.
//!
//! Only [`NetworkSpec::forward_batch`] is used here, so the numbers are
//! independent of the hand-written backward passes they are compared with.

use crate::error::Result;
use crate::nn::NetworkSpec;
use crate::tensor::ParamTree;

/// Denominator floor for [`rel_error`]; keeps near-zero gradients from
/// dominating the relative error.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn objective(net: &NetworkSpec, params: &ParamTree, input: &[f64], batch: usize, upstream: &[f64]) -> Result<f64> {
    let y = net.forward_batch(params, input, batch)?;
    Ok(y.iter().zip(upstream).map(|(a, b)| a * b).sum())
}

/// Numeric gradient of `sum(upstream * forward)` with respect to every parameter.
pub fn numeric_param_grad(
    net: &NetworkSpec,
    params: &ParamTree,
    input: &[f64],
    batch: usize,
    upstream: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let base = params.flatten();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = objective(net, &ParamTree::unflatten(&probe, params)?, input, batch, upstream)?;
        probe[i] = base[i] - h;
        let minus = objective(net, &ParamTree::unflatten(&probe, params)?, input, batch, upstream)?;
        probe[i] = base[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Numeric gradient of `sum(upstream * forward)` with respect to the input.
pub fn numeric_input_grad(
    net: &NetworkSpec,
    params: &ParamTree,
    input: &[f64],
    batch: usize,
    upstream: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = input.to_vec();
    let mut out = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        probe[i] = input[i] + h;
        let plus = objective(net, params, &probe, batch, upstream)?;
        probe[i] = input[i] - h;
        let minus = objective(net, params, &probe, batch, upstream)?;
        probe[i] = input[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Discrepancies between analytic and numeric gradients of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradErrors {
    /// Largest [`rel_error`] over the probed coordinates.
    pub elementwise: f64,
    /// `|a - n|_2 / max(|a|_2, |n|_2)`, separately for the parameter and the
    /// input gradient; the larger of the two.
    pub normwise: f64,
}

fn normwise(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn compare(pa: &[f64], pn: &[f64], xa: &[f64], xn: &[f64]) -> GradErrors {
    let elementwise = pa
        .iter()
        .zip(pn)
        .chain(xa.iter().zip(xn))
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max);
    GradErrors {
        elementwise,
        normwise: normwise(pa, pn).max(normwise(xa, xn)),
    }
}

/// Compares every parameter and input coordinate.
pub fn check(
    net: &NetworkSpec,
    params: &ParamTree,
    input: &[f64],
    batch: usize,
    upstream: &[f64],
    h: f64,
) -> Result<GradErrors> {
    let (_, tape) = net.forward_cached(params, input, batch)?;
    let (grads, dx) = net.backward(params, &tape, upstream, true)?;
    let numeric = numeric_param_grad(net, params, input, batch, upstream, h)?;
    let numeric_dx = numeric_input_grad(net, params, input, batch, upstream, h)?;
    Ok(compare(&grads.flatten(), &numeric, &dx.unwrap_or_default(), &numeric_dx))
}

/// Largest [`rel_error`] between analytic and numeric gradients (parameters
/// and input) for one instance.
pub fn max_rel_error(
    net: &NetworkSpec,
    params: &ParamTree,
    input: &[f64],
    batch: usize,
    upstream: &[f64],
    h: f64,
) -> Result<f64> {
    Ok(check(net, params, input, batch, upstream, h)?.elementwise)
}

/// Like [`check`] but only probes the given flat parameter indices (in
/// [`ParamTree::flatten`] order) and input indices. For networks too large
/// to perturb every coordinate.
#[allow(clippy::too_many_arguments)]
pub fn check_at(
    net: &NetworkSpec,
    params: &ParamTree,
    input: &[f64],
    batch: usize,
    upstream: &[f64],
    h: f64,
    param_idx: &[usize],
    input_idx: &[usize],
) -> Result<GradErrors> {
    let (_, tape) = net.forward_cached(params, input, batch)?;
    let (grads, dx) = net.backward(params, &tape, upstream, true)?;
    let analytic = grads.flatten();
    let dx = dx.unwrap_or_default();

    // flat index -> (entry, offset)
    let mut starts = Vec::new();
    let mut acc = 0;
    for (_, a) in params.iter() {
        starts.push(acc);
        acc += a.len();
    }
    let mut probe = params.clone();
    let (mut pa, mut pn) = (Vec::new(), Vec::new());
    for &i in param_idx {
        let e = starts.partition_point(|&s| s <= i) - 1;
        let off = i - starts[e];
        let cell = |t: &mut ParamTree, v: f64| {
            let (_, a) = t.iter_mut().nth(e).expect("entry");
            a.data_mut()[off] = v;
        };
        let x0 = params.iter().nth(e).expect("entry").1.data()[off];
        cell(&mut probe, x0 + h);
        let plus = objective(net, &probe, input, batch, upstream)?;
        cell(&mut probe, x0 - h);
        let minus = objective(net, &probe, input, batch, upstream)?;
        cell(&mut probe, x0);
        pa.push(analytic[i]);
        pn.push((plus - minus) / (2.0 * h));
    }
    let mut xin = input.to_vec();
    let (mut xa, mut xn) = (Vec::new(), Vec::new());
    for &i in input_idx {
        let x0 = input[i];
        xin[i] = x0 + h;
        let plus = objective(net, params, &xin, batch, upstream)?;
        xin[i] = x0 - h;
        let minus = objective(net, params, &xin, batch, upstream)?;
        xin[i] = x0;
        xa.push(dx[i]);
        xn.push((plus - minus) / (2.0 * h));
    }
    Ok(compare(&pa, &pn, &xa, &xn))
}
