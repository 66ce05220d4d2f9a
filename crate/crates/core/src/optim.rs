//! Eligibility traces, SGD, ObGD and gradient orthogonalization.
//!
//! Multi-component parameters (encoder + head) are passed as slices of
//! [`ParamTree`]s; norms and inner products run over their concatenation.

use crate::error::{Error, Result};
use crate::tensor::ParamTree;

/// Denominator guard of the momentum projection.
pub const ORTHO_EPS: f64 = 1e-12;

fn check_all(a: &[ParamTree], b: &[&ParamTree]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    a.iter().zip(b).try_for_each(|(x, y)| x.check_structure(y))
}

/// Accumulating eligibility traces `z <- gamma * lambda * z + grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    z: Vec<ParamTree>,
    gamma: f64,
    lambda: f64,
}

impl TraceSet {
    pub fn new(templates: &[&ParamTree], gamma: f64, lambda: f64) -> Self {
        Self {
            z: templates.iter().map(|t| t.zeros_like()).collect(),
            gamma,
            lambda,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn trees(&self) -> &[ParamTree] {
        &self.z
    }

    pub fn update(&mut self, grads: &[&ParamTree]) -> Result<()> {
        check_all(&self.z, grads)?;
        let decay = self.gamma * self.lambda;
        for (z, g) in self.z.iter_mut().zip(grads) {
            z.scale(decay);
            z.axpy(1.0, g)?;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.z.iter_mut().for_each(ParamTree::fill_zero);
    }

    pub fn is_zero(&self) -> bool {
        self.z.iter().all(ParamTree::is_zero)
    }

    pub fn l1_norm(&self) -> f64 {
        self.z.iter().map(ParamTree::l1_norm).sum()
    }
}

/// Scalar counterpart of [`TraceSet`], used for QRC's `z^h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarTrace {
    pub value: f64,
    decay: f64,
}

impl ScalarTrace {
    pub fn new(gamma: f64, lambda: f64) -> Self {
        Self {
            value: 0.0,
            decay: gamma * lambda,
        }
    }

    pub fn update(&mut self, x: f64) {
        self.value = self.decay * self.value + x;
    }

    pub fn reset(&mut self) {
        self.value = 0.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObgdConfig {
    /// Largest step size ObGD may pick.
    pub alpha_star: f64,
    pub kappa: f64,
}

impl Default for ObgdConfig {
    fn default() -> Self {
        Self {
            alpha_star: 1.0,
            kappa: 2.0,
        }
    }
}

impl ObgdConfig {
    pub fn new(alpha_star: f64, kappa: f64) -> Result<Self> {
        if kappa <= 1.0 {
            return Err(Error::config("kappa", "must be greater than 1"));
        }
        if alpha_star <= 0.0 {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(Self { alpha_star, kappa })
    }

    /// `min(alpha*, 1 / (kappa * max(1, |delta|) * ||z||_1))`.
    pub fn step_size(&self, delta: f64, trace_l1: f64) -> f64 {
        if trace_l1 == 0.0 {
            return self.alpha_star;
        }
        let delta_bar = delta.abs().max(1.0);
        self.alpha_star.min(1.0 / (self.kappa * delta_bar * trace_l1))
    }
}

/// The ObGD update `lr * delta * z` without applying it, plus the chosen `lr`.
pub fn obgd_update(cfg: &ObgdConfig, delta: f64, traces: &TraceSet) -> (Vec<ParamTree>, f64) {
    let lr = cfg.step_size(delta, traces.l1_norm());
    let scale = lr * delta;
    (traces.z.iter().map(|z| z.scaled(scale)).collect(), lr)
}

/// Applies one ObGD step in place and returns the step size used.
pub fn obgd_step(cfg: &ObgdConfig, delta: f64, traces: &TraceSet, params: &mut [&mut ParamTree]) -> Result<f64> {
    let lr = cfg.step_size(delta, traces.l1_norm());
    if params.len() != traces.z.len() {
        return Err(Error::LengthMismatch {
            expected: traces.z.len(),
            got: params.len(),
        });
    }
    for (p, z) in params.iter_mut().zip(&traces.z) {
        p.axpy(lr * delta, z)?;
    }
    Ok(lr)
}

pub fn sgd_step(params: &mut ParamTree, grad: &ParamTree, lr: f64) -> Result<()> {
    params.axpy(-lr, grad)
}

/// What the projection momentum accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentumSource {
    /// The gradient after projection.
    Projected,
    /// The gradient before projection.
    Raw,
}

/// Per-module momentum used to strip temporally redundant gradient directions.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoState {
    m: ParamTree,
    beta: f64,
    source: MomentumSource,
}

impl OrthoState {
    pub fn new(template: &ParamTree, beta: f64, source: MomentumSource) -> Self {
        Self {
            m: template.zeros_like(),
            beta,
            source,
        }
    }

    pub fn momentum(&self) -> &ParamTree {
        &self.m
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `g - (g.m)/(|m|^2 + eps) m`, then folds the result (or `g`) into `m`.
    pub fn project(&mut self, grad: &ParamTree) -> Result<ParamTree> {
        let coef = grad.dot(&self.m)? / (self.m.norm_sq() + ORTHO_EPS);
        let mut out = grad.clone();
        out.axpy(-coef, &self.m)?;
        let src = match self.source {
            MomentumSource::Projected => &out,
            MomentumSource::Raw => grad,
        };
        self.m.scale(self.beta);
        self.m.axpy(1.0 - self.beta, src)?;
        Ok(out)
    }
}

/// Functional form of [`OrthoState::project`].
pub fn orth_project(state: &OrthoState, grad: &ParamTree) -> Result<(ParamTree, OrthoState)> {
    let mut next = state.clone();
    let out = next.project(grad)?;
    Ok((out, next))
}

/// Removes from `spr_update` its component along `rl_update`. A zero RL
/// update leaves the SPR update unchanged.
pub fn orth2_project(spr_update: &ParamTree, rl_update: &ParamTree) -> Result<ParamTree> {
    let nn = rl_update.norm_sq();
    let mut out = spr_update.clone();
    if nn > 0.0 {
        let coef = spr_update.dot(rl_update)? / nn;
        out.axpy(-coef, rl_update)?;
    }
    Ok(out)
}

/// `params + mu * rl_update - (1 - mu) * spr_scale * spr_update`, only over
/// the entries present in the updates (the shared parameters).
pub fn mixed_shared_update(
    params: &mut ParamTree,
    rl_update: &ParamTree,
    spr_update: &ParamTree,
    mu_shared: f64,
    spr_scale: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&mu_shared) {
        return Err(Error::config("mu_shared", "must be in [0, 1]"));
    }
    rl_update.check_structure(spr_update)?;
    params.axpy_subset(mu_shared, rl_update)?;
    params.axpy_subset(-(1.0 - mu_shared) * spr_scale, spr_update)
}
