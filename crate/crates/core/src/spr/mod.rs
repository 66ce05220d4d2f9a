//! Self-predictive representations on a short window of the stream.
//!
//! The online encoder embeds the oldest stored observation, the dynamics
//! model rolls the latent forward under the stored actions, and each predicted
//! latent is projected and compared by cosine similarity with the target
//! projection of the observed future latent.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::agents::{Agent, QNetwork, RlUpdate};
use crate::analysis::grad_cosine;
use crate::envs::{EnvKind, Transition};
use crate::error::{Error, Result};
use crate::nn::{build_network, HeadKind, NetworkSpec};
use crate::optim::{mixed_shared_update, orth2_project, MomentumSource, OrthoState};
use crate::rngs::{stream, Stream};
use crate::tensor::{Array, Component, ParamTree};

/// Guard on the norms inside the cosine similarity.
pub const NORM_EPS: f64 = 1e-8;
const INTENSITY_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SprConfig {
    pub k: usize,
    pub lambda: f64,
    pub tau: f64,
    pub augment: bool,
    /// Largest random shift in cells.
    pub shift: usize,
    pub orth: bool,
    pub orth2: bool,
    pub beta_orth: f64,
    pub momentum: MomentumSource,
    pub shared_projection: bool,
    pub lr: f64,
    pub mu_shared: f64,
}

impl Default for SprConfig {
    fn default() -> Self {
        Self {
            k: 5,
            lambda: 2.0,
            tau: 0.0,
            augment: true,
            shift: 1,
            orth: false,
            orth2: false,
            beta_orth: 0.99,
            momentum: MomentumSource::Projected,
            shared_projection: true,
            lr: 1e-4,
            mu_shared: 0.5,
        }
    }
}

impl SprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("spr.k", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("spr.tau", "must be in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("spr.lambda", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta_orth) {
            return Err(Error::config("spr.beta_orth", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mu_shared) {
            return Err(Error::config("spr.mu_shared", "must be in [0, 1]"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("spr.lr", "must be non-negative"));
        }
        Ok(())
    }
}

/// The last `k + 1` observations and `k` actions of the current episode.
#[derive(Clone, Debug)]
pub struct StreamWindow {
    k: usize,
    obs: VecDeque<Array>,
    actions: VecDeque<usize>,
}

impl StreamWindow {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            obs: VecDeque::with_capacity(k + 1),
            actions: VecDeque::with_capacity(k),
        }
    }

    pub fn push(&mut self, tr: &Transition) {
        if self.obs.is_empty() {
            self.obs.push_back(tr.obs.clone());
        }
        self.actions.push_back(tr.action);
        self.obs.push_back(tr.next_obs.clone());
        while self.actions.len() > self.k {
            self.actions.pop_front();
            self.obs.pop_front();
        }
    }

    /// Number of stored transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.actions.len() == self.k
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
    }

    pub fn observations(&self) -> impl Iterator<Item = &Array> {
        self.obs.iter()
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions.iter().copied()
    }
}

/// Intensity noise `x * (1 + 0.05 * clip(n, -2, 2))` with one draw per
/// observation, then for `[C, H, W]` frames a random translation of up to
/// `shift` cells with edge replication.
pub fn augment<R: Rng + ?Sized>(obs: &Array, shift: usize, rng: &mut R) -> Array {
    let n: f64 = StandardNormal.sample(rng);
    let scale = 1.0 + INTENSITY_SIGMA * n.clamp(-2.0, 2.0);
    let shape = obs.shape().to_vec();
    let src = obs.data();
    if shape.len() != 3 || shift == 0 {
        let data = src.iter().map(|v| v * scale).collect();
        return Array::from_vec(&shape, data).expect("same shape");
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let s = shift as i64;
    let dy = rng.random_range(-s..=s);
    let dx = rng.random_range(-s..=s);
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx] * scale;
            }
        }
    }
    Array::from_vec(&shape, out).expect("same shape")
}

/// Dynamics, projection and prediction networks plus the target copies.
#[derive(Clone, Debug)]
pub struct SprHeads {
    pub dynamics_spec: NetworkSpec,
    pub projection_spec: NetworkSpec,
    pub prediction_spec: NetworkSpec,
    pub dynamics: ParamTree,
    /// Own projection parameters; `None` when shared with the Q head.
    pub projection: Option<ParamTree>,
    pub prediction: ParamTree,
    pub target_encoder: ParamTree,
    pub target_projection: ParamTree,
    phi_template: ParamTree,
    n_actions: usize,
}

impl SprHeads {
    pub fn new(env: EnvKind, net: &QNetwork, shared_projection: bool, seed: u64) -> Result<Self> {
        let dims = env.arch_dims();
        let dynamics_spec = build_network(env.family(), HeadKind::Dynamics, &dims)?;
        let projection_spec = build_network(env.family(), HeadKind::Projection, &dims)?;
        let prediction_spec = build_network(env.family(), HeadKind::Prediction, &dims)?;
        let dynamics = dynamics_spec.init_params(Component::Dynamics, 0.0, &mut stream(seed, Stream::InitDynamics));
        let prediction =
            prediction_spec.init_params(Component::Prediction, 0.0, &mut stream(seed, Stream::InitPrediction));
        let projection = if shared_projection {
            None
        } else {
            Some(projection_spec.init_params(Component::Projection, 0.0, &mut stream(seed, Stream::InitProjection)))
        };
        let mut heads = Self {
            target_encoder: net.encoder.clone().with_component(Component::TargetEncoder),
            target_projection: projection_spec.zero_params(Component::TargetProjection),
            phi_template: projection_spec.zero_params(Component::Projection),
            n_actions: env.n_actions(),
            dynamics_spec,
            projection_spec,
            prediction_spec,
            dynamics,
            projection,
            prediction,
        };
        heads.target_projection = heads.projection_params(net)?.with_component(Component::TargetProjection);
        Ok(heads)
    }

    pub fn shared_projection(&self) -> bool {
        self.projection.is_none()
    }

    /// Copy of the current online projection parameters.
    pub fn projection_params(&self, net: &QNetwork) -> Result<ParamTree> {
        match &self.projection {
            Some(p) => Ok(p.clone()),
            None => Ok(net.head.restrict(&self.phi_template)?.with_component(Component::Projection)),
        }
    }

    /// Tree holding the online projection entries; the whole Q head when
    /// shared.
    fn projection_view<'a>(&'a self, net: &'a QNetwork) -> &'a ParamTree {
        self.projection.as_ref().unwrap_or(&net.head)
    }

    /// Zero tree with the projection's paths and shapes.
    pub fn projection_template(&self) -> &ParamTree {
        &self.phi_template
    }

    /// `target <- (1 - tau) * online + tau * target` for θ′ and φ′.
    pub fn ema_update(&mut self, net: &QNetwork, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("spr.tau", "must be in [0, 1]"));
        }
        ema(&mut self.target_encoder, &net.encoder, tau)?;
        let online = self.projection.as_ref().unwrap_or(&net.head);
        ema(&mut self.target_projection, online, tau)
    }

    fn dyn_input(&self, latent: &[f64], action: usize) -> Vec<f64> {
        let spatial = (self.dynamics_spec.input_len() - latent.len()) / self.n_actions;
        let mut x = Vec::with_capacity(self.dynamics_spec.input_len());
        x.extend_from_slice(latent);
        for a in 0..self.n_actions {
            let v = if a == action { 1.0 } else { 0.0 };
            x.extend(std::iter::repeat_n(v, spatial));
        }
        x
    }
}

/// EMA over the entries of `target`, read by path from `online`.
fn ema(target: &mut ParamTree, online: &ParamTree, tau: f64) -> Result<()> {
    for (p, t) in target.iter_mut() {
        let o = online.get(p).ok_or_else(|| Error::TreeMismatch { path: p.to_string() })?;
        if o.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                layer: p.to_string(),
                expected: t.shape().to_vec(),
                got: o.shape().to_vec(),
            });
        }
        if tau == 0.0 {
            t.data_mut().copy_from_slice(o.data());
        } else {
            for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                *x = tau * *x + (1.0 - tau) * y;
            }
        }
    }
    Ok(())
}

/// Gradients of the SPR loss (unscaled) per module.
#[derive(Clone, Debug)]
pub struct SprGrads {
    pub loss: f64,
    pub encoder: ParamTree,
    pub dynamics: ParamTree,
    pub projection: ParamTree,
    pub prediction: ParamTree,
}

/// `-sum_k cos(y_k, t_k)` over rows of length `d`, and its gradient in `y`.
pub fn cosine_loss(y: &[f64], t: &[f64], d: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; y.len()];
    for ((yk, tk), gk) in y.chunks_exact(d).zip(t.chunks_exact(d)).zip(grad.chunks_exact_mut(d)) {
        let ny = yk.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = tk.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dy = ny.max(NORM_EPS);
        let dt = nt.max(NORM_EPS);
        let c = yk.iter().zip(tk).map(|(a, b)| a * b).sum::<f64>() / (dy * dt);
        loss -= c;
        let radial = if ny > NORM_EPS { c / (ny * ny) } else { 0.0 };
        for ((g, &a), &b) in gk.iter_mut().zip(yk).zip(tk) {
            *g = -(b / (dy * dt) - radial * a);
        }
    }
    (loss, grad)
}

/// SPR loss and gradients for a window of `k + 1` observations and `k`
/// actions (already augmented if augmentation is on).
pub fn spr_loss_on(net: &QNetwork, heads: &SprHeads, obs: &[Array], actions: &[usize]) -> Result<SprGrads> {
    let k = actions.len();
    if k == 0 || obs.len() != k + 1 {
        return Err(Error::LengthMismatch {
            expected: k + 1,
            got: obs.len(),
        });
    }
    let lat = net.latent_len();
    let phi = heads.projection_view(net);

    let (z0, enc_tape) = net.encoder_spec.forward_cached(&net.encoder, obs[0].data(), 1)?;
    let mut tapes = Vec::with_capacity(k);
    let mut z_hat = Vec::with_capacity(k * lat);
    let mut z = z0;
    for &a in actions {
        let x = heads.dyn_input(&z, a);
        let (next, tape) = heads.dynamics_spec.forward_cached(&heads.dynamics, &x, 1)?;
        tapes.push(tape);
        z_hat.extend_from_slice(&next);
        z = next;
    }
    let (p, proj_tape) = heads.projection_spec.forward_cached(phi, &z_hat, k)?;
    let (y, pred_tape) = heads.prediction_spec.forward_cached(&heads.prediction, &p, k)?;

    let future: Vec<f64> = obs[1..].iter().flat_map(|o| o.data().iter().copied()).collect();
    let tz = net.encoder_spec.forward_batch(&heads.target_encoder, &future, k)?;
    let target = heads.projection_spec.forward_batch(&heads.target_projection, &tz, k)?;

    let d = heads.prediction_spec.output_len();
    let (loss, dy) = cosine_loss(&y, &target, d);
    if !loss.is_finite() {
        return Err(Error::non_finite(format!("spr loss is {loss}")));
    }

    let (g_pred, dp) = heads.prediction_spec.backward(&heads.prediction, &pred_tape, &dy, true)?;
    let (g_proj, dz_hat) = heads.projection_spec.backward(phi, &proj_tape, &dp.expect("requested"), true)?;
    let dz_hat = dz_hat.expect("requested");

    let mut g_dyn = heads.dynamics.zeros_like();
    let mut carry = vec![0.0; lat];
    for j in (0..k).rev() {
        let mut up = dz_hat[j * lat..(j + 1) * lat].to_vec();
        for (u, c) in up.iter_mut().zip(&carry) {
            *u += c;
        }
        let (g, dx) = heads.dynamics_spec.backward(&heads.dynamics, &tapes[j], &up, true)?;
        g_dyn.axpy(1.0, &g)?;
        carry = dx.expect("requested")[..lat].to_vec();
    }
    let g_enc = if net.encoder.numel() > 0 {
        net.encoder_spec.backward(&net.encoder, &enc_tape, &carry, false)?.0
    } else {
        net.encoder.zeros_like()
    };
    Ok(SprGrads {
        loss,
        encoder: g_enc,
        dynamics: g_dyn,
        projection: g_proj.with_component(Component::Projection),
        prediction: g_pred,
    })
}

/// Window-level entry point: optionally augments every observation first.
pub fn spr_loss<R: Rng + ?Sized>(
    net: &QNetwork,
    heads: &SprHeads,
    window: &StreamWindow,
    augment_shift: Option<usize>,
    rng: &mut R,
) -> Result<SprGrads> {
    let obs: Vec<Array> = match augment_shift {
        Some(s) => window.observations().map(|o| augment(o, s, rng)).collect(),
        None => window.observations().cloned().collect(),
    };
    let actions: Vec<usize> = window.actions().collect();
    spr_loss_on(net, heads, &obs, &actions)
}

/// Diagnostics of one agent step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub td_error: f64,
    pub lr: f64,
    pub spr_loss: Option<f64>,
    pub grad_cos: Option<f64>,
}

impl StepReport {
    pub(crate) fn plain(u: &RlUpdate) -> Self {
        Self {
            td_error: u.td_error,
            lr: u.lr,
            spr_loss: None,
            grad_cos: None,
        }
    }
}

/// SPR state carried alongside an agent.
#[derive(Clone, Debug)]
pub struct Spr {
    pub cfg: SprConfig,
    pub heads: SprHeads,
    pub window: StreamWindow,
    /// Momenta for encoder, dynamics, projection, prediction.
    ortho: Option<[OrthoState; 4]>,
    rng: ChaCha8Rng,
}

impl Spr {
    pub fn new(cfg: SprConfig, env: EnvKind, net: &QNetwork, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let heads = SprHeads::new(env, net, cfg.shared_projection, seed)?;
        let ortho = if cfg.orth {
            let phi = heads.phi_template.clone();
            Some([
                OrthoState::new(&net.encoder, cfg.beta_orth, cfg.momentum),
                OrthoState::new(&heads.dynamics, cfg.beta_orth, cfg.momentum),
                OrthoState::new(&phi, cfg.beta_orth, cfg.momentum),
                OrthoState::new(&heads.prediction, cfg.beta_orth, cfg.momentum),
            ])
        } else {
            None
        };
        Ok(Self {
            window: StreamWindow::new(cfg.k),
            heads,
            ortho,
            rng: stream(seed, Stream::Augment),
            cfg,
        })
    }

    /// Augmentation stream; cloning it predicts the next step's draws.
    pub fn augment_rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Projection momenta for encoder, dynamics, projection, prediction.
    pub fn ortho_states(&self) -> Option<&[OrthoState; 4]> {
        self.ortho.as_ref()
    }

    /// Feeds one transition: the SPR step runs when the window holds `k`
    /// transitions, the RL update always runs.
    pub fn observe(&mut self, agent: &mut Agent, tr: &Transition) -> Result<StepReport> {
        self.window.push(tr);
        let report = if self.window.is_full() {
            self.apply(agent, tr)?
        } else {
            StepReport::plain(&agent.update(tr)?)
        };
        if tr.episode_over() {
            self.window.clear();
        }
        Ok(report)
    }

    /// One combined RL + SPR step on a full window.
    pub fn apply(&mut self, agent: &mut Agent, tr: &Transition) -> Result<StepReport> {
        let cfg = self.cfg.clone();
        let shift = cfg.augment.then_some(cfg.shift);
        let g = spr_loss(agent.net(), &self.heads, &self.window, shift, &mut self.rng)?;
        let scale = |t: &ParamTree| t.scaled(cfg.lambda);
        let mut d_enc = scale(&g.encoder);
        let mut d_dyn = scale(&g.dynamics);
        let mut d_proj = scale(&g.projection);
        let mut d_pred = scale(&g.prediction);
        if let Some(ortho) = &mut self.ortho {
            d_enc = ortho[0].project(&d_enc)?;
            d_dyn = ortho[1].project(&d_dyn)?;
            d_proj = ortho[2].project(&d_proj)?;
            d_pred = ortho[3].project(&d_pred)?;
        }

        let u = agent.rl_update(tr)?;
        let grad_cos = grad_cosine(&u.encoder, &d_enc.scaled(-1.0))?;
        let obgd = agent.uses_obgd();
        let shared = self.heads.shared_projection();
        let phi_template = &self.heads.phi_template;
        let u_phi = if shared {
            Some(u.head.restrict(phi_template)?.with_component(Component::Projection))
        } else {
            None
        };
        if cfg.orth2 && obgd {
            d_enc = orth2_project(&d_enc, &u.encoder)?;
            if let Some(up) = &u_phi {
                d_proj = orth2_project(&d_proj, up)?;
            }
        }

        let alpha = cfg.lr;
        let net = agent.net_mut();
        if obgd {
            mixed_shared_update(&mut net.encoder, &u.encoder, &d_enc, cfg.mu_shared, alpha)?;
            match &u_phi {
                Some(up) => {
                    mixed_shared_update(&mut net.head, up, &d_proj, cfg.mu_shared, alpha)?;
                    net.head.axpy_subset(1.0, &u.head.exclude(phi_template))?;
                }
                None => net.head.axpy(1.0, &u.head)?,
            }
        } else {
            net.encoder.axpy(1.0, &u.encoder)?;
            net.encoder.axpy(-alpha, &d_enc)?;
            net.head.axpy(1.0, &u.head)?;
            if shared {
                net.head.axpy_subset(-alpha, &d_proj)?;
            }
        }
        if let Some(p) = &mut self.heads.projection {
            p.axpy(-alpha, &d_proj)?;
        }
        self.heads.dynamics.axpy(-alpha, &d_dyn)?;
        self.heads.prediction.axpy(-alpha, &d_pred)?;
        net.encoder.check_finite()?;
        net.head.check_finite()?;
        self.heads.dynamics.check_finite()?;
        self.heads.prediction.check_finite()?;
        self.heads.ema_update(agent.net(), cfg.tau)?;
        Ok(StepReport {
            td_error: u.td_error,
            lr: u.lr,
            spr_loss: Some(g.loss),
            grad_cos: Some(grad_cos),
        })
    }

    pub fn checkpoint_trees(&self) -> Vec<(&'static str, &ParamTree)> {
        let mut out = vec![
            ("spr_dynamics", &self.heads.dynamics),
            ("spr_prediction", &self.heads.prediction),
            ("spr_target_encoder", &self.heads.target_encoder),
            ("spr_target_projection", &self.heads.target_projection),
        ];
        if let Some(p) = &self.heads.projection {
            out.push(("spr_projection", p));
        }
        out
    }
}
