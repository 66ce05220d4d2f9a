//! Streaming DQN, Stream Q(λ) and QRC(λ) as single-transition update rules.
//!
//! Every agent produces an additive update for the encoder and Q head
//! ([`RlUpdate`]) instead of writing it directly, so the SPR step can be
//! combined with it on the shared parameters.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::envs::{EnvKind, Transition};
use crate::error::{Error, Result};
use crate::nn::{build_network, HeadKind, NetworkSpec, Tape};
use crate::optim::{obgd_update, ObgdConfig, ScalarTrace, TraceSet};
use crate::rngs::{stream, Stream};
use crate::tensor::{Array, Component, ParamTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Dqn,
    StreamQ,
    Qrc,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::StreamQ => "streamq",
            AgentKind::Qrc => "qrc",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(AgentKind::Dqn),
            "streamq" => Ok(AgentKind::StreamQ),
            "qrc" => Ok(AgentKind::Qrc),
            other => Err(Error::config("agent", format!("unknown agent `{other}`"))),
        }
    }
}

/// Optimizer used by Stream Q(λ). `Sgd` turns it into plain Watkins Q(λ).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlOptimizer {
    Obgd,
    Sgd,
}

impl RlOptimizer {
    pub fn name(self) -> &'static str {
        match self {
            RlOptimizer::Obgd => "obgd",
            RlOptimizer::Sgd => "sgd",
        }
    }
}

impl FromStr for RlOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obgd" => Ok(RlOptimizer::Obgd),
            "sgd" => Ok(RlOptimizer::Sgd),
            other => Err(Error::config("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub kappa: f64,
    pub optimizer: RlOptimizer,
    pub sparsity: f64,
    pub aux_lr_scale: f64,
    pub beta_qrc: f64,
    pub freeze_aux: bool,
    pub target_period: usize,
    pub buffer: usize,
}

impl AgentConfig {
    /// Defaults for `kind`.
    pub fn defaults(kind: AgentKind) -> Self {
        let (lambda, lr, optimizer) = match kind {
            AgentKind::Dqn => (0.0, 1e-4, RlOptimizer::Sgd),
            AgentKind::StreamQ => (0.8, 1.0, RlOptimizer::Obgd),
            AgentKind::Qrc => (0.8, 1e-4, RlOptimizer::Sgd),
        };
        Self {
            kind,
            gamma: 0.99,
            lambda,
            lr,
            kappa: 2.0,
            optimizer,
            sparsity: 0.9,
            aux_lr_scale: 0.1,
            beta_qrc: 1.0,
            freeze_aux: false,
            target_period: 1000,
            buffer: 1,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `r + gamma * (1 - done) * next_max - q_sa`.
pub fn td_error(q_sa: f64, reward: f64, next_max: f64, gamma: f64, done: bool) -> f64 {
    let boot = if done { 0.0 } else { gamma * next_max };
    reward + boot - q_sa
}

/// Linear decay from `start` to `end` over `fraction * total_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub explore_fraction: f64,
    pub total_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(explore_fraction: f64, total_steps: u64) -> Self {
        Self {
            start: 1.0,
            end: 0.01,
            explore_fraction,
            total_steps,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        let horizon = self.explore_fraction * self.total_steps as f64;
        if horizon <= 0.0 {
            return self.end;
        }
        let frac = step as f64 / horizon;
        if frac >= 1.0 {
            return self.end;
        }
        let eps = self.start + (self.end - self.start) * frac;
        if self.start >= self.end {
            eps.max(self.end)
        } else {
            eps.min(self.end)
        }
    }
}

/// ε-greedy choice over `q`; returns the action and whether it is greedy.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> (usize, bool) {
    let best = argmax(q);
    let a = if rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        best
    };
    (a, a == best)
}

/// Encoder `f_θ` followed by the Q head `ξ`.
#[derive(Clone, Debug)]
pub struct QNetwork {
    pub encoder_spec: NetworkSpec,
    pub head_spec: NetworkSpec,
    pub encoder: ParamTree,
    pub head: ParamTree,
}

/// Cached forward pass of a [`QNetwork`] over a batch.
#[derive(Clone, Debug)]
pub struct QForward {
    pub batch: usize,
    pub latent: Vec<f64>,
    pub q: Vec<f64>,
    enc_tape: Tape,
    head_tape: Tape,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(env: EnvKind, sparsity: f64, enc_rng: &mut R, head_rng: &mut R) -> Result<Self> {
        let dims = env.arch_dims();
        let encoder_spec = build_network(env.family(), HeadKind::Encoder, &dims)?;
        let head_spec = build_network(env.family(), HeadKind::QHead, &dims)?;
        let encoder = encoder_spec.init_params(Component::Encoder, sparsity, enc_rng);
        let head = head_spec.init_params(Component::QHead, sparsity, head_rng);
        Ok(Self {
            encoder_spec,
            head_spec,
            encoder,
            head,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.head_spec.output_len()
    }

    pub fn latent_len(&self) -> usize {
        self.encoder_spec.output_len()
    }

    pub fn latents(&self, obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.encoder_spec.forward_batch(&self.encoder, obs, batch)
    }

    pub fn q_values(&self, obs: &Array) -> Result<Vec<f64>> {
        self.q_values_batch(obs.data(), 1)
    }

    pub fn q_values_batch(&self, obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let z = self.latents(obs, batch)?;
        self.head_spec.forward_batch(&self.head, &z, batch)
    }

    pub fn forward_cached(&self, obs: &[f64], batch: usize) -> Result<QForward> {
        let (latent, enc_tape) = self.encoder_spec.forward_cached(&self.encoder, obs, batch)?;
        let (q, head_tape) = self.head_spec.forward_cached(&self.head, &latent, batch)?;
        Ok(QForward {
            batch,
            latent,
            q,
            enc_tape,
            head_tape,
        })
    }

    /// Gradients of `sum(upstream * Q)` for the encoder and head.
    pub fn backward(&self, fwd: &QForward, upstream: &[f64]) -> Result<(ParamTree, ParamTree)> {
        let need_dz = self.encoder.numel() > 0;
        let (gh, dz) = self.head_spec.backward(&self.head, &fwd.head_tape, upstream, need_dz)?;
        let ge = match dz {
            Some(dz) => self.encoder_spec.backward(&self.encoder, &fwd.enc_tape, &dz, false)?.0,
            None => self.encoder.zeros_like(),
        };
        Ok((ge, gh))
    }

    /// `∇Q(s, a)` for a batch-one forward pass.
    pub fn grad_q(&self, fwd: &QForward, action: usize) -> Result<(ParamTree, ParamTree)> {
        let mut up = vec![0.0; self.n_actions() * fwd.batch];
        up[action] = 1.0;
        self.backward(fwd, &up)
    }
}

/// Additive RL update for the encoder and Q head.
#[derive(Clone, Debug)]
pub struct RlUpdate {
    pub encoder: ParamTree,
    pub head: ParamTree,
    pub td_error: f64,
    /// Step size actually used (ObGD's adaptive one, or the fixed rate).
    pub lr: f64,
}

fn check_delta(delta: f64, what: &str) -> Result<()> {
    if delta.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{what} TD error is {delta}")))
    }
}

#[derive(Clone, Debug)]
pub struct StreamQ {
    pub net: QNetwork,
    traces: TraceSet,
    obgd: ObgdConfig,
    optimizer: RlOptimizer,
    lr: f64,
    gamma: f64,
}

impl StreamQ {
    pub fn new(net: QNetwork, cfg: &AgentConfig) -> Result<Self> {
        let traces = TraceSet::new(&[&net.encoder, &net.head], cfg.gamma, cfg.lambda);
        Ok(Self {
            obgd: ObgdConfig::new(cfg.lr, cfg.kappa)?,
            traces,
            optimizer: cfg.optimizer,
            lr: cfg.lr,
            gamma: cfg.gamma,
            net,
        })
    }

    pub fn traces(&self) -> &TraceSet {
        &self.traces
    }

    pub fn update_vector(&mut self, tr: &Transition) -> Result<RlUpdate> {
        let fwd = self.net.forward_cached(tr.obs.data(), 1)?;
        let next_max = if tr.done {
            0.0
        } else {
            let q = self.net.q_values(&tr.next_obs)?;
            q[argmax(&q)]
        };
        let delta = td_error(fwd.q[tr.action], tr.reward, next_max, self.gamma, tr.done);
        check_delta(delta, "stream q")?;
        let (ge, gh) = self.net.grad_q(&fwd, tr.action)?;
        self.traces.update(&[&ge, &gh])?;
        let (mut u, lr) = match self.optimizer {
            RlOptimizer::Obgd => obgd_update(&self.obgd, delta, &self.traces),
            RlOptimizer::Sgd => (
                self.traces.trees().iter().map(|z| z.scaled(self.lr * delta)).collect(),
                self.lr,
            ),
        };
        if tr.episode_over() || !tr.greedy {
            self.traces.reset();
        }
        let head = u.pop().expect("two trees");
        let encoder = u.pop().expect("two trees");
        Ok(RlUpdate {
            encoder,
            head,
            td_error: delta,
            lr,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Qrc {
    pub net: QNetwork,
    pub aux_spec: NetworkSpec,
    pub aux: ParamTree,
    zw: TraceSet,
    zh: ScalarTrace,
    zpsi: TraceSet,
    lr: f64,
    aux_lr: f64,
    beta: f64,
    gamma: f64,
    freeze_aux: bool,
}

impl Qrc {
    pub fn new(net: QNetwork, aux_spec: NetworkSpec, aux: ParamTree, cfg: &AgentConfig) -> Result<Self> {
        if aux_spec.input_shape() != net.encoder_spec.output_shape() || aux_spec.output_len() != net.n_actions() {
            return Err(Error::ShapeMismatch {
                layer: "aux head".into(),
                expected: net.encoder_spec.output_shape().to_vec(),
                got: aux_spec.input_shape().to_vec(),
            });
        }
        Ok(Self {
            zw: TraceSet::new(&[&net.encoder, &net.head], cfg.gamma, cfg.lambda),
            zh: ScalarTrace::new(cfg.gamma, cfg.lambda),
            zpsi: TraceSet::new(&[&aux], cfg.gamma, cfg.lambda),
            lr: cfg.lr,
            aux_lr: cfg.lr * cfg.aux_lr_scale,
            beta: cfg.beta_qrc,
            gamma: cfg.gamma,
            freeze_aux: cfg.freeze_aux,
            net,
            aux_spec,
            aux,
        })
    }

    pub fn traces_are_zero(&self) -> bool {
        self.zw.is_zero() && self.zh.value == 0.0 && self.zpsi.is_zero()
    }

    /// `h(s, ·)` for one latent vector.
    pub fn aux_values(&self, latent: &[f64]) -> Result<Vec<f64>> {
        self.aux_spec.forward_batch(&self.aux, latent, 1)
    }

    pub fn update_vector(&mut self, tr: &Transition) -> Result<RlUpdate> {
        let fwd = self.net.forward_cached(tr.obs.data(), 1)?;
        let (ge, gh) = self.net.grad_q(&fwd, tr.action)?;
        let (next_max, next_grads) = if tr.done {
            (0.0, None)
        } else {
            let nf = self.net.forward_cached(tr.next_obs.data(), 1)?;
            let best = argmax(&nf.q);
            (nf.q[best], Some((nf, best)))
        };
        let delta = td_error(fwd.q[tr.action], tr.reward, next_max, self.gamma, tr.done);
        check_delta(delta, "qrc")?;

        let (hv, htape) = self.aux_spec.forward_cached(&self.aux, &fwd.latent, 1)?;
        let h = hv[tr.action];
        let mut up = vec![0.0; hv.len()];
        up[tr.action] = 1.0;
        let g_psi = self.aux_spec.backward(&self.aux, &htape, &up, false)?.0;

        self.zw.update(&[&ge, &gh])?;
        self.zh.update(h);
        self.zpsi.update(&[&g_psi])?;

        // w += lr * (δ z^w - h ∇Q(s,a) - z^h (γ ∇Q(s',a*) - ∇Q(s,a)))
        let zw = self.zw.trees();
        let mut ue = zw[0].scaled(self.lr * delta);
        let mut uh = zw[1].scaled(self.lr * delta);
        let zh = self.zh.value;
        let c_sa = zh - h;
        if c_sa != 0.0 {
            ue.axpy(self.lr * c_sa, &ge)?;
            uh.axpy(self.lr * c_sa, &gh)?;
        }
        if zh != 0.0 {
            if let Some((nf, best)) = &next_grads {
                let (ne, nh) = self.net.grad_q(nf, *best)?;
                ue.axpy(-self.lr * zh * self.gamma, &ne)?;
                uh.axpy(-self.lr * zh * self.gamma, &nh)?;
            }
        }

        if !self.freeze_aux {
            // ψ += aux_lr * (δ z^ψ - h ∇h - β ψ)
            let mut dpsi = self.zpsi.trees()[0].scaled(delta);
            dpsi.axpy(-h, &g_psi)?;
            dpsi.axpy(-self.beta, &self.aux)?;
            self.aux.axpy(self.aux_lr, &dpsi)?;
            self.aux.check_finite()?;
        }

        if tr.episode_over() || !tr.greedy {
            self.zw.reset();
            self.zh.reset();
            self.zpsi.reset();
        }
        Ok(RlUpdate {
            encoder: ue,
            head: uh,
            td_error: delta,
            lr: self.lr,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dqn {
    pub net: QNetwork,
    pub target_encoder: ParamTree,
    pub target_head: ParamTree,
    buffer: VecDeque<Transition>,
    capacity: usize,
    period: usize,
    steps: usize,
    lr: f64,
    gamma: f64,
}

impl Dqn {
    pub fn new(net: QNetwork, cfg: &AgentConfig) -> Result<Self> {
        if cfg.target_period == 0 {
            return Err(Error::config("dqn.target_period", "must be positive"));
        }
        if cfg.buffer == 0 {
            return Err(Error::config("dqn.buffer", "must be positive"));
        }
        Ok(Self {
            target_encoder: net.encoder.clone().with_component(Component::TargetEncoder),
            target_head: net.head.clone(),
            buffer: VecDeque::with_capacity(cfg.buffer),
            capacity: cfg.buffer,
            period: cfg.target_period,
            steps: 0,
            lr: cfg.lr,
            gamma: cfg.gamma,
            net,
        })
    }

    fn target_q(&self, obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let z = self.net.encoder_spec.forward_batch(&self.target_encoder, obs, batch)?;
        self.net.head_spec.forward_batch(&self.target_head, &z, batch)
    }

    pub fn update_vector(&mut self, tr: &Transition) -> Result<RlUpdate> {
        if self.steps.is_multiple_of(self.period) {
            self.target_encoder.assign_subset(&self.net.encoder)?;
            self.target_head.assign_subset(&self.net.head)?;
        }
        self.steps += 1;
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(tr.clone());

        let n = self.buffer.len();
        let a_n = self.net.n_actions();
        let obs: Vec<f64> = self.buffer.iter().flat_map(|t| t.obs.data().iter().copied()).collect();
        let next: Vec<f64> = self
            .buffer
            .iter()
            .flat_map(|t| t.next_obs.data().iter().copied())
            .collect();
        let fwd = self.net.forward_cached(&obs, n)?;
        let tq = self.target_q(&next, n)?;
        let mut up = vec![0.0; n * a_n];
        let mut last = 0.0;
        for (i, t) in self.buffer.iter().enumerate() {
            let row = &tq[i * a_n..(i + 1) * a_n];
            let d = td_error(fwd.q[i * a_n + t.action], t.reward, row[argmax(row)], self.gamma, t.done);
            check_delta(d, "dqn")?;
            up[i * a_n + t.action] = d / n as f64;
            last = d;
        }
        let (mut ge, mut gh) = self.net.backward(&fwd, &up)?;
        ge.scale(self.lr);
        gh.scale(self.lr);
        Ok(RlUpdate {
            encoder: ge,
            head: gh,
            td_error: last,
            lr: self.lr,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Agent {
    Dqn(Dqn),
    StreamQ(StreamQ),
    Qrc(Qrc),
}

impl Agent {
    /// Builds an agent with parameters drawn from the run's init streams.
    pub fn new(cfg: &AgentConfig, env: EnvKind, seed: u64) -> Result<Self> {
        validate(cfg)?;
        let mut enc_rng = stream(seed, Stream::InitEncoder);
        let mut head_rng = stream(seed, Stream::InitHead);
        let net = QNetwork::new(env, cfg.sparsity, &mut enc_rng, &mut head_rng)?;
        Ok(match cfg.kind {
            AgentKind::Dqn => Agent::Dqn(Dqn::new(net, cfg)?),
            AgentKind::StreamQ => Agent::StreamQ(StreamQ::new(net, cfg)?),
            AgentKind::Qrc => {
                let aux_spec = build_network(env.family(), HeadKind::AuxHead, &env.arch_dims())?;
                let aux = if cfg.freeze_aux {
                    aux_spec.zero_params(Component::AuxHead)
                } else {
                    let mut rng = stream(seed, Stream::InitAux);
                    let mut t = aux_spec.init_params(Component::AuxHead, cfg.sparsity, &mut rng);
                    // h starts at zero: the last layer is zeroed.
                    let last = aux_spec.param_shapes().last().map(|(p, _)| p.clone());
                    if let Some(p) = last {
                        t.get_mut(&p).expect("entry").data_mut().fill(0.0);
                    }
                    t
                };
                Agent::Qrc(Qrc::new(net, aux_spec, aux, cfg)?)
            }
        })
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            Agent::Dqn(_) => AgentKind::Dqn,
            Agent::StreamQ(_) => AgentKind::StreamQ,
            Agent::Qrc(_) => AgentKind::Qrc,
        }
    }

    pub fn net(&self) -> &QNetwork {
        match self {
            Agent::Dqn(a) => &a.net,
            Agent::StreamQ(a) => &a.net,
            Agent::Qrc(a) => &a.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut QNetwork {
        match self {
            Agent::Dqn(a) => &mut a.net,
            Agent::StreamQ(a) => &mut a.net,
            Agent::Qrc(a) => &mut a.net,
        }
    }

    pub fn uses_obgd(&self) -> bool {
        matches!(self, Agent::StreamQ(a) if a.optimizer == RlOptimizer::Obgd)
    }

    /// Computes the RL update for `tr` and advances traces and auxiliary
    /// state, without touching the encoder or head.
    pub fn rl_update(&mut self, tr: &Transition) -> Result<RlUpdate> {
        match self {
            Agent::Dqn(a) => a.update_vector(tr),
            Agent::StreamQ(a) => a.update_vector(tr),
            Agent::Qrc(a) => a.update_vector(tr),
        }
    }

    pub fn apply(&mut self, u: &RlUpdate) -> Result<()> {
        let net = self.net_mut();
        net.encoder.axpy(1.0, &u.encoder)?;
        net.head.axpy(1.0, &u.head)?;
        net.encoder.check_finite()?;
        net.head.check_finite()
    }

    /// One plain RL step.
    pub fn update(&mut self, tr: &Transition) -> Result<RlUpdate> {
        let u = self.rl_update(tr)?;
        self.apply(&u)?;
        Ok(u)
    }

    /// Named parameter trees for checkpointing.
    pub fn checkpoint_trees(&self) -> Vec<(&'static str, &ParamTree)> {
        let net = self.net();
        let mut out = vec![("encoder", &net.encoder), ("q_head", &net.head)];
        match self {
            Agent::Dqn(a) => {
                out.push(("target_encoder", &a.target_encoder));
                out.push(("target_q_head", &a.target_head));
            }
            Agent::Qrc(a) => out.push(("aux_head", &a.aux)),
            Agent::StreamQ(_) => {}
        }
        out
    }
}

fn validate(cfg: &AgentConfig) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(Error::config("gamma", "must be in [0, 1)"));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::config("lambda", "must be in [0, 1]"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("lr", "must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.sparsity) {
        return Err(Error::config("sparsity", "must be in [0, 1)"));
    }
    if cfg.kind != AgentKind::StreamQ && cfg.optimizer != RlOptimizer::Sgd {
        return Err(Error::config("optimizer", "only streamq supports obgd"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
