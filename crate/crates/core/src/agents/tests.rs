use super::*;
use crate::envs::{ChainEnv, Env};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const W: &str = "l00_dense/weight";
const B: &str = "l00_dense/bias";

fn chain_net(weights: &[[f64; 10]; 2], bias: [f64; 2]) -> QNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rng2 = ChaCha8Rng::seed_from_u64(1);
    let mut net = QNetwork::new(EnvKind::Chain10, 0.0, &mut rng, &mut rng2).unwrap();
    let w: Vec<f64> = weights.iter().flat_map(|r| r.iter().copied()).collect();
    net.head.get_mut(W).unwrap().data_mut().copy_from_slice(&w);
    net.head.get_mut(B).unwrap().data_mut().copy_from_slice(&bias);
    net
}

fn one_hot(n: usize, i: usize) -> Array {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    Array::vector(v)
}

fn chain_transition(s: usize, a: usize, greedy: bool) -> Transition {
    let env = ChainEnv::new(10, 100);
    let next = env.next_state(s, a);
    Transition {
        obs: one_hot(10, s),
        action: a,
        reward: if next == 9 { 1.0 } else { 0.0 },
        next_obs: one_hot(10, next),
        done: next == 9,
        truncated: false,
        greedy,
    }
}

/// Optimal Q on the chain by value iteration.
fn chain_q_star(gamma: f64) -> [[f64; 10]; 2] {
    let env = ChainEnv::new(10, 100);
    let mut q = [[0.0f64; 10]; 2];
    for _ in 0..500 {
        let v: Vec<f64> = (0..10).map(|s| q[0][s].max(q[1][s])).collect();
        for a in 0..2 {
            for s in 0..9 {
                let n = env.next_state(s, a);
                q[a][s] = if n == 9 { 1.0 } else { gamma * v[n] };
            }
        }
    }
    q
}

fn cfg(kind: AgentKind) -> AgentConfig {
    AgentConfig::defaults(kind)
}

#[test]
fn td_error_terminal() {
    assert_eq!(td_error(0.0, 1.0, 123.0, 0.99, true), 1.0);
}

#[test]
fn td_error_vanishes_at_fixed_point() {
    let q = chain_q_star(0.99);
    let net = chain_net(&q, [0.0, 0.0]);
    for s in 0..9 {
        for a in 0..2 {
            let tr = chain_transition(s, a, true);
            let qs = net.q_values(&tr.obs).unwrap();
            let qn = net.q_values(&tr.next_obs).unwrap();
            let d = td_error(qs[a], tr.reward, qn[argmax(&qn)], 0.99, tr.done);
            assert!(d.abs() < 1e-12, "s={s} a={a} d={d}");
        }
    }
}

#[test]
fn td_error_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut w = [[0.0; 10]; 2];
    for row in &mut w {
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let net = chain_net(&w, [0.0, 0.0]);
    let tr = chain_transition(3, 1, true);
    let qs = net.q_values(&tr.obs).unwrap();
    let qn = net.q_values(&tr.next_obs).unwrap();
    let got = td_error(qs[1], tr.reward, qn[argmax(&qn)], 0.9, tr.done);
    let want = 0.0 + 0.9 * w[0][4].max(w[1][4]) - w[1][3];
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn argmax_lowest_index_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn epsilon_schedule_shape() {
    let s = EpsilonSchedule::new(0.1, 1000);
    assert_eq!(s.value(0), 1.0);
    assert!((s.value(50) - 0.505).abs() < 1e-12);
    assert_eq!(s.value(100), 0.01);
    assert_eq!(s.value(10_000), 0.01);
    let mut last = f64::INFINITY;
    for t in 0..200 {
        assert!(s.value(t) <= last);
        last = s.value(t);
    }
    assert_eq!(EpsilonSchedule::new(0.0, 1000).value(0), 0.01);
}

#[test]
fn epsilon_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = [0.0, 5.0, 1.0];
    let mut counts = [0usize; 3];
    for _ in 0..30_000 {
        counts[select_action(&q, 1.0, &mut rng).0] += 1;
    }
    for c in counts {
        assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
    for _ in 0..100 {
        assert_eq!(select_action(&q, 0.0, &mut rng), (1, true));
    }
}

#[test]
fn exploration_rate_matches_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = [0.3, -1.0, 2.0, 0.0];
    let eps = 0.4;
    let n = 10_000;
    let non_greedy = (0..n).filter(|_| !select_action(&q, eps, &mut rng).1).count();
    // a random pick hits the greedy action with probability 1/|A|
    let want = eps * 3.0 / 4.0;
    assert!((non_greedy as f64 / n as f64 - want).abs() < 0.02);
}

#[test]
fn streamq_lambda_zero_is_scaled_q_learning() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut w = [[0.0; 10]; 2];
    for row in &mut w {
        for v in row.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let mut c = cfg(AgentKind::StreamQ);
    c.lambda = 0.0;
    let mut agent = StreamQ::new(chain_net(&w, [0.0, 0.0]), &c).unwrap();
    for (s, a) in [(2, 1), (3, 0), (2, 1)] {
        let tr = chain_transition(s, a, true);
        let fwd = agent.net.forward_cached(tr.obs.data(), 1).unwrap();
        let qn = agent.net.q_values(&tr.next_obs).unwrap();
        let d = td_error(fwd.q[a], tr.reward, qn[argmax(&qn)], c.gamma, tr.done);
        let (_, gh) = agent.net.grad_q(&fwd, a).unwrap();
        let u = agent.update_vector(&tr).unwrap();
        let lr = c.lr.min(1.0 / (c.kappa * d.abs().max(1.0) * gh.l1_norm()));
        assert_eq!(u.lr, lr);
        let want = gh.scaled(lr * d);
        for (x, y) in u.head.flatten().iter().zip(want.flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        agent.net.head.axpy(1.0, &u.head).unwrap();
    }
}

#[test]
fn non_greedy_and_done_reset_traces() {
    let q = chain_q_star(0.99);
    let mut agent = StreamQ::new(chain_net(&q, [0.1, 0.2]), &cfg(AgentKind::StreamQ)).unwrap();
    agent.update_vector(&chain_transition(1, 1, true)).unwrap();
    assert!(!agent.traces().is_zero());
    agent.update_vector(&chain_transition(2, 0, false)).unwrap();
    assert!(agent.traces().is_zero());
    agent.update_vector(&chain_transition(3, 1, true)).unwrap();
    agent.update_vector(&chain_transition(8, 1, true)).unwrap();
    assert!(agent.traces().is_zero());

    let mut qrc = Agent::new(&cfg(AgentKind::Qrc), EnvKind::Chain10, 0).unwrap();
    let Agent::Qrc(inner) = &mut qrc else { unreachable!() };
    inner.update_vector(&chain_transition(1, 1, true)).unwrap();
    assert!(!inner.traces_are_zero());
    inner.update_vector(&chain_transition(2, 0, false)).unwrap();
    assert!(inner.traces_are_zero());
}

fn qrc_chain(c: &AgentConfig, q: [[f64; 10]; 2], h: [[f64; 10]; 2], hb: [f64; 2]) -> Qrc {
    let dims = EnvKind::Chain10.arch_dims();
    let spec = build_network(EnvKind::Chain10.family(), HeadKind::AuxHead, &dims).unwrap();
    let mut aux = spec.zero_params(Component::AuxHead);
    let hw: Vec<f64> = h.iter().flat_map(|r| r.iter().copied()).collect();
    aux.get_mut(W).unwrap().data_mut().copy_from_slice(&hw);
    aux.get_mut(B).unwrap().data_mut().copy_from_slice(&hb);
    Qrc::new(chain_net(&q, [0.0, 0.0]), spec, aux, c).unwrap()
}

#[test]
fn qrc_one_step_matches_symbolic_update() {
    // Tabular Q(s,a) = W[a][s] + b[a]; from zero traces one step gives
    // Δw = δ ∇Q(s,a) - h γ ∇Q(s', a*).
    let mut q = [[0.0; 10]; 2];
    q[1][4] = 0.3;
    q[0][4] = 0.7;
    q[1][5] = 0.2;
    let mut h = [[0.0; 10]; 2];
    h[1][4] = 0.25;
    let c = cfg(AgentKind::Qrc);
    let mut agent = qrc_chain(&c, q, h, [0.0, 0.0]);
    let tr = chain_transition(4, 1, true);
    let u = agent.update_vector(&tr).unwrap();
    let delta = 0.0 + c.gamma * 0.2 - 0.3;
    assert!((u.td_error - delta).abs() < 1e-15);
    let hval = 0.25;
    let mut want_w = [[0.0; 10]; 2];
    let mut want_b = [0.0; 2];
    want_w[1][4] += delta;
    want_b[1] += delta;
    // a* at s'=5: Q(5,0)=0 < Q(5,1)=0.2
    want_w[1][5] -= hval * c.gamma;
    want_b[1] -= hval * c.gamma;
    let got_w = u.head.get(W).unwrap().data();
    for a in 0..2 {
        for s in 0..10 {
            assert!((got_w[a * 10 + s] - c.lr * want_w[a][s]).abs() < 1e-18, "w[{a}][{s}]");
        }
    }
    let got_b = u.head.get(B).unwrap().data();
    for a in 0..2 {
        assert!((got_b[a] - c.lr * want_b[a]).abs() < 1e-18);
    }
    // Δψ = δ ∇h - h ∇h - β ψ
    let aux_lr = c.lr * c.aux_lr_scale;
    let psi = agent.aux.get(W).unwrap().data()[14];
    let want_psi = 0.25 + aux_lr * ((delta - hval) * 1.0 - c.beta_qrc * 0.25);
    assert!((psi - want_psi).abs() < 1e-15);
}

#[test]
fn qrc_regularizer_decays_aux_geometrically() {
    let mut h = [[0.0; 10]; 2];
    for s in 1..10 {
        h[0][s] = 0.5;
        h[1][s] = -0.3;
    }
    let c = cfg(AgentKind::Qrc);
    let mut agent = qrc_chain(&c, [[0.0; 10]; 2], h, [0.0, 0.0]);
    // reward 0, done: δ = 0 and h(s=0, ·) = 0
    let tr = Transition {
        obs: one_hot(10, 0),
        action: 0,
        reward: 0.0,
        next_obs: one_hot(10, 0),
        done: true,
        truncated: false,
        greedy: true,
    };
    let decay = 1.0 - c.lr * c.aux_lr_scale * c.beta_qrc;
    let n0 = agent.aux.norm();
    for k in 1..=50 {
        agent.update_vector(&tr).unwrap();
        let want = n0 * decay.powi(k);
        assert!((agent.aux.norm() - want).abs() < 1e-12 * n0);
    }
}

#[test]
fn dqn_buffer_one_is_streaming_q_learning() {
    let q = chain_q_star(0.9);
    let mut c = cfg(AgentKind::Dqn);
    c.target_period = 1;
    let mut dqn = Dqn::new(chain_net(&q, [0.05, -0.05]), &c).unwrap();
    for (s, a) in [(3, 1), (4, 0), (8, 1)] {
        let tr = chain_transition(s, a, true);
        let fwd = dqn.net.forward_cached(tr.obs.data(), 1).unwrap();
        let qn = dqn.net.q_values(&tr.next_obs).unwrap();
        let d = td_error(fwd.q[a], tr.reward, qn[argmax(&qn)], c.gamma, tr.done);
        let (_, gh) = dqn.net.grad_q(&fwd, a).unwrap();
        let u = dqn.update_vector(&tr).unwrap();
        assert_eq!(u.td_error, d);
        for (x, y) in u.head.flatten().iter().zip(gh.scaled(c.lr * d).flatten()) {
            assert!((x - y).abs() < 1e-18);
        }
        dqn.net.head.axpy(1.0, &u.head).unwrap();
    }
}

#[test]
fn dqn_target_lags_between_refreshes() {
    let mut c = cfg(AgentKind::Dqn);
    c.target_period = 3;
    c.lr = 0.5;
    let mut dqn = Dqn::new(chain_net(&[[0.0; 10]; 2], [0.0, 0.0]), &c).unwrap();
    for i in 0..3 {
        let u = dqn.update_vector(&chain_transition(8, 1, true)).unwrap();
        dqn.net.head.axpy(1.0, &u.head).unwrap();
        assert!(dqn.target_head.is_zero(), "step {i}");
    }
    dqn.update_vector(&chain_transition(8, 1, true)).unwrap();
    assert_eq!(dqn.target_head, dqn.net.head);
}

#[test]
fn dqn_buffer_five_averages() {
    let mut c = cfg(AgentKind::Dqn);
    c.buffer = 5;
    c.lr = 1.0;
    let mut dqn = Dqn::new(chain_net(&[[0.0; 10]; 2], [0.0, 0.0]), &c).unwrap();
    for s in 0..4 {
        dqn.update_vector(&chain_transition(s, 1, true)).unwrap();
    }
    // five transitions, only one rewarding: mean gradient on bias[1] is 1/5
    let u = dqn.update_vector(&chain_transition(8, 1, true)).unwrap();
    assert!((u.head.get(B).unwrap().data()[1] - 0.2).abs() < 1e-15);
    let u = dqn.update_vector(&chain_transition(0, 0, true)).unwrap();
    assert!((u.head.get(B).unwrap().data()[1] - 0.2).abs() < 1e-15);
}

#[test]
fn shapes_stable_over_many_updates() {
    for kind in [AgentKind::Dqn, AgentKind::StreamQ, AgentKind::Qrc] {
        let mut agent = Agent::new(&cfg(kind), EnvKind::Chain10, 1).unwrap();
        let before: Vec<_> = agent
            .checkpoint_trees()
            .iter()
            .map(|(n, t)| (*n, t.numel(), t.paths().map(String::from).collect::<Vec<_>>()))
            .collect();
        let mut env = Env::Chain(ChainEnv::new(10, 100));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = env.reset(&mut rng);
        for _ in 0..20_000 {
            let q = agent.net().q_values(&obs).unwrap();
            let (a, greedy) = select_action(&q, 0.3, &mut rng);
            let st = env.step(a).unwrap();
            let tr = Transition {
                obs: obs.clone(),
                action: a,
                reward: st.reward,
                next_obs: st.obs.clone(),
                done: st.done,
                truncated: st.truncated,
                greedy,
            };
            agent.update(&tr).unwrap();
            obs = if tr.episode_over() { env.reset(&mut rng) } else { st.obs };
        }
        let after: Vec<_> = agent
            .checkpoint_trees()
            .iter()
            .map(|(n, t)| (*n, t.numel(), t.paths().map(String::from).collect::<Vec<_>>()))
            .collect();
        assert_eq!(before, after, "{kind}");
    }
}

#[test]
fn minatar_agents_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [AgentKind::Dqn, AgentKind::StreamQ, AgentKind::Qrc] {
        let mut agent = Agent::new(&cfg(kind), EnvKind::BreakoutMini, 2).unwrap();
        let mut env = EnvKind::BreakoutMini.make();
        let obs = env.reset(&mut rng);
        let st = env.step(1).unwrap();
        let tr = Transition {
            obs,
            action: 1,
            reward: 1.0,
            next_obs: st.obs,
            done: false,
            truncated: false,
            greedy: true,
        };
        let before = agent.net().encoder.clone();
        let u = agent.update(&tr).unwrap();
        assert!(u.td_error.is_finite());
        assert_ne!(agent.net().encoder, before, "{kind}");
    }
}

#[test]
fn unknown_agent_name() {
    assert!("sarsa".parse::<AgentKind>().is_err());
    assert_eq!("qrc".parse::<AgentKind>().unwrap(), AgentKind::Qrc);
}

proptest! {
    #[test]
    fn argmax_scale_invariant(q in prop::collection::vec(-10.0f64..10.0, 1..8), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
        let a = argmax(&q);
        let b = argmax(&scaled);
        prop_assert!(a == b || q[a] == q[b]);
    }
}
