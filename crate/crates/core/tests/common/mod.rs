//! Test fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crossing_core::env::{rollout, EnvConfig, Episode, IntersectionEnv, RandomPolicy, Record};
use crossing_core::numcore::ParamStore;
use crossing_core::qmix::{Dims, Learner, MixerKind, NetShape, QmixConfig};
use crossing_core::sim::ScenarioConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat as D;

/// Terminated episodes of `len` steps on the two-road scenario under a
/// uniformly random legal policy.
pub fn short_episodes(seed: u64, count: usize, len: usize) -> Vec<Episode> {
    let mut sc = ScenarioConfig::two_road();
    sc.episode_steps = len;
    let mut env = IntersectionEnv::new(sc, EnvConfig::default()).unwrap();
    let mut policy = RandomPolicy::new(seed);
    (0..count as u64)
        .map(|i| {
            rollout(
                &mut env,
                &mut policy,
                seed * 1000 + i,
                0,
                Record {
                    episode: true,
                    trajectory: false,
                },
            )
            .unwrap()
            .episode
            .unwrap()
        })
        .collect()
}

pub fn dims(n_agents: usize, shape: NetShape) -> Dims {
    Dims {
        n_agents,
        obs_dim: 10,
        n_actions: 7,
        shape,
    }
}

/// A learner with independent online and target parameters.
pub fn learner(mixer: MixerKind, lambda: f64, shape: NetShape, seed: u64) -> Learner {
    let config = QmixConfig {
        mixer,
        lambda,
        ..QmixConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Learner::init(dims(4, shape), config.clone(), &mut rng).unwrap();
    let other = Learner::init(dims(4, shape), config, &mut rng).unwrap();
    l.target = other.params;
    // non-zero biases so that every parameter matters
    for (_, m) in l.params.iter_mut() {
        if m.rows() == 1 {
            for v in m.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    l
}

/// Direct weighted sum of n-step returns for a terminated episode.
///
/// `next_values[t]` is the bootstrap value of the state after step `t`.
/// `G^λ_t = (1−λ) Σ_{n=1}^{T−t−1} λ^{n−1} G^{(n)}_t + λ^{T−t−1} G^{full}_t`.
pub fn peng_direct(rewards: &[f64], next_values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    (0..t_len)
        .map(|t| {
            let n_step = |n: usize| -> f64 {
                let mut g = 0.0;
                for k in 0..n {
                    g += gamma.powi(k as i32) * rewards[t + k];
                }
                if t + n < t_len {
                    g += gamma.powi(n as i32) * next_values[t + n - 1];
                }
                g
            };
            let horizon = t_len - t;
            let mut total = 0.0;
            for n in 1..horizon {
                total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
            }
            total + lambda.powi(horizon as i32 - 1) * n_step(horizon)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Double-double forward pass of the TD loss.

fn d(x: f64) -> D {
    D::from(x)
}

/// Double-double quotient. The library's own division is only accurate
/// to double precision, so two Newton corrections are applied.
pub fn ddiv(a: D, b: D) -> D {
    let mut q = d(a.hi() / b.hi());
    for _ in 0..2 {
        let r = a - b * q;
        q += d(r.hi() / b.hi());
    }
    q
}

/// `exp` by scaling and squaring a Taylor series; full double-double
/// accuracy for the moderate arguments seen here.
pub fn dexp(x: D) -> D {
    let r = x * d(1.0 / 4096.0);
    static INV: OnceLock<Vec<D>> = OnceLock::new();
    let inv = INV.get_or_init(|| (0..20).map(|k| ddiv(d(1.0), d(k.max(1) as f64))).collect());
    let mut term = d(1.0);
    let mut sum = d(1.0);
    for &ik in &inv[1..] {
        term = term * r * ik;
        sum += term;
    }
    for _ in 0..12 {
        sum = sum * sum;
    }
    sum
}

fn sigmoid(x: D) -> D {
    ddiv(d(1.0), d(1.0) + dexp(-x))
}

fn tanh(x: D) -> D {
    let neg = x < d(0.0);
    let a = if neg { -x } else { x };
    let e = dexp(a * -2.0);
    let t = ddiv(d(1.0) - e, d(1.0) + e);
    if neg {
        -t
    } else {
        t
    }
}

fn relu(x: D) -> D {
    if x > d(0.0) {
        x
    } else {
        d(0.0)
    }
}

fn abs(x: D) -> D {
    if x < d(0.0) {
        -x
    } else {
        x
    }
}

/// Parameters as row-major double-double arrays.
struct DParams {
    m: BTreeMap<String, (usize, usize, Vec<D>)>,
}

impl DParams {
    fn new(store: &ParamStore, bump: Option<(&str, usize, D)>) -> Self {
        let mut m = BTreeMap::new();
        for (name, mat) in store.iter() {
            let mut v: Vec<D> = mat.data().iter().map(|&x| d(x)).collect();
            if let Some((n, i, h)) = bump {
                if n == name {
                    v[i] += h;
                }
            }
            m.insert(name.to_string(), (mat.rows(), mat.cols(), v));
        }
        DParams { m }
    }

    /// `W·x + b` for the layer `prefix` (weights `out×in`).
    fn linear(&self, prefix: &str, x: &[D]) -> Vec<D> {
        let (rows, cols, w) = &self.m[&format!("{prefix}.w")];
        let (_, _, b) = &self.m[&format!("{prefix}.b")];
        assert_eq!(*cols, x.len(), "{prefix}");
        (0..*rows)
            .map(|r| {
                let mut s = b[r];
                for c in 0..*cols {
                    s += w[r * cols + c] * x[c];
                }
                s
            })
            .collect()
    }

    fn gru(&self, x: &[D], h: &[D]) -> Vec<D> {
        let mat = |name: &str, v: &[D]| -> Vec<D> {
            let (rows, cols, w) = &self.m[&format!("agent.gru.{name}")];
            (0..*rows)
                .map(|r| (0..*cols).fold(d(0.0), |s, c| s + w[r * cols + c] * v[c]))
                .collect()
        };
        let add = |v: Vec<D>, name: &str| -> Vec<D> {
            let (_, _, b) = &self.m[&format!("agent.gru.{name}")];
            v.iter().zip(b).map(|(a, b)| *a + *b).collect()
        };
        let gi = add(mat("w_ih", x), "b_ih");
        let gh = add(mat("w_hh", h), "b_hh");
        let hd = h.len();
        (0..hd)
            .map(|j| {
                let r = sigmoid(gi[j] + gh[j]);
                let z = sigmoid(gi[hd + j] + gh[hd + j]);
                let n = tanh(gi[2 * hd + j] + r * gh[2 * hd + j]);
                (d(1.0) - z) * n + z * h[j]
            })
            .collect()
    }

    /// Agent Q-values over time: `[t][agent][action]` for `t = 0..=len`.
    fn agent_q(&self, ep: &Episode, hidden: usize) -> Vec<Vec<Vec<D>>> {
        let n = ep.n_agents;
        let mut h = vec![vec![d(0.0); hidden]; n];
        let mut out = Vec::new();
        for obs in &ep.obs {
            let mut qs = Vec::new();
            for (a, ha) in h.iter_mut().enumerate() {
                let mut x: Vec<D> = obs.row(a).iter().map(|&v| d(v)).collect();
                x.extend((0..n).map(|i| d(if i == a { 1.0 } else { 0.0 })));
                let z: Vec<D> = self.linear("agent.fc1", &x).into_iter().map(relu).collect();
                *ha = self.gru(&z, ha);
                qs.push(self.linear("agent.fc2", ha));
            }
            out.push(qs);
        }
        out
    }

    fn mix(&self, kind: MixerKind, q: &[D], state: &[f64]) -> D {
        match kind {
            MixerKind::Vdn => q.iter().fold(d(0.0), |s, v| s + *v),
            MixerKind::Independent => unreachable!(),
            MixerKind::Qmix => {
                let s: Vec<D> = state.iter().map(|&v| d(v)).collect();
                let w1: Vec<D> = self.linear("mixer.w1", &s).into_iter().map(abs).collect();
                let b1 = self.linear("mixer.b1", &s);
                let e = b1.len();
                let w2: Vec<D> = self.linear("mixer.w2", &s).into_iter().map(abs).collect();
                let hb: Vec<D> = self.linear("mixer.b2a", &s).into_iter().map(relu).collect();
                let b2 = self.linear("mixer.b2b", &hb)[0];
                let mut total = b2;
                for j in 0..e {
                    let mut hj = b1[j];
                    for (i, qi) in q.iter().enumerate() {
                        hj += *qi * w1[i * e + j];
                    }
                    total += relu(hj) * w2[j];
                }
                total
            }
        }
    }
}

fn masked_max(q: &[D], mask: &[bool]) -> D {
    // the same tie rule as the learner: first maximal legal entry
    let mut best: Option<D> = None;
    for (v, &ok) in q.iter().zip(mask) {
        if ok && best.is_none_or(|b| *v > b) {
            best = Some(*v);
        }
    }
    best.expect("legal action")
}

/// Recursive Q(λ) targets in double-double.
fn peng_dd(rewards: &[f64], next: &[D], gamma: f64, lambda: f64) -> Vec<D> {
    let t_len = rewards.len();
    let mut g = vec![d(0.0); t_len];
    for t in (0..t_len).rev() {
        g[t] = if t + 1 == t_len {
            d(rewards[t])
        } else {
            d(rewards[t]) + d(gamma) * (d(1.0 - lambda) * next[t] + d(lambda) * g[t + 1])
        };
    }
    g
}

/// The learner's TD loss recomputed from scratch in double-double.
///
/// Bootstrap values come from the target network, which does not move when
/// online parameters are perturbed, so they are evaluated once.
pub struct Oracle<'a> {
    learner: &'a Learner,
    episodes: Vec<&'a Episode>,
    /// `[episode][t][agent]` masked target maxima at `t + 1`.
    boot: Vec<Vec<Vec<D>>>,
    /// `[episode][t]` mixed bootstrap values (empty for IQL).
    mixed: Vec<Vec<D>>,
    /// Unperturbed online agent values, reused when only the mixer moves.
    base_q: Vec<Vec<Vec<Vec<D>>>>,
}

impl<'a> Oracle<'a> {
    pub fn new(learner: &'a Learner, episodes: &[&'a Episode]) -> Self {
        let target = DParams::new(&learner.target, None);
        let hidden = learner.dims.shape.hidden;
        let mut boot = Vec::new();
        let mut mixed = Vec::new();
        for ep in episodes {
            let qt = target.agent_q(ep, hidden);
            let b: Vec<Vec<D>> = (0..ep.len())
                .map(|t| {
                    (0..ep.n_agents)
                        .map(|a| masked_max(&qt[t + 1][a], &ep.masks[t + 1][a]))
                        .collect()
                })
                .collect();
            if learner.config.mixer != MixerKind::Independent {
                mixed.push(
                    (0..ep.len())
                        .map(|t| target.mix(learner.config.mixer, &b[t], ep.obs[t + 1].data()))
                        .collect(),
                );
            }
            boot.push(b);
        }
        let online = DParams::new(&learner.params, None);
        let base_q = episodes
            .iter()
            .map(|ep| online.agent_q(ep, hidden))
            .collect();
        Oracle {
            learner,
            episodes: episodes.to_vec(),
            boot,
            mixed,
            base_q,
        }
    }

    /// Loss at the learner's online parameters with `name[index]` shifted by `bump`.
    pub fn loss(&self, bump: Option<(&str, usize, D)>) -> D {
        let l = self.learner;
        let online = DParams::new(&l.params, bump);
        let (gamma, lambda) = (l.config.gamma, l.config.lambda);
        let mut total = d(0.0);
        let mut steps = 0usize;
        for (k, ep) in self.episodes.iter().enumerate() {
            let t_len = ep.len();
            steps += t_len;
            let fresh;
            let q = match bump {
                Some((name, _, _)) if name.starts_with("agent.") => {
                    fresh = online.agent_q(ep, l.dims.shape.hidden);
                    &fresh
                }
                _ => &self.base_q[k],
            };
            let taken = |t: usize, a: usize| q[t][a][ep.actions[t][a]];
            match l.config.mixer {
                MixerKind::Independent => {
                    for a in 0..ep.n_agents {
                        let next: Vec<D> = (0..t_len).map(|t| self.boot[k][t][a]).collect();
                        let g = peng_dd(&ep.rewards, &next, gamma, 0.0);
                        for (t, gt) in g.iter().enumerate() {
                            let e = taken(t, a) - *gt;
                            total += e * e;
                        }
                    }
                }
                kind => {
                    let g = peng_dd(&ep.rewards, &self.mixed[k], gamma, lambda);
                    for (t, gt) in g.iter().enumerate() {
                        let chosen: Vec<D> = (0..ep.n_agents).map(|a| taken(t, a)).collect();
                        let e = online.mix(kind, &chosen, ep.obs[t].data()) - *gt;
                        total += e * e;
                    }
                }
            }
        }
        ddiv(total, d(steps as f64))
    }

    /// Central difference in `name[index]` with step `h`.
    pub fn grad(&self, name: &str, index: usize, h: f64) -> f64 {
        let plus = self.loss(Some((name, index, d(h))));
        let minus = self.loss(Some((name, index, d(-h))));
        f64::from(ddiv(plus - minus, d(2.0 * h)))
    }
}

/// Worst relative error between reverse-mode gradients and the oracle's
/// central differences over coordinates with `|grad| > 1e-8`, visiting
/// every `stride`-th coordinate from `offset`.
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    pub detail: String,
    pub loss_error: f64,
}

pub fn gradient_check(
    l: &Learner,
    episodes: &[&Episode],
    stride: usize,
    offset: usize,
) -> GradCheck {
    let (loss, grads) = l.loss_and_grads(episodes).unwrap();
    let oracle = Oracle::new(l, episodes);
    let reference = f64::from(oracle.loss(None));
    let mut out = GradCheck {
        worst: 0.0,
        checked: 0,
        detail: String::new(),
        loss_error: (loss - reference).abs() / reference.abs().max(1e-300),
    };
    let mut k = 0usize;
    for (name, g) in grads.iter() {
        for (i, &ga) in g.data().iter().enumerate() {
            k += 1;
            if !(k + offset).is_multiple_of(stride) || ga.abs() <= 1e-8 {
                continue;
            }
            let fd = oracle.grad(name, i, 1e-7);
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs());
            out.checked += 1;
            if rel > out.worst {
                out.worst = rel;
                out.detail = format!("{name}[{i}]: reverse {ga:e}, oracle {fd:e}");
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Constructed environment states.

use crossing_core::env::{Transition, HOLD};
use crossing_core::sim::VehicleKind;

/// Full scenario without inflow, one bound CAV per lane at `s` with speed `v`.
fn lanes_at(s: f64, v: f64) -> IntersectionEnv {
    let mut sc = ScenarioConfig::default();
    sc.flow.enabled = false;
    let mut env = IntersectionEnv::new(sc, EnvConfig::default()).unwrap();
    let sim = env.simulator().clone();
    let mut st = sim.empty_state();
    for lane in 0..8 {
        sim.place(&mut st, VehicleKind::Cav, lane, s, v, true);
    }
    env.reset_to(st);
    env
}

/// Every agent cruising at 15 m/s on an empty road and holding speed.
pub fn cruise_step() -> Transition {
    lanes_at(20.0, 15.0).step(&[HOLD; 8]).unwrap()
}

/// Every agent standing still and holding.
pub fn stopped_step() -> Transition {
    lanes_at(20.0, 0.0).step(&[HOLD; 8]).unwrap()
}

/// Two through movements meeting at the crossing point while the other
/// agents stand still; every agent holds.
pub fn collision_step() -> Transition {
    let mut env = lanes_at(20.0, 0.0);
    let mut st = env.sim_state().clone();
    for v in st.vehicles.iter_mut() {
        match v.route {
            1 => v.s = 113.2,
            3 => v.s = 102.6,
            _ => continue,
        }
    }
    env.reset_to(st);
    env.step(&[HOLD; 8]).unwrap()
}
