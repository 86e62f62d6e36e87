//! Agent network and mixers.
//!
//! Parameter names: the shared agent network lives under `agent.` (`fc1`,
//! `gru`, `fc2`), the hypernetworks under `mixer.` (`w1`, `b1`, `w2`,
//! `b2a`, `b2b`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::layers::{gru_plain, gru_step, init_linear, linear_forward, linear_plain};
use crate::numcore::{ops, GruParams, InitScheme, Matrix, ParamStore, Tape, Var};

/// Network widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetShape {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            hidden: 64,
            embed: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    /// Monotonic hypernetwork mixing.
    Qmix,
    /// Plain sum of the agent values.
    Vdn,
    /// No mixing; each agent learns its own value (IQL).
    Independent,
}

/// Dimensions of one learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub shape: NetShape,
}

impl Dims {
    /// Agent-network input: observation plus agent one-hot.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_agents
    }

    pub fn state_dim(&self) -> usize {
        self.obs_dim * self.n_agents
    }
}

/// Fresh parameters for the agent network and, for QMIX, the mixer.
pub fn init_params<R: Rng + ?Sized>(
    dims: &Dims,
    mixer: MixerKind,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let h = dims.shape.hidden;
    init_linear(&mut store, "agent.fc1", dims.input_dim(), h, scheme, rng)?;
    GruParams::init(h, h, scheme, rng)?.insert_into(&mut store, "agent.gru");
    init_linear(&mut store, "agent.fc2", h, dims.n_actions, scheme, rng)?;
    if mixer == MixerKind::Qmix {
        let (s, n, e) = (dims.state_dim(), dims.n_agents, dims.shape.embed);
        init_linear(&mut store, "mixer.w1", s, n * e, scheme, rng)?;
        init_linear(&mut store, "mixer.b1", s, e, scheme, rng)?;
        init_linear(&mut store, "mixer.w2", s, e, scheme, rng)?;
        init_linear(&mut store, "mixer.b2a", s, e, scheme, rng)?;
        init_linear(&mut store, "mixer.b2b", e, 1, scheme, rng)?;
    }
    Ok(store)
}

/// Builds agent-network inputs: one row per (episode, agent) with the
/// observation followed by the agent one-hot.
pub fn agent_inputs(obs: &[&Matrix], n_agents: usize) -> Result<Matrix> {
    let obs_dim = obs.first().map_or(0, |o| o.cols());
    let mut x = Matrix::zeros(obs.len() * n_agents, obs_dim + n_agents);
    for (e, o) in obs.iter().enumerate() {
        if o.shape() != (n_agents, obs_dim) {
            return Err(Error::shape(format!(
                "observation block {}x{}, expected {n_agents}x{obs_dim}",
                o.rows(),
                o.cols()
            )));
        }
        for a in 0..n_agents {
            let row = x.row_mut(e * n_agents + a);
            row[..obs_dim].copy_from_slice(o.row(a));
            row[obs_dim + a] = 1.0;
        }
    }
    Ok(x)
}

/// One agent-network step without a tape: `(q, h')`.
pub fn agent_step(store: &ParamStore, x: &Matrix, h: &Matrix) -> Result<(Matrix, Matrix)> {
    let z = ops::relu(&linear_plain(store, "agent.fc1", x)?);
    let h_next = gru_plain(store, "agent.gru", &z, h)?;
    let q = linear_plain(store, "agent.fc2", &h_next)?;
    Ok((q, h_next))
}

/// One agent-network step on the tape: `(q, h')`.
pub fn agent_step_tape<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    x: Var,
    h: Var,
) -> Result<(Var, Var)> {
    let z = linear_forward(tape, store, "agent.fc1", x)?;
    let z = tape.relu(z);
    let h_next = gru_step(tape, store, "agent.gru", z, h)?;
    let q = linear_forward(tape, store, "agent.fc2", h_next)?;
    Ok((q, h_next))
}

/// `Q_tot` for each row of `q` (`R×N`) given states (`R×S`), without a tape.
pub fn mix_plain(
    kind: MixerKind,
    store: &ParamStore,
    q: &Matrix,
    states: &Matrix,
) -> Result<Matrix> {
    match kind {
        MixerKind::Vdn => Ok(row_sums(q)),
        MixerKind::Independent => Err(Error::contract("independent learners have no mixer")),
        MixerKind::Qmix => {
            let rows = q.rows();
            let w1 = linear_plain(store, "mixer.w1", states)?.map(f64::abs);
            let b1 = linear_plain(store, "mixer.b1", states)?;
            let w2 = linear_plain(store, "mixer.w2", states)?.map(f64::abs);
            let b2 = linear_plain(
                store,
                "mixer.b2b",
                &ops::relu(&linear_plain(store, "mixer.b2a", states)?),
            )?;
            let embed = b1.cols();
            if w1.cols() != q.cols() * embed {
                return Err(Error::shape(format!(
                    "mixer expects {} agents, got {}",
                    w1.cols() / embed,
                    q.cols()
                )));
            }
            let mut out = Matrix::zeros(rows, 1);
            let mut hidden = vec![0.0; embed];
            for r in 0..rows {
                hidden.copy_from_slice(b1.row(r));
                let wr = w1.row(r);
                for (i, &qi) in q.row(r).iter().enumerate() {
                    for (e, he) in hidden.iter_mut().enumerate() {
                        *he += qi * wr[i * embed + e];
                    }
                }
                let mut total = b2.get(r, 0);
                for (he, &w) in hidden.iter().zip(w2.row(r)) {
                    total += he.max(0.0) * w;
                }
                out.set(r, 0, total);
            }
            Ok(out)
        }
    }
}

/// `Q_tot` on the tape; `q` is `R×N`, `states` `R×S`. Returns `R×1`.
pub fn mix_tape<'p>(
    kind: MixerKind,
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    q: Var,
    states: Var,
) -> Result<Var> {
    match kind {
        MixerKind::Vdn => Ok(tape.sum_cols(q)),
        MixerKind::Independent => Err(Error::contract("independent learners have no mixer")),
        MixerKind::Qmix => {
            let w1 = linear_forward(tape, store, "mixer.w1", states)?;
            let w1 = tape.abs(w1);
            let b1 = linear_forward(tape, store, "mixer.b1", states)?;
            let mixed = tape.mix_bilinear(q, w1)?;
            let hidden = tape.add(mixed, b1)?;
            let hidden = tape.relu(hidden);
            let w2 = linear_forward(tape, store, "mixer.w2", states)?;
            let w2 = tape.abs(w2);
            let weighted = tape.mul(hidden, w2)?;
            let y = tape.sum_cols(weighted);
            let b2 = linear_forward(tape, store, "mixer.b2a", states)?;
            let b2 = tape.relu(b2);
            let b2 = linear_forward(tape, store, "mixer.b2b", b2)?;
            tape.add(y, b2)
        }
    }
}

fn row_sums(q: &Matrix) -> Matrix {
    let data = (0..q.rows()).map(|r| q.row(r).iter().sum()).collect();
    Matrix::new(q.rows(), 1, data).expect("column")
}

/// Index of the largest legal entry; ties go to the lowest index.
pub fn masked_argmax(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &ok)) in q.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(n: usize) -> Dims {
        Dims {
            n_agents: n,
            obs_dim: 10,
            n_actions: 7,
            shape: NetShape {
                hidden: 16,
                embed: 8,
            },
        }
    }

    #[test]
    fn zero_parameters_give_zero_q() {
        let d = dims(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store =
            init_params(&d, MixerKind::Qmix, InitScheme::XavierOrthogonal, &mut rng).unwrap();
        for (_, m) in store.iter_mut() {
            m.data_mut().fill(0.0);
        }
        let obs = Matrix::filled(3, 10, 0.3);
        let x = agent_inputs(&[&obs], 3).unwrap();
        let (q, h) = agent_step(&store, &x, &Matrix::zeros(3, 16)).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_and_tape_agree_bitwise() {
        let d = dims(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store =
            init_params(&d, MixerKind::Qmix, InitScheme::XavierOrthogonal, &mut rng).unwrap();
        let obs = crate::numcore::init::uniform(4, 10, 1.0, &mut rng).unwrap();
        let x = agent_inputs(&[&obs, &obs], 4).unwrap();
        let h0 = crate::numcore::init::uniform(8, 16, 0.5, &mut rng).unwrap();
        let (q, h) = agent_step(&store, &x, &h0).unwrap();
        let mut tape = Tape::new();
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(h0.clone()));
        let (qv, hv2) = agent_step_tape(&mut tape, &store, xv, hv).unwrap();
        assert_eq!(tape.value(qv), &q);
        assert_eq!(tape.value(hv2), &h);

        let qs = crate::numcore::init::uniform(5, 4, 2.0, &mut rng).unwrap();
        let s = crate::numcore::init::uniform(5, 40, 1.0, &mut rng).unwrap();
        let plain = mix_plain(MixerKind::Qmix, &store, &qs, &s).unwrap();
        let (qv, sv) = (tape.constant(qs), tape.constant(s));
        let y = mix_tape(MixerKind::Qmix, &mut tape, &store, qv, sv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vdn_is_a_sum() {
        let q = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]]).unwrap();
        let out = mix_plain(
            MixerKind::Vdn,
            &ParamStore::new(),
            &q,
            &Matrix::zeros(1, 80),
        )
        .unwrap();
        assert_eq!(out.get(0, 0), 36.0);
    }

    #[test]
    fn argmax_respects_mask() {
        let q = [5.0, 1.0, 4.0];
        assert_eq!(masked_argmax(&q, &[true, true, true]), Some(0));
        assert_eq!(masked_argmax(&q, &[false, true, true]), Some(2));
        assert_eq!(masked_argmax(&q, &[false, false, false]), None);
        assert_eq!(masked_argmax(&[1.0, 1.0], &[true, true]), Some(0));
    }

    #[test]
    fn mixer_rejects_wrong_agent_count() {
        let d = dims(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store =
            init_params(&d, MixerKind::Qmix, InitScheme::XavierOrthogonal, &mut rng).unwrap();
        let r = mix_plain(
            MixerKind::Qmix,
            &store,
            &Matrix::zeros(1, 4),
            &Matrix::zeros(1, 30),
        );
        assert!(matches!(r, Err(Error::InvalidShape(_))));
    }
}
