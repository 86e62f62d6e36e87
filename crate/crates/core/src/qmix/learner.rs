//! Batched TD learning for the value-based learners (QMIX, VDN, IQL).

use rand::Rng;

use super::nets::{
    self, agent_inputs, agent_step, agent_step_tape, masked_argmax, Dims, MixerKind,
};
use super::targets::peng_targets;
use super::QmixConfig;
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::numcore::{AdamState, Gradients, Matrix, Optimizer, ParamStore, RmsPropState, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

/// Result of one gradient step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Online and target parameters plus the optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub dims: Dims,
    pub config: QmixConfig,
    pub params: ParamStore,
    pub target: ParamStore,
    pub optimizer: Optimizer,
    pub grad_steps: u64,
}

/// A padded view of a few episodes, laid out for batched unrolling.
///
/// Agent rows at time `t` are ordered `(episode, agent)`; mixer rows are
/// ordered `(t, episode)`.
struct Padded<'a> {
    episodes: &'a [&'a Episode],
    n: usize,
    t_max: usize,
}

impl<'a> Padded<'a> {
    fn new(episodes: &'a [&'a Episode], n: usize) -> Result<Self> {
        for ep in episodes {
            if ep.n_agents != n {
                return Err(Error::shape(format!(
                    "episode has {} agents, learner {n}",
                    ep.n_agents
                )));
            }
            if !ep.terminated() {
                return Err(Error::contract("training episodes must be terminated"));
            }
        }
        let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        Ok(Padded { episodes, n, t_max })
    }

    fn b(&self) -> usize {
        self.episodes.len()
    }

    fn valid(&self, e: usize, t: usize) -> bool {
        t < self.episodes[e].len()
    }

    /// Agent-network inputs at observation index `t` (zeros past the end).
    fn inputs(&self, t: usize, zeros: &Matrix) -> Result<Matrix> {
        let obs: Vec<&Matrix> = self
            .episodes
            .iter()
            .map(|ep| ep.obs.get(t).unwrap_or(zeros))
            .collect();
        agent_inputs(&obs, self.n)
    }

    /// Global states at observation index `t + offset` for every `t < t_max`.
    fn states(&self, offset: usize, state_dim: usize) -> Matrix {
        let b = self.b();
        let mut s = Matrix::zeros(self.t_max * b, state_dim);
        for t in 0..self.t_max {
            for (e, ep) in self.episodes.iter().enumerate() {
                if let Some(o) = ep.obs.get(t + offset) {
                    if t < ep.len() {
                        s.row_mut(t * b + e).copy_from_slice(o.data());
                    }
                }
            }
        }
        s
    }

    fn actions(&self, t: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.b() * self.n);
        for ep in self.episodes {
            match ep.actions.get(t) {
                Some(a) => out.extend_from_slice(a),
                None => out.extend(std::iter::repeat_n(0, self.n)),
            }
        }
        out
    }
}

impl Learner {
    pub fn new(dims: Dims, config: QmixConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let optimizer = match config.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(config.adam)),
            OptimizerKind::RmsProp => Optimizer::RmsProp(RmsPropState::new(config.rmsprop)),
        };
        Ok(Learner {
            dims,
            target: params.clone(),
            params,
            optimizer,
            grad_steps: 0,
            config,
        })
    }

    pub fn init<R: Rng + ?Sized>(dims: Dims, config: QmixConfig, rng: &mut R) -> Result<Self> {
        let params = nets::init_params(&dims, config.mixer, config.init, rng)?;
        Self::new(dims, config, params)
    }

    /// Bootstrapped targets computed with the target parameters.
    ///
    /// Returns one `t_max × k` matrix per episode where `k` is 1 for mixed
    /// learners and the agent count for independent ones; rows past the
    /// episode end are zero.
    fn targets(&self, batch: &Padded) -> Result<Vec<Matrix>> {
        let (b, n, t_max) = (batch.b(), batch.n, batch.t_max);
        let hidden = self.dims.shape.hidden;
        let zeros = Matrix::zeros(n, self.dims.obs_dim);
        // per-agent bootstrap maxima, rows (t, episode), columns agents
        let mut next_max = Matrix::zeros(t_max * b, n);
        let mut h = Matrix::zeros(b * n, hidden);
        for t in 0..=t_max {
            let x = batch.inputs(t, &zeros)?;
            let (q, h_next) = agent_step(&self.target, &x, &h)?;
            h = h_next;
            if t == 0 {
                continue;
            }
            for (e, ep) in batch.episodes.iter().enumerate() {
                if t > ep.len() {
                    continue;
                }
                for a in 0..n {
                    let best = masked_argmax(q.row(e * n + a), &ep.masks[t][a])
                        .ok_or_else(|| Error::contract("stored mask without legal action"))?;
                    next_max.set((t - 1) * b + e, a, q.get(e * n + a, best));
                }
            }
        }

        let (gamma, lambda) = (self.config.gamma, self.config.lambda);
        let mut out = Vec::with_capacity(b);
        match self.config.mixer {
            MixerKind::Independent => {
                for (e, ep) in batch.episodes.iter().enumerate() {
                    let mut m = Matrix::zeros(t_max, n);
                    for a in 0..n {
                        let v: Vec<f64> =
                            (0..ep.len()).map(|t| next_max.get(t * b + e, a)).collect();
                        let g = peng_targets(&ep.rewards, &v, ep.terminated(), gamma, 0.0)?;
                        for (t, gt) in g.into_iter().enumerate() {
                            m.set(t, a, gt);
                        }
                    }
                    out.push(m);
                }
            }
            kind => {
                let states = batch.states(1, self.dims.state_dim());
                let v = nets::mix_plain(kind, &self.target, &next_max, &states)?;
                for (e, ep) in batch.episodes.iter().enumerate() {
                    let values: Vec<f64> = (0..ep.len()).map(|t| v.get(t * b + e, 0)).collect();
                    let g = peng_targets(&ep.rewards, &values, ep.terminated(), gamma, lambda)?;
                    let mut m = Matrix::zeros(t_max, 1);
                    for (t, gt) in g.into_iter().enumerate() {
                        m.set(t, 0, gt);
                    }
                    out.push(m);
                }
            }
        }
        Ok(out)
    }

    /// Loss of one padded chunk on `tape`, scaled by `1/normalizer`.
    fn chunk_loss<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamStore,
        batch: &Padded,
        targets: &[Matrix],
        normalizer: f64,
    ) -> Result<crate::numcore::Var> {
        let (b, n, t_max) = (batch.b(), batch.n, batch.t_max);
        let zeros = Matrix::zeros(n, self.dims.obs_dim);
        let mut h = tape.constant(Matrix::zeros(b * n, self.dims.shape.hidden));
        let mut chosen = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let x = tape.constant(batch.inputs(t, &zeros)?);
            let (q, h_next) = agent_step_tape(tape, params, x, h)?;
            h = h_next;
            let taken = tape.gather_cols(q, batch.actions(t))?;
            chosen.push(tape.reshape(taken, b, n)?);
        }
        // rows (t, episode)
        let chosen = tape.concat_rows(chosen)?;
        let cols = if self.config.mixer == MixerKind::Independent {
            n
        } else {
            1
        };
        let mut target = Matrix::zeros(t_max * b, cols);
        let mut mask = Matrix::zeros(t_max * b, cols);
        for t in 0..t_max {
            for e in 0..b {
                if batch.valid(e, t) {
                    target.row_mut(t * b + e).copy_from_slice(targets[e].row(t));
                    mask.row_mut(t * b + e).fill(1.0);
                }
            }
        }
        let pred = match self.config.mixer {
            MixerKind::Independent => chosen,
            kind => {
                let states = tape.constant(batch.states(0, self.dims.state_dim()));
                nets::mix_tape(kind, tape, params, chosen, states)?
            }
        };
        let err = tape.sub_const(pred, &target)?;
        let err = tape.mul_const(err, mask)?;
        let sq = tape.square(err);
        let total = tape.sum_all(sq);
        Ok(tape.scale(total, 1.0 / normalizer))
    }

    /// Mean squared TD error over the valid steps of `episodes` and its
    /// gradient with respect to the online parameters.
    ///
    /// Episodes are processed in chunks of `batch_chunk` with gradients
    /// accumulated, which gives the same result as one large batch.
    pub fn loss_and_grads(&self, episodes: &[&Episode]) -> Result<(f64, Gradients)> {
        self.loss_and_grads_with(&self.params, episodes)
    }

    /// Same as [`Learner::loss_and_grads`] with explicit online parameters.
    pub fn loss_and_grads_with(
        &self,
        params: &ParamStore,
        episodes: &[&Episode],
    ) -> Result<(f64, Gradients)> {
        let normalizer: usize = episodes.iter().map(|e| e.len()).sum();
        if normalizer == 0 {
            return Err(Error::contract("empty training batch"));
        }
        let mut loss = 0.0;
        let mut grads = Gradients::new();
        for chunk in episodes.chunks(self.config.batch_chunk.max(1)) {
            let batch = Padded::new(chunk, self.dims.n_agents)?;
            let targets = self.targets(&batch)?;
            let mut tape = Tape::new();
            let l = self.chunk_loss(&mut tape, params, &batch, &targets, normalizer as f64)?;
            loss += tape.value(l).get(0, 0);
            grads.accumulate(&tape.backward(l)?)?;
        }
        Ok((loss, grads))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss_with(&self, params: &ParamStore, episodes: &[&Episode]) -> Result<f64> {
        let normalizer: usize = episodes.iter().map(|e| e.len()).sum();
        let mut loss = 0.0;
        for chunk in episodes.chunks(self.config.batch_chunk.max(1)) {
            let batch = Padded::new(chunk, self.dims.n_agents)?;
            let targets = self.targets(&batch)?;
            let mut tape = Tape::new();
            let l = self.chunk_loss(&mut tape, params, &batch, &targets, normalizer as f64)?;
            loss += tape.value(l).get(0, 0);
        }
        Ok(loss)
    }

    /// One optimizer step; refreshes the target network and decays the
    /// learning rate on their schedules.
    pub fn train_step(&mut self, episodes: &[&Episode]) -> Result<StepStats> {
        let (loss, mut grads) = self.loss_and_grads(episodes)?;
        if !grads.all_finite() || !loss.is_finite() {
            return Err(Error::contract(format!(
                "non-finite loss or gradient (loss {loss})"
            )));
        }
        let grad_norm = if self.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.config.grad_clip)
        } else {
            grads.global_norm()
        };
        self.optimizer.step(&mut self.params, &grads)?;
        self.grad_steps += 1;
        if self.grad_steps.is_multiple_of(self.config.target_update) {
            self.target.copy_from(&self.params)?;
        }
        if self.config.lr_decay != 1.0 && self.grad_steps.is_multiple_of(self.config.decay_every) {
            self.optimizer.decay(self.config.lr_decay);
        }
        Ok(StepStats { loss, grad_norm })
    }

    /// Greedy or ε-greedy actor over the online agent network.
    pub fn actor(&self) -> Actor<'_> {
        Actor::new(&self.params, self.dims)
    }
}

/// Recurrent policy state for acting in one episode.
pub struct Actor<'p> {
    params: &'p ParamStore,
    dims: Dims,
    h: Matrix,
}

impl<'p> Actor<'p> {
    pub fn new(params: &'p ParamStore, dims: Dims) -> Self {
        Actor {
            params,
            dims,
            h: Matrix::zeros(dims.n_agents, dims.shape.hidden),
        }
    }

    pub fn reset(&mut self) {
        self.h = Matrix::zeros(self.dims.n_agents, self.dims.shape.hidden);
    }

    /// Q values for the current observations (`agents × actions`); advances
    /// the hidden state.
    pub fn q_values(&mut self, obs: &Matrix) -> Result<Matrix> {
        let x = agent_inputs(&[obs], self.dims.n_agents)?;
        let (q, h) = agent_step(self.params, &x, &self.h)?;
        self.h = h;
        Ok(q)
    }
}
