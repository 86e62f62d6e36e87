use std::cell::RefCell;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gae_advantages;
use crate::env::{
    rollout, ActionMask, EnvConfig, IntersectionEnv, Observations, Policy, Record, N_ACTIONS,
    OBS_DIM,
};
use crate::error::{Error, Result};
use crate::metrics::TrainRecord;
use crate::numcore::layers::{init_linear, linear_forward, linear_plain, InitScheme};
use crate::numcore::{AdamConfig, AdamState, Matrix, ParamStore, Tape, Var};
use crate::qmix::nets::{agent_inputs, masked_argmax};
use crate::sim::{ScenarioConfig, VehicleId};
use crate::training::{eval_seeds, evaluate, stream, Tracker, TrainOptions, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub total_steps: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    /// Minibatches per epoch.
    pub minibatches: usize,
    pub epochs: usize,
    /// Initial learning rate, annealed linearly to 0 over `total_steps`.
    pub lr: f64,
    pub adam_eps: f64,
    pub hidden: usize,
    pub layers: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    /// Episodes collected per update.
    pub rollout_episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            total_steps: 1_500_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            minibatches: 8,
            epochs: 4,
            lr: 3e-4,
            adam_eps: 1e-5,
            hidden: 128,
            layers: 2,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            rollout_episodes: 4,
            eval_every: 20,
            eval_episodes: 5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return err("clip_range must lie in (0, 1)");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.rollout_episodes == 0 {
            return err("epochs, minibatches and rollout_episodes must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return err("gamma must lie in (0, 1] and gae_lambda in [0, 1]");
        }
        if self.hidden == 0 || self.layers == 0 {
            return err("network widths must be positive");
        }
        if !(self.lr > 0.0) || self.max_grad_norm < 0.0 {
            return err("lr must be positive and max_grad_norm non-negative");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return err("evaluation cadence and size must be positive");
        }
        Ok(())
    }
}

/// Separate actor and critic MLPs with tanh hidden layers, shared by all
/// agents. Inputs are the local observation followed by the agent one-hot.
#[derive(Clone, Debug)]
pub struct PolicyValueNet {
    pub params: ParamStore,
    pub n_agents: usize,
    pub layers: usize,
}

fn layer_name(head: &str, i: usize) -> String {
    format!("{head}.l{i}")
}

impl PolicyValueNet {
    /// Orthogonal weights with gain √2 on hidden layers, 0.01 on the policy
    /// head and 1 on the value head; zero biases.
    pub fn init<R: Rng + ?Sized>(n_agents: usize, config: &PpoConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let input = OBS_DIM + n_agents;
        for (head, out, gain) in [("actor", N_ACTIONS, 0.01), ("critic", 1, 1.0)] {
            let mut width = input;
            for i in 0..config.layers {
                let name = layer_name(head, i);
                init_linear(
                    &mut params,
                    &name,
                    width,
                    config.hidden,
                    InitScheme::Orthogonal,
                    rng,
                )?;
                params.get_mut(&format!("{name}.w"))?.scale(2f64.sqrt());
                width = config.hidden;
            }
            let name = format!("{head}.out");
            init_linear(&mut params, &name, width, out, InitScheme::Orthogonal, rng)?;
            params.get_mut(&format!("{name}.w"))?.scale(gain);
        }
        Ok(PolicyValueNet {
            params,
            n_agents,
            layers: config.layers,
        })
    }

    /// Wraps loaded parameters, inferring the depth from the names.
    pub fn from_params(params: ParamStore, n_agents: usize) -> Result<Self> {
        let layers = (0..)
            .take_while(|&i| params.contains(&format!("{}.w", layer_name("actor", i))))
            .count();
        if layers == 0 || !params.contains("actor.out.w") || !params.contains("critic.out.w") {
            return Err(Error::contract(
                "parameters do not describe a policy-value network",
            ));
        }
        let w = params.get("actor.l0.w")?;
        if w.cols() != OBS_DIM + n_agents {
            return Err(Error::shape(format!(
                "`actor.l0.w` takes {} inputs, expected {}",
                w.cols(),
                OBS_DIM + n_agents
            )));
        }
        Ok(PolicyValueNet {
            params,
            n_agents,
            layers,
        })
    }

    fn mlp(&self, head: &str, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for i in 0..self.layers {
            h = linear_plain(&self.params, &layer_name(head, i), &h)?.map(f64::tanh);
        }
        linear_plain(&self.params, &format!("{head}.out"), &h)
    }

    /// Action logits (`rows×7`) and values (`rows×1`).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.mlp("actor", x)?, self.mlp("critic", x)?))
    }

    fn mlp_tape<'p>(&'p self, tape: &mut Tape<'p>, head: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.layers {
            let z = linear_forward(tape, &self.params, &layer_name(head, i), h)?;
            h = tape.tanh(z);
        }
        linear_forward(tape, &self.params, &format!("{head}.out"), h)
    }
}

/// Action distribution of one row of logits restricted to `mask`.
pub fn masked_probs(logits: &[f64], mask: &ActionMask) -> Result<[f64; N_ACTIONS]> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::contract("mask without legal action"));
    }
    let mut p = [0.0; N_ACTIONS];
    for ((pi, &l), &ok) in p.iter_mut().zip(logits).zip(mask) {
        if ok {
            *pi = (l - max).exp();
        }
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|pi| *pi /= z);
    Ok(p)
}

/// Per-step data kept while collecting a rollout.
struct StepData {
    x: Matrix,
    logp: Vec<f64>,
    values: Vec<f64>,
    masks: Vec<ActionMask>,
    vehicles: Vec<Option<VehicleId>>,
}

/// Samples (or, without an rng, takes the most likely) masked actions.
pub struct PpoPolicy<'n> {
    net: &'n PolicyValueNet,
    rng: Option<&'n RefCell<ChaCha8Rng>>,
    steps: Option<&'n RefCell<Vec<StepData>>>,
}

impl<'n> PpoPolicy<'n> {
    pub fn greedy(net: &'n PolicyValueNet) -> Self {
        PpoPolicy {
            net,
            rng: None,
            steps: None,
        }
    }
}

impl Policy for PpoPolicy<'_> {
    fn act(&mut self, obs: &Observations) -> Result<Vec<usize>> {
        let x = agent_inputs(&[&obs.obs], self.net.n_agents)?;
        let (logits, values) = self.net.forward(&x)?;
        let mut actions = Vec::with_capacity(obs.masks.len());
        let mut logp = Vec::with_capacity(obs.masks.len());
        for (a, mask) in obs.masks.iter().enumerate() {
            let choice = match self.rng {
                Some(rng) => {
                    let p = masked_probs(logits.row(a), mask)?;
                    let dist = WeightedIndex::new(p)
                        .map_err(|e| Error::contract(format!("policy: {e}")))?;
                    let c = dist.sample(&mut *rng.borrow_mut());
                    logp.push(p[c].ln());
                    c
                }
                None => masked_argmax(logits.row(a), mask)
                    .ok_or_else(|| Error::contract(format!("agent {a} has no legal action")))?,
            };
            actions.push(choice);
        }
        if let Some(steps) = self.steps {
            steps.borrow_mut().push(StepData {
                x,
                logp,
                values: values.data().to_vec(),
                masks: obs.masks.clone(),
                vehicles: obs.vehicles.clone(),
            });
        }
        Ok(actions)
    }
}

/// Flattened training samples of one rollout.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub x: Matrix,
    pub masks: Vec<ActionMask>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Result<PpoBatch> {
        let cols = self.x.cols();
        let mut x = Matrix::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(PpoBatch {
            x,
            masks: idx.iter().map(|&i| self.masks[i]).collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_logp: pick(&self.old_logp),
            advantages: pick(&self.advantages),
            returns: pick(&self.returns),
        })
    }
}

/// Turns one collected episode into samples. Each vehicle's stretch of
/// control in a slot is its own trajectory: it ends with value 0 when the
/// vehicle leaves the slot or the episode ends.
fn episode_samples(
    steps: &[StepData],
    rewards: &[f64],
    config: &PpoConfig,
    out: &mut Vec<(usize, usize, f64, f64)>,
) -> Result<()> {
    let n = steps.first().map_or(0, |s| s.vehicles.len());
    for a in 0..n {
        let mut t = 0;
        while t < steps.len() {
            let Some(id) = steps[t].vehicles[a] else {
                t += 1;
                continue;
            };
            let end = (t..steps.len())
                .find(|&k| steps[k].vehicles[a] != Some(id))
                .unwrap_or(steps.len());
            let mut values: Vec<f64> = steps[t..end].iter().map(|s| s.values[a]).collect();
            values.push(0.0);
            let adv = gae_advantages(&rewards[t..end], &values, config.gamma, config.gae_lambda)?;
            for (k, adv) in (t..end).zip(adv) {
                out.push((k, a, adv, adv + values[k - t]));
            }
            t = end;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean total loss over the minibatch steps.
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub steps: usize,
}

/// Clipped-surrogate loss of one minibatch on the tape:
/// `−mean(min(ρA, clip(ρ)A)) + c_v·mean((V − R)²) − c_e·mean(H)`.
fn minibatch_loss<'p>(
    tape: &mut Tape<'p>,
    net: &'p PolicyValueNet,
    mb: &PpoBatch,
    config: &PpoConfig,
) -> Result<(Var, [f64; 3])> {
    let m = mb.len() as f64;
    let x = tape.constant(mb.x.clone());
    let logits = net.mlp_tape(tape, "actor", x)?;
    let flat_mask: Vec<bool> = mb.masks.iter().flatten().copied().collect();
    let logp_all = tape.log_softmax_masked(logits, flat_mask.clone())?;
    let logp = tape.gather_cols(logp_all, mb.actions.clone())?;
    let old = Matrix::new(mb.len(), 1, mb.old_logp.clone())?;
    let diff = tape.sub_const(logp, &old)?;
    let ratio = tape.exp(diff);
    let adv = Matrix::new(mb.len(), 1, mb.advantages.clone())?;
    let surr1 = tape.mul_const(ratio, adv.clone())?;
    let clipped = tape.clamp(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range);
    let surr2 = tape.mul_const(clipped, adv)?;
    let surr = tape.min(surr1, surr2)?;
    let surr = tape.sum_all(surr);
    let policy = tape.scale(surr, -1.0 / m);

    let values = net.mlp_tape(tape, "critic", x)?;
    let ret = Matrix::new(mb.len(), 1, mb.returns.clone())?;
    let err = tape.sub_const(values, &ret)?;
    let sq = tape.square(err);
    let sq = tape.sum_all(sq);
    let value = tape.scale(sq, 1.0 / m);

    let mask_m = Matrix::new(
        mb.len(),
        N_ACTIONS,
        flat_mask.iter().map(|&b| f64::from(u8::from(b))).collect(),
    )?;
    let p = tape.exp(logp_all);
    let p = tape.mul_const(p, mask_m)?;
    let plogp = tape.mul(p, logp_all)?;
    let neg_h = tape.sum_all(plogp);
    let entropy = tape.scale(neg_h, -1.0 / m);

    let vt = tape.scale(value, config.vf_coef);
    let et = tape.scale(entropy, -config.ent_coef);
    let loss = tape.add(policy, vt)?;
    let loss = tape.add(loss, et)?;
    let parts = [
        tape.value(policy).get(0, 0),
        tape.value(value).get(0, 0),
        tape.value(entropy).get(0, 0),
    ];
    Ok((loss, parts))
}

/// Runs `epochs` passes of shuffled minibatch Adam steps over `batch`.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyValueNet,
    optimizer: &mut AdamState,
    batch: &PpoBatch,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Ok(UpdateStats::default());
    }
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let parts = config.minibatches.min(batch.len());
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for k in 0..parts {
            let idx = &order[k * batch.len() / parts..(k + 1) * batch.len() / parts];
            let mut mb = batch.select(idx)?;
            normalize(&mut mb.advantages);
            let (loss, parts, mut grads) = {
                let mut tape = Tape::new();
                let (loss, parts) = minibatch_loss(&mut tape, net, &mb, config)?;
                (tape.value(loss).get(0, 0), parts, tape.backward(loss)?)
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite PPO loss {loss}")));
            }
            if config.max_grad_norm > 0.0 {
                grads.clip_global_norm(config.max_grad_norm);
            }
            optimizer.step(&mut net.params, &grads)?;
            stats.loss += loss;
            stats.policy_loss += parts[0];
            stats.value_loss += parts[1];
            stats.entropy += parts[2];
            stats.steps += 1;
        }
    }
    let s = stats.steps as f64;
    stats.loss /= s;
    stats.policy_loss /= s;
    stats.value_loss /= s;
    stats.entropy /= s;
    Ok(stats)
}

fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt() + 1e-8;
    v.iter_mut().for_each(|a| *a = (*a - mean) / sd);
}

/// Parameter-shared PPO: every agent samples from the same policy on its
/// own observation; all agents receive the team reward.
pub fn train_ppo(
    scenario: &ScenarioConfig,
    env_config: &EnvConfig,
    config: &PpoConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n_agents = scenario.agents();
    let mut env = IntersectionEnv::new(scenario.clone(), env_config.clone())?;
    let mut eval_env = IntersectionEnv::new(scenario.clone(), env_config.clone())?;
    let mut net = PolicyValueNet::init(n_agents, config, &mut stream(options.seed, 1))?;
    let act_rng = RefCell::new(stream(options.seed, 2));
    let mut shuffle_rng = stream(options.seed, 3);
    let mut episode_rng = stream(options.seed, 4);
    let eval_seeds = eval_seeds(options.seed, config.eval_episodes);
    let mut optimizer = AdamState::new(AdamConfig {
        lr: config.lr,
        eps: config.adam_eps,
        ..AdamConfig::default()
    });
    let mut tracker = Tracker::new(options.out_dir.as_deref())?;

    let mut env_steps = 0u64;
    let mut episode = 0usize;
    while env_steps < config.total_steps {
        let lr = config.lr * (1.0 - env_steps as f64 / config.total_steps as f64);
        optimizer.lr = lr;
        let mut samples = Vec::new();
        let mut finished = Vec::new();
        let mut xs = Vec::new();
        let mut meta = Vec::new();
        for _ in 0..config.rollout_episodes {
            if env_steps >= config.total_steps {
                break;
            }
            let steps = RefCell::new(Vec::new());
            let result = {
                let mut policy = PpoPolicy {
                    net: &net,
                    rng: Some(&act_rng),
                    steps: Some(&steps),
                };
                let seed = episode_rng.next_u64();
                rollout(
                    &mut env,
                    &mut policy,
                    seed,
                    episode + finished.len(),
                    Record {
                        episode: true,
                        trajectory: false,
                    },
                )?
            };
            env_steps += result.steps as u64;
            let ep = result.episode.as_ref().expect("episode recorded");
            let steps = steps.into_inner();
            let base = xs.len();
            let mut local = Vec::new();
            episode_samples(&steps, &ep.rewards, config, &mut local)?;
            for (t, a, adv, ret) in local {
                samples.push((base + t, a, adv, ret, ep.actions[t][a]));
            }
            for s in steps {
                meta.push((s.logp, s.masks));
                xs.push(s.x);
            }
            finished.push((result.reward, result.metrics.collisions, env_steps));
        }
        let cols = OBS_DIM + n_agents;
        let mut batch = PpoBatch {
            x: Matrix::zeros(samples.len(), cols),
            masks: Vec::with_capacity(samples.len()),
            actions: Vec::with_capacity(samples.len()),
            old_logp: Vec::with_capacity(samples.len()),
            advantages: Vec::with_capacity(samples.len()),
            returns: Vec::with_capacity(samples.len()),
        };
        for (r, &(step, a, adv, ret, action)) in samples.iter().enumerate() {
            batch.x.row_mut(r).copy_from_slice(xs[step].row(a));
            batch.masks.push(meta[step].1[a]);
            batch.actions.push(action);
            batch.old_logp.push(meta[step].0[a]);
            batch.advantages.push(adv);
            batch.returns.push(ret);
        }
        let stats = ppo_update(&mut net, &mut optimizer, &batch, config, &mut shuffle_rng)?;
        let loss = (stats.steps > 0).then_some(stats.loss);
        for (reward, collisions, steps_at) in finished {
            tracker.record(TrainRecord {
                episode,
                env_steps: steps_at,
                reward,
                collisions,
                epsilon: 0.0,
                lr,
                loss,
            })?;
            episode += 1;
            if episode.is_multiple_of(config.eval_every) || steps_at >= config.total_steps {
                let mut greedy = PpoPolicy::greedy(&net);
                let point = evaluate(&mut eval_env, &mut greedy, &eval_seeds, episode, steps_at)?;
                tracker.evaluated(point, &net.params)?;
            }
        }
    }
    tracker.finish(net.params)
}
