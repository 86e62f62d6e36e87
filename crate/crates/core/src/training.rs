//! Bookkeeping shared by all trainers: the training log, periodic greedy
//! evaluation and best-checkpoint selection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{rollout, IntersectionEnv, Policy, Record};
use crate::error::Result;
use crate::metrics::{TrainRecord, TRAIN_HEADER};
use crate::numcore::{checkpoint, ParamStore};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Where to write `metrics.csv`, `eval.csv` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
}

/// A stored policy snapshot.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    /// Training episodes completed when the snapshot was taken.
    pub episode: usize,
    /// Mean greedy-evaluation reward and collisions at that point.
    pub eval_reward: f64,
    pub eval_collisions: f64,
    pub path: Option<PathBuf>,
    pub params: ParamStore,
}

/// One periodic greedy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub episode: usize,
    pub env_steps: u64,
    pub reward: f64,
    pub collisions: f64,
    pub avg_speed: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub evals: Vec<EvalPoint>,
    /// Highest mean evaluation reward.
    pub best_reward: CheckpointInfo,
    /// Fewest mean evaluation collisions, ties broken by reward.
    pub best_safety: CheckpointInfo,
    pub last: CheckpointInfo,
}

impl TrainOutcome {
    /// Mean of `f` over the last `fraction` of the training episodes
    /// (at least one).
    pub fn tail_mean(&self, fraction: f64, f: impl Fn(&TrainRecord) -> f64) -> f64 {
        tail_mean(&self.records, fraction, f)
    }
}

pub fn tail_mean(records: &[TrainRecord], fraction: f64, f: impl Fn(&TrainRecord) -> f64) -> f64 {
    let n = ((records.len() as f64 * fraction).ceil() as usize).clamp(1, records.len().max(1));
    let tail = &records[records.len().saturating_sub(n)..];
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Independent random streams derived from one run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seeds of the fixed evaluation episodes of a run.
pub fn eval_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = stream(seed, 5);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Mean reward, collisions and speed of `policy` over `seeds`.
pub fn evaluate(
    env: &mut IntersectionEnv,
    policy: &mut dyn Policy,
    seeds: &[u64],
    episode: usize,
    env_steps: u64,
) -> Result<EvalPoint> {
    let (mut reward, mut collisions, mut speed) = (0.0, 0.0, 0.0);
    for (i, &seed) in seeds.iter().enumerate() {
        let r = rollout(env, policy, seed, i, Record::default())?;
        reward += r.reward;
        collisions += r.metrics.collisions as f64;
        speed += r.metrics.avg_speed;
    }
    let n = seeds.len() as f64;
    Ok(EvalPoint {
        episode,
        env_steps,
        reward: reward / n,
        collisions: collisions / n,
        avg_speed: speed / n,
    })
}

/// Writes the training log and keeps the best snapshots.
pub struct Tracker {
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    records: Vec<TrainRecord>,
    evals: Vec<EvalPoint>,
    best_reward: Option<CheckpointInfo>,
    best_safety: Option<CheckpointInfo>,
}

impl Tracker {
    pub fn new(out_dir: Option<&Path>) -> Result<Self> {
        let log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir.join("checkpoints"))?;
                let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
                writeln!(w, "{TRAIN_HEADER}")?;
                Some(w)
            }
            None => None,
        };
        Ok(Tracker {
            out_dir: out_dir.map(Path::to_path_buf),
            log,
            records: Vec::new(),
            evals: Vec::new(),
            best_reward: None,
            best_safety: None,
        })
    }

    pub fn record(&mut self, record: TrainRecord) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{}", record.csv_row())?;
            w.flush()?;
        }
        if (record.episode + 1).is_multiple_of(50) {
            log::info!(
                "episode {} steps {} reward {:.2} collisions {} eps {:.3} loss {:?}",
                record.episode + 1,
                record.env_steps,
                record.reward,
                record.collisions,
                record.epsilon,
                record.loss
            );
        }
        self.records.push(record);
        Ok(())
    }

    fn save(&self, tag: &str, params: &ParamStore) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            Some(dir) => {
                let p = dir.join("checkpoints").join(format!("{tag}.ckpt"));
                checkpoint::save(params, &p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }

    /// Registers an evaluation of `params`, replacing the best snapshots
    /// it improves on.
    pub fn evaluated(&mut self, point: EvalPoint, params: &ParamStore) -> Result<()> {
        let info = |path| CheckpointInfo {
            episode: point.episode,
            eval_reward: point.reward,
            eval_collisions: point.collisions,
            path,
            params: params.clone(),
        };
        if self
            .best_reward
            .as_ref()
            .is_none_or(|b| point.reward > b.eval_reward)
        {
            let path = self.save("best_reward", params)?;
            self.best_reward = Some(info(path));
        }
        let safer = self.best_safety.as_ref().is_none_or(|b| {
            point.collisions < b.eval_collisions
                || (point.collisions == b.eval_collisions && point.reward > b.eval_reward)
        });
        if safer {
            let path = self.save("best_safety", params)?;
            self.best_safety = Some(info(path));
        }
        log::info!(
            "eval after {} episodes: reward {:.2} collisions {:.2} speed {:.2}",
            point.episode,
            point.reward,
            point.collisions,
            point.avg_speed
        );
        self.evals.push(point);
        Ok(())
    }

    pub fn finish(self, params: ParamStore) -> Result<TrainOutcome> {
        let last_eval = self
            .evals
            .last()
            .cloned()
            .ok_or_else(|| crate::Error::contract("training finished without an evaluation"))?;
        if let Some(dir) = &self.out_dir {
            let mut w = BufWriter::new(File::create(dir.join("eval.csv"))?);
            writeln!(w, "episode,env_steps,reward,collisions,avg_speed")?;
            for e in &self.evals {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    e.episode, e.env_steps, e.reward, e.collisions, e.avg_speed
                )?;
            }
            w.flush()?;
        }
        let path = self.save("final", &params)?;
        Ok(TrainOutcome {
            records: self.records,
            evals: self.evals,
            best_reward: self.best_reward.expect("evaluated"),
            best_safety: self.best_safety.expect("evaluated"),
            last: CheckpointInfo {
                episode: last_eval.episode,
                eval_reward: last_eval.reward,
                eval_collisions: last_eval.collisions,
                path,
                params,
            },
        })
    }
}
