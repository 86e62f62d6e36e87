//! Multi-seed training runs with a manifest, checkpoint evaluation and
//! trajectory replay.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_baseline, Baseline, PolicyValueNet, PpoPolicy};
use crate::config::RunConfig;
use crate::env::{rollout, IntersectionEnv, Policy, Record};
use crate::error::{Error, Result};
use crate::metrics::{
    collisions_path, write_collisions, write_episode_metrics, write_step_metrics, write_trajectory,
    MetricsRecord, StepSummary, TrajectoryRow,
};
use crate::numcore::{checkpoint, ParamStore};
use crate::qmix::nets::init_params;
use crate::qmix::{self, dims_for, Dims, GreedyPolicy, MixerKind};
use crate::training::{eval_seeds, TrainOptions, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Qmix,
    QmixOriginal,
    Vdn,
    Iql,
    Ppo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Qmix,
        Algorithm::QmixOriginal,
        Algorithm::Vdn,
        Algorithm::Iql,
        Algorithm::Ppo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Qmix => "qmix",
            Algorithm::QmixOriginal => "qmix-original",
            Algorithm::Vdn => "vdn",
            Algorithm::Iql => "iql",
            Algorithm::Ppo => "ppo",
        }
    }

    /// The config this algorithm actually trains with. Plain QMIX also
    /// turns reward clipping off.
    pub fn prepare(self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        match self {
            Algorithm::Qmix | Algorithm::Ppo => {}
            Algorithm::QmixOriginal => {
                c.qmix = c.qmix.to_original();
                c.env.reward.clip = false;
            }
            Algorithm::Vdn => c.qmix.mixer = MixerKind::Vdn,
            Algorithm::Iql => c.qmix.mixer = MixerKind::Independent,
        }
        c
    }

    fn mixer(self) -> Option<MixerKind> {
        match self {
            Algorithm::Qmix | Algorithm::QmixOriginal => Some(MixerKind::Qmix),
            Algorithm::Vdn => Some(MixerKind::Vdn),
            Algorithm::Iql => Some(MixerKind::Independent),
            Algorithm::Ppo => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

/// Trains one seed of `algo`; `config` is used as given.
pub fn train_one(
    config: &RunConfig,
    algo: Algorithm,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let c = algo.prepare(config);
    c.validate()?;
    let options = TrainOptions {
        seed,
        out_dir: out_dir.map(Path::to_path_buf),
    };
    match algo {
        Algorithm::Qmix | Algorithm::QmixOriginal => {
            qmix::train(&c.scenario, &c.env, &c.qmix, &options)
        }
        Algorithm::Vdn => train_baseline(
            Baseline::Vdn,
            &c.scenario,
            &c.env,
            &c.qmix,
            &c.ppo,
            &options,
        ),
        Algorithm::Iql => train_baseline(
            Baseline::Iql,
            &c.scenario,
            &c.env,
            &c.qmix,
            &c.ppo,
            &options,
        ),
        Algorithm::Ppo => train_baseline(
            Baseline::Ppo,
            &c.scenario,
            &c.env,
            &c.qmix,
            &c.ppo,
            &options,
        ),
    }
}

/// Artifacts of one training seed, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: PathBuf,
    pub eval_log: PathBuf,
    pub best_reward: PathBuf,
    pub best_safety: PathBuf,
    pub last: PathBuf,
    pub episodes: usize,
    pub final_reward: f64,
    pub final_collisions: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub algorithm: Algorithm,
    pub config_hash: String,
    pub config: PathBuf,
    pub seeds: Vec<u64>,
    pub created_unix: u64,
    pub finished_unix: u64,
    pub runs: Vec<SeedRun>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every referenced file, resolved against the run directory.
    pub fn files(&self, dir: &Path) -> Vec<PathBuf> {
        let mut v = vec![dir.join(&self.config)];
        for r in &self.runs {
            for p in [
                &r.metrics,
                &r.eval_log,
                &r.best_reward,
                &r.best_safety,
                &r.last,
            ] {
                v.push(dir.join(p));
            }
        }
        v
    }
}

/// Trains `algo` once per seed into `out/seed_<s>/` and writes
/// `out/manifest.json` once every seed has finished. A failed run leaves no
/// manifest behind.
pub fn train_run(
    config: &RunConfig,
    algo: Algorithm,
    seeds: &[u64],
    out: &Path,
) -> Result<RunManifest> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let prepared = algo.prepare(config);
    prepared.validate()?;
    let created = now();
    fs::create_dir_all(out)?;
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    fs::write(out.join("config.toml"), prepared.to_toml()?)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let rel = PathBuf::from(format!("seed_{seed}"));
        log::info!("training {algo} seed {seed}");
        let outcome = train_one(config, algo, seed, Some(&out.join(&rel)))?;
        let ckpt = |name: &str| rel.join("checkpoints").join(format!("{name}.ckpt"));
        runs.push(SeedRun {
            seed,
            metrics: rel.join("metrics.csv"),
            eval_log: rel.join("eval.csv"),
            best_reward: ckpt("best_reward"),
            best_safety: ckpt("best_safety"),
            last: ckpt("final"),
            episodes: outcome.records.len(),
            final_reward: outcome.tail_mean(0.1, |r| r.reward),
            final_collisions: outcome.tail_mean(0.1, |r| r.collisions as f64),
        });
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        algorithm: algo,
        config_hash: prepared.hash()?,
        config: PathBuf::from("config.toml"),
        seeds: seeds.to_vec(),
        created_unix: created,
        finished_unix: now(),
        runs,
    };
    if let Some(missing) = manifest.files(out).into_iter().find(|p| !p.is_file()) {
        return Err(Error::contract(format!(
            "run artifact {} is missing",
            missing.display()
        )));
    }
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, text)?;
    fs::rename(&tmp, &manifest_path)?;
    Ok(manifest)
}

/// A trained policy restored from a checkpoint.
pub enum LoadedPolicy {
    Value { params: ParamStore, dims: Dims },
    Ppo(PolicyValueNet),
}

impl LoadedPolicy {
    pub fn policy(&self) -> Box<dyn Policy + '_> {
        match self {
            LoadedPolicy::Value { params, dims } => Box::new(GreedyPolicy::new(params, *dims)),
            LoadedPolicy::Ppo(net) => Box::new(PpoPolicy::greedy(net)),
        }
    }
}

/// Loads a checkpoint written by `algo` for the scenario in `config`;
/// arrays must match the expected layout exactly.
pub fn load_policy(config: &RunConfig, algo: Algorithm, path: &Path) -> Result<LoadedPolicy> {
    let c = algo.prepare(config);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match algo.mixer() {
        Some(mixer) => {
            let dims = dims_for(&c.scenario, &c.qmix);
            let expected = init_params(&dims, mixer, c.qmix.init, &mut rng)?;
            let params = checkpoint::load_matching(path, &expected)?;
            Ok(LoadedPolicy::Value { params, dims })
        }
        None => {
            let n = c.scenario.agents();
            let expected = PolicyValueNet::init(n, &c.ppo, &mut rng)?;
            let params = checkpoint::load_matching(path, &expected.params)?;
            Ok(LoadedPolicy::Ppo(PolicyValueNet::from_params(params, n)?))
        }
    }
}

/// Per-episode records and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub reward: f64,
    pub avg_speed: f64,
    pub avg_speed_cav: f64,
    pub avg_fuel_rate: f64,
    pub avg_fuel_rate_cav: f64,
    pub total_fuel_ml: f64,
    pub collisions: f64,
}

impl EvalSummary {
    /// Means over the episodes; undefined averages (no vehicle ever on the
    /// road) are skipped.
    pub fn of(records: &[MetricsRecord]) -> Self {
        let mean = |f: &dyn Fn(&MetricsRecord) -> f64| {
            let v: Vec<f64> = records.iter().map(f).filter(|x| x.is_finite()).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        EvalSummary {
            episodes: records.len(),
            reward: mean(&|r| r.reward.unwrap_or(f64::NAN)),
            avg_speed: mean(&|r| r.avg_speed),
            avg_speed_cav: mean(&|r| r.avg_speed_cav),
            avg_fuel_rate: mean(&|r| r.avg_fuel_rate),
            avg_fuel_rate_cav: mean(&|r| r.avg_fuel_rate_cav),
            total_fuel_ml: mean(&|r| r.total_fuel_ml),
            collisions: mean(&|r| r.collisions as f64),
        }
    }
}

pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    pub steps: Vec<Vec<StepSummary>>,
    pub summary: EvalSummary,
}

/// Greedy evaluation of `policy` on `episodes` episodes whose seeds derive
/// from `seed`. With `out`, writes `episodes.csv`, `steps.csv`,
/// `summary.json` and one trajectory dump per episode under
/// `trajectories/`.
pub fn evaluate_policy(
    config: &RunConfig,
    policy: &mut dyn Policy,
    episodes: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config(
            "at least one evaluation episode is required".into(),
        ));
    }
    config.scenario.validate()?;
    let mut env = IntersectionEnv::new(config.scenario.clone(), config.env.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("trajectories"))?;
    }
    let mut records = Vec::with_capacity(episodes);
    let mut steps = Vec::with_capacity(episodes);
    for (i, s) in eval_seeds(seed, episodes).into_iter().enumerate() {
        let r = rollout(
            &mut env,
            policy,
            s,
            i,
            Record {
                episode: false,
                trajectory: out.is_some(),
            },
        )?;
        if let Some(dir) = out {
            let path = dir.join("trajectories").join(format!("episode_{i}.csv"));
            write_file(&path, |w| write_trajectory(w, &r.trajectory))?;
            write_file(&collisions_path(&path), |w| {
                write_collisions(w, &r.collisions)
            })?;
        }
        records.push(r.metrics);
        steps.push(r.step_summaries);
    }
    let summary = EvalSummary::of(&records);
    if let Some(dir) = out {
        write_file(&dir.join("episodes.csv"), |w| {
            write_episode_metrics(w, &records)
        })?;
        let per: Vec<(usize, &[StepSummary])> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.as_slice()))
            .collect();
        write_file(&dir.join("steps.csv"), |w| write_step_metrics(w, &per))?;
        let text =
            serde_json::to_string_pretty(&summary).map_err(|e| Error::contract(e.to_string()))?;
        fs::write(dir.join("summary.json"), text)?;
    }
    Ok(EvalReport {
        records,
        steps,
        summary,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Vehicle table of one recorded step.
pub fn replay_step(rows: &[TrajectoryRow], t: u64) -> Result<Vec<&TrajectoryRow>> {
    let last = rows
        .last()
        .map(|r| r.t)
        .ok_or_else(|| Error::contract("empty trajectory"))?;
    if t > last {
        return Err(Error::contract(format!(
            "time {t} is past the end of the episode (last step {last})"
        )));
    }
    Ok(rows.iter().filter(|r| r.t == t).collect())
}

/// Steps present in a dump, with their vehicle counts.
pub fn replay_counts(rows: &[TrajectoryRow]) -> Vec<(u64, usize)> {
    let mut out: Vec<(u64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((t, n)) if *t == r.t => *n += 1,
            _ => out.push((r.t, 1)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::VehicleKind;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("qmix2".parse::<Algorithm>().is_err());
    }

    #[test]
    fn original_mode_switches() {
        let c = Algorithm::QmixOriginal.prepare(&RunConfig::desk());
        assert_eq!(c.qmix.lambda, 0.0);
        assert!(!c.env.reward.clip);
        assert_eq!(c.qmix.total_steps, 200_000);
        let v = Algorithm::Vdn.prepare(&RunConfig::desk());
        assert_eq!(v.qmix.mixer, MixerKind::Vdn);
        assert!(v.env.reward.clip);
    }

    fn row(t: u64) -> TrajectoryRow {
        TrajectoryRow {
            t,
            vehicle_id: 0,
            kind: VehicleKind::Cav,
            route: 0,
            s: 0.0,
            v: 1.0,
            a: 0.0,
            fuel_rate: 0.1,
        }
    }

    #[test]
    fn replay_seeks() {
        let rows = vec![row(0), row(0), row(1), row(3)];
        assert_eq!(replay_step(&rows, 0).unwrap().len(), 2);
        assert_eq!(replay_step(&rows, 2).unwrap().len(), 0);
        assert!(replay_step(&rows, 4).is_err());
        assert_eq!(replay_counts(&rows), vec![(0, 2), (1, 1), (3, 1)]);
    }
}
