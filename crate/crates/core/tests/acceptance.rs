//! End-to-end acceptance checks; prints one line per criterion and exits
//! non-zero if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{gradient_check, learner, peng_direct, short_episodes};
use crossing_core::config::RunConfig;
use crossing_core::env::{rollout, EnvConfig, Episode, IntersectionEnv, RandomPolicy, Record};
use crossing_core::metrics::{
    read_train_log, read_trajectory, write_collisions, write_train_log, write_trajectory,
    CollisionRow, TrajectoryRow,
};
use crossing_core::numcore::{checkpoint, InitScheme, Matrix, ParamStore};
use crossing_core::qmix::{nets, peng_targets, Dims, MixerKind, NetShape};
use crossing_core::run::{self, Algorithm, RunManifest};
use crossing_core::sim::state::step_kinematics;
use crossing_core::sim::{IdmParams, ScenarioConfig};
use crossing_core::training::eval_seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Check {
    ensure(
        elapsed <= limit,
        format!(
            "{detail}; {:.1}s (limit {:.0}s)",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn random_mixer(n_agents: usize, obs_dim: usize, embed: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let dims = Dims {
        n_agents,
        obs_dim,
        n_actions: 3,
        shape: NetShape { hidden: 4, embed },
    };
    let scheme = if rng.random_bool(0.5) {
        InitScheme::XavierOrthogonal
    } else {
        InitScheme::Uniform
    };
    let mut p = nets::init_params(&dims, MixerKind::Qmix, scheme, rng).unwrap();
    let scale = rng.random_range(0.5..3.0);
    for (_, m) in p.iter_mut() {
        for v in m.data_mut() {
            *v = *v * scale + rng.random_range(-0.2..0.2);
        }
    }
    p
}

fn monotonicity() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = 0;
    for _ in 0..1000 {
        let p = random_mixer(8, 10, 32, &mut rng);
        let state = uniform(1, 80, 1.0, &mut rng);
        let q = uniform(1, 8, 10.0, &mut rng);
        let base = nets::mix_plain(MixerKind::Qmix, &p, &q, &state)
            .unwrap()
            .get(0, 0);
        for a in 0..8 {
            let mut up = q.clone();
            up.set(0, a, q.get(0, a) + 0.5);
            if nets::mix_plain(MixerKind::Qmix, &p, &up, &state)
                .unwrap()
                .get(0, 0)
                < base
            {
                violations += 1;
            }
        }
    }
    ensure(
        violations == 0,
        format!("{violations} violations in 1000 samples x 8 agents"),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(10), m))
}

fn igm() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut violations = 0;
    for i in 0..200 {
        let n = 2 + i % 2;
        let p = random_mixer(n, 3, 4, &mut rng);
        let state = uniform(1, 3 * n, 1.0, &mut rng);
        let table = uniform(n, 3, 5.0, &mut rng);
        let q_of = |joint: &[usize]| {
            let row: Vec<f64> = joint
                .iter()
                .enumerate()
                .map(|(a, &u)| table.get(a, u))
                .collect();
            nets::mix_plain(MixerKind::Qmix, &p, &Matrix::row_vector(&row), &state)
                .unwrap()
                .get(0, 0)
        };
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for k in 0..3usize.pow(n as u32) {
            let joint: Vec<usize> = (0..n).map(|a| k / 3usize.pow(a as u32) % 3).collect();
            let v = q_of(&joint);
            if v > best.0 {
                best = (v, joint);
            }
        }
        let greedy: Vec<usize> = (0..n)
            .map(|a| nets::masked_argmax(table.row(a), &[true; 3]).unwrap())
            .collect();
        // ties between joint actions are measure-zero; compare values as well
        if greedy != best.1 && q_of(&greedy) < best.0 {
            violations += 1;
        }
    }
    ensure(
        violations == 0,
        format!("{violations} violations in 200 instances"),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(30), m))
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut coords = 0;
    for seed in 1..=5u64 {
        let eps = short_episodes(seed, 2, 5);
        let refs: Vec<&Episode> = eps.iter().collect();
        let l = learner(
            MixerKind::Qmix,
            0.6,
            NetShape {
                hidden: 12,
                embed: 6,
            },
            seed,
        );
        let r = gradient_check(&l, &refs, 1, 0);
        coords += r.checked;
        if r.worst >= worst {
            worst = r.worst;
            detail = r.detail;
        }
    }
    ensure(
        worst < 1e-4,
        format!("5 minibatches, {coords} coordinates, max rel err {worst:.2e} at {detail}"),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(120), m))
}

fn q_lambda() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    let mut inexact = 0;
    for _ in 0..100 {
        let len = rng.random_range(1..=10);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..10.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let gamma = rng.random_range(0.8..=1.0);
        let lambda = rng.random_range(0.0..=1.0);
        let rec = peng_targets(&rewards, &values, true, gamma, lambda).unwrap();
        for (a, b) in rec
            .iter()
            .zip(peng_direct(&rewards, &values, gamma, lambda))
        {
            worst = worst.max((a - b).abs());
        }
        let one = peng_targets(&rewards, &values, true, gamma, 0.0).unwrap();
        for t in 0..len {
            let td = if t + 1 == len {
                rewards[t]
            } else {
                rewards[t] + gamma * values[t]
            };
            inexact += usize::from(one[t] != td);
        }
        let full = peng_targets(&rewards, &values, true, gamma, 1.0).unwrap();
        let mut ret = 0.0;
        for t in (0..len).rev() {
            ret = rewards[t] + gamma * ret;
            inexact += usize::from(full[t] != ret);
        }
    }
    ensure(
        worst < 1e-9 && inexact == 0,
        format!(
            "100 episodes, max |recursion - direct| {worst:.1e}, {inexact} inexact limit targets"
        ),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(10), m))
}

fn idm_and_kinematics() -> Check {
    let start = Instant::now();
    let p = IdmParams::default();
    let free = p.accel(p.desired_speed, 0.0, f64::INFINITY).unwrap();
    let standing = p.accel(0.0, 0.0, 100.0).unwrap();
    let (s, v) = step_kinematics(0.0, 10.0, 1.0, 0.1, 15.0);
    ensure(
        p.max_accel == 1.5
            && free.abs() < 1e-9
            && (standing - 1.49625).abs() < 1e-9
            && s == 1.005
            && v == 10.1,
        format!("free road {free:e}, standing start {standing:.9}, step ({s}, {v})"),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(1), m))
}

fn rewards() -> Check {
    let start = Instant::now();
    let mut steps = 0;
    let mut outside = 0;
    let mut seed = 0;
    while steps < 10_000 {
        let sc = if seed % 2 == 0 {
            ScenarioConfig::default()
        } else {
            ScenarioConfig::two_road()
        };
        let mut env = IntersectionEnv::new(sc, EnvConfig::default()).unwrap();
        let mut policy = RandomPolicy::new(seed);
        let ep = rollout(
            &mut env,
            &mut policy,
            1000 + seed,
            0,
            Record {
                episode: true,
                trajectory: false,
            },
        )
        .unwrap()
        .episode
        .unwrap();
        steps += ep.len();
        outside += ep
            .rewards
            .iter()
            .filter(|r| !(-5.0..=10.0).contains(*r))
            .count();
        seed += 1;
    }
    let cruise = common::cruise_step().reward.clipped;
    let stopped = common::stopped_step().reward.clipped;
    let crash = common::collision_step().reward;
    ensure(
        outside == 0
            && cruise == 8.0
            && stopped == -4.0
            && crash.clipped == -5.0
            && crash.raw == -14.0,
        format!(
            "{steps} steps, {outside} out of range; constructed {cruise}, {stopped}, {} (raw {})",
            crash.clipped, crash.raw
        ),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(60), m))
}

fn round_trips() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let config = RunConfig::default();
    let dims = Dims {
        n_agents: 8,
        obs_dim: 10,
        n_actions: 7,
        shape: config.qmix.net,
    };
    let params = nets::init_params(
        &dims,
        MixerKind::Qmix,
        InitScheme::XavierOrthogonal,
        &mut rng,
    )
    .unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    checkpoint::save(&params, &a).unwrap();
    checkpoint::save(&checkpoint::load(&a).unwrap(), &b).unwrap();
    let ckpt_same = fs::read(&a).unwrap() == fs::read(&b).unwrap();
    let loads = run::load_policy(&config, Algorithm::Qmix, &a).is_ok();

    // trajectory and log files survive write -> read -> write
    let mut env = IntersectionEnv::new(ScenarioConfig::default(), EnvConfig::default()).unwrap();
    let mut policy = RandomPolicy::new(3);
    let r = rollout(
        &mut env,
        &mut policy,
        3,
        0,
        Record {
            episode: false,
            trajectory: true,
        },
    )
    .unwrap();
    let mut traj = Vec::new();
    write_trajectory(&mut traj, &r.trajectory).unwrap();
    let back: Vec<TrajectoryRow> = read_trajectory(&traj[..], Path::new("t.csv")).unwrap();
    let mut again = Vec::new();
    write_trajectory(&mut again, &back).unwrap();
    let mut coll = Vec::new();
    write_collisions(&mut coll, &[CollisionRow { t: 4, a: 1, b: 2 }]).unwrap();

    let train_dir = dir.path().join("run");
    let mut c = RunConfig::desk();
    c.set_steps(400);
    let m = run::train_run(&c, Algorithm::Qmix, &[1], &train_dir).unwrap();
    let log_path = train_dir.join(&m.runs[0].metrics);
    let log = fs::read(&log_path).unwrap();
    let records = read_train_log(&log[..], &log_path).unwrap();
    let mut log_again = Vec::new();
    write_train_log(&mut log_again, &records).unwrap();
    let manifest = RunManifest::load(&train_dir.join("manifest.json")).unwrap();

    let header = |bytes: &[u8]| {
        String::from_utf8_lossy(bytes)
            .lines()
            .next()
            .unwrap_or("")
            .to_string()
    };
    let eval = fs::read(train_dir.join(&m.runs[0].eval_log)).unwrap();
    let golden = header(&traj) == "t,vehicle_id,kind,route,s,v,a,fuel_rate"
        && header(&coll) == "t,vehicle_a,vehicle_b"
        && header(&log) == "episode,env_steps,reward,collisions,epsilon,lr,loss"
        && header(&eval) == "episode,env_steps,reward,collisions,avg_speed";
    ensure(
        ckpt_same && loads && traj == again && log == log_again && manifest == m && golden,
        format!(
            "checkpoint {ckpt_same}, policy load {loads}, trajectory {}, train log {}, manifest {}, schemas {golden}",
            traj == again,
            log == log_again,
            manifest == m
        ),
    )
    .and_then(|m| within(start.elapsed(), Duration::from_secs(5), m))
}

/// Artifacts of the desk-scale runs shared by the learning criteria.
struct Desk {
    config: RunConfig,
    dir: tempfile::TempDir,
    qmix: RunManifest,
    qmix_again: RunManifest,
    original: RunManifest,
    elapsed: Duration,
}

fn desk_runs() -> Desk {
    let start = Instant::now();
    let config = RunConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let train = |algo: Algorithm, name: &str| {
        let t = Instant::now();
        let m = run::train_run(&config, algo, &[1], &dir.path().join(name)).unwrap();
        eprintln!("  desk run {name}: {:.0}s", t.elapsed().as_secs_f64());
        m
    };
    let qmix = train(Algorithm::Qmix, "qmix");
    let qmix_again = train(Algorithm::Qmix, "qmix_again");
    let original = train(Algorithm::QmixOriginal, "original");
    Desk {
        config,
        elapsed: start.elapsed(),
        dir,
        qmix,
        qmix_again,
        original,
    }
}

fn determinism(d: &Desk) -> Check {
    let a = d.dir.path().join("qmix");
    let b = d.dir.path().join("qmix_again");
    let same = |rel: &Path| fs::read(a.join(rel)).unwrap() == fs::read(b.join(rel)).unwrap();
    let r = &d.qmix.runs[0];
    let metrics = same(&r.metrics);
    let evals = same(&r.eval_log);
    let ckpt = same(&r.last);
    let stats = d.qmix.runs == d.qmix_again.runs;
    ensure(
        metrics && evals && ckpt && stats,
        format!(
            "metrics.csv identical {metrics}, eval.csv identical {evals}, final checkpoint identical {ckpt}, summaries identical {stats} ({} episodes)",
            r.episodes
        ),
    )
}

fn random_baseline(config: &RunConfig) -> f64 {
    let mut env = IntersectionEnv::new(config.scenario.clone(), config.env.clone()).unwrap();
    let mut policy = RandomPolicy::new(7);
    let seeds = eval_seeds(7, 200);
    let total: f64 = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            rollout(&mut env, &mut policy, s, i, Record::default())
                .unwrap()
                .reward
        })
        .sum();
    total / seeds.len() as f64
}

fn desk_learning(d: &Desk) -> Check {
    let random = random_baseline(&d.config);
    let q = &d.qmix.runs[0];
    let o = &d.original.runs[0];
    ensure(
        q.final_reward >= random + 3.0 && q.final_reward > o.final_reward && q.final_collisions <= 0.5,
        format!(
            "final-10% reward {:.2} vs random {random:.2} and original {:.2}; collisions {:.3}; {:.0} min",
            q.final_reward,
            o.final_reward,
            q.final_collisions,
            d.elapsed.as_secs_f64() / 60.0
        ),
    )
    .and_then(|m| within(d.elapsed, Duration::from_secs(2 * 3600), m))
}

fn metric_direction(d: &Desk) -> Check {
    let summary = |algo: Algorithm, m: &RunManifest, name: &str| {
        let path = d.dir.path().join(name).join(&m.runs[0].best_reward);
        let loaded = run::load_policy(&d.config, algo, &path).unwrap();
        let mut policy = loaded.policy();
        run::evaluate_policy(&algo.prepare(&d.config), policy.as_mut(), 20, 2024, None)
            .unwrap()
            .summary
    };
    let q = summary(Algorithm::Qmix, &d.qmix, "qmix");
    let o = summary(Algorithm::QmixOriginal, &d.original, "original");
    ensure(
        q.avg_speed >= o.avg_speed && q.collisions <= o.collisions,
        format!(
            "best checkpoints over 20 episodes: speed {:.2} vs {:.2} m/s, collisions {:.2} vs {:.2}",
            q.avg_speed, o.avg_speed, q.collisions, o.collisions
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Check| {
        let (tag, msg) = match r {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {msg}");
    };
    report(1, "monotonic mixing", monotonicity());
    report(2, "joint greedy equals per-agent greedy", igm());
    report(3, "gradient oracle", gradient_oracle());
    report(4, "Q(lambda) targets", q_lambda());
    report(5, "IDM and kinematics values", idm_and_kinematics());
    report(6, "reward range and examples", rewards());
    let desk = desk_runs();
    report(7, "training determinism", determinism(&desk));
    report(8, "desk-scale learning", desk_learning(&desk));
    report(9, "speed and safety ordering", metric_direction(&desk));
    report(10, "checkpoint and CSV round trips", round_trips());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
