use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crossing_core::config::RunConfig;
use crossing_core::metrics::{
    collisions_path, compute_metrics, load_collisions, load_trajectory, EPISODE_HEADER,
};
use crossing_core::run::{self, Algorithm, EvalSummary};

#[derive(Parser)]
#[command(
    name = "crossing",
    version,
    about = "Train and evaluate cooperative intersection controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm over one or more seeds.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Step through a trajectory dump.
    Replay(ReplayArgs),
    /// Recompute episode metrics from a trajectory dump.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Qmix,
    QmixOriginal,
    Vdn,
    Iql,
    Ppo,
}

impl From<Algo> for Algorithm {
    fn from(a: Algo) -> Self {
        match a {
            Algo::Qmix => Algorithm::Qmix,
            Algo::QmixOriginal => Algorithm::QmixOriginal,
            Algo::Vdn => Algorithm::Vdn,
            Algo::Iql => Algorithm::Iql,
            Algo::Ppo => Algorithm::Ppo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Four roads, eight agents.
    Full,
    /// Two roads, four agents, 200k steps.
    Desk,
}

#[derive(Args)]
struct ScenarioArgs {
    /// TOML config; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Inflow per lane in vehicles per hour.
    #[arg(long)]
    density: Option<f64>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.preset {
                Preset::Full => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            },
        };
        if let Some(d) = self.density {
            if !(d > 0.0 && d.is_finite()) {
                bail!("--density must be positive, got {d}");
            }
            c.scenario.flow.density = d;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "qmix")]
    algo: Algo,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, env = "CROSSING_OUT")]
    out: PathBuf,
    /// Environment-step budget per seed.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "qmix")]
    algo: Algo,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the CSVs and trajectory dumps.
    #[arg(long, env = "CROSSING_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    trajectory: PathBuf,
    /// Show only this step.
    #[arg(long)]
    at: Option<u64>,
}

#[derive(Args)]
struct MetricsArgs {
    trajectory: PathBuf,
    /// Step length in seconds.
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut config = args.scenario.resolve()?;
    if let Some(steps) = args.steps {
        if steps == 0 {
            bail!("--steps must be positive");
        }
        config.set_steps(steps);
    }
    let algo = Algorithm::from(args.algo);
    algo.prepare(&config).validate()?;
    let manifest = run::train_run(&config, algo, &args.seeds, &args.out)?;
    println!("seed,episodes,final_reward,final_collisions,best_reward_checkpoint");
    for r in &manifest.runs {
        println!(
            "{},{},{:.3},{:.3},{}",
            r.seed,
            r.episodes,
            r.final_reward,
            r.final_collisions,
            args.out.join(&r.best_reward).display()
        );
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let config = args.scenario.resolve()?;
    let algo = Algorithm::from(args.algo);
    let loaded = run::load_policy(&config, algo, &args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut policy = loaded.policy();
    let env_config = algo.prepare(&config);
    let report = run::evaluate_policy(
        &env_config,
        policy.as_mut(),
        args.episodes,
        args.seed,
        args.out.as_deref(),
    )?;
    print_summary(&report.summary);
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    println!("episodes,reward,avg_speed,avg_speed_cav,avg_fuel_rate,avg_fuel_rate_cav,total_fuel_ml,collisions");
    println!(
        "{},{:.3},{:.3},{:.3},{:.4},{:.4},{:.2},{:.3}",
        s.episodes,
        s.reward,
        s.avg_speed,
        s.avg_speed_cav,
        s.avg_fuel_rate,
        s.avg_fuel_rate_cav,
        s.total_fuel_ml,
        s.collisions
    );
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let rows = load_trajectory(&args.trajectory)?;
    let steps: Vec<u64> = match args.at {
        Some(t) => {
            run::replay_step(&rows, t)?;
            vec![t]
        }
        None => run::replay_counts(&rows)
            .into_iter()
            .map(|(t, _)| t)
            .collect(),
    };
    for t in steps {
        let table = run::replay_step(&rows, t)?;
        println!("t={t} vehicles={}", table.len());
        for r in table {
            println!(
                "  {:>4} {} route {:>2} s {:>7.2} v {:>6.2} a {:>6.2} fuel {:.4}",
                r.vehicle_id,
                r.kind.as_str(),
                r.route,
                r.s,
                r.v,
                r.a,
                r.fuel_rate
            );
        }
    }
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let rows = load_trajectory(&args.trajectory)?;
    let cpath = collisions_path(&args.trajectory);
    let collisions = if cpath.exists() {
        load_collisions(&cpath)?
    } else {
        Vec::new()
    };
    let m = compute_metrics(&rows, &collisions, args.dt, 0)?;
    println!("{EPISODE_HEADER}");
    println!("{}", m.csv_row());
    Ok(())
}

fn exists_or_bail(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => exists_or_bail(&a.checkpoint).and_then(|_| eval(a)),
        Command::Replay(a) => replay(a),
        Command::Metrics(a) => metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
