//! Episode metrics, the trajectory dump and the training log.
//!
//! Averages run over time steps with at least one vehicle on the road; for
//! each such step the mean over the vehicles present is taken first. The
//! dump holds the initial state (`t = 0`) and the state after every step,
//! so recomputing the metrics from it reproduces the in-run values exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::{SimState, Vehicle, VehicleKind};

pub const TRAJECTORY_HEADER: &str = "t,vehicle_id,kind,route,s,v,a,fuel_rate";
pub const COLLISIONS_HEADER: &str = "t,vehicle_a,vehicle_b";
pub const EPISODE_HEADER: &str =
    "episode,reward,avg_speed,avg_speed_cav,avg_fuel_rate,avg_fuel_rate_cav,total_fuel_ml,collisions";
pub const STEP_HEADER: &str = "episode,t,vehicles,cavs,avg_speed,avg_fuel_rate";
pub const TRAIN_HEADER: &str = "episode,env_steps,reward,collisions,epsilon,lr,loss";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub episode: usize,
    /// Episode reward, when known.
    pub reward: Option<f64>,
    /// All vehicles (m/s).
    pub avg_speed: f64,
    /// Agent-controlled vehicles only (m/s).
    pub avg_speed_cav: f64,
    /// ml/s.
    pub avg_fuel_rate: f64,
    pub avg_fuel_rate_cav: f64,
    /// Fuel of the recorded post-step states, `Σ rate·Δ` (ml).
    pub total_fuel_ml: f64,
    pub collisions: usize,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            opt(self.reward),
            self.avg_speed,
            self.avg_speed_cav,
            self.avg_fuel_rate,
            self.avg_fuel_rate_cav,
            self.total_fuel_ml,
            self.collisions
        )
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One trajectory row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: u64,
    pub vehicle_id: u64,
    pub kind: VehicleKind,
    pub route: usize,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub fuel_rate: f64,
}

impl TrajectoryRow {
    pub fn from_vehicle(t: u64, v: &Vehicle) -> Self {
        TrajectoryRow {
            t,
            vehicle_id: v.id,
            kind: v.kind,
            route: v.route,
            s: v.s,
            v: v.v,
            a: v.accel,
            fuel_rate: v.fuel_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CollisionRow {
    pub t: u64,
    pub a: u64,
    pub b: u64,
}

/// Per-step summary, the data behind speed and fuel time series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSummary {
    pub t: u64,
    pub vehicles: usize,
    pub cavs: usize,
    /// `NaN` when the road is empty.
    pub avg_speed: f64,
    pub avg_fuel_rate: f64,
}

/// Accumulates the time averages of one episode.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    dt: f64,
    speed: (f64, usize),
    speed_cav: (f64, usize),
    fuel: f64,
    fuel_cav: f64,
    total_fuel: f64,
    collisions: usize,
    pub steps: Vec<StepSummary>,
}

impl MetricsAccumulator {
    pub fn new(dt: f64) -> Self {
        MetricsAccumulator {
            dt,
            speed: (0.0, 0),
            speed_cav: (0.0, 0),
            fuel: 0.0,
            fuel_cav: 0.0,
            total_fuel: 0.0,
            collisions: 0,
            steps: Vec::new(),
        }
    }

    /// Adds one recorded state given as `(kind, speed, fuel_rate)` rows in
    /// dump order.
    pub fn observe(&mut self, t: u64, rows: impl IntoIterator<Item = (VehicleKind, f64, f64)>) {
        let (mut n, mut sv, mut sf) = (0usize, 0.0, 0.0);
        let (mut nc, mut svc, mut sfc) = (0usize, 0.0, 0.0);
        for (kind, v, f) in rows {
            n += 1;
            sv += v;
            sf += f;
            if kind == VehicleKind::Cav {
                nc += 1;
                svc += v;
                sfc += f;
            }
            if t > 0 {
                self.total_fuel += f * self.dt;
            }
        }
        let mut summary = StepSummary {
            t,
            vehicles: n,
            cavs: nc,
            avg_speed: f64::NAN,
            avg_fuel_rate: f64::NAN,
        };
        if n > 0 {
            summary.avg_speed = sv / n as f64;
            summary.avg_fuel_rate = sf / n as f64;
            self.speed.0 += summary.avg_speed;
            self.speed.1 += 1;
            self.fuel += summary.avg_fuel_rate;
        }
        if nc > 0 {
            self.speed_cav.0 += svc / nc as f64;
            self.speed_cav.1 += 1;
            self.fuel_cav += sfc / nc as f64;
        }
        self.steps.push(summary);
    }

    pub fn observe_state(&mut self, state: &SimState) {
        self.observe(
            state.step,
            state.vehicles.iter().map(|v| (v.kind, v.v, v.fuel_rate)),
        );
    }

    pub fn add_collisions(&mut self, count: usize) {
        self.collisions += count;
    }

    pub fn finish(&self, episode: usize, reward: Option<f64>) -> MetricsRecord {
        let avg = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { f64::NAN };
        MetricsRecord {
            episode,
            reward,
            avg_speed: avg(self.speed.0, self.speed.1),
            avg_speed_cav: avg(self.speed_cav.0, self.speed_cav.1),
            avg_fuel_rate: avg(self.fuel, self.speed.1),
            avg_fuel_rate_cav: avg(self.fuel_cav, self.speed_cav.1),
            total_fuel_ml: self.total_fuel,
            collisions: self.collisions,
        }
    }
}

/// Metrics from a trajectory dump and its collision log.
pub fn compute_metrics(
    rows: &[TrajectoryRow],
    collisions: &[CollisionRow],
    dt: f64,
    episode: usize,
) -> Result<MetricsRecord> {
    if rows.is_empty() {
        return Err(Error::contract("empty trajectory"));
    }
    let mut acc = MetricsAccumulator::new(dt);
    let mut start = 0;
    while start < rows.len() {
        let t = rows[start].t;
        let end = start + rows[start..].iter().take_while(|r| r.t == t).count();
        acc.observe(
            t,
            rows[start..end].iter().map(|r| (r.kind, r.v, r.fuel_rate)),
        );
        start = end;
    }
    acc.add_collisions(collisions.len());
    Ok(acc.finish(episode, None))
}

pub fn write_trajectory<W: Write>(mut w: W, rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t,
            r.vehicle_id,
            r.kind.as_str(),
            r.route,
            r.s,
            r.v,
            r.a,
            r.fuel_rate
        )?;
    }
    Ok(())
}

pub fn write_collisions<W: Write>(mut w: W, rows: &[CollisionRow]) -> Result<()> {
    writeln!(w, "{COLLISIONS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.t, r.a, r.b)?;
    }
    Ok(())
}

pub fn write_episode_metrics<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{EPISODE_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn write_step_metrics<W: Write>(
    mut w: W,
    per_episode: &[(usize, &[StepSummary])],
) -> Result<()> {
    writeln!(w, "{STEP_HEADER}")?;
    for (episode, steps) in per_episode {
        for s in steps.iter() {
            writeln!(
                w,
                "{episode},{},{},{},{},{}",
                s.t, s.vehicles, s.cavs, s.avg_speed, s.avg_fuel_rate
            )?;
        }
    }
    Ok(())
}

/// Reads CSV rows after checking the header; `parse` gets the fields of
/// each data row.
fn read_rows<R: BufRead, T>(
    input: R,
    path: &Path,
    header: &str,
    mut parse: impl FnMut(&[&str]) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim_end() != header {
                return Err(err(lineno, format!("expected header `{header}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let expected = header.split(',').count();
        if fields.len() != expected {
            return Err(err(
                lineno,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        out.push(parse(&fields).map_err(|m| err(lineno, m))?);
    }
    if out.is_empty() && header == TRAJECTORY_HEADER {
        return Err(err(1, "no data rows".into()));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(
    fields: &[&str],
    i: usize,
    name: &str,
) -> std::result::Result<T, String> {
    fields[i]
        .parse()
        .map_err(|_| format!("bad {name} `{}`", fields[i]))
}

pub fn read_trajectory<R: BufRead>(input: R, path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut last_t = 0;
    read_rows(input, path, TRAJECTORY_HEADER, |f| {
        let kind = match f[2] {
            "CAV" => VehicleKind::Cav,
            "HDV" => VehicleKind::Hdv,
            other => return Err(format!("bad kind `{other}`")),
        };
        let row = TrajectoryRow {
            t: field(f, 0, "t")?,
            vehicle_id: field(f, 1, "vehicle_id")?,
            kind,
            route: field(f, 3, "route")?,
            s: field(f, 4, "s")?,
            v: field(f, 5, "v")?,
            a: field(f, 6, "a")?,
            fuel_rate: field(f, 7, "fuel_rate")?,
        };
        if row.t < last_t {
            return Err("time steps must be non-decreasing".into());
        }
        if !(row.v >= 0.0 && row.fuel_rate >= 0.0 && row.s.is_finite()) {
            return Err("invalid vehicle state".into());
        }
        last_t = row.t;
        Ok(row)
    })
}

pub fn read_collisions<R: BufRead>(input: R, path: &Path) -> Result<Vec<CollisionRow>> {
    read_rows(input, path, COLLISIONS_HEADER, |f| {
        Ok(CollisionRow {
            t: field(f, 0, "t")?,
            a: field(f, 1, "vehicle_a")?,
            b: field(f, 2, "vehicle_b")?,
        })
    })
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    read_trajectory(open(path)?, path)
}

pub fn load_collisions(path: &Path) -> Result<Vec<CollisionRow>> {
    read_collisions(open(path)?, path)
}

/// The collision log that sits next to a trajectory dump
/// (`foo.csv` → `foo.collisions.csv`).
pub fn collisions_path(trajectory: &Path) -> PathBuf {
    let stem = trajectory
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("trajectory");
    trajectory.with_file_name(format!("{stem}.collisions.csv"))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub episode: usize,
    pub env_steps: u64,
    pub reward: f64,
    pub collisions: usize,
    pub epsilon: f64,
    pub lr: f64,
    /// Absent while the replay buffer is warming up.
    pub loss: Option<f64>,
}

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{}",
            self.episode,
            self.env_steps,
            self.reward,
            self.collisions,
            self.epsilon,
            self.lr,
            opt(self.loss)
        )
        .expect("string write");
        s
    }
}

pub fn write_train_log<W: Write>(mut w: W, records: &[TrainRecord]) -> Result<()> {
    writeln!(w, "{TRAIN_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn read_train_log<R: BufRead>(input: R, path: &Path) -> Result<Vec<TrainRecord>> {
    read_rows(input, path, TRAIN_HEADER, |f| {
        Ok(TrainRecord {
            episode: field(f, 0, "episode")?,
            env_steps: field(f, 1, "env_steps")?,
            reward: field(f, 2, "reward")?,
            collisions: field(f, 3, "collisions")?,
            epsilon: field(f, 4, "epsilon")?,
            lr: field(f, 5, "lr")?,
            loss: if f[6].is_empty() {
                None
            } else {
                Some(field(f, 6, "loss")?)
            },
        })
    })
}
