//! Closed-loop evaluation protocol: seeded episodes, route completion,
//! success and infraction aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driving_sim::{generate_route, observe, step, Events, EpisodeState, Observation, Route, SimParams, DT, HORIZON};
use crate::factor_space::{parse_tag, EnvConfig};
use crate::policies::{build_window, Driver, PolicyError};
use crate::split_builder::{check_leakage, EpisodeSlot, TestSuite};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("suite fails leakage check: {0}")]
    LeakySuite(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    Collision,
    OutOfLane,
    OffRoad,
    Stability,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 4] =
        [InfractionKind::Collision, InfractionKind::OutOfLane, InfractionKind::OffRoad, InfractionKind::Stability];

    pub fn name(self) -> &'static str {
        match self {
            InfractionKind::Collision => "collision",
            InfractionKind::OutOfLane => "out_of_lane",
            InfractionKind::OffRoad => "off_road",
            InfractionKind::Stability => "stability",
        }
    }

    /// Event that ends an episode when several fire on the same step.
    fn primary(ev: &Events) -> Option<InfractionKind> {
        if ev.collision {
            Some(InfractionKind::Collision)
        } else if ev.off_road {
            Some(InfractionKind::OffRoad)
        } else if ev.out_of_lane {
            Some(InfractionKind::OutOfLane)
        } else if ev.stability {
            Some(InfractionKind::Stability)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfractionFlags {
    pub collision: bool,
    pub out_of_lane: bool,
    pub off_road: bool,
    pub stability: bool,
}

impl InfractionFlags {
    fn from_events(ev: &Events) -> Self {
        InfractionFlags { collision: ev.collision, out_of_lane: ev.out_of_lane, off_road: ev.off_road, stability: ev.stability }
    }

    pub fn get(&self, kind: InfractionKind) -> bool {
        match kind {
            InfractionKind::Collision => self.collision,
            InfractionKind::OutOfLane => self.out_of_lane,
            InfractionKind::OffRoad => self.off_road,
            InfractionKind::Stability => self.stability,
        }
    }

    pub fn any(&self) -> bool {
        InfractionKind::ALL.iter().any(|k| self.get(*k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub tag: String,
    pub episode: usize,
    pub seed: u64,
    pub route_seed: u64,
    /// Steps completed before the terminal event (the full horizon otherwise).
    pub steps_traveled: usize,
    pub horizon: usize,
    pub terminated_early: bool,
    pub termination_event: Option<InfractionKind>,
    pub infractions: InfractionFlags,
    /// Total time spent inside the policy, milliseconds.
    pub wall_time_ms: f64,
    pub predict_calls: usize,
}

impl EpisodeResult {
    pub fn success(&self) -> bool {
        !self.terminated_early
    }

    pub fn completion(&self) -> f64 {
        route_completion(self, self.horizon)
    }
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub u: f64,
    pub d: f64,
    pub psi: f64,
    pub v: f64,
    pub steer: f64,
    pub throttle: f64,
    pub events: Vec<String>,
}

pub struct EpisodeRun {
    pub result: EpisodeResult,
    pub log: Vec<StepRecord>,
}

impl EpisodeRun {
    /// Line-delimited JSON, one record per step.
    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&serde_json::to_string(r).expect("step record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Fraction of the horizon covered; 1.0 when the horizon was completed.
pub fn route_completion(result: &EpisodeResult, horizon: usize) -> f64 {
    if result.terminated_early {
        result.steps_traveled as f64 / horizon as f64
    } else {
        1.0
    }
}

/// Roll out one episode: observe, window, act, step until the horizon or
/// the first terminal event.
pub fn run_episode(
    driver: &dyn Driver,
    config: &EnvConfig,
    route: &Route,
    seed: u64,
    horizon: usize,
    sim: &SimParams,
) -> Result<EpisodeRun, EvalError> {
    if horizon == 0 {
        return Err(EvalError::ZeroHorizon);
    }
    let clip = driver.clip();
    let mut state = EpisodeState::new(seed, sim.expert_v_ref);
    let mut history: Vec<Observation> = Vec::with_capacity(horizon);
    let mut log = Vec::with_capacity(horizon);
    let mut wall = 0.0;
    let mut calls = 0;
    let mut termination = None;
    let mut flags = InfractionFlags::default();
    let mut steps_traveled = horizon;

    for t in 0..horizon {
        history.push(observe(&mut state, route, config, sim));
        let window = build_window(&history, t, clip);
        let start = Instant::now();
        let controls = driver.act(&window, &state, route, sim)?;
        wall += start.elapsed().as_secs_f64() * 1e3;
        calls += 1;
        let ev = step(&mut state, route, controls, DT, sim);
        log.push(StepRecord {
            step: t,
            u: state.u,
            d: state.d,
            psi: state.psi,
            v: state.v,
            steer: controls.steer,
            throttle: controls.throttle,
            events: ev.names().into_iter().map(String::from).collect(),
        });
        if ev.any() {
            termination = InfractionKind::primary(&ev);
            flags = InfractionFlags::from_events(&ev);
            steps_traveled = t;
            break;
        }
    }

    let result = EpisodeResult {
        tag: config.tag(),
        episode: 0,
        seed,
        route_seed: route.seed,
        steps_traveled,
        horizon,
        terminated_early: termination.is_some(),
        termination_event: termination,
        infractions: flags,
        wall_time_ms: wall,
        predict_calls: calls,
    };
    Ok(EpisodeRun { result, log })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub sim: SimParams,
    pub horizon: usize,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    /// Report mean inference time. Off by default because wall-clock values
    /// make tables non-reproducible.
    pub timing: bool,
    /// Write one JSONL log per episode under this directory.
    pub log_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { sim: SimParams::default(), horizon: HORIZON, jobs: 0, timing: false, log_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub tag: String,
    pub k: usize,
    pub n: usize,
    pub success_rate: f64,
    pub completion_mean: f64,
    pub completion_std: f64,
    pub infractions: [usize; 4],
    pub mean_predict_ms: Option<f64>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeResult>,
}

impl EvalRow {
    pub fn from_episodes(policy: &str, tag: &str, k: usize, episodes: Vec<EpisodeResult>, timing: bool) -> Self {
        let n = episodes.len();
        let nf = n.max(1) as f64;
        let success_rate = episodes.iter().filter(|e| e.success()).count() as f64 / nf;
        let comps: Vec<f64> = episodes.iter().map(EpisodeResult::completion).collect();
        let completion_mean = comps.iter().sum::<f64>() / nf;
        let completion_std = if n > 1 {
            (comps.iter().map(|c| (c - completion_mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut infractions = [0usize; 4];
        for e in &episodes {
            for (i, kind) in InfractionKind::ALL.iter().enumerate() {
                if e.infractions.get(*kind) {
                    infractions[i] += 1;
                }
            }
        }
        let mean_predict_ms = timing.then(|| {
            let calls: usize = episodes.iter().map(|e| e.predict_calls).sum();
            episodes.iter().map(|e| e.wall_time_ms).sum::<f64>() / calls.max(1) as f64
        });
        EvalRow {
            policy: policy.to_string(),
            tag: tag.to_string(),
            k,
            n,
            success_rate,
            completion_mean,
            completion_std,
            infractions,
            mean_predict_ms,
            episodes,
        }
    }

    pub fn infraction_count(&self, kind: InfractionKind) -> usize {
        self.infractions[InfractionKind::ALL.iter().position(|k| *k == kind).unwrap()]
    }

    pub fn config(&self) -> Option<EnvConfig> {
        parse_tag(&self.tag).ok()
    }
}

pub const EVAL_HEADER: &str =
    "policy,tag,k,n,success,completion_mean,completion_std,collision,out_of_lane,off_road,stability,mean_predict_ms";

pub const EPISODE_HEADER: &str = "policy,tag,k,episode,seed,route_seed,steps_traveled,completion,success,termination";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn row(&self, policy: &str, tag: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.policy == policy && r.tag == tag)
    }

    pub fn row_by_tag(&self, tag: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(EVAL_HEADER);
        s.push('\n');
        for r in &self.rows {
            let timing = r.mean_predict_ms.map(|t| format!("{t:.4}")).unwrap_or_else(|| "NA".to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{}",
                r.policy,
                r.tag,
                r.k,
                r.n,
                r.success_rate,
                r.completion_mean,
                r.completion_std,
                r.infractions[0],
                r.infractions[1],
                r.infractions[2],
                r.infractions[3],
                timing
            );
        }
        s
    }

    /// Per-episode outcomes, in row order then episode index.
    pub fn episodes_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(EPISODE_HEADER);
        s.push('\n');
        for r in &self.rows {
            for e in &r.episodes {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{:.4},{},{}",
                    r.policy,
                    r.tag,
                    r.k,
                    e.episode,
                    e.seed,
                    e.route_seed,
                    e.steps_traveled,
                    e.completion(),
                    u8::from(e.success()),
                    e.termination_event.map(InfractionKind::name).unwrap_or("none")
                );
            }
        }
        s
    }

    /// Parse the aggregate CSV. Episode lists come back empty.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| EvalError::Table(e.to_string()))?.clone();
        let expected: Vec<&str> = EVAL_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(EvalError::Table(format!("expected header '{EVAL_HEADER}'")));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| EvalError::Table(e.to_string()))?;
            let bad = |col: &str| EvalError::Table(format!("row {}: bad {col}", line + 1));
            let num = |i: usize, col: &str| rec[i].parse::<f64>().map_err(|_| bad(col));
            let int = |i: usize, col: &str| rec[i].parse::<usize>().map_err(|_| bad(col));
            rows.push(EvalRow {
                policy: rec[0].to_string(),
                tag: rec[1].to_string(),
                k: int(2, "k")?,
                n: int(3, "n")?,
                success_rate: num(4, "success")?,
                completion_mean: num(5, "completion_mean")?,
                completion_std: num(6, "completion_std")?,
                infractions: [int(7, "collision")?, int(8, "out_of_lane")?, int(9, "off_road")?, int(10, "stability")?],
                mean_predict_ms: if &rec[11] == "NA" { None } else { Some(num(11, "mean_predict_ms")?) },
                episodes: vec![],
            });
        }
        Ok(EvalTable { rows })
    }
}

/// Read per-episode completion fractions for one (policy, tag) from an
/// episodes CSV, ordered by episode index.
pub fn read_episode_outcomes(text: &str, policy: &str, tag: &str) -> Result<Vec<f64>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvalError::Table(e.to_string()))?;
        if &rec[0] == policy && &rec[1] == tag {
            let ep: usize = rec[3].parse().map_err(|_| EvalError::Table("bad episode".into()))?;
            let c: f64 = rec[7].parse().map_err(|_| EvalError::Table("bad completion".into()))?;
            out.push((ep, c));
        }
    }
    out.sort_by_key(|(ep, _)| *ep);
    Ok(out.into_iter().map(|(_, c)| c).collect())
}

/// Per-episode completion fractions of every tag in a single-policy
/// episodes CSV, each ordered by episode index.
pub fn read_outcomes_by_tag(text: &str) -> Result<BTreeMap<String, Vec<f64>>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| EvalError::Table(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != EPISODE_HEADER {
        return Err(EvalError::Table(format!("expected header {EPISODE_HEADER}")));
    }
    let mut policy: Option<String> = None;
    let mut by_tag: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvalError::Table(e.to_string()))?;
        match &policy {
            None => policy = Some(rec[0].to_string()),
            Some(p) if p != &rec[0] => return Err(EvalError::Table("episodes file mixes policies".into())),
            Some(_) => {}
        }
        let ep: usize = rec[3].parse().map_err(|_| EvalError::Table("bad episode".into()))?;
        let c: f64 = rec[7].parse().map_err(|_| EvalError::Table("bad completion".into()))?;
        by_tag.entry(rec[1].to_string()).or_default().push((ep, c));
    }
    Ok(by_tag
        .into_iter()
        .map(|(tag, mut v)| {
            v.sort_by_key(|(ep, _)| *ep);
            (tag, v.into_iter().map(|(_, c)| c).collect())
        })
        .collect())
}

fn run_slot(driver: &dyn Driver, slot: &EpisodeSlot, opts: &EvalOptions) -> Result<EpisodeRun, EvalError> {
    let route = generate_route(slot.route_seed, slot.config.scene, &opts.sim);
    let mut run = run_episode(driver, &slot.config, &route, slot.seed, opts.horizon, &opts.sim)?;
    run.result.episode = slot.episode;
    Ok(run)
}

fn write_log(dir: &Path, policy: &str, slot: &EpisodeSlot, run: &EpisodeRun) -> Result<(), EvalError> {
    let sub = dir.join(policy);
    fs::create_dir_all(&sub)?;
    let mut f = fs::File::create(sub.join(format!("{}_{:04}.jsonl", slot.config.tag(), slot.episode)))?;
    f.write_all(run.log_jsonl().as_bytes())?;
    Ok(())
}

/// Run every scheduled episode of `suite` and aggregate one row per config.
pub fn evaluate(driver: &dyn Driver, suite: &TestSuite, opts: &EvalOptions) -> Result<EvalTable, EvalError> {
    let leaks = check_leakage(suite);
    if !leaks.is_clean() {
        let msg = leaks.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(EvalError::LeakySuite(msg));
    }
    let slots = suite.slots();
    let policy = driver.name();
    let work = |slot: &EpisodeSlot| -> Result<EpisodeResult, EvalError> {
        let run = run_slot(driver, slot, opts)?;
        if let Some(dir) = &opts.log_dir {
            write_log(dir, &policy, slot, &run)?;
        }
        Ok(run.result)
    };
    let results: Vec<EpisodeResult> = if opts.jobs == 1 {
        slots.iter().map(work).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| EvalError::Table(format!("thread pool: {e}")))?;
        pool.install(|| slots.par_iter().map(work).collect::<Result<_, _>>())?
    };

    let mut rows = Vec::new();
    let per = suite.episodes_per_config;
    for (i, chunk) in results.chunks(per).enumerate() {
        let slot = &slots[i * per];
        rows.push(EvalRow::from_episodes(&policy, &slot.config.tag(), slot.k, chunk.to_vec(), opts.timing));
    }
    Ok(EvalTable { rows })
}
