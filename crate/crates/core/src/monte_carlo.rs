//! Stochastic simulation over the same successor function as the DTMC.
//!
//! Run `i` of a simulation with seed `s` draws from the ChaCha8 stream
//! `(s, i)`, so results do not depend on how runs are scheduled across
//! worker threads. Aggregation walks the runs in index order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::automata::{
    initial_state, sample_successor, ConfigError, GlobalState, ReceiverPhase, ScenarioConfig,
    SenderPhase,
};

/// Hard stop for a single path; far above any terminating run.
pub const MAX_STEPS_PER_RUN: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("at least 2 runs are needed for a confidence interval, got {0}")]
    TooFewRuns(usize),
    #[error("run {run} (seed {seed}) reached a deadlock after {steps} steps")]
    Deadlock {
        run: usize,
        seed: u64,
        steps: u64,
        path: Vec<GlobalState>,
    },
    #[error("run exceeded {MAX_STEPS_PER_RUN} steps")]
    StepLimit,
}

/// How a sender's first packet ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    Pending,
    Success { e: u8 },
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunStats {
    /// Ticks each sender spent listening in countdown.
    pub idle_ticks: Vec<u64>,
    /// `successes[i][e]`: packets of sender `i` delivered after `e` failures.
    pub successes: Vec<Vec<u32>>,
    pub rejections: Vec<u32>,
    /// Contention rounds started.
    pub rounds: u32,
    pub first_packet: Vec<PacketOutcome>,
    pub steps: u64,
}

impl RunStats {
    fn new(cfg: &ScenarioConfig) -> Self {
        let n = usize::from(cfg.n_senders);
        Self {
            idle_ticks: vec![0; n],
            successes: vec![vec![0; usize::from(cfg.e_max()) + 1]; n],
            rejections: vec![0; n],
            rounds: 0,
            first_packet: vec![PacketOutcome::Pending; n],
            steps: 0,
        }
    }

    fn observe(&mut self, cur: &GlobalState, next: &GlobalState, cfg: &ScenarioConfig) {
        if cur.receiver.phase == ReceiverPhase::WStart && !cur.all_done() {
            self.rounds += 1;
        }
        for (i, (a, b)) in cur.senders.iter().zip(&next.senders).enumerate() {
            if a.phase == SenderPhase::Countdown {
                self.idle_ticks[i] += 1;
            }
            let first = a.msgs_remaining == cfg.nmax_msg;
            if b.phase == SenderPhase::Success && a.phase != SenderPhase::Success {
                self.successes[i][usize::from(b.e)] += 1;
                if first {
                    self.first_packet[i] = PacketOutcome::Success { e: b.e };
                }
            }
            if b.phase == SenderPhase::Reject && a.phase != SenderPhase::Reject {
                self.rejections[i] += 1;
                if first {
                    self.first_packet[i] = PacketOutcome::Rejected;
                }
            }
        }
        self.steps += 1;
    }
}

/// Samples one path until every sender is done.
pub fn run_once<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<RunStats, SimError> {
    run_path(cfg, rng, None)
}

fn run_path<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
    mut path: Option<&mut Vec<GlobalState>>,
) -> Result<RunStats, SimError> {
    let mut stats = RunStats::new(cfg);
    let mut cur = initial_state(cfg)?;
    while !cur.all_done() {
        if let Some(p) = path.as_deref_mut() {
            p.push(cur.clone());
        }
        let Some(next) = sample_successor(&cur, cfg, rng) else {
            return Err(SimError::Deadlock {
                run: 0,
                seed: 0,
                steps: stats.steps,
                path: Vec::new(),
            });
        };
        stats.observe(&cur, &next, cfg);
        if stats.steps >= MAX_STEPS_PER_RUN {
            return Err(SimError::StepLimit);
        }
        cur = next;
    }
    if let Some(p) = path {
        p.push(cur);
    }
    Ok(stats)
}

/// Random stream of run `run` under `seed`.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

/// Replays run `run` and returns its state sequence.
pub fn replay_path(cfg: &ScenarioConfig, seed: u64, run: usize) -> (Result<RunStats, SimError>, Vec<GlobalState>) {
    let mut path = Vec::new();
    let res = run_path(cfg, &mut run_rng(seed, run), Some(&mut path));
    (res, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Continuous,
    /// Per-run 0/1 outcome; the mean estimates a probability.
    Indicator,
    /// Per-run event count.
    Count,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub kind: MetricKind,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn std_err(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }

    /// Standard error used when testing `mean == expected`. For indicators
    /// it is never below the binomial error implied by `expected`, so rare
    /// events with zero hits are not judged against a zero-width interval.
    pub fn reference_se(&self, expected: f64) -> f64 {
        let se = self.std_err();
        match self.kind {
            MetricKind::Indicator => {
                let p = expected.clamp(0.0, 1.0);
                se.max((p * (1.0 - p) / self.n as f64).sqrt())
            }
            _ => se,
        }
    }

    /// Half-width of the normal-approximation 95% interval.
    pub fn ci95(&self) -> f64 {
        1.96 * self.std_err()
    }

    fn from_samples(name: String, kind: MetricKind, xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        Self {
            name,
            kind,
            mean,
            std: (ss / (n as f64 - 1.0)).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub n_runs: usize,
    pub seed: u64,
    pub metrics: Vec<MetricSummary>,
}

impl Aggregate {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Metric names, in output order, for a scenario.
pub fn metric_names(cfg: &ScenarioConfig) -> Vec<(String, MetricKind)> {
    let mut names = Vec::new();
    for i in 1..=cfg.n_senders {
        names.push((format!("idle_time_s{i}"), MetricKind::Continuous));
        for e in 0..=cfg.e_max() {
            names.push((format!("success_s{i}_e{e}"), MetricKind::Indicator));
        }
        names.push((format!("reject_s{i}"), MetricKind::Count));
    }
    names.push(("rounds".to_string(), MetricKind::Count));
    names
}

fn metric_values(stats: &RunStats, cfg: &ScenarioConfig) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..usize::from(cfg.n_senders) {
        out.push(stats.idle_ticks[i] as f64 * cfg.seconds_per_tick);
        for &c in &stats.successes[i] {
            out.push(if c > 0 { 1.0 } else { 0.0 });
        }
        out.push(f64::from(stats.rejections[i]));
    }
    out.push(f64::from(stats.rounds));
    out
}

/// Runs `n_runs` independent paths and returns them in run order.
pub fn simulate_runs(cfg: &ScenarioConfig, n_runs: usize, seed: u64) -> Result<Vec<RunStats>, SimError> {
    cfg.validate()?;
    let results: Vec<Result<RunStats, SimError>> = (0..n_runs)
        .into_par_iter()
        .map(|run| run_once(cfg, &mut run_rng(seed, run)))
        .collect();
    let mut runs = Vec::with_capacity(n_runs);
    for (run, res) in results.into_iter().enumerate() {
        match res {
            Ok(stats) => runs.push(stats),
            Err(SimError::Deadlock { steps, .. }) => {
                let (_, path) = replay_path(cfg, seed, run);
                return Err(SimError::Deadlock {
                    run,
                    seed,
                    steps,
                    path,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(runs)
}

/// Mean, standard deviation and 95% interval of every metric.
pub fn simulate(cfg: &ScenarioConfig, n_runs: usize, seed: u64) -> Result<Aggregate, SimError> {
    if n_runs < 2 {
        return Err(SimError::TooFewRuns(n_runs));
    }
    let runs = simulate_runs(cfg, n_runs, seed)?;
    Ok(aggregate(cfg, &runs, seed))
}

pub fn aggregate(cfg: &ScenarioConfig, runs: &[RunStats], seed: u64) -> Aggregate {
    let names = metric_names(cfg);
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(runs.len()); names.len()];
    for stats in runs {
        for (col, v) in columns.iter_mut().zip(metric_values(stats, cfg)) {
            col.push(v);
        }
    }
    let metrics = names
        .into_iter()
        .zip(&columns)
        .map(|((name, kind), xs)| MetricSummary::from_samples(name, kind, xs))
        .collect();
    Aggregate {
        n_runs: runs.len(),
        seed,
        metrics,
    }
}

/// Continuity-corrected distance in standard errors: `|mean - expected|`
/// less a half-count allowance for discrete metrics, over
/// [`MetricSummary::reference_se`]. Infinite when that error is zero but the
/// values differ by more than the allowance.
pub fn deviation(m: &MetricSummary, expected: f64) -> f64 {
    let slack = match m.kind {
        MetricKind::Continuous => 0.0,
        MetricKind::Indicator | MetricKind::Count => 0.5 / m.n as f64,
    };
    let excess = (m.mean - expected).abs() - slack;
    if excess <= 1e-12 {
        0.0
    } else {
        let se = m.reference_se(expected);
        if se == 0.0 {
            f64::INFINITY
        } else {
            excess / se
        }
    }
}

/// Whether `mean` is within `sigmas` standard errors of `expected`.
pub fn agrees(m: &MetricSummary, expected: f64, sigmas: f64) -> bool {
    deviation(m, expected) <= sigmas
}
