//! Named property checks and the derived studies built on the DTMC and the
//! simulator: validity battery, success profiles, idle listening time,
//! energy and the contention-unit variation study.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::automata::{
    Atom, ConfigError, GlobalState, Pred, ReceiverTag, ScenarioConfig, SenderId, SenderPhase,
};
use crate::dtmc::{self, Dtmc, DtmcError, RewardStructure, Trace, DEFAULT_STATE_CAP};
use crate::monte_carlo::{self, deviation, Aggregate, MetricSummary, PacketOutcome, SimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StudyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dtmc(#[from] DtmcError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("sender {0} does not exist")]
    NoSuchSender(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Boolean,
    Probability,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Bool(bool),
    Real(f64),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Real(x) => f.write_str(&crate::numfmt::sig12(*x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub name: String,
    pub kind: ReportKind,
    pub expected: Option<Value>,
    pub actual: Value,
    pub tolerance: f64,
    pub pass: bool,
    pub witness: Option<Trace>,
    pub note: Option<String>,
}

impl PropertyReport {
    fn boolean(name: impl Into<String>, expected: bool, verdict: dtmc::Verdict) -> Self {
        Self {
            name: name.into(),
            kind: ReportKind::Boolean,
            expected: Some(Value::Bool(expected)),
            actual: Value::Bool(verdict.holds),
            tolerance: 0.0,
            pass: verdict.holds == expected,
            witness: verdict.witness,
            note: None,
        }
    }
}

/// Settings for studies that may fall back to sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudySettings {
    /// Largest sender count solved exactly.
    pub exact_cap: u8,
    pub n_runs: usize,
    pub seed: u64,
    pub state_cap: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            exact_cap: 4,
            n_runs: 100_000,
            seed: 1,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

fn check_sender(cfg: &ScenarioConfig, sender: SenderId) -> Result<(), StudyError> {
    if sender >= cfg.n_senders {
        return Err(StudyError::NoSuchSender(u16::from(sender) + 1));
    }
    Ok(())
}

/// Builds `cfg` and runs the five validity checks.
pub fn run_validity_battery(cfg: &ScenarioConfig) -> Result<Vec<PropertyReport>, DtmcError> {
    Ok(validity_battery(&dtmc::build(cfg)?))
}

/// The five validity checks on an already built chain. Properties are
/// phrased for senders 1 and 2; with a single sender the pairwise checks
/// hold vacuously.
pub fn validity_battery(model: &Dtmc) -> Vec<PropertyReport> {
    let cfg = model.config();
    let e_max = cfg.e_max();
    let s1 = 0;
    let reject = Pred::phase(s1, SenderPhase::Reject);
    let success = Pred::phase(s1, SenderPhase::Success);

    let mut out = vec![
        PropertyReport::boolean(
            "rejection only at e = e_max",
            true,
            model.check_invariant(&reject.clone().implies(Pred::e(s1, e_max))),
        ),
        PropertyReport::boolean(
            "success only with 0 <= e <= e_max",
            true,
            model.check_invariant(&success.implies(Pred::e_between(s1, 0, e_max))),
        ),
        PropertyReport::boolean(
            "rejection only below e_max",
            false,
            model.check_invariant(&reject.implies(Pred::e_between(s1, 0, e_max.saturating_sub(1)))),
        ),
    ];

    let mut collide = PropertyReport::boolean(
        "simultaneous RTS leads to collision",
        true,
        model.almost_sure_leads_to(&simultaneous_rts(cfg), &Pred::receiver(ReceiverTag::Collision)),
    );
    let mut rival = rival_keeps_counter(model);
    if cfg.n_senders < 2 {
        let note = Some("vacuous with a single sender".to_string());
        collide.note = note.clone();
        rival.note = note;
    }
    out.push(collide);
    out.push(rival);
    out
}

/// Some pair of senders is in SEND_RTS at the same tick.
fn simultaneous_rts(cfg: &ScenarioConfig) -> Pred {
    let n = cfg.n_senders;
    let pairs: Vec<Pred> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| {
            Pred::phase(i, SenderPhase::SendRts).and(Pred::phase(j, SenderPhase::SendRts))
        })
        .collect();
    Pred::Or(pairs)
}

/// When sender 1's counter expires while sender 2 still holds `k`, sender 2
/// ends up asleep holding the same `k`; checked for every `k` in `1..=b_max`.
fn rival_keeps_counter(model: &Dtmc) -> PropertyReport {
    let cfg = model.config();
    let mut failing = None;
    if cfg.n_senders >= 2 {
        for k in 1..=cfg.b_max() as i8 {
            let trigger = Pred::rbc(0, 0).and(Pred::rbc(1, k));
            let goal = Pred::rbc(1, k).and(Pred::phase(1, SenderPhase::Sleep));
            let v = model.almost_sure_leads_to(&trigger, &goal);
            if !v.holds {
                failing = Some((k, v));
                break;
            }
        }
    }
    let name = format!("rival sleeps with counter intact (k = 1..{})", cfg.b_max());
    match failing {
        None => PropertyReport::boolean(
            name,
            true,
            dtmc::Verdict {
                holds: true,
                witness: None,
            },
        ),
        Some((k, v)) => {
            let mut r = PropertyReport::boolean(name, true, v);
            r.note = Some(format!("fails for k = {k}"));
            r
        }
    }
}

/// Which packet a success profile describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProfileScope {
    /// "Eventually succeeds while e = k" over the whole run.
    #[default]
    WholeRun,
    /// Outcome of the sender's first packet only.
    FirstPacket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Exact,
    Sampled,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Exact => "exact",
            EvalMode::Sampled => "sampled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessProfile {
    pub n_senders: u8,
    pub sender: SenderId,
    pub scope: ProfileScope,
    pub mode: EvalMode,
    /// `per_k[k]`: probability of success with exactly `k` prior failures.
    pub per_k: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Standard errors of `per_k` and `cumulative` (zero when exact).
    pub per_k_se: Vec<f64>,
    pub cumulative_se: Vec<f64>,
    /// Probability that the (first) packet is rejected.
    pub reject: f64,
}

fn running_sum(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Success probability by failure count, solved exactly when the sender
/// count is within `settings.exact_cap` and sampled otherwise.
pub fn success_profile(
    cfg: &ScenarioConfig,
    sender: SenderId,
    scope: ProfileScope,
    settings: &StudySettings,
) -> Result<SuccessProfile, StudyError> {
    cfg.validate()?;
    check_sender(cfg, sender)?;
    if cfg.n_senders <= settings.exact_cap {
        let model = dtmc::build_with_cap(cfg, settings.state_cap)?;
        Ok(success_profile_exact(&model, sender, scope)?)
    } else {
        success_profile_sampled(cfg, sender, scope, settings.n_runs, settings.seed)
    }
}

pub fn success_profile_exact(
    model: &Dtmc,
    sender: SenderId,
    scope: ProfileScope,
) -> Result<SuccessProfile, DtmcError> {
    let cfg = model.config();
    let i = usize::from(sender);
    let first_only = |s: &GlobalState| match scope {
        ProfileScope::WholeRun => true,
        ProfileScope::FirstPacket => s.senders[i].msgs_remaining + 1 == cfg.nmax_msg,
    };
    let reach = |f: &dyn Fn(&GlobalState) -> bool| -> Result<f64, DtmcError> {
        let mask: Vec<bool> = model.states().map(f).collect();
        Ok(model.prob_reach_vector(&mask)?[model.initial()])
    };
    let mut per_k = Vec::new();
    let mut at_most = Vec::new();
    for k in 0..=cfg.e_max() {
        per_k.push(reach(&|s: &GlobalState| {
            let x = &s.senders[i];
            x.phase == SenderPhase::Success && x.e == k && first_only(s)
        })?);
        if scope == ProfileScope::WholeRun {
            at_most.push(reach(&|s: &GlobalState| {
                let x = &s.senders[i];
                x.phase == SenderPhase::Success && x.e <= k
            })?);
        }
    }
    // Events for different k are disjoint only for a single packet.
    let cumulative = match scope {
        ProfileScope::WholeRun => at_most,
        ProfileScope::FirstPacket => running_sum(&per_k),
    };
    let reject = reach(&|s: &GlobalState| s.senders[i].phase == SenderPhase::Reject && first_only(s))?;
    let zeros = vec![0.0; per_k.len()];
    Ok(SuccessProfile {
        n_senders: cfg.n_senders,
        sender,
        scope,
        mode: EvalMode::Exact,
        cumulative,
        per_k,
        per_k_se: zeros.clone(),
        cumulative_se: zeros,
        reject,
    })
}

pub fn success_profile_sampled(
    cfg: &ScenarioConfig,
    sender: SenderId,
    scope: ProfileScope,
    n_runs: usize,
    seed: u64,
) -> Result<SuccessProfile, StudyError> {
    check_sender(cfg, sender)?;
    if n_runs < 2 {
        return Err(SimError::TooFewRuns(n_runs).into());
    }
    let runs = monte_carlo::simulate_runs(cfg, n_runs, seed)?;
    let i = usize::from(sender);
    let levels = usize::from(cfg.e_max()) + 1;
    let n = runs.len() as f64;
    let mut hits = vec![0u64; levels];
    let mut cum_hits = vec![0u64; levels];
    let mut rejects = 0u64;
    for r in &runs {
        let succeeded: Vec<bool> = match scope {
            ProfileScope::WholeRun => r.successes[i].iter().map(|&c| c > 0).collect(),
            ProfileScope::FirstPacket => (0..levels)
                .map(|k| r.first_packet[i] == PacketOutcome::Success { e: k as u8 })
                .collect(),
        };
        let mut any = false;
        for k in 0..levels {
            hits[k] += u64::from(succeeded[k]);
            any |= succeeded[k];
            cum_hits[k] += u64::from(any);
        }
        rejects += u64::from(match scope {
            ProfileScope::WholeRun => r.rejections[i] > 0,
            ProfileScope::FirstPacket => r.first_packet[i] == PacketOutcome::Rejected,
        });
    }
    let frac = |c: u64| c as f64 / n;
    let se = |c: u64| {
        let p = frac(c);
        (p * (1.0 - p) / (n - 1.0)).sqrt()
    };
    let per_k: Vec<f64> = hits.iter().map(|&c| frac(c)).collect();
    // Whole-run indicators can overlap across k, so the cumulative column is
    // the fraction of runs with any success at or below k rather than a sum.
    let cumulative = match scope {
        ProfileScope::WholeRun => cum_hits.iter().map(|&c| frac(c)).collect(),
        ProfileScope::FirstPacket => running_sum(&per_k),
    };
    Ok(SuccessProfile {
        n_senders: cfg.n_senders,
        sender,
        scope,
        mode: EvalMode::Sampled,
        per_k_se: hits.iter().map(|&c| se(c)).collect(),
        cumulative_se: cum_hits.iter().map(|&c| se(c)).collect(),
        per_k,
        cumulative,
        reject: frac(rejects),
    })
}

/// Reward of `seconds_per_tick` on every tick `sender` spends counting down.
pub fn idle_reward(cfg: &ScenarioConfig, sender: SenderId) -> RewardStructure {
    RewardStructure::single(Pred::phase(sender, SenderPhase::Countdown), cfg.seconds_per_tick)
}

/// Expected seconds `sender` spends idle-listening before it is done.
pub fn idle_listening_time(cfg: &ScenarioConfig, sender: SenderId) -> Result<f64, StudyError> {
    check_sender(cfg, sender)?;
    Ok(idle_listening_time_on(&dtmc::build(cfg)?, sender)?)
}

pub fn idle_listening_time_on(model: &Dtmc, sender: SenderId) -> Result<f64, DtmcError> {
    let cfg = model.config();
    model.expected_reward(&idle_reward(cfg, sender), &Pred::phase(sender, SenderPhase::Done))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyResult {
    pub idle_time: f64,
    pub power_mw: f64,
    /// Millijoules: seconds times milliwatts.
    pub energy_mj: f64,
}

impl EnergyResult {
    pub fn new(idle_time: f64, power_mw: f64) -> Self {
        Self {
            idle_time,
            power_mw,
            energy_mj: idle_time * power_mw,
        }
    }
}

pub fn energy(cfg: &ScenarioConfig, sender: SenderId, power_mw: f64) -> Result<EnergyResult, StudyError> {
    Ok(EnergyResult::new(idle_listening_time(cfg, sender)?, power_mw))
}

/// Analytic values under the simulator's metric names, for side-by-side
/// comparison with [`monte_carlo::simulate`].
pub fn analytic_metrics(model: &Dtmc) -> Result<Vec<(String, f64)>, DtmcError> {
    let cfg = model.config();
    let done = Pred::atom(Atom::AllDone);
    let mut out = Vec::new();
    for i in 0..cfg.n_senders {
        let label = i + 1;
        out.push((
            format!("idle_time_s{label}"),
            model.expected_reward(&idle_reward(cfg, i), &done)?,
        ));
        for k in 0..=cfg.e_max() {
            let p = model.prob_reach(&Pred::phase(i, SenderPhase::Success).and(Pred::e(i, k)))?;
            out.push((format!("success_s{label}_e{k}"), p));
        }
        let rejects = RewardStructure::single(Pred::phase(i, SenderPhase::Reject), 1.0);
        out.push((format!("reject_s{label}"), model.expected_reward(&rejects, &done)?));
    }
    let rounds = RewardStructure::single(
        Pred::receiver(ReceiverTag::WStart).and(Pred::negate(done.clone())),
        1.0,
    );
    out.push(("rounds".to_string(), model.expected_reward(&rounds, &done)?));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub metric: MetricSummary,
    pub analytic: f64,
    /// See [`monte_carlo::deviation`].
    pub delta_over_se: f64,
    pub pass: bool,
}

/// Pairs every simulated metric with its analytic value (3 standard errors).
pub fn compare(agg: &Aggregate, analytic: &[(String, f64)]) -> Vec<Agreement> {
    agg.metrics
        .iter()
        .filter_map(|m| {
            let &(_, a) = analytic.iter().find(|(name, _)| *name == m.name)?;
            let delta_over_se = deviation(m, a);
            Some(Agreement {
                metric: m.clone(),
                analytic: a,
                delta_over_se,
                pass: delta_over_se <= 3.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TcuVariant {
    Initial,
    Increased,
    Decreased,
}

impl TcuVariant {
    pub const ALL: [TcuVariant; 3] = [TcuVariant::Initial, TcuVariant::Increased, TcuVariant::Decreased];

    pub fn name(self) -> &'static str {
        match self {
            TcuVariant::Initial => "initial",
            TcuVariant::Increased => "increased",
            TcuVariant::Decreased => "decreased",
        }
    }

    /// Contention unit in ticks: base, base + d_frame, base - d_frame.
    pub fn tcu_ticks(self, cfg: &ScenarioConfig) -> u16 {
        match self {
            TcuVariant::Initial => cfg.tcu_ticks,
            TcuVariant::Increased => cfg.tcu_ticks + cfg.d_frame,
            TcuVariant::Decreased => cfg.tcu_ticks.saturating_sub(cfg.d_frame).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcuRow {
    pub variant: TcuVariant,
    pub tcu_ticks: u16,
    pub nmax: u16,
    pub states: usize,
    pub deadlocks: usize,
    /// Shortest path to the first deadlock found, rendered one state per line.
    pub witness: Option<Vec<String>>,
    pub energy: Option<EnergyResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcuStudy {
    /// Describes how the variants were derived.
    pub header: String,
    pub rows: Vec<TcuRow>,
}

pub const TCU_STUDY_NMAX: std::ops::RangeInclusive<u16> = 1..=5;

/// Idle energy of `sender` under the initial, increased and decreased
/// contention unit for `nmax` in 1..=5. Deadlocked variants get rows with
/// their deadlock count and witness but no energy.
pub fn tcu_variation_study(cfg: &ScenarioConfig, sender: SenderId) -> Result<TcuStudy, StudyError> {
    cfg.validate()?;
    check_sender(cfg, sender)?;
    let jobs: Vec<(TcuVariant, u16)> = TcuVariant::ALL
        .iter()
        .flat_map(|&v| TCU_STUDY_NMAX.map(move |n| (v, n)))
        .collect();
    let rows = jobs
        .into_par_iter()
        .map(|(variant, nmax)| tcu_row(cfg, sender, variant, nmax))
        .collect::<Result<Vec<_>, StudyError>>()?;
    let header = format!(
        "contention unit {} ticks, varied by d_frame = {} ticks; seconds_per_tick fixed at {}",
        cfg.tcu_ticks, cfg.d_frame, cfg.seconds_per_tick
    );
    Ok(TcuStudy { header, rows })
}

fn tcu_row(cfg: &ScenarioConfig, sender: SenderId, variant: TcuVariant, nmax: u16) -> Result<TcuRow, StudyError> {
    let tcu = variant.tcu_ticks(cfg);
    let mut c = cfg.clone().with_nmax(nmax);
    c.tcu_ticks = tcu;
    c.tcu_variation = cfg.tcu_variation || tcu != cfg.nominal_tcu_ticks();
    let model = dtmc::build(&c)?;
    let deadlocks = model.deadlock_states().len();
    let witness = model
        .find_deadlocks()
        .into_iter()
        .next()
        .map(|(_, t)| render_trace(&model, &t));
    let energy = if deadlocks == 0 {
        let idle = idle_listening_time_on(&model, sender)?;
        Some(EnergyResult::new(idle, c.idle_power))
    } else {
        None
    };
    Ok(TcuRow {
        variant,
        tcu_ticks: tcu,
        nmax,
        states: model.num_states(),
        deadlocks,
        witness,
        energy,
    })
}

/// One line per state on the path, in label form.
pub fn render_trace(model: &Dtmc, trace: &Trace) -> Vec<String> {
    trace
        .steps
        .iter()
        .map(|&(s, _)| model.labels(s).join(","))
        .collect()
}
