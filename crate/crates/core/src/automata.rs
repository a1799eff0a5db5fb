//! Tick-synchronous product of N hidden senders, one receiver and the
//! sender/receiver links.
//!
//! One call to [`successor_distribution`] advances the whole network by one
//! tick, except for two zero-duration bookkeeping steps: the round boundary
//! (losers and winners are reset) and the joint backoff draw at the start of
//! every contention round. Both the DTMC builder and the simulator go through
//! this module, so they cannot disagree on protocol semantics.
//!
//! Within a tick every sender reads the receiver state of the current tick,
//! and the receiver reacts to what the senders put on air during the next
//! one. That makes RTS reception coincide with the sender's `SEND_RTS` ticks
//! and lets a listening sender hear a CTS in the same tick it starts.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use smallvec::SmallVec;
use thiserror::Error;

use crate::backoff::BackoffTable;

/// Zero-based sender index. Labels and reports print it one-based.
pub type SenderId = u8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Full scenario parameterization at tick granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_senders: u8,
    /// Packets each sender has to deliver (or drop).
    pub nmax_msg: u16,
    pub table: BackoffTable,
    /// Contention unit length in ticks.
    pub tcu_ticks: u16,
    /// Radio TX/RX turnaround.
    pub d_switch: u16,
    /// RTS/CTS air time.
    pub d_frame: u16,
    /// Carrier-sense window. With 0 ticks a sender whose counter expires one
    /// unit after the winner's cannot hear the CTS first, and the chain
    /// deadlocks even at the nominal unit.
    pub d_rssi: u16,
    /// Ticks a sender waits in `WAIT_CTS` for the CTS to start.
    pub cts_timeout: u16,
    pub seconds_per_tick: f64,
    /// Idle-listening power draw in mW.
    pub idle_power: f64,
    /// Lets a sender transmit into a busy receiver (its RTS is lost)
    /// instead of deadlocking.
    pub robust_mode: bool,
    /// Allows `tcu_ticks` to differ from `2*d_switch + d_frame + d_rssi`.
    pub tcu_variation: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_senders: 2,
            nmax_msg: 1,
            table: BackoffTable::default(),
            tcu_ticks: 8,
            d_switch: 1,
            d_frame: 5,
            d_rssi: 1,
            cts_timeout: 3,
            seconds_per_tick: 0.001714,
            idle_power: 13.5,
            robust_mode: false,
            tcu_variation: false,
        }
    }
}

impl ScenarioConfig {
    pub fn with_senders(mut self, n: u8) -> Self {
        self.n_senders = n;
        self
    }

    pub fn with_nmax(mut self, nmax: u16) -> Self {
        self.nmax_msg = nmax;
        self
    }

    /// Sets the contention unit, flagging the scenario as a T_CU-variation
    /// experiment whenever it departs from the timing identity.
    pub fn with_tcu_ticks(mut self, tcu: u16) -> Self {
        self.tcu_ticks = tcu;
        self.tcu_variation = tcu != self.nominal_tcu_ticks();
        self
    }

    /// `2*d_switch + d_frame + d_rssi`.
    pub fn nominal_tcu_ticks(&self) -> u16 {
        2 * self.d_switch + self.d_frame + self.d_rssi
    }

    pub fn e_max(&self) -> u8 {
        self.table.e_max()
    }

    pub fn b_max(&self) -> u8 {
        self.table.b_max()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_senders == 0 {
            return Err(invalid("n_senders must be >= 1"));
        }
        if self.d_frame == 0 {
            return Err(invalid("d_frame must be >= 1"));
        }
        if self.tcu_ticks == 0 {
            return Err(invalid("tcu_ticks must be >= 1"));
        }
        let nominal = u32::from(self.d_switch) * 2 + u32::from(self.d_frame) + u32::from(self.d_rssi);
        if nominal > u32::from(u16::MAX) {
            return Err(invalid("tick durations overflow"));
        }
        if !self.tcu_variation && u32::from(self.tcu_ticks) != nominal {
            return Err(invalid(format!(
                "tcu_ticks = {} but 2*d_switch + d_frame + d_rssi = {} \
                 (set tcu_variation to run a contention-unit variation)",
                self.tcu_ticks, nominal
            )));
        }
        if self.cts_timeout < self.d_rssi || self.cts_timeout == 0 {
            return Err(invalid(format!(
                "cts_timeout = {} must be >= max(d_rssi, 1) = {}",
                self.cts_timeout,
                self.d_rssi.max(1)
            )));
        }
        if !(self.seconds_per_tick.is_finite() && self.seconds_per_tick > 0.0) {
            return Err(invalid("seconds_per_tick must be finite and > 0"));
        }
        if !(self.idle_power.is_finite() && self.idle_power >= 0.0) {
            return Err(invalid("idle_power must be finite and >= 0"));
        }
        if self.b_max() > 63 {
            return Err(invalid("b_max must be <= 63"));
        }
        if self.e_max() > 63 {
            return Err(invalid("e_max must be <= 63"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SenderPhase {
    Choose,
    Countdown,
    SwitchRt,
    SendRts,
    SwitchTr,
    WaitCts,
    RecvCts,
    Sleep,
    Success,
    Reject,
    Done,
}

impl SenderPhase {
    pub const ALL: [SenderPhase; 11] = [
        SenderPhase::Choose,
        SenderPhase::Countdown,
        SenderPhase::SwitchRt,
        SenderPhase::SendRts,
        SenderPhase::SwitchTr,
        SenderPhase::WaitCts,
        SenderPhase::RecvCts,
        SenderPhase::Sleep,
        SenderPhase::Success,
        SenderPhase::Reject,
        SenderPhase::Done,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SenderPhase::Choose => "choose",
            SenderPhase::Countdown => "countdown",
            SenderPhase::SwitchRt => "switch_rt",
            SenderPhase::SendRts => "send_rts",
            SenderPhase::SwitchTr => "switch_tr",
            SenderPhase::WaitCts => "wait_cts",
            SenderPhase::RecvCts => "recv_cts",
            SenderPhase::Sleep => "sleep",
            SenderPhase::Success => "success",
            SenderPhase::Reject => "reject",
            SenderPhase::Done => "done",
        }
    }

    /// Waiting for the round boundary (or finished).
    fn is_idle(self) -> bool {
        matches!(
            self,
            SenderPhase::Sleep | SenderPhase::Success | SenderPhase::Reject | SenderPhase::Done
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SenderState {
    pub phase: SenderPhase,
    /// Consecutive failures of the current packet.
    pub e: u8,
    /// Backoff counter, `-1` until drawn.
    pub rbc: i8,
    pub msgs_remaining: u16,
    /// Ticks left in the current phase (or in the current contention unit
    /// while counting down).
    pub phase_ticks: u16,
}

impl SenderState {
    fn choose(e: u8, msgs_remaining: u16) -> Self {
        Self {
            phase: SenderPhase::Choose,
            e,
            rbc: -1,
            msgs_remaining,
            phase_ticks: 0,
        }
    }

    fn done() -> Self {
        Self {
            phase: SenderPhase::Done,
            e: 0,
            rbc: -1,
            msgs_remaining: 0,
            phase_ticks: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReceiverPhase {
    WStart,
    WRts,
    Receiving(SenderId),
    Collision,
    SwitchRt(SenderId),
    SendCts(SenderId),
    WEnd,
}

impl ReceiverPhase {
    pub fn name(self) -> &'static str {
        match self {
            ReceiverPhase::WStart => "w_start",
            ReceiverPhase::WRts => "w_rts",
            ReceiverPhase::Receiving(_) => "receiving",
            ReceiverPhase::Collision => "collision",
            ReceiverPhase::SwitchRt(_) => "switch_rt",
            ReceiverPhase::SendCts(_) => "send_cts",
            ReceiverPhase::WEnd => "w_end",
        }
    }

    pub fn peer(self) -> Option<SenderId> {
        match self {
            ReceiverPhase::Receiving(i) | ReceiverPhase::SwitchRt(i) | ReceiverPhase::SendCts(i) => {
                Some(i)
            }
            _ => None,
        }
    }

    /// Radio in TX mode (turning around or sending CTS).
    pub fn is_transmit_mode(self) -> bool {
        matches!(self, ReceiverPhase::SwitchRt(_) | ReceiverPhase::SendCts(_))
    }

    fn is_listening(self) -> bool {
        matches!(self, ReceiverPhase::WRts | ReceiverPhase::WEnd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReceiverState {
    pub phase: ReceiverPhase,
    pub phase_ticks: u16,
}

/// Status of the link between one sender and the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkStatus {
    Idle,
    BusySender(SenderId),
    BusyReceiver,
    Collision,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalState {
    pub senders: SmallVec<[SenderState; 4]>,
    pub receiver: ReceiverState,
}

impl GlobalState {
    pub fn all_done(&self) -> bool {
        self.senders.iter().all(|s| s.phase == SenderPhase::Done)
    }

    /// A sender is on air while the receiver's radio is in TX mode.
    pub fn has_tx_conflict(&self) -> bool {
        self.receiver.phase.is_transmit_mode()
            && self.senders.iter().any(|s| s.phase == SenderPhase::SendRts)
    }

    /// Every sender is waiting for the boundary and the receiver is idle.
    pub fn is_round_end(&self) -> bool {
        self.receiver.phase.is_listening()
            && self.senders.iter().all(|s| s.phase.is_idle())
            && !self.all_done()
    }

    /// Per-link channel status derived from component phases.
    pub fn channels(&self) -> Vec<LinkStatus> {
        let rx = self.receiver.phase;
        self.senders
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sending = s.phase == SenderPhase::SendRts;
                match (sending, rx.is_transmit_mode()) {
                    (true, true) => LinkStatus::Collision,
                    (true, false) if rx == ReceiverPhase::Collision => LinkStatus::Collision,
                    (true, false) => LinkStatus::BusySender(i as SenderId),
                    (false, true) if matches!(rx, ReceiverPhase::SendCts(_)) => {
                        LinkStatus::BusyReceiver
                    }
                    _ => LinkStatus::Idle,
                }
            })
            .collect()
    }
}

impl fmt::Display for GlobalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.senders.iter().enumerate() {
            write!(
                f,
                "s{}={}(e={},rbc={},m={},t={}) ",
                i + 1,
                s.phase.name(),
                s.e,
                s.rbc,
                s.msgs_remaining,
                s.phase_ticks
            )?;
        }
        write!(f, "r={}", self.receiver.phase.name())?;
        if let Some(p) = self.receiver.phase.peer() {
            write!(f, "(s{})", p + 1)?;
        }
        write!(f, "(t={})", self.receiver.phase_ticks)
    }
}

/// Outgoing branches of one state. Empty means deadlock.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDistribution {
    pub branches: Vec<(f64, GlobalState)>,
}

impl TransitionDistribution {
    fn certain(next: GlobalState) -> Self {
        Self {
            branches: vec![(1.0, next)],
        }
    }

    pub fn is_deadlock(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn total_probability(&self) -> f64 {
        self.branches.iter().map(|(p, _)| p).sum()
    }
}

pub fn initial_state(cfg: &ScenarioConfig) -> Result<GlobalState, ConfigError> {
    cfg.validate()?;
    let sender = if cfg.nmax_msg == 0 {
        SenderState::done()
    } else {
        SenderState::choose(0, cfg.nmax_msg)
    };
    Ok(GlobalState {
        senders: std::iter::repeat_n(sender, cfg.n_senders.into()).collect(),
        receiver: ReceiverState {
            phase: ReceiverPhase::WStart,
            phase_ticks: 0,
        },
    })
}

/// True iff the receiver is sending a CTS. Other senders' RTS frames never
/// reach a sender (hidden terminals).
pub fn observe_busy(s: &GlobalState, _sender: SenderId) -> bool {
    matches!(s.receiver.phase, ReceiverPhase::SendCts(_))
}

/// Which rule applies to a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// All senders done: probability-1 self-loop.
    Terminal,
    /// Start of a round: pending backoff counters are drawn.
    Draw,
    /// Every sender finished the round: losers and winners are reset.
    Boundary,
    Tick,
    /// No rule applies.
    Deadlock,
}

pub fn classify(s: &GlobalState, cfg: &ScenarioConfig) -> StepKind {
    if s.all_done() {
        StepKind::Terminal
    } else if s.receiver.phase == ReceiverPhase::WStart {
        StepKind::Draw
    } else if s.has_tx_conflict() && !cfg.robust_mode {
        StepKind::Deadlock
    } else if s.is_round_end() {
        StepKind::Boundary
    } else {
        StepKind::Tick
    }
}

/// One synchronized step as a probability distribution over successors.
pub fn successor_distribution(s: &GlobalState, cfg: &ScenarioConfig) -> TransitionDistribution {
    match classify(s, cfg) {
        StepKind::Terminal => TransitionDistribution::certain(s.clone()),
        StepKind::Deadlock => TransitionDistribution {
            branches: Vec::new(),
        },
        StepKind::Boundary => TransitionDistribution::certain(boundary_step(s, cfg)),
        StepKind::Tick => TransitionDistribution::certain(tick_step(s, cfg)),
        StepKind::Draw => {
            let (pre, drawers) = prepare_draw(s);
            let pmfs: Vec<Vec<(u8, f64)>> = drawers
                .iter()
                .map(|&i| {
                    cfg.table
                        .rbc_pmf(pre[i].e)
                        .expect("failure count kept within e_max")
                })
                .collect();
            let total: usize = pmfs.iter().map(Vec::len).product();
            let mut branches = Vec::with_capacity(total);
            let mut draws = vec![0u8; drawers.len()];
            let mut cursor = vec![0usize; drawers.len()];
            loop {
                let mut p = 1.0;
                for (k, pmf) in pmfs.iter().enumerate() {
                    let (v, q) = pmf[cursor[k]];
                    draws[k] = v;
                    p *= q;
                }
                branches.push((p, resolve_draws(&pre, &drawers, &draws, cfg)));
                // odometer increment, last drawer fastest
                let mut k = drawers.len();
                loop {
                    if k == 0 {
                        return TransitionDistribution { branches };
                    }
                    k -= 1;
                    cursor[k] += 1;
                    if cursor[k] < pmfs[k].len() {
                        break;
                    }
                    cursor[k] = 0;
                }
            }
        }
    }
}

/// Samples one successor. Same rules as [`successor_distribution`]; joint
/// draws are sampled sender by sender, which is the same product measure.
/// Returns `None` on deadlock.
pub fn sample_successor<R: Rng + ?Sized>(
    s: &GlobalState,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Option<GlobalState> {
    match classify(s, cfg) {
        StepKind::Terminal => Some(s.clone()),
        StepKind::Deadlock => None,
        StepKind::Boundary => Some(boundary_step(s, cfg)),
        StepKind::Tick => Some(tick_step(s, cfg)),
        StepKind::Draw => {
            let (pre, drawers) = prepare_draw(s);
            let draws: SmallVec<[u8; 8]> = drawers
                .iter()
                .map(|&i| {
                    cfg.table
                        .sample_rbc(pre[i].e, rng)
                        .expect("failure count kept within e_max")
                })
                .collect();
            Some(resolve_draws(&pre, &drawers, &draws, cfg))
        }
    }
}

/// Rejected packets are dropped before the draw; returns the senders that
/// draw a counter this round.
fn prepare_draw(s: &GlobalState) -> (SmallVec<[SenderState; 4]>, Vec<usize>) {
    let mut pre = s.senders.clone();
    let mut drawers = Vec::new();
    for (i, snd) in pre.iter_mut().enumerate() {
        match snd.phase {
            SenderPhase::Reject => {
                *snd = if snd.msgs_remaining == 0 {
                    SenderState::done()
                } else {
                    SenderState::choose(0, snd.msgs_remaining)
                };
                if snd.phase == SenderPhase::Choose {
                    drawers.push(i);
                }
            }
            SenderPhase::Choose => drawers.push(i),
            _ => {}
        }
    }
    (pre, drawers)
}

fn resolve_draws(
    pre: &[SenderState],
    drawers: &[usize],
    draws: &[u8],
    cfg: &ScenarioConfig,
) -> GlobalState {
    let mut next: SmallVec<[SenderState; 4]> = pre.iter().copied().collect();
    for (&i, &rbc) in drawers.iter().zip(draws) {
        let s = &mut next[i];
        s.rbc = rbc as i8;
        if rbc == 0 {
            enter(s, SenderPhase::SwitchRt, cfg);
        } else {
            s.phase = SenderPhase::Countdown;
            s.phase_ticks = cfg.tcu_ticks;
        }
    }
    let listening = ReceiverState {
        phase: ReceiverPhase::WRts,
        phase_ticks: 0,
    };
    let receiver = if drawers.is_empty() {
        ReceiverState {
            phase: ReceiverPhase::WStart,
            phase_ticks: 0,
        }
    } else {
        update_receiver(listening, pre, &next, cfg)
    };
    GlobalState {
        senders: next,
        receiver,
    }
}

fn boundary_step(s: &GlobalState, cfg: &ScenarioConfig) -> GlobalState {
    let e_max = cfg.e_max();
    let senders = s
        .senders
        .iter()
        .map(|snd| match snd.phase {
            SenderPhase::Success if snd.msgs_remaining == 0 => SenderState::done(),
            SenderPhase::Success => SenderState::choose(0, snd.msgs_remaining),
            SenderPhase::Sleep if snd.e >= e_max => SenderState {
                phase: SenderPhase::Reject,
                e: e_max,
                rbc: -1,
                msgs_remaining: snd.msgs_remaining - 1,
                phase_ticks: 0,
            },
            SenderPhase::Sleep => SenderState::choose(snd.e + 1, snd.msgs_remaining),
            _ => *snd,
        })
        .collect();
    GlobalState {
        senders,
        receiver: ReceiverState {
            phase: ReceiverPhase::WStart,
            phase_ticks: 0,
        },
    }
}

fn tick_step(s: &GlobalState, cfg: &ScenarioConfig) -> GlobalState {
    let next: SmallVec<[SenderState; 4]> = s
        .senders
        .iter()
        .enumerate()
        .map(|(i, snd)| step_sender(i as SenderId, *snd, s, cfg))
        .collect();
    let receiver = update_receiver(s.receiver, &s.senders, &next, cfg);
    GlobalState {
        senders: next,
        receiver,
    }
}

/// Moves a sender into `phase`, skipping zero-length phases.
fn enter(s: &mut SenderState, phase: SenderPhase, cfg: &ScenarioConfig) {
    match phase {
        SenderPhase::SwitchRt if cfg.d_switch == 0 => enter(s, SenderPhase::SendRts, cfg),
        SenderPhase::SwitchRt => set(s, phase, cfg.d_switch),
        SenderPhase::SendRts => set(s, phase, cfg.d_frame),
        SenderPhase::SwitchTr if cfg.d_switch == 0 => enter(s, SenderPhase::WaitCts, cfg),
        SenderPhase::SwitchTr => set(s, phase, cfg.d_switch),
        SenderPhase::WaitCts => set(s, phase, cfg.cts_timeout),
        SenderPhase::Success => {
            s.msgs_remaining -= 1;
            set(s, phase, 0);
        }
        _ => set(s, phase, 0),
    }
}

fn set(s: &mut SenderState, phase: SenderPhase, ticks: u16) {
    s.phase = phase;
    s.phase_ticks = ticks;
}

fn step_sender(id: SenderId, mut s: SenderState, g: &GlobalState, cfg: &ScenarioConfig) -> SenderState {
    match s.phase {
        SenderPhase::Countdown => {
            if observe_busy(g, id) {
                // lost contention; counter left as is
                enter(&mut s, SenderPhase::Sleep, cfg);
            } else {
                s.phase_ticks -= 1;
                if s.phase_ticks == 0 {
                    s.rbc -= 1;
                    if s.rbc == 0 {
                        enter(&mut s, SenderPhase::SwitchRt, cfg);
                    } else {
                        s.phase_ticks = cfg.tcu_ticks;
                    }
                }
            }
        }
        SenderPhase::SwitchRt | SenderPhase::SendRts | SenderPhase::SwitchTr | SenderPhase::RecvCts => {
            s.phase_ticks -= 1;
            if s.phase_ticks == 0 {
                let next = match s.phase {
                    SenderPhase::SwitchRt => SenderPhase::SendRts,
                    SenderPhase::SendRts => SenderPhase::SwitchTr,
                    SenderPhase::SwitchTr => SenderPhase::WaitCts,
                    _ => SenderPhase::Success,
                };
                enter(&mut s, next, cfg);
            }
        }
        SenderPhase::WaitCts => match g.receiver.phase {
            ReceiverPhase::SendCts(to) if to == id => {
                // this tick already carries the first CTS tick
                let rest = cfg.d_frame - 1;
                if rest == 0 {
                    enter(&mut s, SenderPhase::Success, cfg);
                } else {
                    set(&mut s, SenderPhase::RecvCts, rest);
                }
            }
            ReceiverPhase::SendCts(_) => enter(&mut s, SenderPhase::Sleep, cfg),
            _ => {
                s.phase_ticks -= 1;
                if s.phase_ticks == 0 {
                    enter(&mut s, SenderPhase::Sleep, cfg);
                }
            }
        },
        SenderPhase::Choose
        | SenderPhase::Sleep
        | SenderPhase::Success
        | SenderPhase::Reject
        | SenderPhase::Done => {}
    }
    s
}

/// Receiver reaction to the transmissions of the next tick.
fn update_receiver(
    r: ReceiverState,
    prev: &[SenderState],
    next: &[SenderState],
    cfg: &ScenarioConfig,
) -> ReceiverState {
    let on_air: SmallVec<[SenderId; 4]> = next
        .iter()
        .enumerate()
        .filter(|(_, s)| s.phase == SenderPhase::SendRts)
        .map(|(i, _)| i as SenderId)
        .collect();
    let at = |phase, phase_ticks| ReceiverState { phase, phase_ticks };
    match r.phase {
        ReceiverPhase::WStart | ReceiverPhase::WRts | ReceiverPhase::WEnd => {
            // a frame already in progress when first heard is garbled
            let partial = on_air
                .iter()
                .any(|&i| prev[usize::from(i)].phase == SenderPhase::SendRts);
            match on_air.len() {
                0 => r,
                1 if !partial => at(ReceiverPhase::Receiving(on_air[0]), 0),
                _ => at(ReceiverPhase::Collision, 0),
            }
        }
        ReceiverPhase::Receiving(from) => {
            if !on_air.contains(&from) {
                enter_switch(from, cfg)
            } else if on_air.len() > 1 {
                at(ReceiverPhase::Collision, 0)
            } else {
                r
            }
        }
        ReceiverPhase::Collision => {
            if on_air.is_empty() {
                at(ReceiverPhase::WEnd, 0)
            } else {
                r
            }
        }
        ReceiverPhase::SwitchRt(to) => {
            if r.phase_ticks <= 1 {
                at(ReceiverPhase::SendCts(to), cfg.d_frame)
            } else {
                at(r.phase, r.phase_ticks - 1)
            }
        }
        ReceiverPhase::SendCts(_) => {
            if r.phase_ticks <= 1 {
                at(ReceiverPhase::WEnd, 0)
            } else {
                at(r.phase, r.phase_ticks - 1)
            }
        }
    }
}

fn enter_switch(to: SenderId, cfg: &ScenarioConfig) -> ReceiverState {
    if cfg.d_switch == 0 {
        ReceiverState {
            phase: ReceiverPhase::SendCts(to),
            phase_ticks: cfg.d_frame,
        }
    } else {
        ReceiverState {
            phase: ReceiverPhase::SwitchRt(to),
            phase_ticks: cfg.d_switch,
        }
    }
}

/// Receiver phase without its peer, for labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReceiverTag {
    WStart,
    WRts,
    Receiving,
    Collision,
    SwitchRt,
    SendCts,
    WEnd,
}

impl From<ReceiverPhase> for ReceiverTag {
    fn from(p: ReceiverPhase) -> Self {
        match p {
            ReceiverPhase::WStart => ReceiverTag::WStart,
            ReceiverPhase::WRts => ReceiverTag::WRts,
            ReceiverPhase::Receiving(_) => ReceiverTag::Receiving,
            ReceiverPhase::Collision => ReceiverTag::Collision,
            ReceiverPhase::SwitchRt(_) => ReceiverTag::SwitchRt,
            ReceiverPhase::SendCts(_) => ReceiverTag::SendCts,
            ReceiverPhase::WEnd => ReceiverTag::WEnd,
        }
    }
}

/// Atomic proposition over a global state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Atom {
    Phase(SenderId, SenderPhase),
    E(SenderId, u8),
    Rbc(SenderId, i8),
    Receiver(ReceiverTag),
    /// The receiver's current frame exchange involves this sender.
    ReceiverPeer(SenderId),
    AllDone,
    RoundEnd,
}

impl Atom {
    pub fn holds(&self, s: &GlobalState) -> bool {
        let snd = |i: &SenderId| s.senders.get(usize::from(*i));
        match self {
            Atom::Phase(i, p) => snd(i).is_some_and(|x| x.phase == *p),
            Atom::E(i, e) => snd(i).is_some_and(|x| x.e == *e),
            Atom::Rbc(i, r) => snd(i).is_some_and(|x| x.rbc == *r),
            Atom::Receiver(t) => ReceiverTag::from(s.receiver.phase) == *t,
            Atom::ReceiverPeer(i) => s.receiver.phase.peer() == Some(*i),
            Atom::AllDone => s.all_done(),
            Atom::RoundEnd => s.is_round_end(),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Phase(i, p) => write!(f, "s{}_{}", i + 1, p.name()),
            Atom::E(i, e) => write!(f, "s{}_e_{}", i + 1, e),
            Atom::Rbc(i, r) if *r < 0 => write!(f, "s{}_rbc_unset", i + 1),
            Atom::Rbc(i, r) => write!(f, "s{}_rbc_{}", i + 1, r),
            Atom::Receiver(t) => {
                let name = match t {
                    ReceiverTag::WStart => "w_start",
                    ReceiverTag::WRts => "w_rts",
                    ReceiverTag::Receiving => "receiving",
                    ReceiverTag::Collision => "collision",
                    ReceiverTag::SwitchRt => "switch_rt",
                    ReceiverTag::SendCts => "send_cts",
                    ReceiverTag::WEnd => "w_end",
                };
                write!(f, "r_{name}")
            }
            Atom::ReceiverPeer(i) => write!(f, "r_peer_s{}", i + 1),
            Atom::AllDone => f.write_str("all_done"),
            Atom::RoundEnd => f.write_str("round_end"),
        }
    }
}

/// The set of atoms true in `s`.
pub fn label(s: &GlobalState) -> BTreeSet<Atom> {
    let mut out = BTreeSet::new();
    for (i, snd) in s.senders.iter().enumerate() {
        let i = i as SenderId;
        out.insert(Atom::Phase(i, snd.phase));
        out.insert(Atom::E(i, snd.e));
        out.insert(Atom::Rbc(i, snd.rbc));
    }
    out.insert(Atom::Receiver(s.receiver.phase.into()));
    if let Some(p) = s.receiver.phase.peer() {
        out.insert(Atom::ReceiverPeer(p));
    }
    if s.all_done() {
        out.insert(Atom::AllDone);
    }
    if s.is_round_end() {
        out.insert(Atom::RoundEnd);
    }
    out
}

/// Propositional formula over atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum Pred {
    True,
    Atom(Atom),
    Not(Box<Pred>),
    And(Vec<Pred>),
    Or(Vec<Pred>),
    Implies(Box<Pred>, Box<Pred>),
}

impl Pred {
    pub fn atom(a: Atom) -> Self {
        Pred::Atom(a)
    }

    pub fn negate(p: Pred) -> Self {
        Pred::Not(Box::new(p))
    }

    pub fn and(self, other: Pred) -> Self {
        match self {
            Pred::And(mut v) => {
                v.push(other);
                Pred::And(v)
            }
            p => Pred::And(vec![p, other]),
        }
    }

    pub fn or(self, other: Pred) -> Self {
        match self {
            Pred::Or(mut v) => {
                v.push(other);
                Pred::Or(v)
            }
            p => Pred::Or(vec![p, other]),
        }
    }

    pub fn implies(self, other: Pred) -> Self {
        Pred::Implies(Box::new(self), Box::new(other))
    }

    pub fn phase(i: SenderId, p: SenderPhase) -> Self {
        Pred::Atom(Atom::Phase(i, p))
    }

    pub fn e(i: SenderId, e: u8) -> Self {
        Pred::Atom(Atom::E(i, e))
    }

    pub fn rbc(i: SenderId, r: i8) -> Self {
        Pred::Atom(Atom::Rbc(i, r))
    }

    pub fn receiver(t: ReceiverTag) -> Self {
        Pred::Atom(Atom::Receiver(t))
    }

    /// `lo <= e_i <= hi` as a disjunction of atoms.
    pub fn e_between(i: SenderId, lo: u8, hi: u8) -> Self {
        Pred::Or((lo..=hi).map(|e| Pred::e(i, e)).collect())
    }

    pub fn eval(&self, s: &GlobalState) -> bool {
        match self {
            Pred::True => true,
            Pred::Atom(a) => a.holds(s),
            Pred::Not(p) => !p.eval(s),
            Pred::And(v) => v.iter().all(|p| p.eval(s)),
            Pred::Or(v) => v.iter().any(|p| p.eval(s)),
            Pred::Implies(a, b) => !a.eval(s) || b.eval(s),
        }
    }

    /// Evaluation against an explicit label set.
    pub fn eval_labels(&self, labels: &BTreeSet<Atom>) -> bool {
        match self {
            Pred::True => true,
            Pred::Atom(a) => labels.contains(a),
            Pred::Not(p) => !p.eval_labels(labels),
            Pred::And(v) => v.iter().all(|p| p.eval_labels(labels)),
            Pred::Or(v) => v.iter().any(|p| p.eval_labels(labels)),
            Pred::Implies(a, b) => !a.eval_labels(labels) || b.eval_labels(labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: u8) -> ScenarioConfig {
        ScenarioConfig::default().with_senders(n)
    }

    fn only(d: TransitionDistribution) -> GlobalState {
        assert_eq!(d.branches.len(), 1);
        assert_eq!(d.branches[0].0, 1.0);
        d.branches.into_iter().next().unwrap().1
    }

    fn countdown(rbc: i8, ticks: u16) -> SenderState {
        SenderState {
            phase: SenderPhase::Countdown,
            e: 0,
            rbc,
            msgs_remaining: 1,
            phase_ticks: ticks,
        }
    }

    fn rx(phase: ReceiverPhase, phase_ticks: u16) -> ReceiverState {
        ReceiverState { phase, phase_ticks }
    }

    #[test]
    fn initial_states() {
        let s = initial_state(&cfg(2)).unwrap();
        assert_eq!(s.senders.len(), 2);
        for snd in &s.senders {
            assert_eq!(snd.phase, SenderPhase::Choose);
            assert_eq!((snd.e, snd.rbc, snd.msgs_remaining), (0, -1, 1));
        }
        assert_eq!(s.receiver.phase, ReceiverPhase::WStart);
        assert!(s.channels().iter().all(|&c| c == LinkStatus::Idle));

        let one = initial_state(&cfg(1)).unwrap();
        assert_eq!(one.senders.len(), 1);
        assert_eq!(one.senders[0].phase, SenderPhase::Choose);
        assert_eq!(one.receiver.phase, ReceiverPhase::WStart);
        let labels = label(&one);
        assert!(!labels.contains(&Atom::AllDone));
        assert!(!labels.contains(&Atom::Phase(0, SenderPhase::Done)));
    }

    #[test]
    fn invalid_configs_name_the_invariant() {
        let bad = ScenarioConfig {
            tcu_ticks: 7,
            ..ScenarioConfig::default()
        };
        let err = initial_state(&bad).unwrap_err().to_string();
        assert!(err.contains("tcu_ticks"), "{err}");
        let ok = ScenarioConfig::default().with_tcu_ticks(7);
        assert!(ok.tcu_variation && ok.validate().is_ok());
        let bad = ScenarioConfig {
            n_senders: 0,
            ..ScenarioConfig::default()
        };
        assert!(initial_state(&bad).unwrap_err().to_string().contains("n_senders"));
        let bad = ScenarioConfig {
            cts_timeout: 0,
            d_rssi: 0,
            tcu_ticks: 7,
            ..ScenarioConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("cts_timeout"));
        let bad = ScenarioConfig {
            d_frame: 0,
            ..ScenarioConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn joint_draw_has_49_equal_branches() {
        let c = cfg(2);
        let d = successor_distribution(&initial_state(&c).unwrap(), &c);
        assert_eq!(d.branches.len(), 49);
        for (p, next) in &d.branches {
            assert!((p - 1.0 / 49.0).abs() < 1e-15);
            assert!(next.senders.iter().all(|s| s.phase == SenderPhase::Countdown));
            assert_eq!(next.receiver.phase, ReceiverPhase::WRts);
        }
        assert!((d.total_probability() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn countdown_decrements_at_unit_boundary() {
        let c = cfg(1);
        let s = GlobalState {
            senders: [countdown(3, 1)].into_iter().collect(),
            receiver: rx(ReceiverPhase::WRts, 0),
        };
        let next = only(successor_distribution(&s, &c));
        assert_eq!(next.senders[0].rbc, 2);
        assert_eq!(next.senders[0].phase, SenderPhase::Countdown);
        assert_eq!(next.senders[0].phase_ticks, 8);

        let mid = GlobalState {
            senders: [countdown(3, 5)].into_iter().collect(),
            receiver: rx(ReceiverPhase::WRts, 0),
        };
        let next = only(successor_distribution(&mid, &c));
        assert_eq!((next.senders[0].rbc, next.senders[0].phase_ticks), (3, 4));
    }

    #[test]
    fn busy_receiver_aborts_countdown() {
        let c = cfg(2);
        let s = GlobalState {
            senders: [
                SenderState {
                    phase: SenderPhase::WaitCts,
                    rbc: 0,
                    phase_ticks: 3,
                    ..countdown(0, 0)
                },
                countdown(4, 1),
            ]
            .into_iter()
            .collect(),
            receiver: rx(ReceiverPhase::SendCts(0), 5),
        };
        assert!(observe_busy(&s, 1));
        let next = only(successor_distribution(&s, &c));
        assert_eq!(next.senders[1].phase, SenderPhase::Sleep);
        assert_eq!(next.senders[1].rbc, 4);
        assert_eq!(next.senders[0].phase, SenderPhase::RecvCts);
        assert_eq!(next.senders[0].phase_ticks, 4);
    }

    #[test]
    fn hidden_senders_do_not_hear_each_other() {
        let s = GlobalState {
            senders: [
                SenderState {
                    phase: SenderPhase::SendRts,
                    rbc: 0,
                    phase_ticks: 3,
                    ..countdown(0, 0)
                },
                countdown(2, 4),
            ]
            .into_iter()
            .collect(),
            receiver: rx(ReceiverPhase::Receiving(0), 0),
        };
        assert!(!observe_busy(&s, 1));
        assert_eq!(s.channels()[0], LinkStatus::BusySender(0));
        assert_eq!(s.channels()[1], LinkStatus::Idle);
        let idle = GlobalState {
            senders: [countdown(2, 4), countdown(3, 4)].into_iter().collect(),
            receiver: rx(ReceiverPhase::WRts, 0),
        };
        assert!(!observe_busy(&idle, 0) && !observe_busy(&idle, 1));
    }

    #[test]
    fn rejection_at_e_max_resets_e() {
        let c = cfg(1).with_nmax(2);
        let s = GlobalState {
            senders: [SenderState {
                phase: SenderPhase::Sleep,
                e: 12,
                rbc: 3,
                msgs_remaining: 2,
                phase_ticks: 0,
            }]
            .into_iter()
            .collect(),
            receiver: rx(ReceiverPhase::WEnd, 0),
        };
        assert_eq!(classify(&s, &c), StepKind::Boundary);
        let b = only(successor_distribution(&s, &c));
        assert_eq!(b.senders[0].phase, SenderPhase::Reject);
        assert_eq!((b.senders[0].e, b.senders[0].msgs_remaining), (12, 1));
        let d = successor_distribution(&b, &c);
        assert_eq!(d.branches.len(), 7);
        for (_, n) in &d.branches {
            assert_eq!(n.senders[0].e, 0);
            assert_eq!(n.senders[0].msgs_remaining, 1);
        }
    }

    #[test]
    fn last_packet_rejected_finishes_sender() {
        let c = cfg(1);
        let s = GlobalState {
            senders: [SenderState {
                phase: SenderPhase::Reject,
                e: 12,
                rbc: -1,
                msgs_remaining: 0,
                phase_ticks: 0,
            }]
            .into_iter()
            .collect(),
            receiver: rx(ReceiverPhase::WStart, 0),
        };
        let n = only(successor_distribution(&s, &c));
        assert!(n.all_done());
        assert_eq!(classify(&n, &c), StepKind::Terminal);
        assert_eq!(only(successor_distribution(&n, &c)), n);
    }

    #[test]
    fn labels() {
        let s = GlobalState {
            senders: [SenderState {
                phase: SenderPhase::Success,
                e: 0,
                rbc: 0,
                msgs_remaining: 0,
                phase_ticks: 0,
            }]
            .into_iter()
            .collect(),
            receiver: rx(ReceiverPhase::Collision, 0),
        };
        let l = label(&s);
        let names: Vec<String> = l.iter().map(ToString::to_string).collect();
        assert!(names.contains(&"s1_success".to_string()));
        assert!(names.contains(&"s1_e_0".to_string()));
        assert!(names.contains(&"r_collision".to_string()));
        for a in &l {
            assert!(a.holds(&s));
        }
    }

    /// Walks one sampled path and checks every visited distribution.
    fn walk(c: &ScenarioConfig, seed: u64, max_steps: usize) -> (GlobalState, bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = initial_state(c).unwrap();
        for _ in 0..max_steps {
            let d = successor_distribution(&s, c);
            if d.is_deadlock() {
                return (s, true);
            }
            assert!((d.total_probability() - 1.0).abs() < 1e-12);
            let prev_msgs: Vec<u16> = s.senders.iter().map(|x| x.msgs_remaining).collect();
            for (_, n) in &d.branches {
                for (i, x) in n.senders.iter().enumerate() {
                    assert!(x.msgs_remaining <= prev_msgs[i]);
                    assert!(x.e <= c.e_max());
                    assert!(x.rbc >= -1 && x.rbc <= c.b_max() as i8);
                    match x.phase {
                        SenderPhase::Choose => assert_eq!(x.rbc, -1),
                        SenderPhase::Countdown => assert!(x.rbc >= 1),
                        SenderPhase::Reject => assert_eq!(x.e, c.e_max()),
                        SenderPhase::Done => assert_eq!(x.msgs_remaining, 0),
                        _ => {}
                    }
                }
                if let ReceiverPhase::SendCts(to) = n.receiver.phase {
                    assert!(usize::from(to) < n.senders.len());
                }
            }
            if s.all_done() {
                return (s, false);
            }
            s = sample_successor(&s, c, &mut rng).unwrap();
        }
        panic!("no termination within {max_steps} steps");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_paths_conserve_probability(seed in any::<u64>(), n in 1u8..=4, nmax in 0u16..=3) {
            let c = cfg(n).with_nmax(nmax);
            let (end, deadlocked) = walk(&c, seed, 200_000);
            prop_assert!(!deadlocked);
            prop_assert!(end.all_done());
        }
    }
}
