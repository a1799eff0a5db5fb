//! Explicit-state DTMC: breadth-first construction from the automata,
//! graph-based qualitative checks, and iterative solvers for reachability
//! probabilities and expected cumulative rewards.

use std::collections::VecDeque;
use std::io::{self, Write};
use std::sync::OnceLock;

use indexmap::IndexSet;
use thiserror::Error;

use crate::automata::{
    initial_state, label, successor_distribution, ConfigError, GlobalState, Pred, ScenarioConfig,
};
use crate::numfmt::sig12;

pub const DEFAULT_STATE_CAP: usize = 10_000_000;
/// Residual bound for the iterative solvers.
pub const SOLVER_TOLERANCE: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DtmcError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state space exceeds the cap of {cap} states")]
    StateCap { cap: usize },
    #[error("solver did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("target is reached with probability {probability} < 1; expected reward is unbounded")]
    TargetNotAlmostSure { probability: f64 },
    #[error("reward rules must be nonnegative, got {0}")]
    NegativeReward(f64),
}

/// Per-tick state rewards: every rule whose predicate holds contributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardStructure {
    pub rules: Vec<(Pred, f64)>,
}

impl RewardStructure {
    pub fn new(rules: Vec<(Pred, f64)>) -> Self {
        Self { rules }
    }

    pub fn single(pred: Pred, reward: f64) -> Self {
        Self {
            rules: vec![(pred, reward)],
        }
    }

    pub fn reward(&self, s: &GlobalState) -> f64 {
        self.rules
            .iter()
            .filter(|(p, _)| p.eval(s))
            .map(|(_, r)| r)
            .sum()
    }
}

/// Path from the initial state; each step carries the probability of the
/// branch taken into it (1 for the initial state).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub steps: Vec<(usize, f64)>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_state(&self) -> Option<usize> {
        self.steps.last().map(|&(s, _)| s)
    }

    pub fn probability(&self) -> f64 {
        self.steps.iter().map(|&(_, p)| p).product()
    }
}

/// Outcome of a qualitative check.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub holds: bool,
    pub witness: Option<Trace>,
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Debug)]
pub struct Dtmc {
    cfg: ScenarioConfig,
    states: IndexSet<GlobalState>,
    row_ptr: Vec<usize>,
    succ: Vec<u32>,
    prob: Vec<f64>,
    parent: Vec<(u32, f64)>,
    terminals: Vec<usize>,
    deadlocks: Vec<usize>,
    scc_order: OnceLock<Vec<u32>>,
    predecessors: OnceLock<(Vec<usize>, Vec<u32>)>,
}

/// Builds the reachable chain with the default state cap.
pub fn build(cfg: &ScenarioConfig) -> Result<Dtmc, DtmcError> {
    build_with_cap(cfg, DEFAULT_STATE_CAP)
}

pub fn build_with_cap(cfg: &ScenarioConfig, cap: usize) -> Result<Dtmc, DtmcError> {
    let init = initial_state(cfg)?;
    let cap = cap.min(NO_PARENT as usize);
    let mut states = IndexSet::new();
    states.insert(init);
    let mut row_ptr = vec![0];
    let mut succ = Vec::new();
    let mut prob = Vec::new();
    let mut parent = vec![(NO_PARENT, 1.0)];
    let mut terminals = Vec::new();
    let mut deadlocks = Vec::new();
    let mut row: Vec<(u32, f64)> = Vec::new();

    // states are processed in discovery order, which is BFS order
    let mut cur = 0;
    while cur < states.len() {
        let s = &states[cur];
        if s.all_done() {
            terminals.push(cur);
        }
        let dist = successor_distribution(s, cfg);
        if dist.is_deadlock() {
            deadlocks.push(cur);
        }
        row.clear();
        for (p, next) in dist.branches {
            let (idx, fresh) = states.insert_full(next);
            if fresh {
                if states.len() > cap {
                    return Err(DtmcError::StateCap { cap });
                }
                parent.push((cur as u32, p));
            }
            row.push((idx as u32, p));
        }
        row.sort_by_key(|&(t, _)| t);
        let mut k = 0;
        while k < row.len() {
            let (t, mut p) = row[k];
            k += 1;
            while k < row.len() && row[k].0 == t {
                p += row[k].1;
                k += 1;
            }
            succ.push(t);
            prob.push(p);
        }
        row_ptr.push(succ.len());
        cur += 1;
    }

    Ok(Dtmc {
        cfg: cfg.clone(),
        states,
        row_ptr,
        succ,
        prob,
        parent,
        terminals,
        deadlocks,
        scc_order: OnceLock::new(),
        predecessors: OnceLock::new(),
    })
}

impl Dtmc {
    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.succ.len()
    }

    pub fn initial(&self) -> usize {
        0
    }

    pub fn state(&self, idx: usize) -> &GlobalState {
        &self.states[idx]
    }

    pub fn states(&self) -> impl Iterator<Item = &GlobalState> {
        self.states.iter()
    }

    pub fn index_of(&self, s: &GlobalState) -> Option<usize> {
        self.states.get_index_of(s)
    }

    /// Outgoing `(successor, probability)` pairs, sorted by successor index.
    pub fn successors(&self, idx: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[idx]..self.row_ptr[idx + 1];
        self.succ[r.clone()]
            .iter()
            .zip(&self.prob[r])
            .map(|(&t, &p)| (t as usize, p))
    }

    pub fn labels(&self, idx: usize) -> Vec<String> {
        label(&self.states[idx]).iter().map(ToString::to_string).collect()
    }

    pub fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    pub fn deadlock_states(&self) -> &[usize] {
        &self.deadlocks
    }

    /// Largest deviation of a non-deadlock row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        (0..self.num_states())
            .filter(|&s| self.row_ptr[s] != self.row_ptr[s + 1])
            .map(|s| (self.successors(s).map(|(_, p)| p).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Shortest (breadth-first) path from the initial state to `idx`.
    pub fn trace_to(&self, idx: usize) -> Trace {
        let mut steps = Vec::new();
        let mut cur = idx as u32;
        loop {
            let (par, p) = self.parent[cur as usize];
            steps.push((cur as usize, p));
            if par == NO_PARENT {
                break;
            }
            cur = par;
        }
        steps.reverse();
        Trace { steps }
    }

    pub fn eval(&self, pred: &Pred) -> Vec<bool> {
        self.states.iter().map(|s| pred.eval(s)).collect()
    }

    /// All deadlock states with a shortest witness each.
    pub fn find_deadlocks(&self) -> Vec<(usize, Trace)> {
        self.deadlocks
            .iter()
            .map(|&d| (d, self.trace_to(d)))
            .collect()
    }

    /// `pred` holds in every reachable state; otherwise a shortest
    /// counterexample.
    pub fn check_invariant(&self, pred: &Pred) -> Verdict {
        match self.states.iter().position(|s| !pred.eval(s)) {
            None => Verdict {
                holds: true,
                witness: None,
            },
            Some(bad) => Verdict {
                holds: false,
                witness: Some(self.trace_to(bad)),
            },
        }
    }

    /// From every reachable `trigger` state, `goal` is reached with
    /// probability 1. The witness for a failure runs to the offending trigger
    /// state and on to a state from which `goal` is unreachable.
    pub fn almost_sure_leads_to(&self, trigger: &Pred, goal: &Pred) -> Verdict {
        let goal_set = self.eval(goal);
        let sure = self.prob1(&goal_set);
        let bad = self
            .states
            .iter()
            .enumerate()
            .position(|(i, s)| !sure[i] && trigger.eval(s));
        let Some(bad) = bad else {
            return Verdict {
                holds: true,
                witness: None,
            };
        };
        let mut trace = self.trace_to(bad);
        let hopeless = self.prob0(&goal_set);
        if let Some(tail) = self.path_within(bad, |s| !goal_set[s], |s| hopeless[s]) {
            trace.steps.extend(tail.into_iter().skip(1));
        }
        Verdict {
            holds: false,
            witness: Some(trace),
        }
    }

    /// Probability of eventually reaching `target` from the initial state.
    pub fn prob_reach(&self, target: &Pred) -> Result<f64, DtmcError> {
        Ok(self.prob_reach_vector(&self.eval(target))?[0])
    }

    /// Reachability probability from every state.
    pub fn prob_reach_vector(&self, target: &[bool]) -> Result<Vec<f64>, DtmcError> {
        let zero = self.prob0(target);
        let unknown: Vec<bool> = (0..self.num_states())
            .map(|s| !target[s] && !zero[s])
            .collect();
        let x0: Vec<f64> = target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let b = vec![0.0; self.num_states()];
        self.solve(&unknown, x0, &b)
    }

    /// Expected reward accumulated before the first visit to `target`.
    pub fn expected_reward(&self, rewards: &RewardStructure, target: &Pred) -> Result<f64, DtmcError> {
        if let Some(&(_, r)) = rewards.rules.iter().find(|(_, r)| r.is_nan() || *r < 0.0) {
            return Err(DtmcError::NegativeReward(r));
        }
        let target_set = self.eval(target);
        let sure = self.prob1(&target_set);
        if !sure[0] {
            let probability = self.prob_reach_vector(&target_set)?[0];
            return Err(DtmcError::TargetNotAlmostSure { probability });
        }
        let unknown: Vec<bool> = (0..self.num_states())
            .map(|s| sure[s] && !target_set[s])
            .collect();
        let b: Vec<f64> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| if unknown[i] { rewards.reward(s) } else { 0.0 })
            .collect();
        let x = self.solve(&unknown, vec![0.0; self.num_states()], &b)?;
        Ok(x[0])
    }

    /// Writes one line per state: `index<TAB>labels<TAB>succ:prob ...`.
    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        for i in 0..self.num_states() {
            let succ: Vec<String> = self
                .successors(i)
                .map(|(t, p)| format!("{t}:{}", sig12(p)))
                .collect();
            writeln!(w, "{i}\t{}\t{}", self.labels(i).join(","), succ.join(" "))?;
        }
        Ok(())
    }

    /// States that cannot reach `target`.
    fn prob0(&self, target: &[bool]) -> Vec<bool> {
        let reach = self.backward_reach(target, |_| true);
        reach.into_iter().map(|r| !r).collect()
    }

    /// States that reach `target` with probability 1: those that cannot
    /// reach a prob-0 state while avoiding `target`.
    fn prob1(&self, target: &[bool]) -> Vec<bool> {
        let zero = self.prob0(target);
        let doomed = self.backward_reach(&zero, |s| !target[s]);
        doomed.into_iter().map(|d| !d).collect()
    }

    /// Backward closure of `seed` through predecessors satisfying `through`.
    fn backward_reach(&self, seed: &[bool], through: impl Fn(usize) -> bool) -> Vec<bool> {
        let (pred_ptr, preds) = self.predecessors();
        let mut mark = seed.to_vec();
        let mut stack: Vec<usize> = (0..mark.len()).filter(|&s| mark[s]).collect();
        while let Some(t) = stack.pop() {
            for &p in &preds[pred_ptr[t]..pred_ptr[t + 1]] {
                let p = p as usize;
                if !mark[p] && through(p) {
                    mark[p] = true;
                    stack.push(p);
                }
            }
        }
        mark
    }

    /// Shortest path from `from` that stays in `allowed` until it hits
    /// `stop`.
    fn path_within(
        &self,
        from: usize,
        allowed: impl Fn(usize) -> bool,
        stop: impl Fn(usize) -> bool,
    ) -> Option<Vec<(usize, f64)>> {
        let mut prev: Vec<Option<(usize, f64)>> = vec![None; self.num_states()];
        let mut seen = vec![false; self.num_states()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(s) = queue.pop_front() {
            if stop(s) {
                let mut path = vec![];
                let mut cur = s;
                let mut p_in = 1.0;
                loop {
                    path.push((cur, p_in));
                    match prev[cur] {
                        Some((q, p)) => {
                            p_in = p;
                            let last = path.len() - 1;
                            path[last].1 = p;
                            cur = q;
                        }
                        None => break,
                    }
                }
                path.reverse();
                return Some(path);
            }
            if !allowed(s) {
                continue;
            }
            for (t, p) in self.successors(s) {
                if !seen[t] {
                    seen[t] = true;
                    prev[t] = Some((s, p));
                    queue.push_back(t);
                }
            }
        }
        None
    }

    fn predecessors(&self) -> (&[usize], &[u32]) {
        let (ptr, preds) = self.predecessors.get_or_init(|| {
            let n = self.num_states();
            let mut count = vec![0usize; n + 1];
            for &t in &self.succ {
                count[t as usize + 1] += 1;
            }
            for i in 0..n {
                count[i + 1] += count[i];
            }
            let mut fill = count.clone();
            let mut preds = vec![0u32; self.succ.len()];
            for s in 0..n {
                for &t in &self.succ[self.row_ptr[s]..self.row_ptr[s + 1]] {
                    preds[fill[t as usize]] = s as u32;
                    fill[t as usize] += 1;
                }
            }
            (count, preds)
        });
        (ptr, preds)
    }

    /// States in reverse topological order of the SCC condensation (sinks
    /// first), so one Gauss-Seidel sweep solves every acyclic region exactly.
    fn scc_order(&self) -> &[u32] {
        self.scc_order.get_or_init(|| tarjan_order(self.num_states(), &self.row_ptr, &self.succ))
    }

    /// Gauss-Seidel on `x_s = b_s + sum_t P(s,t) x_t` for `unknown` states;
    /// other entries of `x` stay fixed.
    fn solve(&self, unknown: &[bool], mut x: Vec<f64>, b: &[f64]) -> Result<Vec<f64>, DtmcError> {
        let order: Vec<usize> = self
            .scc_order()
            .iter()
            .map(|&s| s as usize)
            .filter(|&s| unknown[s])
            .collect();
        if order.is_empty() {
            return Ok(x);
        }
        let update = |s: usize, x: &[f64]| {
            let mut acc = b[s];
            let mut self_loop = 0.0;
            for (t, p) in self.successors(s) {
                if t == s {
                    self_loop += p;
                } else {
                    acc += p * x[t];
                }
            }
            // a probability-1 self-loop only occurs on states outside `unknown`
            acc / (1.0 - self_loop)
        };
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            for &s in &order {
                x[s] = update(s, &x);
            }
            residual = order
                .iter()
                .map(|&s| (update(s, &x) - x[s]).abs())
                .fold(0.0, f64::max);
            if residual < SOLVER_TOLERANCE {
                return Ok(x);
            }
        }
        Err(DtmcError::NonConvergence {
            residual,
            iterations: MAX_SWEEPS,
        })
    }
}

/// Iterative Tarjan; returns vertices in the order their SCCs complete.
fn tarjan_order(n: usize, row_ptr: &[usize], succ: &[u32]) -> Vec<u32> {
    const UNVISITED: u32 = u32::MAX;
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0u32; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<u32> = Vec::new();
    let mut out = Vec::with_capacity(n);
    let mut next_index = 0u32;
    // (vertex, next edge offset)
    let mut call: Vec<(u32, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        call.push((root as u32, row_ptr[root]));
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root as u32);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            let v = v as usize;
            if *edge < row_ptr[v + 1] {
                let w = succ[*edge] as usize;
                *edge += 1;
                if index[w] == UNVISITED {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w as u32);
                    on_stack[w] = true;
                    call.push((w as u32, row_ptr[w]));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                let parent = parent as usize;
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w as usize] = false;
                    out.push(w);
                    if w as usize == v {
                        break;
                    }
                }
            }
        }
    }
    out
}
