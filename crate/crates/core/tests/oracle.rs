//! The chain checked against values computed without it.

use std::collections::HashMap;

use ecomac::automata::ScenarioConfig;
use ecomac::backoff::{BackoffTable, ContentionWindow, TableRow};
use ecomac::dtmc;
use ecomac::properties::{self, ProfileScope};

/// Outcome probabilities for one packet per sender, computed round by round.
///
/// In a round every pending sender draws a counter; senders fire in
/// ascending counter order. A group of equal counters collides and fails;
/// the first lone counter wins and every later sender hears its CTS and
/// fails. A failure at `e_max` rejects the packet.
struct RoundOracle<'a> {
    table: &'a BackoffTable,
    n: usize,
    memo: HashMap<Vec<Option<u8>>, Vec<Vec<f64>>>,
}

impl<'a> RoundOracle<'a> {
    fn new(table: &'a BackoffTable, n: usize) -> Self {
        Self {
            table,
            n,
            memo: HashMap::new(),
        }
    }

    /// `out[i][k]` for `k <= e_max`: sender `i` succeeds after `k` failures;
    /// `out[i][e_max + 1]`: rejected. `None` marks a resolved sender.
    fn solve(&mut self, es: Vec<Option<u8>>) -> Vec<Vec<f64>> {
        let width = usize::from(self.table.e_max()) + 2;
        if let Some(v) = self.memo.get(&es) {
            return v.clone();
        }
        let mut out = vec![vec![0.0; width]; self.n];
        let pending: Vec<usize> = (0..self.n).filter(|&i| es[i].is_some()).collect();
        if pending.is_empty() {
            return out;
        }
        let windows: Vec<Vec<u8>> = pending
            .iter()
            .map(|&i| {
                let w = self.table.window_for(es[i].unwrap()).unwrap();
                (w.lo()..=w.hi()).collect()
            })
            .collect();
        let total: usize = windows.iter().map(Vec::len).product();
        let weight = 1.0 / total as f64;
        for code in 0..total {
            let mut rest = code;
            let draws: Vec<u8> = windows
                .iter()
                .map(|w| {
                    let d = w[rest % w.len()];
                    rest /= w.len();
                    d
                })
                .collect();
            let winner = (0..pending.len())
                .filter(|&a| draws.iter().filter(|&&d| d == draws[a]).count() == 1)
                .min_by_key(|&a| draws[a]);
            let mut next = es.clone();
            for (a, &i) in pending.iter().enumerate() {
                let e = es[i].unwrap();
                if Some(a) == winner {
                    out[i][usize::from(e)] += weight;
                    next[i] = None;
                } else if e == self.table.e_max() {
                    out[i][width - 1] += weight;
                    next[i] = None;
                } else {
                    next[i] = Some(e + 1);
                }
            }
            let sub = self.solve(next);
            for i in 0..self.n {
                for k in 0..width {
                    out[i][k] += weight * sub[i][k];
                }
            }
        }
        self.memo.insert(es, out.clone());
        out
    }
}

fn compare_with_oracle(cfg: &ScenarioConfig) {
    let n = usize::from(cfg.n_senders);
    let oracle = RoundOracle::new(&cfg.table, n).solve(vec![Some(0); n]);
    let model = dtmc::build(cfg).unwrap();
    assert!(model.deadlock_states().is_empty());
    for (i, expected) in oracle.iter().enumerate() {
        let p = properties::success_profile_exact(&model, i as u8, ProfileScope::WholeRun).unwrap();
        for (k, &want) in expected[..p.per_k.len()].iter().enumerate() {
            assert!((p.per_k[k] - want).abs() < 1e-9, "sender {i} k={k}: {} vs {want}", p.per_k[k]);
        }
        let reject = *expected.last().unwrap();
        assert!((p.reject - reject).abs() < 1e-9, "sender {i} reject: {} vs {reject}", p.reject);
    }
}

#[test]
fn two_senders_match_round_oracle() {
    compare_with_oracle(&ScenarioConfig::default().with_senders(2));
}

#[test]
fn three_senders_match_round_oracle() {
    compare_with_oracle(&ScenarioConfig::default().with_senders(3));
}

#[test]
fn small_table_matches_round_oracle() {
    // Tiny windows make repeated collisions and rejections likely.
    let w = |lo, hi| ContentionWindow::new(lo, hi, 2).unwrap();
    let table = BackoffTable::new(
        vec![
            TableRow { e_lo: 0, e_hi: 0, window: w(1, 2) },
            TableRow { e_lo: 1, e_hi: 2, window: w(0, 1) },
        ],
        2,
        2,
    )
    .unwrap();
    let mut cfg = ScenarioConfig::default().with_senders(3);
    cfg.table = table;
    compare_with_oracle(&cfg);
}

#[test]
fn first_round_enumeration() {
    // 49 equally likely draws on 1..=7: 21 wins for sender 1, 7 ties.
    let pairs: Vec<(u8, u8)> = (1..=7).flat_map(|a| (1..=7).map(move |b| (a, b))).collect();
    let win = pairs.iter().filter(|(a, b)| a < b).count() as f64 / 49.0;
    let model = dtmc::build(&ScenarioConfig::default()).unwrap();
    let p = properties::success_profile_exact(&model, 0, ProfileScope::WholeRun).unwrap();
    assert!((p.per_k[0] - win).abs() < 1e-9);
    assert!((win - 3.0 / 7.0).abs() < 1e-15);
}

#[test]
fn lone_sender_idle_is_linear_in_packets() {
    // Each packet waits 8 ticks per counter unit, counter uniform on 1..=7.
    let per_packet = 4.0 * 8.0 * 0.001714;
    for nmax in 0..=4u16 {
        let cfg = ScenarioConfig::default().with_senders(1).with_nmax(nmax);
        let t = properties::idle_listening_time(&cfg, 0).unwrap();
        assert!((t - f64::from(nmax) * per_packet).abs() < 1e-9, "nmax {nmax}: {t}");
    }
}

#[test]
fn lone_sender_idle_scales_with_contention_unit() {
    let cfg = ScenarioConfig::default().with_senders(1).with_tcu_ticks(13);
    let t = properties::idle_listening_time(&cfg, 0).unwrap();
    assert!((t - 4.0 * 13.0 * 0.001714).abs() < 1e-9, "{t}");
}
