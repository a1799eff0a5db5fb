//! `key = value` scenario files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors; omitted keys keep their defaults, and `tcu_ticks`
//! defaults to `2*d_switch + d_frame + d_rssi`.

use std::str::FromStr;

use thiserror::Error;

use crate::automata::ScenarioConfig;
use crate::backoff::{BackoffTable, ContentionWindow, TableRow};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigFileError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Scenario(String),
}

/// A parsed scenario file: the model parameters plus run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub n_runs: usize,
    pub exact_cap: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            seed: 1,
            n_runs: 100_000,
            exact_cap: 4,
        }
    }
}

pub const KEYS: [&str; 17] = [
    "n_senders",
    "nmax_msg",
    "tcu_ticks",
    "d_switch",
    "d_frame",
    "d_rssi",
    "cts_timeout",
    "seconds_per_tick",
    "idle_power_mw",
    "e_max",
    "b_max",
    "window_table",
    "seed",
    "n_runs",
    "exact_cap",
    "robust_mode",
    "tcu_variation",
];

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigFileError> {
    v.parse().map_err(|_| ConfigFileError::Line {
        line,
        msg: format!("{key}: cannot parse {v:?}"),
    })
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool, ConfigFileError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigFileError::Line {
            line,
            msg: format!("{key}: expected true or false, got {v:?}"),
        }),
    }
}

fn range(s: &str) -> Option<(u8, u8)> {
    let (a, b) = s.split_once("..")?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Rows `e_lo..e_hi: b_lo..b_hi` separated by `;`.
fn window_rows(line: usize, v: &str) -> Result<Vec<TableRow>, ConfigFileError> {
    let err = |msg: String| ConfigFileError::Line { line, msg };
    v.split(';')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|row| {
            let (es, bs) = row
                .split_once(':')
                .ok_or_else(|| err(format!("window_table row {row:?} lacks ':'")))?;
            let (e_lo, e_hi) =
                range(es).ok_or_else(|| err(format!("window_table row {row:?}: bad e range")))?;
            let (b_lo, b_hi) =
                range(bs).ok_or_else(|| err(format!("window_table row {row:?}: bad window")))?;
            let window = ContentionWindow::new(b_lo, b_hi, u8::MAX).map_err(|e| err(e.to_string()))?;
            Ok(TableRow { e_lo, e_hi, window })
        })
        .collect()
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigFileError> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut tcu_ticks: Option<(usize, u16)> = None;
    let mut tcu_variation = None;
    let mut e_max = None;
    let mut b_max = None;
    let mut table: Option<(usize, Vec<TableRow>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigFileError::Line {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let (key, v) = (key.trim(), value.trim());
        let Some(&key) = KEYS.iter().find(|&&k| k == key) else {
            return Err(ConfigFileError::Line {
                line,
                msg: format!("unknown key {key:?}"),
            });
        };
        if seen.contains(&key) {
            return Err(ConfigFileError::Line {
                line,
                msg: format!("duplicate key {key:?}"),
            });
        }
        seen.push(key);
        let s = &mut cfg.scenario;
        match key {
            "n_senders" => s.n_senders = num(line, key, v)?,
            "nmax_msg" => s.nmax_msg = num(line, key, v)?,
            "tcu_ticks" => tcu_ticks = Some((line, num(line, key, v)?)),
            "d_switch" => s.d_switch = num(line, key, v)?,
            "d_frame" => s.d_frame = num(line, key, v)?,
            "d_rssi" => s.d_rssi = num(line, key, v)?,
            "cts_timeout" => s.cts_timeout = num(line, key, v)?,
            "seconds_per_tick" => s.seconds_per_tick = num(line, key, v)?,
            "idle_power_mw" => s.idle_power = num(line, key, v)?,
            "e_max" => e_max = Some((line, num::<u8>(line, key, v)?)),
            "b_max" => b_max = Some((line, num::<u8>(line, key, v)?)),
            "window_table" => table = Some((line, window_rows(line, v)?)),
            "seed" => cfg.seed = num(line, key, v)?,
            "n_runs" => cfg.n_runs = num(line, key, v)?,
            "exact_cap" => cfg.exact_cap = num(line, key, v)?,
            "robust_mode" => s.robust_mode = boolean(line, key, v)?,
            "tcu_variation" => tcu_variation = Some(boolean(line, key, v)?),
            _ => unreachable!("key list and match arms agree"),
        }
    }

    let s = &mut cfg.scenario;
    match table {
        Some((line, rows)) => {
            let covered = rows.last().map_or(0, |r| r.e_hi);
            let widest = rows.iter().map(|r| r.window.hi()).max().unwrap_or(0);
            let e = e_max.map_or(covered, |(_, e)| e);
            let b = b_max.map_or(widest, |(_, b)| b);
            s.table = BackoffTable::new(rows, e, b).map_err(|err| ConfigFileError::Line {
                line,
                msg: err.to_string(),
            })?;
        }
        None => {
            for (given, current, name) in [(e_max, s.e_max(), "e_max"), (b_max, s.b_max(), "b_max")] {
                if let Some((line, v)) = given {
                    if v != current {
                        return Err(ConfigFileError::Line {
                            line,
                            msg: format!("{name} = {v} differs from the default table ({current}); give a window_table"),
                        });
                    }
                }
            }
        }
    }
    match tcu_ticks {
        Some((_, t)) => {
            s.tcu_ticks = t;
            s.tcu_variation = tcu_variation.unwrap_or(t != s.nominal_tcu_ticks());
        }
        None => {
            s.tcu_ticks = s.nominal_tcu_ticks();
            s.tcu_variation = tcu_variation.unwrap_or(false);
        }
    }
    s.validate().map_err(|e| ConfigFileError::Scenario(e.to_string()))?;
    if cfg.n_runs < 2 {
        return Err(ConfigFileError::Scenario(format!(
            "n_runs = {} is too small for a confidence interval (need >= 2)",
            cfg.n_runs
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(!c.scenario.tcu_variation);
    }

    #[test]
    fn full_file() {
        let text = "n_senders = 3\nnmax_msg=2\nd_frame = 4\ncts_timeout = 3\nseed = 9\nn_runs = 50\n\
                    idle_power_mw = 10\nexact_cap = 2\nrobust_mode = true\n\
                    window_table = 0..0: 1..3; 1..2: 0..3\n";
        let c = parse(text).unwrap();
        assert_eq!(c.scenario.n_senders, 3);
        assert_eq!(c.scenario.tcu_ticks, 7);
        assert_eq!(c.scenario.e_max(), 2);
        assert_eq!(c.scenario.b_max(), 3);
        assert_eq!(c.scenario.idle_power, 10.0);
        assert!(c.scenario.robust_mode);
        assert_eq!((c.seed, c.n_runs, c.exact_cap), (9, 50, 2));
    }

    #[test]
    fn varied_contention_unit() {
        let c = parse("tcu_ticks = 13").unwrap();
        assert!(c.scenario.tcu_variation);
        let err = parse("tcu_ticks = 13\ntcu_variation = false").unwrap_err();
        assert!(matches!(err, ConfigFileError::Scenario(_)));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse("n_senders = 2\nbogus = 1\n").unwrap_err(),
            ConfigFileError::Line {
                line: 2,
                msg: "unknown key \"bogus\"".into()
            }
        );
        assert!(matches!(parse("\n\nn_senders = two").unwrap_err(), ConfigFileError::Line { line: 3, .. }));
        assert!(matches!(parse("seed = 1\nseed = 2").unwrap_err(), ConfigFileError::Line { line: 2, .. }));
        assert!(matches!(parse("no equals sign").unwrap_err(), ConfigFileError::Line { line: 1, .. }));
        assert!(matches!(parse("e_max = 5").unwrap_err(), ConfigFileError::Line { line: 1, .. }));
        // Upper bound grows from 3 to 5.
        assert!(matches!(
            parse("window_table = 0..0: 1..3; 1..1: 1..5").unwrap_err(),
            ConfigFileError::Line { line: 1, .. }
        ));
    }

    #[test]
    fn too_few_runs() {
        assert!(matches!(parse("n_runs = 1").unwrap_err(), ConfigFileError::Scenario(_)));
    }
}
