//! Backoff arithmetic: the contention-window table indexed by the
//! unsuccessful-transmission count `e`, the uniform backoff-counter draw, and
//! the contention-unit duration.

use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Largest failure count in the shipped table.
pub const DEFAULT_E_MAX: u8 = 12;
/// Largest backoff counter in the shipped table.
pub const DEFAULT_B_MAX: u8 = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackoffError {
    #[error("failure count e={e} outside [0..{e_max}]")]
    EOutOfRange { e: u8, e_max: u8 },
    #[error("invalid window [{lo}..{hi}] (b_max = {b_max})")]
    InvalidWindow { lo: u8, hi: u8, b_max: u8 },
    #[error("invalid backoff table: {0}")]
    InvalidTable(String),
}

/// Inclusive interval of backoff-counter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentionWindow {
    lo: u8,
    hi: u8,
}

impl ContentionWindow {
    pub fn new(lo: u8, hi: u8, b_max: u8) -> Result<Self, BackoffError> {
        if lo > hi || hi > b_max {
            return Err(BackoffError::InvalidWindow { lo, hi, b_max });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> u8 {
        self.lo
    }

    pub fn hi(&self) -> u8 {
        self.hi
    }

    /// Number of admissible counter values.
    pub fn width(&self) -> u8 {
        self.hi - self.lo + 1
    }

    pub fn contains(&self, rbc: u8) -> bool {
        (self.lo..=self.hi).contains(&rbc)
    }
}

impl fmt::Display for ContentionWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

/// One table row: every `e` in `e_lo..=e_hi` draws from `window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TableRow {
    pub e_lo: u8,
    pub e_hi: u8,
    pub window: ContentionWindow,
}

/// Contention-window table `e -> [b_i..b_s]`.
///
/// Rows must partition `[0..e_max]` in ascending order, every window must
/// lie inside `[0..b_max]`, and window upper bounds never grow with `e`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackoffTable {
    rows: Vec<TableRow>,
    e_max: u8,
    b_max: u8,
}

impl BackoffTable {
    pub fn new(rows: Vec<TableRow>, e_max: u8, b_max: u8) -> Result<Self, BackoffError> {
        if rows.is_empty() {
            return Err(BackoffError::InvalidTable("no rows".into()));
        }
        let mut next_e: u16 = 0;
        let mut prev_hi: Option<u8> = None;
        for row in &rows {
            if row.e_lo > row.e_hi {
                return Err(BackoffError::InvalidTable(format!(
                    "row e={}..{} is empty",
                    row.e_lo, row.e_hi
                )));
            }
            if u16::from(row.e_lo) != next_e {
                return Err(BackoffError::InvalidTable(format!(
                    "row e={}..{} leaves a gap or overlap at e={}",
                    row.e_lo, row.e_hi, next_e
                )));
            }
            if row.window.hi > b_max || row.window.lo > row.window.hi {
                return Err(BackoffError::InvalidWindow {
                    lo: row.window.lo,
                    hi: row.window.hi,
                    b_max,
                });
            }
            if let Some(prev) = prev_hi {
                if row.window.hi > prev {
                    return Err(BackoffError::InvalidTable(format!(
                        "window upper bound grows from {} to {} at e={}",
                        prev, row.window.hi, row.e_lo
                    )));
                }
            }
            prev_hi = Some(row.window.hi);
            next_e = u16::from(row.e_hi) + 1;
        }
        if next_e != u16::from(e_max) + 1 {
            return Err(BackoffError::InvalidTable(format!(
                "rows cover [0..{}] but e_max is {}",
                next_e - 1,
                e_max
            )));
        }
        Ok(Self { rows, e_max, b_max })
    }

    pub fn rows(&self) -> &[TableRow] {
        &self.rows
    }

    pub fn e_max(&self) -> u8 {
        self.e_max
    }

    pub fn b_max(&self) -> u8 {
        self.b_max
    }

    /// The window used after `e` consecutive failures.
    pub fn window_for(&self, e: u8) -> Result<ContentionWindow, BackoffError> {
        self.rows
            .iter()
            .find(|row| (row.e_lo..=row.e_hi).contains(&e))
            .map(|row| row.window)
            .ok_or(BackoffError::EOutOfRange {
                e,
                e_max: self.e_max,
            })
    }

    /// Uniform mass function of the backoff counter for failure count `e`,
    /// as `(value, probability)` pairs in ascending value order.
    pub fn rbc_pmf(&self, e: u8) -> Result<Vec<(u8, f64)>, BackoffError> {
        let w = self.window_for(e)?;
        let p = 1.0 / f64::from(w.width());
        Ok((w.lo..=w.hi).map(|v| (v, p)).collect())
    }

    /// Draws a backoff counter uniformly from the window for `e`.
    pub fn sample_rbc<R: Rng + ?Sized>(&self, e: u8, rng: &mut R) -> Result<u8, BackoffError> {
        let w = self.window_for(e)?;
        Ok(rng.random_range(w.lo..=w.hi))
    }
}

impl Default for BackoffTable {
    /// The six-row table for `e_max = 12`, `b_max = 7`.
    fn default() -> Self {
        const ROWS: [(u8, u8, u8, u8); 6] = [
            (0, 1, 1, 7),
            (2, 3, 0, 7),
            (4, 6, 0, 6),
            (7, 8, 0, 5),
            (9, 10, 0, 4),
            (11, 12, 0, 3),
        ];
        let rows = ROWS
            .iter()
            .map(|&(e_lo, e_hi, lo, hi)| TableRow {
                e_lo,
                e_hi,
                window: ContentionWindow { lo, hi },
            })
            .collect();
        Self::new(rows, DEFAULT_E_MAX, DEFAULT_B_MAX).expect("default table is valid")
    }
}

/// Microsecond duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Micros(pub u64);

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} us", self.0)
    }
}

/// Radio timing constants that determine the contention unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingParams {
    /// Worst-case TX/RX turnaround.
    pub t_mxsrt: Micros,
    /// Control frame (RTS/CTS) air time.
    pub t_frmctrl: Micros,
    pub t_rssi: Micros,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            t_mxsrt: Micros(850),
            t_frmctrl: Micros(12_000),
            t_rssi: Micros(12),
        }
    }
}

/// Contention unit: two turnarounds, one control frame and one RSSI window.
pub fn compute_tcu(p: &TimingParams) -> Micros {
    Micros(2 * p.t_mxsrt.0 + p.t_frmctrl.0 + p.t_rssi.0)
}
