//! Command-line front end: `check`, `sweep`, `simulate` and `dump`.
//!
//! Exit codes: 0 success, 1 a property verdict differs from its expected
//! value, 2 usage or configuration error, 3 resource limit (state cap, I/O),
//! 4 deadlock found.

pub mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::automata::{ScenarioConfig, SenderId};
use crate::dtmc::{self, Dtmc, DtmcError, DEFAULT_STATE_CAP};
use crate::monte_carlo::{self, SimError};
use crate::numfmt::sig12;
use crate::properties::{self, EvalMode, ProfileScope, StudySettings};
use config::{ConfigFileError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RESOURCE: i32 = 3;
pub const EXIT_DEADLOCK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ecomac", version, about = "Model checking and simulation of a contention backoff MAC")]
pub struct Cli {
    /// Scenario file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of simulation runs.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Also writes the reachable state space in dump format.
    #[arg(long = "dump-statespace", global = true, value_name = "PATH")]
    dump_statespace: Option<PathBuf>,
    /// Largest state space to build before giving up.
    #[arg(long = "state-cap", global = true, default_value_t = DEFAULT_STATE_CAP)]
    state_cap: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs the validity battery and reports deadlocks.
    Check,
    /// Evaluates a metric over a grid of parameter values.
    Sweep {
        /// `param=v1,v2,...` or `param=a..b` for n_senders, nmax_msg or
        /// tcu_ticks; repeat for a cartesian grid.
        #[arg(long = "sweep", required = true, value_name = "SPEC")]
        sweep: Vec<String>,
        #[arg(long, value_enum, default_value_t = Metric::Profile)]
        metric: Metric,
        /// One-based sender whose metric is reported.
        #[arg(long, default_value_t = 1)]
        sender: u8,
        /// Profile the first packet only instead of the whole run.
        #[arg(long)]
        first_packet: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimates, with analytic values when the chain is solvable.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the path of a deadlocked run.
        #[arg(long, value_name = "PATH")]
        trace_out: Option<PathBuf>,
    },
    /// Writes the reachable state space.
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Profile,
    Idle,
    Energy,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Deadlock(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Resource(_) => EXIT_RESOURCE,
            CliError::Deadlock(_) => EXIT_DEADLOCK,
        }
    }
}

impl From<ConfigFileError> for CliError {
    fn from(e: ConfigFileError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Resource(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Resource(e.to_string())
    }
}

impl From<DtmcError> for CliError {
    fn from(e: DtmcError) -> Self {
        match e {
            DtmcError::Config(_) | DtmcError::NegativeReward(_) => CliError::Config(e.to_string()),
            DtmcError::StateCap { .. } | DtmcError::NonConvergence { .. } => CliError::Resource(e.to_string()),
            DtmcError::TargetNotAlmostSure { .. } => CliError::Deadlock(e.to_string()),
        }
    }
}

impl From<properties::StudyError> for CliError {
    fn from(e: properties::StudyError) -> Self {
        use properties::StudyError as S;
        match e {
            S::Config(c) => CliError::Config(c.to_string()),
            S::Dtmc(d) => d.into(),
            S::Sim(s) => sim_error(s, None),
            S::NoSuchSender(_) => CliError::Config(e.to_string()),
        }
    }
}

fn sim_error(e: SimError, trace_path: Option<&Path>) -> CliError {
    match e {
        SimError::Config(_) | SimError::TooFewRuns(_) => CliError::Config(e.to_string()),
        SimError::StepLimit => CliError::Resource(e.to_string()),
        SimError::Deadlock { ref path, .. } => {
            let target = trace_path.map_or_else(|| PathBuf::from("deadlock_trace.txt"), Path::to_path_buf);
            let lines: Vec<String> = path.iter().map(state_line).collect();
            match write_lines(&target, &lines) {
                Ok(()) => CliError::Deadlock(format!("{e}; trace written to {}", target.display())),
                Err(io) => CliError::Deadlock(format!("{e}; could not write trace: {io}")),
            }
        }
    }
}

fn state_line(s: &crate::automata::GlobalState) -> String {
    crate::automata::label(s)
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn write_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            config::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = cli.runs {
        if runs < 2 {
            return Err(CliError::Config(format!(
                "--runs {runs} is too small for a confidence interval (need >= 2)"
            )));
        }
        cfg.n_runs = runs;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let cfg = load(cli)?;
    let dump = cli.dump_statespace.as_deref();
    let cap = cli.state_cap;
    match &cli.command {
        Command::Check => cmd_check(&cfg, cap, dump),
        Command::Sweep {
            sweep,
            metric,
            sender,
            first_packet,
            out,
        } => {
            let scope = if *first_packet {
                ProfileScope::FirstPacket
            } else {
                ProfileScope::WholeRun
            };
            cmd_sweep(&cfg, cap, sweep, *metric, *sender, scope, out.as_deref(), dump)
        }
        Command::Simulate { out, trace_out } => cmd_simulate(&cfg, cap, out.as_deref(), trace_out.as_deref(), dump),
        Command::Dump { out } => {
            let model = dtmc::build_with_cap(&cfg.scenario, cap)?;
            match out.as_deref().or(dump) {
                Some(path) => write_dump(&model, path)?,
                None => model.dump(BufWriter::new(io::stdout().lock()))?,
            }
            if let (Some(a), Some(b)) = (out.as_deref(), dump) {
                if a != b {
                    write_dump(&model, b)?;
                }
            }
            Ok(EXIT_OK)
        }
    }
}

fn write_dump(model: &Dtmc, path: &Path) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    model.dump(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_check(cfg: &RunConfig, cap: usize, dump: Option<&Path>) -> Result<i32, CliError> {
    let model = dtmc::build_with_cap(&cfg.scenario, cap)?;
    if let Some(path) = dump {
        write_dump(&model, path)?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "states: {}", model.num_states())?;
    writeln!(out, "transitions: {}", model.num_transitions())?;
    let deadlocks = model.find_deadlocks();
    writeln!(out, "deadlocks: {}", deadlocks.len())?;
    if let Some((_, trace)) = deadlocks.first() {
        writeln!(out, "shortest deadlock trace:")?;
        for line in properties::render_trace(&model, trace) {
            writeln!(out, "  {line}")?;
        }
    }
    let mut all_pass = true;
    for r in properties::validity_battery(&model) {
        all_pass &= r.pass;
        let expected = r.expected.map_or_else(|| "-".to_string(), |v| v.to_string());
        write!(
            out,
            "{} {}: expected {}, got {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            expected,
            r.actual
        )?;
        match &r.note {
            Some(note) => writeln!(out, " ({note})")?,
            None => writeln!(out)?,
        }
        if let Some(trace) = &r.witness {
            writeln!(out, "  counterexample:")?;
            for line in properties::render_trace(&model, trace) {
                writeln!(out, "    {line}")?;
            }
        }
    }
    out.flush()?;
    Ok(if !deadlocks.is_empty() {
        EXIT_DEADLOCK
    } else if all_pass {
        EXIT_OK
    } else {
        EXIT_PROPERTY
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    NSenders,
    NmaxMsg,
    TcuTicks,
}

fn parse_sweep(spec: &str) -> Result<(SweepParam, Vec<u16>), CliError> {
    let bad = |msg: String| CliError::Config(format!("--sweep {spec:?}: {msg}"));
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| bad("expected param=values".into()))?;
    let param = match name.trim() {
        "n_senders" => SweepParam::NSenders,
        "nmax_msg" => SweepParam::NmaxMsg,
        "tcu_ticks" => SweepParam::TcuTicks,
        other => return Err(bad(format!("cannot sweep {other:?} (use n_senders, nmax_msg or tcu_ticks)"))),
    };
    let parse = |s: &str| s.trim().parse::<u16>().map_err(|_| bad(format!("bad value {s:?}")));
    let values = match values.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b)?);
            if a > b {
                return Err(bad("empty range".into()));
            }
            (a..=b).collect()
        }
        None => values.split(',').map(parse).collect::<Result<Vec<_>, _>>()?,
    };
    Ok((param, values))
}

fn apply(base: &ScenarioConfig, point: &[(SweepParam, u16)]) -> Result<ScenarioConfig, CliError> {
    let mut c = base.clone();
    for &(param, v) in point {
        match param {
            SweepParam::NSenders => {
                c.n_senders = u8::try_from(v).map_err(|_| CliError::Config(format!("n_senders {v} too large")))?;
            }
            SweepParam::NmaxMsg => c.nmax_msg = v,
            SweepParam::TcuTicks => {
                c.tcu_ticks = v;
                c.tcu_variation = base.tcu_variation || v != c.nominal_tcu_ticks();
            }
        }
    }
    c.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(c)
}

/// Cartesian product in argument order, last parameter varying fastest.
fn grid(specs: &[(SweepParam, Vec<u16>)]) -> Vec<Vec<(SweepParam, u16)>> {
    specs.iter().fold(vec![Vec::new()], |acc, (param, values)| {
        acc.into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push((*param, v));
                    p
                })
            })
            .collect()
    })
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout()),
    };
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink))
}

fn opt(x: Option<f64>) -> String {
    x.map(sig12).unwrap_or_default()
}

fn dump_path(base: &Path, index: usize, points: usize) -> PathBuf {
    if points == 1 {
        base.to_path_buf()
    } else {
        let mut s = base.as_os_str().to_owned();
        s.push(format!(".{index}"));
        PathBuf::from(s)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    cfg: &RunConfig,
    cap: usize,
    specs: &[String],
    metric: Metric,
    sender: u8,
    scope: ProfileScope,
    out: Option<&Path>,
    dump: Option<&Path>,
) -> Result<i32, CliError> {
    let mut parsed = Vec::new();
    for spec in specs {
        let (param, values) = parse_sweep(spec)?;
        if parsed.iter().any(|(p, _)| *p == param) {
            return Err(CliError::Config(format!("{spec:?}: parameter swept twice")));
        }
        parsed.push((param, values));
    }
    if sender == 0 {
        return Err(CliError::Config("--sender is one-based".into()));
    }
    let sid: SenderId = sender - 1;
    let points = grid(&parsed);
    let configs = points
        .iter()
        .map(|p| apply(&cfg.scenario, p))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(c) = configs.iter().find(|c| sid >= c.n_senders) {
        return Err(CliError::Config(format!("sender {sender} does not exist with {} senders", c.n_senders)));
    }

    let mut w = csv_writer(out)?;
    let mut header = vec!["n_senders", "nmax_msg", "tcu_ticks", "sender"];
    header.extend_from_slice(match metric {
        Metric::Profile => &["k", "per_k", "cumulative", "per_k_se", "cumulative_se", "mode"],
        Metric::Idle => &["idle_time", "std_err", "deadlocks", "mode"],
        Metric::Energy => &["idle_time", "power_mw", "energy_mj", "std_err", "deadlocks", "mode"],
    });
    w.write_record(&header)?;

    let settings = StudySettings {
        exact_cap: cfg.exact_cap,
        n_runs: cfg.n_runs,
        seed: cfg.seed,
        state_cap: cap,
    };
    let mut deadlocked = Vec::new();
    for (idx, c) in configs.iter().enumerate() {
        let key = [
            c.n_senders.to_string(),
            c.nmax_msg.to_string(),
            c.tcu_ticks.to_string(),
            sender.to_string(),
        ];
        let exact = c.n_senders <= cfg.exact_cap;
        let model = if exact || dump.is_some() {
            Some(dtmc::build_with_cap(c, settings.state_cap)?)
        } else {
            None
        };
        if let (Some(m), Some(path)) = (&model, dump) {
            write_dump(m, &dump_path(path, idx, configs.len()))?;
        }
        let model = model.filter(|_| exact);
        let deadlocks = model.as_ref().map_or(0, |m| m.deadlock_states().len());
        if deadlocks > 0 {
            deadlocked.push(format!("n_senders={} nmax_msg={} tcu_ticks={}", c.n_senders, c.nmax_msg, c.tcu_ticks));
        }
        match metric {
            Metric::Profile => {
                let p = match &model {
                    Some(m) => properties::success_profile_exact(m, sid, scope)?,
                    None => properties::success_profile_sampled(c, sid, scope, settings.n_runs, settings.seed)?,
                };
                for k in 0..p.per_k.len() {
                    let mut row = key.to_vec();
                    row.extend([
                        k.to_string(),
                        sig12(p.per_k[k]),
                        sig12(p.cumulative[k]),
                        sig12(p.per_k_se[k]),
                        sig12(p.cumulative_se[k]),
                        p.mode.name().to_string(),
                    ]);
                    w.write_record(&row)?;
                }
            }
            Metric::Idle | Metric::Energy => {
                let (idle, se, mode) = match &model {
                    Some(_) if deadlocks > 0 => (None, None, EvalMode::Exact),
                    Some(m) => (Some(properties::idle_listening_time_on(m, sid)?), Some(0.0), EvalMode::Exact),
                    None => {
                        let agg = monte_carlo::simulate(c, settings.n_runs, settings.seed).map_err(|e| sim_error(e, None))?;
                        let m = agg
                            .get(&format!("idle_time_s{sender}"))
                            .expect("every sender has an idle metric");
                        (Some(m.mean), Some(m.std_err()), EvalMode::Sampled)
                    }
                };
                let mut row = key.to_vec();
                if metric == Metric::Idle {
                    row.extend([opt(idle), opt(se)]);
                } else {
                    let power = c.idle_power;
                    row.extend([
                        opt(idle),
                        sig12(power),
                        opt(idle.map(|t| properties::EnergyResult::new(t, power).energy_mj)),
                        opt(se.map(|s| s * power)),
                    ]);
                }
                row.extend([deadlocks.to_string(), mode.name().to_string()]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    if deadlocked.is_empty() {
        Ok(EXIT_OK)
    } else {
        for d in &deadlocked {
            eprintln!("deadlocks found at {d}");
        }
        Ok(EXIT_DEADLOCK)
    }
}

fn cmd_simulate(
    cfg: &RunConfig,
    cap: usize,
    out: Option<&Path>,
    trace_out: Option<&Path>,
    dump: Option<&Path>,
) -> Result<i32, CliError> {
    let c = &cfg.scenario;
    let default_trace = out.map(|p| {
        let mut s = p.as_os_str().to_owned();
        s.push(".deadlock.txt");
        PathBuf::from(s)
    });
    let trace_path = trace_out.map(Path::to_path_buf).or(default_trace);
    let agg = monte_carlo::simulate(c, cfg.n_runs, cfg.seed).map_err(|e| sim_error(e, trace_path.as_deref()))?;

    let model = if c.n_senders <= cfg.exact_cap || dump.is_some() {
        match dtmc::build_with_cap(c, cap) {
            Ok(m) => Some(m),
            Err(DtmcError::StateCap { cap }) if dump.is_none() => {
                eprintln!("note: state space exceeds {cap} states; analytic column omitted");
                None
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    if let (Some(m), Some(path)) = (&model, dump) {
        write_dump(m, path)?;
    }
    let analytic = match &model {
        Some(m) if c.n_senders <= cfg.exact_cap && m.deadlock_states().is_empty() => Some(properties::analytic_metrics(m)?),
        _ => None,
    };

    let mut w = csv_writer(out)?;
    let mut header = vec!["metric", "mean", "std", "ci95", "n_runs", "seed"];
    if analytic.is_some() {
        header.extend(["analytic", "delta_over_se"]);
    }
    w.write_record(&header)?;
    let comparison = analytic.as_ref().map(|a| properties::compare(&agg, a));
    for (i, m) in agg.metrics.iter().enumerate() {
        let mut row = vec![
            m.name.clone(),
            sig12(m.mean),
            sig12(m.std),
            sig12(m.ci95()),
            agg.n_runs.to_string(),
            agg.seed.to_string(),
        ];
        if let Some(cmp) = &comparison {
            row.push(sig12(cmp[i].analytic));
            row.push(sig12(cmp[i].delta_over_se));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    if let Some(cmp) = &comparison {
        for a in cmp.iter().filter(|a| !a.pass) {
            eprintln!(
                "warning: {} differs from the analytic value by {} standard errors",
                a.metric.name,
                sig12(a.delta_over_se)
            );
        }
    }
    Ok(EXIT_OK)
}
