//! Load sweeps over background intensity, results CSV and the summary checks
//! run against it.

use std::collections::BTreeMap;
use std::io;
use std::sync::mpsc;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::scenario::{Mode, Scenario, ScenarioError};
use super::world::{run_replication, RunOptions, RunReport};
use crate::messages::FlowClass;
use crate::netsim::BackgroundKind;

pub const RESULTS_HEADER: [&str; 12] = [
    "level",
    "mode",
    "flow_class",
    "replication",
    "mean_us",
    "p50_us",
    "p95_us",
    "p99_us",
    "sent",
    "delivered",
    "dropped",
    "success_rate",
];

pub const DEFAULT_LEVELS: [usize; 5] = [0, 5, 10, 20, 30];

/// Runs `jobs` on all available cores. Results come back in job order.
pub fn run_parallel(jobs: Vec<(Scenario, u32)>, opts: &RunOptions) -> Result<Vec<RunReport>, ScenarioError> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next) = (&jobs, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((s, r)) = jobs.get(i) else { break };
                let res = run_replication(s, *r, opts).map_err(|e| ScenarioError::AtLevel {
                    level: s.background.n_flows,
                    source: Box::new(e),
                });
                if tx.send((i, res)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut out: Vec<Option<RunReport>> = (0..jobs.len()).map(|_| None).collect();
    for (i, res) in rx {
        out[i] = Some(res?);
    }
    Ok(out.into_iter().map(|r| r.expect("every job reports")).collect())
}

/// Runs every replication of `base` at each background level in each mode.
pub fn sweep(base: &Scenario, levels: &[usize], modes: &[Mode]) -> Result<Vec<RunReport>, ScenarioError> {
    base.validate()?;
    let mut jobs = Vec::new();
    for &level in levels {
        for &mode in modes {
            let s = base.with_mode(mode).with_level(level);
            for r in 0..s.replications {
                jobs.push((s.clone(), r));
            }
        }
    }
    run_parallel(jobs, &RunOptions::default())
}

/// One results CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub level: usize,
    pub mode: String,
    pub flow_class: String,
    pub replication: u32,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub success_rate: f64,
}

/// Flattens reports into rows sorted by level, mode, class, replication.
pub fn result_rows(reports: &[RunReport]) -> Vec<ResultRow> {
    let mut keyed: Vec<_> = reports
        .iter()
        .flat_map(|r| {
            r.stats.iter().map(move |st| {
                let key = (r.level, r.mode, st.flow_class as usize, r.replication);
                let row = ResultRow {
                    level: r.level,
                    mode: r.mode.as_str().to_string(),
                    flow_class: st.flow_class.as_str().to_string(),
                    replication: r.replication,
                    mean_us: st.mean_us,
                    p50_us: st.p50_us,
                    p95_us: st.p95_us,
                    p99_us: st.p99_us,
                    sent: st.sent,
                    delivered: st.delivered,
                    dropped: st.dropped,
                    success_rate: st.success_rate,
                };
                (key, row)
            })
        })
        .collect();
    keyed.sort_by_key(|a| a.0);
    keyed.into_iter().map(|(_, r)| r).collect()
}

/// Writes rows with fixed precision so equal runs give identical bytes.
pub fn write_results_csv<W: io::Write>(rows: &[ResultRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.level.to_string(),
            r.mode.clone(),
            r.flow_class.clone(),
            r.replication.to_string(),
            format!("{:.3}", r.mean_us),
            format!("{:.3}", r.p50_us),
            format!("{:.3}", r.p95_us),
            format!("{:.3}", r.p99_us),
            r.sent.to_string(),
            r.delivered.to_string(),
            r.dropped.to_string(),
            format!("{:.6}", r.success_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: io::Read>(input: R) -> csv::Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Replications of one (level, mode, class) cell pooled together.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cell {
    /// Mean latency weighted by delivered count.
    pub mean_us: f64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl Cell {
    pub fn success_rate(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.delivered as f64 / self.sent as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Summary {
    cells: BTreeMap<(usize, Mode, FlowClass), Cell>,
}

impl Summary {
    pub fn from_rows(rows: &[ResultRow]) -> Result<Summary, String> {
        let mut acc: BTreeMap<(usize, Mode, FlowClass), (f64, Cell)> = BTreeMap::new();
        for r in rows {
            let mode = Mode::parse(&r.mode).ok_or_else(|| format!("unknown mode {:?}", r.mode))?;
            let class = FlowClass::parse(&r.flow_class).ok_or_else(|| format!("unknown flow class {:?}", r.flow_class))?;
            let (weighted, cell) = acc.entry((r.level, mode, class)).or_default();
            *weighted += r.mean_us * r.delivered as f64;
            cell.sent += r.sent;
            cell.delivered += r.delivered;
            cell.dropped += r.dropped;
        }
        let cells = acc
            .into_iter()
            .map(|(k, (w, mut c))| {
                c.mean_us = if c.delivered == 0 { 0.0 } else { w / c.delivered as f64 };
                (k, c)
            })
            .collect();
        Ok(Summary { cells })
    }

    pub fn cell(&self, level: usize, mode: Mode, class: FlowClass) -> Option<&Cell> {
        self.cells.get(&(level, mode, class))
    }

    fn mean(&self, level: usize, mode: Mode, class: FlowClass) -> Option<f64> {
        self.cell(level, mode, class).filter(|c| c.delivered > 0).map(|c| c.mean_us)
    }

    pub fn levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }

    pub fn modes(&self) -> Vec<Mode> {
        let mut v: Vec<Mode> = self.cells.keys().map(|k| k.1).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Relative reduction of `class` mean latency going from no_qos to qos.
    pub fn reduction(&self, level: usize, class: FlowClass) -> Option<f64> {
        let nq = self.mean(level, Mode::NoQos, class)?;
        let q = self.mean(level, Mode::Qos, class)?;
        (nq > 0.0).then(|| (nq - q) / nq)
    }

    /// Human-readable latency curves, reductions and success rates.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for class in FlowClass::ALL {
            if !self.cells.keys().any(|k| k.2 == class) {
                continue;
            }
            let _ = writeln!(s, "{}", class.as_str());
            let _ = write!(s, "  {:>5}", "level");
            for m in self.modes() {
                let _ = write!(s, " {:>12} {:>8}", format!("{}_us", m.as_str()), "success");
            }
            let _ = writeln!(s, " {:>9}", "reduction");
            for level in self.levels() {
                let _ = write!(s, "  {level:>5}");
                for m in self.modes() {
                    match self.cell(level, m, class) {
                        Some(c) => {
                            let _ = write!(s, " {:>12.1} {:>8.4}", c.mean_us, c.success_rate());
                        }
                        None => {
                            let _ = write!(s, " {:>12} {:>8}", "-", "-");
                        }
                    }
                }
                match self.reduction(level, class) {
                    Some(r) => {
                        let _ = writeln!(s, " {:>8.1}%", r * 100.0);
                    }
                    None => {
                        let _ = writeln!(s, " {:>9}", "-");
                    }
                }
            }
        }
        s
    }
}

/// Which background transport a results file was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Udp,
    Tcp,
}

impl From<BackgroundKind> for SweepKind {
    fn from(k: BackgroundKind) -> Self {
        match k {
            BackgroundKind::UdpLike => SweepKind::Udp,
            BackgroundKind::TcpLike => SweepKind::Tcp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, failures: Vec<String>, ok: String) -> Self {
        let pass = failures.is_empty();
        CheckOutcome {
            name,
            pass,
            detail: if pass { ok } else { failures.join("; ") },
        }
    }
}

fn missing(what: &str, level: usize, mode: Mode) -> String {
    format!("no {what} data for {mode} at level {level}")
}

/// COAP_PV success stays at 1.0 in qos mode while background loses packets
/// at heavy load.
pub fn check_coap_success(s: &Summary) -> CheckOutcome {
    let mut fails = Vec::new();
    for level in s.levels() {
        match s.cell(level, Mode::Qos, FlowClass::CoapPv) {
            Some(c) if c.sent > 0 && c.delivered == c.sent => {}
            Some(c) => fails.push(format!("level {level}: COAP_PV {}/{} delivered", c.delivered, c.sent)),
            None => fails.push(missing("COAP_PV", level, Mode::Qos)),
        }
        if level >= 20 {
            match s.cell(level, Mode::Qos, FlowClass::Background) {
                Some(c) if c.dropped > 0 => {}
                _ => fails.push(format!("level {level}: no background drops")),
            }
        }
    }
    CheckOutcome::new("coap success under load", fails, "COAP_PV success 1.0 at every level".into())
}

/// qos cuts `class` latency by at least `floor` at levels >= 10; with
/// `monotone`, no_qos latency must not fall as load rises.
pub fn check_reduction(s: &Summary, class: FlowClass, floor: f64, monotone: bool) -> CheckOutcome {
    let mut fails = Vec::new();
    let mut worst = f64::INFINITY;
    for level in s.levels().into_iter().filter(|l| *l >= 10) {
        match s.reduction(level, class) {
            Some(r) => {
                worst = worst.min(r);
                if r < floor {
                    fails.push(format!("level {level}: reduction {:.1}% < {:.0}%", r * 100.0, floor * 100.0));
                }
            }
            None => fails.push(format!("level {level}: missing {} data", class.as_str())),
        }
    }
    if monotone {
        let curve: Vec<(usize, f64)> = s
            .levels()
            .into_iter()
            .filter_map(|l| s.mean(l, Mode::NoQos, class).map(|m| (l, m)))
            .collect();
        for w in curve.windows(2) {
            if w[1].1 < w[0].1 {
                fails.push(format!("no_qos mean falls from {:.1} at {} to {:.1} at {}", w[0].1, w[0].0, w[1].1, w[1].0));
            }
        }
    }
    CheckOutcome::new(
        "qos latency reduction",
        fails,
        format!("minimum {} reduction {:.1}%", class.as_str(), worst * 100.0),
    )
}

/// `mode` mean latency of `class` at level `hi` is at most `ratio` times the
/// value at `lo` (or at least, with `at_least`).
pub fn check_ratio(
    s: &Summary,
    name: &'static str,
    class: FlowClass,
    mode: Mode,
    (lo, hi): (usize, usize),
    ratio: f64,
    at_least: bool,
) -> CheckOutcome {
    let (Some(a), Some(b)) = (s.mean(lo, mode, class), s.mean(hi, mode, class)) else {
        return CheckOutcome::new(name, vec![format!("missing {mode} data at levels {lo}/{hi}")], String::new());
    };
    let r = b / a;
    let ok = if at_least { r >= ratio } else { r <= ratio };
    let detail = format!("{mode} {} level {hi}/{lo} = {r:.3}", class.as_str());
    CheckOutcome::new(name, if ok { vec![] } else { vec![detail.clone()] }, detail)
}

/// `|hi/lo - 1| <= tol` for `mode` mean latency.
pub fn check_steady(s: &Summary, name: &'static str, class: FlowClass, mode: Mode, (lo, hi): (usize, usize), tol: f64) -> CheckOutcome {
    let (Some(a), Some(b)) = (s.mean(lo, mode, class), s.mean(hi, mode, class)) else {
        return CheckOutcome::new(name, vec![format!("missing {mode} data at levels {lo}/{hi}")], String::new());
    };
    let dev = (b / a - 1.0).abs();
    let detail = format!("{mode} {} level {hi} vs {lo}: {:.1}% apart", class.as_str(), dev * 100.0);
    CheckOutcome::new(name, if dev <= tol { vec![] } else { vec![detail.clone()] }, detail)
}

/// WS latency exceeds CoAP latency in no_qos mode at every level.
pub fn check_ws_above_coap(s: &Summary) -> CheckOutcome {
    let mut fails = Vec::new();
    for level in s.levels() {
        match (s.mean(level, Mode::NoQos, FlowClass::WsReading), s.mean(level, Mode::NoQos, FlowClass::CoapPv)) {
            (Some(ws), Some(coap)) if ws > coap => {}
            (Some(ws), Some(coap)) => fails.push(format!("level {level}: WS {ws:.1} <= CoAP {coap:.1}")),
            _ => fails.push(missing("WS/CoAP", level, Mode::NoQos)),
        }
    }
    CheckOutcome::new("ws above coap", fails, "WS slower than CoAP at every level".into())
}

/// wan is slower than both controlled modes for each of `classes` at every
/// level.
pub fn check_wan_ordering(s: &Summary, classes: &[FlowClass]) -> CheckOutcome {
    let mut fails = Vec::new();
    for level in s.levels() {
        for &class in classes {
            let Some(wan) = s.mean(level, Mode::Wan, class) else {
                fails.push(missing(class.as_str(), level, Mode::Wan));
                continue;
            };
            for m in [Mode::Qos, Mode::NoQos] {
                match s.mean(level, m, class) {
                    Some(v) if wan > v => {}
                    Some(v) => fails.push(format!("level {level} {}: wan {wan:.1} <= {m} {v:.1}", class.as_str())),
                    None => fails.push(missing(class.as_str(), level, m)),
                }
            }
        }
    }
    CheckOutcome::new("wan ordering", fails, "wan slowest at every level".into())
}

/// The acceptance checks applicable to a sweep of `kind`.
pub fn check(s: &Summary, kind: SweepKind) -> Vec<CheckOutcome> {
    match kind {
        SweepKind::Udp => vec![
            check_coap_success(s),
            check_reduction(s, FlowClass::CoapPv, 0.20, true),
            check_ratio(s, "qos flatness", FlowClass::CoapPv, Mode::Qos, (10, 30), 1.15, false),
            check_wan_ordering(s, &[FlowClass::CoapPv]),
        ],
        SweepKind::Tcp => vec![
            check_steady(s, "ws steady under qos", FlowClass::WsReading, Mode::Qos, (0, 20), 0.10),
            check_ratio(s, "ws blowup without qos", FlowClass::WsReading, Mode::NoQos, (10, 30), 1.5, true),
            check_ws_above_coap(s),
            {
                let mut c = check_reduction(s, FlowClass::WsReading, 0.15, false);
                c.name = "ws latency reduction";
                c
            },
            check_wan_ordering(s, &[FlowClass::WsReading]),
        ],
    }
}
