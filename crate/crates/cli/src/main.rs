use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdiiot_core::harness::{
    check, read_results_csv, result_rows, run_replication, run_scenario, superframes, sweep, write_results_csv, Mode,
    RunOptions, Scenario, Summary, SweepKind, DEFAULT_LEVELS,
};
use sdiiot_core::netsim::write_trace_csv;
use sdiiot_core::qos::{validate, QosPolicy};

#[derive(Parser)]
#[command(name = "sdiiot", version, about = "Software-defined IIoT gateway testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every replication of a scenario and print per-class results.
    Run {
        scenario: PathBuf,
        /// Write the results CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a packet trace of replication 0.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep background intensity across modes.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LEVELS.to_vec())]
        levels: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["qos", "no_qos", "wan"], value_parser = parse_mode)]
        modes: Vec<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the acceptance properties; exit nonzero on failure.
        #[arg(long)]
        check: bool,
    },
    /// Summarize a results CSV.
    Summarize {
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Udp)]
        kind: KindArg,
        #[arg(long)]
        check: bool,
    },
    /// QoS policy tools.
    Policy {
        #[command(subcommand)]
        cmd: PolicyCmd,
    },
    /// TDMA schedule tools.
    Schedule {
        #[command(subcommand)]
        cmd: ScheduleCmd,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Validate a policy file; exit 0 iff it is valid.
    Check { policy: PathBuf },
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// Print every site's slot table as CSV.
    Dump { scenario: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Udp,
    Tcp,
}

impl From<KindArg> for SweepKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Udp => SweepKind::Udp,
            KindArg::Tcp => SweepKind::Tcp,
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (expected qos, no_qos or wan)"))
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn load_scenario(path: &Path) -> Res<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Scenario::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn output(path: &Option<PathBuf>) -> Res<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| format!("{}: {e}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

/// Prints check lines; true when all pass.
fn report_checks(summary: &Summary, kind: SweepKind) -> bool {
    let mut all = true;
    for c in check(summary, kind) {
        all &= c.pass;
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    all
}

fn run(cli: Cli) -> Res<bool> {
    match cli.cmd {
        Cmd::Run { scenario, out, trace } => {
            let s = load_scenario(&scenario)?;
            let reports = run_scenario(&s)?;
            let rows = result_rows(&reports);
            write_results_csv(&rows, output(&out)?)?;
            if let Some(path) = trace {
                let r = run_replication(&s, 0, &RunOptions { trace: true })?;
                write_trace_csv(&r.trace, BufWriter::new(File::create(&path)?))?;
            }
            if out.is_some() {
                print!("{}", Summary::from_rows(&rows)?.render());
            }
            Ok(true)
        }
        Cmd::Sweep {
            scenario,
            levels,
            modes,
            out,
            check,
        } => {
            let s = load_scenario(&scenario)?;
            let started = std::time::Instant::now();
            let reports = sweep(&s, &levels, &modes)?;
            let rows = result_rows(&reports);
            write_results_csv(&rows, output(&out)?)?;
            let summary = Summary::from_rows(&rows)?;
            if out.is_some() {
                print!("{}", summary.render());
                eprintln!("{} runs in {:.1}s", reports.len(), started.elapsed().as_secs_f64());
            }
            Ok(!check || report_checks(&summary, s.background.kind.into()))
        }
        Cmd::Summarize { csv, kind, check } => {
            let rows = read_results_csv(File::open(&csv).map_err(|e| format!("{}: {e}", csv.display()))?)?;
            let summary = Summary::from_rows(&rows)?;
            print!("{}", summary.render());
            Ok(!check || report_checks(&summary, kind.into()))
        }
        Cmd::Policy {
            cmd: PolicyCmd::Check { policy },
        } => {
            let text = std::fs::read_to_string(&policy).map_err(|e| format!("{}: {e}", policy.display()))?;
            let p = match QosPolicy::from_json(&text) {
                Ok(p) => p,
                Err(e) => {
                    println!("invalid: {e}");
                    return Ok(false);
                }
            };
            match validate(&p) {
                Ok(()) => {
                    println!("ok: version {} with {} rules", p.version, p.rules.len());
                    Ok(true)
                }
                Err(violations) => {
                    for v in violations {
                        println!("violation: {v}");
                    }
                    Ok(false)
                }
            }
        }
        Cmd::Schedule {
            cmd: ScheduleCmd::Dump { scenario },
        } => {
            let s = load_scenario(&scenario)?;
            let mut w = io::stdout().lock();
            writeln!(w, "device_id,kind,class,group,slot_index,slot_offset_ms")?;
            for frame in superframes(&s) {
                for a in &frame.slots {
                    writeln!(
                        w,
                        "{},{},{},{:?},{},{}",
                        a.device_id,
                        a.kind.as_str(),
                        a.class,
                        a.group,
                        a.slot_index,
                        a.offset.as_secs_f64() * 1e3
                    )?;
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
