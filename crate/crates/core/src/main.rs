use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdmsim::attack::{run_attack, run_suite, AttackKind};
use sdmsim::experiment::{sweep_cache, DEFAULT_SWEEP_SIZES};
use sdmsim::metrics::RunReport;
use sdmsim::sim::{self, AblationFlags, RunConfig};
use sdmsim::trace::{format_trace, gen_trace, load_trace_dir, GenParams, Pattern};
use sdmsim::{verify, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRACE: u8 = 3;
const EXIT_STRICT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "sdmsim",
    version,
    about = "Process-level isolation simulator for shared disaggregated memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and print its JSON report.
    Run {
        config: PathBuf,
        /// Directory of `*.trace` files; traces are generated from the
        /// config's workload section when absent.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Exit with status 4 when faults exceed `strict_fault_threshold`.
        #[arg(long)]
        strict: bool,
        /// Write the report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Generate a synthetic trace on stdout.
    GenTrace {
        pattern: Pattern,
        #[arg(long, default_value_t = 1 << 20)]
        pages: u64,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        remote_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        store_frac: f64,
        #[arg(long, default_value_t = 0.5)]
        mix: f64,
        #[arg(long, default_value_t = 0)]
        host: u8,
        #[arg(long, default_value_t = 1)]
        cores: u8,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run an attack script (or `all`) and print the verdict.
    Attack {
        kind: String,
        /// Remove one defense; repeatable.
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Sweep the permission-cache capacity.
    SweepCache {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Print CSV instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Run the built-in oracle and property checks.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Summarise a saved run report and optionally export CSVs.
    Report {
        run: PathBuf,
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, e: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Trace { .. } => EXIT_TRACE,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e)
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    if let Ok(v) = std::env::var("SDMSIM_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::new(EXIT_CONFIG, format!("SDMSIM_SEED is not an integer: `{v}`")))?;
    }
    Ok(cfg)
}

fn load_traces(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<Vec<sdmsim::trace::TraceRecord>>, Failure> {
    match dir {
        Some(d) => load_trace_dir(d, usize::from(cfg.hosts)).map_err(|e| Failure::new(EXIT_TRACE, e)),
        None => cfg.generate_traces().map_err(|e| Failure::new(EXIT_CONFIG, e)),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::from(Error::io(p, e))),
        None => {
            println!("{}", text.trim_end());
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            trace_dir,
            strict,
            out,
            csv_dir,
        } => {
            let cfg = load_config(&config)?;
            let traces = load_traces(&cfg, trace_dir.as_deref())?;
            let threshold = cfg.strict_fault_threshold;
            let output = sim::run(cfg, &traces).map_err(|e| match e {
                Error::Trace { .. } => Failure::new(EXIT_TRACE, e),
                Error::Config(_) => Failure::new(EXIT_CONFIG, e),
                other => Failure::from(other),
            })?;
            let report = output.report;
            emit(&report.to_json()?, out.as_deref())?;
            if let Some(dir) = csv_dir {
                report.export_csv(&dir)?;
            }
            if strict && report.totals.faults > threshold {
                return Err(Failure::new(
                    EXIT_STRICT,
                    format!("{} faults exceed the threshold of {threshold}", report.totals.faults),
                ));
            }
            Ok(())
        }
        Command::GenTrace {
            pattern,
            pages,
            ops,
            seed,
            remote_frac,
            store_frac,
            mix,
            host,
            cores,
            out,
        } => {
            let params = GenParams {
                pages,
                ops,
                remote_frac,
                store_frac,
                mix,
                host,
                cores,
                ..GenParams::default()
            };
            let trace = gen_trace(pattern, &params, seed).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            emit(&format_trace(&trace), out.as_deref())
        }
        Command::Attack { kind, ablate } => {
            let verdicts = if kind == "all" {
                if !ablate.is_empty() {
                    return Err(Failure::new(EXIT_CONFIG, "--ablate applies to a single attack"));
                }
                run_suite(true)?
            } else {
                let kind: AttackKind = kind.parse().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
                let mut flags = AblationFlags::default();
                for f in &ablate {
                    flags.set(f).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
                }
                vec![run_attack(kind, flags)?]
            };
            for v in &verdicts {
                println!("{}", serde_json::to_string(v).map_err(Error::from)?);
            }
            Ok(())
        }
        Command::SweepCache {
            config,
            sizes,
            trace_dir,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let traces = load_traces(&cfg, trace_dir.as_deref())?;
            let sizes = if sizes.is_empty() { DEFAULT_SWEEP_SIZES.to_vec() } else { sizes };
            let (sweep, _) = sweep_cache(&cfg, &sizes, &traces, None)?;
            emit(&if csv { sweep.to_csv()? } else { sweep.to_json()? }, None)
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed);
            for c in &checks {
                println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            match checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                n => Err(Failure::new(EXIT_FAILURE, format!("{n} check(s) failed"))),
            }
        }
        Command::Report { run, csv_dir } => {
            let report = RunReport::load(&run)?;
            print_summary(&report);
            if let Some(dir) = csv_dir {
                for p in report.export_csv(&dir)? {
                    println!("wrote {}", p.display());
                }
            }
            Ok(())
        }
    }
}

fn print_summary(r: &RunReport) {
    println!(
        "backend {}  seed {}  hosts {}  table entries {}",
        r.backend.as_str(),
        r.seed,
        r.hosts.len(),
        r.table_entries
    );
    for h in &r.hosts {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!(
            "host {:>3}: ops {} cycles {} cpi {} plpki {} hit {} perm/data flits {}/{} faults {}",
            h.host,
            h.ops,
            h.cycles,
            f(h.cpi_proxy),
            f(h.plpki),
            f(h.hit_ratio()),
            h.perm_flits,
            h.data_flits,
            h.fault_count()
        );
    }
    if let Some(b) = r.breakdown {
        println!(
            "breakdown: creation {:.4} lookup {:.4} enforcement {:.4}",
            b.creation, b.lookup, b.enforcement
        );
    }
    for (name, s) in &r.storage_overhead {
        println!("storage {name:<14} {:>14} B  {:.4}%", s.bytes, s.fraction_of_sdm * 100.0);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sdmsim: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
