//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::harness::{self, ExperimentConfig, SuiteConfig};
use crate::pseudo::{pseudo_trace, write_trace_csv};
use crate::snapshot::read_snapshots;
use crate::verify;

#[derive(Parser, Debug)]
#[command(name = "bflo", version, about = "Gaussian belief flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run a datasets × noise × learners grid and rank the learners.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the closed-form flows against the numerical oracle.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract the pseudo-dataset trace from a snapshot file.
    Trace {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            runs,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            let Some(out) = out.or_else(|| cfg.output_dir.clone()) else {
                bail!("no output directory: pass --out or set output_dir");
            };
            let s = harness::run_experiment(&cfg, &out)?;
            let se = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            println!(
                "{}: online {:.2}% (±{}), final {:.2}% (±{}) over {} run(s) -> {}",
                s.name,
                s.aggregate.online_error.mean,
                se(s.aggregate.online_error.std_err),
                s.aggregate.final_error.mean,
                se(s.aggregate.final_error.std_err),
                s.aggregate.runs,
                out.display()
            );
            Ok(0)
        }
        Command::Suite { config, out, runs, seed } => {
            let mut suite = SuiteConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(r) = runs {
                suite.runs = r;
            }
            if let Some(s) = seed {
                suite.base_seed = s;
            }
            let s = harness::run_suite(&suite, &out)?;
            println!("{:<14} {:>6} {:<22} {:>9} {:>9} {:>6} {:>6}", "dataset", "noise", "learner", "online%", "final%", "r_on", "r_fin");
            for r in &s.rows {
                println!(
                    "{:<14} {:>6} {:<22} {:>9.2} {:>9.2} {:>6.1} {:>6.1}",
                    r.dataset, r.noise, r.learner, r.online_error.mean, r.final_error.mean, r.online_rank, r.final_rank
                );
            }
            for m in &s.mean_ranks {
                println!("mean rank {:<22} noise {:>4}: online {:.2}, final {:.2}", m.learner, m.noise, m.online_rank, m.final_rank);
            }
            Ok(0)
        }
        Command::Verify { dims, cases, seed } => {
            if dims.is_empty() || cases == 0 {
                bail!("need at least one dimension and one case");
            }
            let mut ok = true;
            for &d in &dims {
                if d == 0 {
                    bail!("dimensions must be positive");
                }
                let r = verify::oracle_gap(d, cases, seed);
                println!(
                    "d={} cases={} max_kl_gap_full={:.3e} max_kl_gap_diagonal={:.3e} max_residual={:.3e} {}",
                    r.dim,
                    r.cases,
                    r.max_gap_full,
                    r.max_gap_diagonal,
                    r.max_residual,
                    if r.passes() { "ok" } else { "FAIL" }
                );
                ok &= r.passes();
            }
            let c = verify::constraint_violation(&dims, cases, seed);
            let c_ok = c <= verify::CONSTRAINT_TOLERANCE;
            println!("max_constraint_violation={c:.3e} {}", if c_ok { "ok" } else { "FAIL" });
            Ok(if ok && c_ok { 0 } else { 1 })
        }
        Command::Trace { snapshots, out } => {
            let file = fs::File::open(&snapshots).with_context(|| format!("opening {}", snapshots.display()))?;
            let snaps = read_snapshots(std::io::BufReader::new(file))?;
            let trace = pseudo_trace(&snaps)?;
            let w = BufWriter::new(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            write_trace_csv(&trace, w)?;
            let points = trace.iter().filter(|e| e.datapoint.is_some()).count();
            println!("{} rounds, {} pseudo datapoints -> {}", trace.len(), points, out.display());
            Ok(0)
        }
    }
}
