//! `segmem` command line: classify IR programs, explain execution plans and
//! run the shipped workloads.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use segmem::classify::classify_program;
use segmem::engine::workloads::{
    load_input, run_random, run_workload, Params, Prepared, WORKLOADS,
};
use segmem::engine::{EngineConfig, EngineError, Mode, RunOutcome};
use segmem::ir::{parse_program, Analysis};

#[derive(Debug, Parser)]
#[command(
    name = "segmem",
    version,
    about = "Size-type analysis and page-based memory management for a small dataflow engine"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Print the size-type of every composite type at every scope.
    Classify {
        /// IR program file.
        path: PathBuf,
        /// Only print verdicts for this `stage/phase` (or `stage`) scope.
        #[arg(long, value_name = "STAGE/PHASE")]
        phase: Option<String>,
        /// Tab-separated `type scope verdict evidence` records.
        #[arg(long)]
        machine: bool,
    },
    /// Print the execution plan: verdicts, layouts and decisions per container.
    Explain {
        /// Workload name or IR program file.
        workload: String,
    },
    /// Execute a workload and write a JSON-lines report.
    Run {
        /// Workload name (wc, lr, kmeans, pr) or IR program file.
        workload: String,
        #[command(flatten)]
        cfg: RunArgs,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// object | decomposed
    #[arg(long, env = "SEGMEM_MODE", default_value = "decomposed")]
    mode: String,
    /// Page capacity in bytes (suffixes K, M, G).
    #[arg(long, env = "SEGMEM_PAGE_SIZE", default_value = "64K", value_parser = parse_size)]
    page_size: usize,
    /// Memory budget in bytes (suffixes K, M, G).
    #[arg(long, env = "SEGMEM_BUDGET", default_value = "256M", value_parser = parse_size)]
    budget: usize,
    /// Share of the budget for cache blocks; shuffle buffers get the rest.
    #[arg(long, env = "SEGMEM_CACHE_FRAC", default_value_t = 0.6)]
    cache_frac: f64,
    /// Directory for spill runs and swap files.
    #[arg(long, env = "SEGMEM_SPILL_DIR")]
    spill_dir: Option<PathBuf>,
    #[arg(long, env = "SEGMEM_PARTITIONS", default_value_t = 4)]
    partitions: usize,
    #[arg(long, env = "SEGMEM_SEED", default_value_t = 1)]
    seed: u64,
    /// JSON-lines report path; `-` writes it to stdout.
    #[arg(long, env = "SEGMEM_REPORT")]
    report: Option<PathBuf>,
    /// Read workload input from a text file instead of generating it.
    #[arg(long, env = "SEGMEM_INPUT")]
    input: Option<PathBuf>,
    /// Use the reduced generator sizes.
    #[arg(long, env = "SEGMEM_SMALL")]
    small: bool,
    /// Random records fed to an IR program file.
    #[arg(long, env = "SEGMEM_RECORDS", default_value_t = 100)]
    records: usize,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Engine(e) => e.exit_code() as u8,
            CliError::Io(_) => 3,
        }
    }
}

fn parse_size(s: &str) -> Result<usize, String> {
    let t = s.trim();
    let (num, shift) = match t.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        None => (t, 0),
        Some((i, _)) => {
            let shift = match t[i..].to_ascii_uppercase().as_str() {
                "B" => 0,
                "K" | "KB" | "KIB" => 10,
                "M" | "MB" | "MIB" => 20,
                "G" | "GB" | "GIB" => 30,
                u => return Err(format!("unknown size unit `{u}`")),
            };
            (&t[..i], shift)
        }
    };
    let n: usize = num.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| format!("`{s}` is too large"))
}

fn is_file(target: &str) -> bool {
    !WORKLOADS.contains(&target) && (target.ends_with(".ir") || Path::new(target).exists())
}

fn prepare(target: &str) -> Result<Prepared, CliError> {
    if is_file(target) {
        let src = std::fs::read_to_string(target)
            .map_err(|e| CliError::Usage(format!("{target}: {e}")))?;
        Ok(Prepared::from_source(&src)?)
    } else {
        Ok(Prepared::workload(target)?)
    }
}

fn classify(path: &Path, phase: Option<&str>, machine: bool) -> Result<(), CliError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let program = parse_program(&src).map_err(EngineError::from)?;
    let analysis = Analysis::new(&program).map_err(EngineError::from)?;
    let report = classify_program(&program, &analysis).map_err(EngineError::from)?;
    let text = if machine {
        report.render_machine(&program)
    } else {
        report.render(&program, true)
    };
    match phase {
        None => print!("{text}"),
        Some(scope) => {
            let known = program.job.stages.iter().any(|st| {
                st.name == scope
                    || st
                        .phases
                        .iter()
                        .any(|ph| format!("{}/{}", st.name, ph.name) == scope)
            });
            if !known {
                return Err(CliError::Usage(format!(
                    "no stage or phase `{scope}` in {}",
                    path.display()
                )));
            }
            // Verdict lines start at column 0; evidence lines are indented below them.
            let mut keep = false;
            for line in text.lines() {
                if !line.starts_with(' ') {
                    let mut cols = line.split(if machine { '\t' } else { ' ' });
                    keep = cols.nth(1) == Some(scope);
                }
                if keep {
                    println!("{line}");
                }
            }
        }
    }
    Ok(())
}

fn engine_config(a: &RunArgs) -> Result<EngineConfig, CliError> {
    let mode = Mode::parse(&a.mode).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown mode `{}`; expected object or decomposed",
            a.mode
        ))
    })?;
    let mut cfg = EngineConfig {
        mode,
        page_size: a.page_size,
        budget: a.budget,
        cache_frac: a.cache_frac,
        partitions: a.partitions,
        ..EngineConfig::default()
    };
    if let Some(d) = &a.spill_dir {
        cfg.spill_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(target: &str, a: &RunArgs) -> Result<(), CliError> {
    let cfg = engine_config(a)?;
    let prep = prepare(target)?;
    let out: RunOutcome = if is_file(target) {
        run_random(&prep, a.seed, a.records, cfg.clone())?
    } else {
        let params = if a.small {
            Params::small(a.seed)
        } else {
            Params {
                seed: a.seed,
                ..Params::default()
            }
        };
        let input = a
            .input
            .as_deref()
            .map(|p| load_input(target, p))
            .transpose()?;
        run_workload(target, &prep, &params, input, cfg.clone())?
    };
    let rep = report::Report::new(target, a, &cfg, &out);
    match a.report.as_deref() {
        Some(p) if p == Path::new("-") => rep.write(std::io::stdout().lock())?,
        Some(p) => rep.write(std::io::BufWriter::new(std::fs::File::create(p)?))?,
        None => {}
    }
    if a.report.as_deref() != Some(Path::new("-")) {
        print!("{}", rep.human());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let r = match &cli.cmd {
        Cmd::Classify {
            path,
            phase,
            machine,
        } => classify(path, phase.as_deref(), *machine),
        Cmd::Explain { workload } => prepare(workload).map(|p| print!("{}", p.plan.render())),
        Cmd::Run { workload, cfg } => run(workload, cfg),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_size;

    #[test]
    fn sizes_accept_binary_suffixes() {
        assert_eq!(parse_size("4096"), Ok(4096));
        assert_eq!(parse_size("64K"), Ok(64 << 10));
        assert_eq!(parse_size("3MiB"), Ok(3 << 20));
        assert_eq!(parse_size("1g"), Ok(1 << 30));
        assert!(parse_size("12Q").is_err());
        assert!(parse_size("x").is_err());
    }
}
