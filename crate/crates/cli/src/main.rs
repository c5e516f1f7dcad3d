use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use claa_core::checksum::{short_packet_distribution, ChecksumAlgorithm};
use claa_core::registry::{load_builtin_matrix, InteractionMatrix};
use claa_core::sim::{self, RunOptions, Scenario};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

const EX_USAGE: u8 = 64;
const EX_DATAERR: u8 = 65;
const EX_NOINPUT: u8 = 66;
const EX_CANTCREAT: u8 = 73;
const EX_VIOLATIONS: u8 = 2;

#[derive(Parser)]
#[command(
    name = "claa-sim",
    version,
    about = "Cross-layer SCTP/OLSR/802.11 simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write the metrics report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the bus event trace (TSV) here.
        #[arg(long)]
        trace_claa: Option<PathBuf>,
    },
    /// Run one scenario under several named flag sets.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// JSON list of {"name": ..., "flags": {...}}; the first entry is the baseline.
        #[arg(long)]
        flags: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a matrix file against the structural rules.
    ValidateMatrix { file: PathBuf },
    /// Print the checksum of a hex-encoded byte string.
    Checksum {
        #[arg(long, value_enum)]
        alg: Alg,
        #[arg(long)]
        hex: String,
    },
    /// Histogram of checksum values over random short packets, as CSV.
    ChecksumDist {
        #[arg(long, value_enum, default_value = "crc32c")]
        alg: Alg,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the built-in interaction matrix as JSON.
    DumpBuiltinMatrix {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Alg {
    Crc32c,
    Adler32,
}

impl From<Alg> for ChecksumAlgorithm {
    fn from(a: Alg) -> Self {
        match a {
            Alg::Crc32c => ChecksumAlgorithm::Crc32cReflected,
            Alg::Adler32 => ChecksumAlgorithm::Adler32,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagSet {
    name: String,
    flags: BTreeMap<String, bool>,
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        let code = if e.kind() == io::ErrorKind::NotFound {
            EX_NOINPUT
        } else {
            EX_DATAERR
        };
        fail(code, format!("{}: {e}", path.display()))
    })
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| fail(EX_CANTCREAT, format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path, matrix: &InteractionMatrix) -> Result<Scenario, Failure> {
    let text = read(path)?;
    let mut s = Scenario::from_json(&text)
        .map_err(|e| fail(EX_DATAERR, format!("{}: {e}", path.display())))?;
    if let Ok(seed) = std::env::var("CLAA_SIM_SEED") {
        s.seed = seed
            .trim()
            .parse()
            .map_err(|_| fail(EX_USAGE, format!("CLAA_SIM_SEED: not an integer: {seed}")))?;
    }
    s.validate(matrix)
        .map_err(|e| fail(EX_DATAERR, format!("{}: {e}", path.display())))?;
    Ok(s)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    let stdout = &mut io::stdout().lock();
    match cmd {
        Command::Run {
            scenario,
            out,
            trace_claa,
        } => {
            let matrix = Arc::new(load_builtin_matrix());
            let s = load_scenario(&scenario, &matrix)?;
            let opts = RunOptions {
                trace_claa: trace_claa.is_some(),
                ..Default::default()
            };
            let res = sim::run(&s, matrix, &opts).map_err(|e| fail(EX_DATAERR, e.to_string()))?;
            write(&out, &res.report.to_csv())?;
            if let Some(path) = trace_claa {
                let body: String = res.claa_trace.iter().map(|t| t.to_tsv() + "\n").collect();
                write(&path, &body)?;
            }
            let _ = write!(stdout, "{}", res.report.summary());
        }
        Command::Compare {
            scenario,
            flags,
            out,
        } => {
            let matrix = Arc::new(load_builtin_matrix());
            let s = load_scenario(&scenario, &matrix)?;
            let sets: Vec<FlagSet> = serde_json::from_str(&read(&flags)?)
                .map_err(|e| fail(EX_DATAERR, format!("{}: {e}", flags.display())))?;
            let legs: Vec<(String, BTreeMap<String, bool>)> =
                sets.into_iter().map(|f| (f.name, f.flags)).collect();
            let cmp =
                sim::compare(&s, &legs, matrix).map_err(|e| fail(EX_DATAERR, e.to_string()))?;
            write(&out, &cmp.to_csv())?;
            let _ = write!(stdout, "{}", cmp.table());
        }
        Command::ValidateMatrix { file } => {
            let m = InteractionMatrix::from_json(&read(&file)?)
                .map_err(|e| fail(EX_DATAERR, format!("{}: {e}", file.display())))?;
            let violations = m.validate();
            for v in &violations {
                let _ = writeln!(stdout, "{v}");
            }
            if !violations.is_empty() {
                return Err(fail(
                    EX_VIOLATIONS,
                    format!("{} violation(s)", violations.len()),
                ));
            }
        }
        Command::Checksum { alg, hex } => {
            let bytes =
                decode_hex(&hex).ok_or_else(|| fail(EX_USAGE, "--hex: not a hex string"))?;
            let _ = writeln!(
                stdout,
                "{:08x}",
                ChecksumAlgorithm::from(alg).compute(&bytes)
            );
        }
        Command::ChecksumDist {
            alg,
            len,
            samples,
            seed,
            out,
        } => {
            if len == 0 || samples == 0 {
                return Err(fail(EX_USAGE, "--len and --samples must be positive"));
            }
            let d = short_packet_distribution(alg.into(), len, samples, seed);
            match out {
                Some(p) => write(&p, &d.to_csv())?,
                None => {
                    let _ = write!(stdout, "{}", d.to_csv());
                }
            }
            eprintln!("chi_square={} p_value={}", d.chi_square, d.p_value);
        }
        Command::DumpBuiltinMatrix { out } => write(&out, &load_builtin_matrix().to_json())?,
    }
    Ok(())
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    let s = s.trim();
    let s = s.strip_prefix("0x").unwrap_or(s);
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EX_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("claa-sim: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
