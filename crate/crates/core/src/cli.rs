//! Command-line front end: `optimize`, `compress`, `decompress`, `simulate`
//! and `sweep`.
//!
//! Structured input is JSON; flags only name files, the k stride and seeds.
//! Data goes to stdout or `--out`, diagnostics to stderr.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::optimizer::{self, BudgetConfig, ScaleState};
use crate::packet::{self, HEADER_BITS};
use crate::pipeline::{self, CompressionConfig, RoundMeta};
use crate::quantizer::QuantizerKind;
use crate::sim::{self, FLConfig, RoundMetrics, SweepSpec};
use crate::update::{self, UpdateVector};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fedcvlc",
    version,
    about = "Variable-length coding of federated model updates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the optimized partition plan of an update vector as JSON.
    Optimize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides `k_stride` from the config.
        #[arg(long)]
        k_stride: Option<usize>,
    },
    /// Compress an update vector into a packet file plus round metadata.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metadata JSON path; defaults to `<out>.meta.json`.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Rebuild an update vector from a packet file and its metadata.
    Decompress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a federated simulation and write per-round metrics as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare compressors by traffic to a target accuracy.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// JSON config of `optimize` and `compress`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub b_bits: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "H_bits", default = "default_header_bits")]
    pub h_bits: usize,
    pub quantizer: QuantizerKind,
    #[serde(default = "default_k_stride")]
    pub k_stride: usize,
    /// Worst packet error of the previous round; omitted on a first round.
    #[serde(default)]
    pub prev_max_q: Option<f64>,
    #[serde(default)]
    pub client_id: u64,
    #[serde(default)]
    pub round: u64,
}

fn default_header_bits() -> usize {
    HEADER_BITS
}

fn default_k_stride() -> usize {
    1
}

impl CodecConfig {
    fn compression(&self, d: usize, stride: Option<usize>) -> crate::Result<CompressionConfig> {
        let budget = BudgetConfig::new(d, self.b_bits, self.r, self.h_bits)?;
        let cfg = CompressionConfig::new(self.quantizer, budget)?
            .with_k_stride(stride.unwrap_or(self.k_stride));
        cfg.validate()?;
        Ok(cfg)
    }

    fn scale(&self, cfg: &CompressionConfig) -> ScaleState {
        self.prev_max_q.map_or_else(
            || ScaleState::initial(cfg.kind, &cfg.budget),
            ScaleState::from_prev_max_q,
        )
    }
}

#[derive(Debug, Serialize)]
struct PlanOutput<'a> {
    k: usize,
    parts: &'a [usize],
    code_bits: &'a [u32],
    gamma: f64,
    #[serde(rename = "B")]
    b: f64,
}

/// A failed command: message for stderr and the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn wrap(context: &str, e: Error) -> Self {
        let code = match e {
            Error::Infeasible(_) => EXIT_INFEASIBLE,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::wrap(&context(), e.into()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).ctx(|| format!("cannot read {what} {}", path.display()))?;
    serde_json::from_str(&text).ctx(|| format!("cannot parse {what} {}", path.display()))
}

fn read_update(path: &Path) -> CliResult<UpdateVector> {
    UpdateVector::read_file(path).ctx(|| format!("cannot read update vector {}", path.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .ctx(|| format!("cannot create {}", path.display()))
}

/// Runs one parsed command, writing data output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Optimize {
            input,
            config,
            k_stride,
        } => {
            let u = read_update(&input)?;
            let cfg: CodecConfig = read_json(&config, "config")?;
            let comp = cfg
                .compression(u.dim(), k_stride)
                .ctx(|| "bad config".into())?;
            let ranked = update::rank_by_magnitude(&u).ctx(|| "cannot rank update".into())?;
            let fit = update::fit_power_law(&ranked, &u).ctx(|| "cannot fit update".into())?;
            let plan = optimizer::optimize_plan(
                &fit,
                &comp.budget,
                &cfg.scale(&comp),
                comp.kind,
                comp.k_stride,
            )
            .ctx(|| "optimization failed".into())?;
            let out = PlanOutput {
                k: plan.k,
                parts: &plan.parts,
                code_bits: &plan.code_bits,
                gamma: plan.gamma,
                b: plan.scale.b,
            };
            let json = serde_json::to_string(&out).ctx(|| "cannot encode plan".into())?;
            writeln!(stdout, "{json}").ctx(|| "cannot write output".into())
        }
        Command::Compress {
            input,
            config,
            out,
            seed,
            meta,
        } => {
            let u = read_update(&input)?;
            let cfg: CodecConfig = read_json(&config, "config")?;
            let comp = cfg.compression(u.dim(), None).ctx(|| "bad config".into())?;
            let round = pipeline::compress(&u, &comp, &cfg.scale(&comp), seed)
                .ctx(|| "compression failed".into())?;
            let mut w = create(&out)?;
            packet::write_stream(&mut w, &round.packets)
                .and_then(|_| w.flush().map_err(Error::from))
                .ctx(|| format!("cannot write {}", out.display()))?;
            let rm = RoundMeta {
                client_id: cfg.client_id,
                round: cfg.round,
                b: round.scale_b(),
                gamma: round.plan.gamma,
                bytes: round.uplink_bytes(),
                d: u.dim(),
            };
            let meta_path = meta.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".meta.json");
                p.into()
            });
            let json = serde_json::to_string_pretty(&rm).ctx(|| "cannot encode metadata".into())?;
            fs::write(&meta_path, json).ctx(|| format!("cannot write {}", meta_path.display()))
        }
        Command::Decompress { input, meta, out } => {
            let rm: RoundMeta = read_json(&meta, "metadata")?;
            let file =
                File::open(&input).ctx(|| format!("cannot read packets {}", input.display()))?;
            let packets = packet::read_stream(BufReader::new(file))
                .ctx(|| format!("cannot read packets {}", input.display()))?;
            let u_hat =
                pipeline::decompress(&packets, rm.d, rm.b).ctx(|| "decode failed".into())?;
            u_hat
                .write_file(&out)
                .ctx(|| format!("cannot write {}", out.display()))
        }
        Command::Simulate { config, out, seed } => {
            let mut cfg: FLConfig = read_json(&config, "config")?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let metrics = sim::run_federated(&cfg).ctx(|| "simulation failed".into())?;
            let mut w = create(&out)?;
            write_metrics(&mut w, &metrics).ctx(|| format!("cannot write {}", out.display()))
        }
        Command::Sweep { spec, out } => {
            let spec: SweepSpec = read_json(&spec, "sweep spec")?;
            let report = spec.run().ctx(|| "sweep failed".into())?;
            fs::write(&out, report.to_csv()).ctx(|| format!("cannot write {}", out.display()))
        }
    }
}

pub fn write_metrics<W: Write>(w: &mut W, metrics: &[RoundMetrics]) -> crate::Result<()> {
    writeln!(w, "{}", RoundMetrics::CSV_HEADER)?;
    for m in metrics {
        writeln!(w, "{}", m.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Sizes the global thread pool from `VLC_THREADS` (unset or 0 = automatic).
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("VLC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("VLC_THREADS must be a non-negative integer, got {v:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Parses `args`, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
