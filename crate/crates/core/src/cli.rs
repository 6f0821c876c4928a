//! Command-line front end.
//!
//! Exit codes: 0 success, 1 data or validation failure, 2 usage error,
//! 3 transport failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::client::{self, EndpointConfig, FetchExample, ScoreClient};
use crate::cost::{self, CostParams};
use crate::decode::{self, DecodeConfig, Method};
use crate::diagnostics;
use crate::experiment::{self, SweepSpec, DEFAULT_ALPHAS};
use crate::record::{self, Branch, EvalRecord};
use crate::synth::{self, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

/// Environment variable holding the scoring endpoint's bearer token.
pub const AUTH_TOKEN_ENV: &str = "SCICON_AUTH_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "scicon", version, about = "Contrastive candidate scoring for multiple-choice figure QA")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Suppress informational messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Optional TOML file with defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a record file against the schema and invariants.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode every record with one method.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "scicon")]
        method: Method,
        /// Defaults to 0.5 for scicon and 1.0 for vcd/icd.
        #[arg(long)]
        alpha: Option<f64>,
        /// Also write decode results as JSONL here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare methods on a record file.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "greedy_mm,scicon,vcd,icd")]
        methods: Vec<Method>,
        /// Text-prior subtraction weight.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Contrast weight for vcd and icd.
        #[arg(long, default_value_t = 1.0)]
        baseline_alpha: f64,
    },
    /// Sweep alpha for one or more methods.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "scicon")]
        methods: Vec<Method>,
    },
    /// Per-record bias diagnostics and group summaries.
    Diagnose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Write one diagnostic row per record as JSONL here.
        #[arg(long)]
        rows_out: Option<PathBuf>,
    },
    /// Generate synthetic records with a planted text prior.
    Synth {
        #[arg(long = "n", default_value_t = 1000)]
        n: usize,
        #[arg(long = "k", default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 3.0)]
        prior_strength: f64,
        #[arg(long, default_value_t = 4.0)]
        visual_strength: f64,
        #[arg(long, default_value_t = 0.5)]
        mislead_fraction: f64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        /// Regime sidecar; defaults to `<out>.regimes.jsonl`.
        #[arg(long)]
        regimes_out: Option<PathBuf>,
    },
    /// Prefill cost of each method.
    Cost {
        #[arg(long)]
        lq: u64,
        #[arg(long)]
        lv: u64,
        #[arg(long, default_value_t = 1.0)]
        d: f64,
    },
    /// Build records by querying a scoring endpoint.
    Fetch {
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mm,txt")]
        branches: Vec<Branch>,
        #[arg(long)]
        out: PathBuf,
        /// Per-request timeout in seconds.
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long)]
        max_retries: Option<u32>,
        #[arg(long)]
        concurrency: Option<usize>,
        /// First retry delay in seconds.
        #[arg(long)]
        backoff: Option<f64>,
    },
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    format: Option<Format>,
    seed: Option<u64>,
    quiet: Option<bool>,
    endpoint: Option<String>,
    timeout_secs: Option<f64>,
    max_retries: Option<u32>,
    concurrency: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Transport(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Transport(_) => EXIT_TRANSPORT,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Transport(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

struct Ctx<'a> {
    format: Format,
    quiet: bool,
    seed: Option<u64>,
    file: ConfigFile,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn info(&mut self, msg: &str) {
        if !self.quiet {
            let _ = writeln!(self.err, "{msg}");
        }
    }

    fn emit_json<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(data)?;
        writeln!(self.out, "{text}").map_err(data)
    }

    fn emit(&mut self, text: &str) -> Result<(), CliError> {
        write!(self.out, "{text}").map_err(data)
    }
}

/// Runs the CLI on `argv` against the process's stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI with explicit output streams and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };

    let file = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(f) => f,
            Err(e) => {
                let _ = writeln!(err, "error: {}", e.message());
                return e.code();
            }
        },
        None => ConfigFile::default(),
    };
    let mut ctx = Ctx {
        format: cli.format.or(file.format).unwrap_or(Format::Table),
        quiet: cli.quiet || file.quiet.unwrap_or(false),
        seed: cli.seed.or(file.seed),
        file,
        out,
        err,
    };
    match execute(cli.command, &mut ctx) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(ctx.err, "error: {}", e.message());
            e.code()
        }
    }
}

fn load_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        io::stdin().read_to_end(&mut buf).map_err(data)?;
        Ok(buf)
    } else {
        fs::read(path).map_err(io_err(path))
    }
}

/// Parsed records plus the SHA-256 of the raw file.
fn load_records(path: &Path) -> Result<(Vec<EvalRecord>, String), CliError> {
    let bytes = read_input(path)?;
    let records = record::parse_records(bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((records, experiment::sha256_hex(&bytes)))
}

fn execute(command: Command, ctx: &mut Ctx<'_>) -> Result<i32, CliError> {
    match command {
        Command::Validate { input } => cmd_validate(ctx, &input),
        Command::Decode { input, method, alpha, out } => cmd_decode(ctx, &input, method, alpha, out.as_deref()),
        Command::Eval { input, methods, alpha, baseline_alpha } => {
            cmd_eval(ctx, &input, &methods, alpha, baseline_alpha)
        }
        Command::Sweep { input, alphas, methods } => {
            let spec = SweepSpec::new(alphas.unwrap_or_else(|| DEFAULT_ALPHAS.to_vec()), methods)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let (records, digest) = load_records(&input)?;
            let report = experiment::run_sweep(&records, &spec).map_err(data)?.with_input_digest(digest);
            match ctx.format {
                Format::Json => ctx.emit_json(&report)?,
                Format::Table => ctx.emit(&report.to_table())?,
            }
            Ok(EXIT_OK)
        }
        Command::Diagnose { input, alpha, rows_out } => cmd_diagnose(ctx, &input, alpha, rows_out.as_deref()),
        Command::Synth { n, k, prior_strength, visual_strength, mislead_fraction, noise, out, regimes_out } => {
            let config = SynthConfig {
                n,
                k,
                prior_strength,
                visual_strength,
                mislead_fraction,
                noise_sigma: noise,
                seed: ctx.seed.unwrap_or(SynthConfig::default().seed),
            };
            cmd_synth(ctx, &config, &out, regimes_out)
        }
        Command::Cost { lq, lv, d } => {
            let params = CostParams::new(lq, lv, d).map_err(|e| CliError::Usage(e.to_string()))?;
            let report = cost::cost_report(&params);
            match ctx.format {
                Format::Json => ctx.emit_json(&report)?,
                Format::Table => {
                    let mut t = format!("{:<10} {:>16} {:>8}\n", "method", "cost", "ratio");
                    for r in &report.rows {
                        t.push_str(&format!("{:<10} {:>16} {:>8.3}\n", r.method.as_str(), r.cost, r.ratio_to_greedy));
                    }
                    t.push_str(&format!("ordering: {}\n", report.note));
                    ctx.emit(&t)?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Fetch { endpoint, examples, branches, out, timeout, max_retries, concurrency, backoff } => {
            let base_url = endpoint
                .or_else(|| ctx.file.endpoint.clone())
                .ok_or_else(|| CliError::Usage("--endpoint is required".into()))?;
            let mut config = EndpointConfig::new(base_url);
            config.auth_token = std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty());
            if let Some(t) = timeout.or(ctx.file.timeout_secs) {
                config.timeout = secs(t)?;
            }
            if let Some(r) = max_retries.or(ctx.file.max_retries) {
                config.max_retries = r;
            }
            if let Some(c) = concurrency.or(ctx.file.concurrency) {
                config.concurrency = c;
            }
            if let Some(b) = backoff {
                config.backoff_base = secs(b)?;
            }
            cmd_fetch(ctx, config, &examples, &branches, &out)
        }
    }
}

fn secs(s: f64) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(s).map_err(|e| CliError::Usage(format!("bad duration {s}: {e}")))
}

fn cmd_validate(ctx: &mut Ctx<'_>, input: &Path) -> Result<i32, CliError> {
    let bytes = read_input(input)?;
    let report = record::validate_lines(bytes.as_slice()).map_err(data)?;
    match ctx.format {
        Format::Json => ctx.emit_json(&report)?,
        Format::Table => {
            let mut t = String::new();
            for f in &report.failures {
                for r in &f.reasons {
                    let at = f.line.map_or(format!("#{}", f.index), |l| format!("line {l}"));
                    t.push_str(&format!("FAIL {at} {}: {r}\n", f.id));
                }
            }
            t.push_str(&format!("{} records, {} failing\n", report.total, report.failures.len()));
            ctx.emit(&t)?;
        }
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_DATA })
}

fn cmd_decode(
    ctx: &mut Ctx<'_>,
    input: &Path,
    method: Method,
    alpha: Option<f64>,
    out: Option<&Path>,
) -> Result<i32, CliError> {
    let config = DecodeConfig::new(method, alpha.unwrap_or(method.default_alpha()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (records, _) = load_records(input)?;
    let results = decode::decode_batch(&records, &config).map_err(data)?;

    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r).map_err(data)?);
        jsonl.push('\n');
    }
    if let Some(path) = out {
        fs::write(path, &jsonl).map_err(io_err(path))?;
        ctx.info(&format!("wrote {} results to {}", results.len(), path.display()));
    }
    match ctx.format {
        Format::Json => ctx.emit(&jsonl)?,
        Format::Table => {
            let mut t = format!("{:<16} {:<10} {:<6} {:<6} probs\n", "id", "method", "pred", "gold");
            for (r, rec) in results.iter().zip(&records) {
                let probs: Vec<String> = r.probs.iter().map(|p| format!("{p:.3}")).collect();
                t.push_str(&format!(
                    "{:<16} {:<10} {:<6} {:<6} {}\n",
                    r.record_id,
                    r.method.as_str(),
                    r.predicted,
                    rec.example.gold,
                    probs.join(" ")
                ));
            }
            ctx.emit(&t)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_eval(
    ctx: &mut Ctx<'_>,
    input: &Path,
    methods: &[Method],
    alpha: f64,
    baseline_alpha: f64,
) -> Result<i32, CliError> {
    let configs = methods
        .iter()
        .map(|&m| {
            let a = match m {
                Method::Vcd | Method::Icd => baseline_alpha,
                _ => alpha,
            };
            DecodeConfig::new(m, a).map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (records, digest) = load_records(input)?;
    let report = experiment::run_comparison(&records, &configs).map_err(data)?.with_input_digest(digest);
    match ctx.format {
        Format::Json => ctx.emit_json(&report)?,
        Format::Table => ctx.emit(&report.to_table())?,
    }
    Ok(EXIT_OK)
}

fn cmd_diagnose(ctx: &mut Ctx<'_>, input: &Path, alpha: f64, rows_out: Option<&Path>) -> Result<i32, CliError> {
    let config = DecodeConfig::new(Method::Scicon, alpha).map_err(|e| CliError::Usage(e.to_string()))?;
    let (records, _) = load_records(input)?;
    let rows = diagnostics::diagnose_batch(&records, alpha).map_err(data)?;
    let greedy = decode::decode_batch(&records, &DecodeConfig::with_default_alpha(Method::GreedyMm)).map_err(data)?;
    let scicon = decode::decode_batch(&records, &config).map_err(data)?;
    let base: Vec<&str> = greedy.iter().map(|d| d.predicted.as_str()).collect();
    let sc: Vec<&str> = scicon.iter().map(|d| d.predicted.as_str()).collect();
    let summary = diagnostics::summarize(&records, &rows, &base, Method::Scicon, alpha, &sc).map_err(data)?;

    if let Some(path) = rows_out {
        let mut buf = String::new();
        for r in &rows {
            buf.push_str(&serde_json::to_string(r).map_err(data)?);
            buf.push('\n');
        }
        fs::write(path, buf).map_err(io_err(path))?;
        ctx.info(&format!("wrote {} diagnostic rows to {}", rows.len(), path.display()));
    }
    match ctx.format {
        Format::Json => ctx.emit_json(&summary)?,
        Format::Table => {
            let mut t = format!(
                "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                "group", "n", "JS", "cos", "uplift", "margin", "txt_hit", "dominant"
            );
            let groups = [
                ("correct", &summary.correct),
                ("wrong", &summary.wrong),
                ("corrected", &summary.corrected),
                ("harmed", &summary.harmed),
            ];
            for (name, g) in groups {
                match g {
                    Some(s) => t.push_str(&format!(
                        "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                        name,
                        s.n,
                        s.mean_js,
                        s.mean_cos,
                        s.mean_gold_uplift,
                        s.mean_visual_margin,
                        s.txt_gold_hit_rate,
                        s.prior_dominant_rate
                    )),
                    None => t.push_str(&format!("{name:<10} {:>6}\n", 0)),
                }
            }
            ctx.emit(&t)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_synth(
    ctx: &mut Ctx<'_>,
    config: &SynthConfig,
    out: &Path,
    regimes_out: Option<PathBuf>,
) -> Result<i32, CliError> {
    let batch = synth::generate(config).map_err(|e| CliError::Usage(e.to_string()))?;
    let regimes_path = regimes_out.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".regimes.jsonl");
        PathBuf::from(p)
    });
    let mut bytes = Vec::new();
    record::write_records(&batch.records, &mut bytes).map_err(data)?;
    fs::write(out, bytes).map_err(io_err(out))?;
    let mut sidecar = Vec::new();
    synth::write_regimes(&batch, &mut sidecar).map_err(data)?;
    fs::write(&regimes_path, sidecar).map_err(io_err(&regimes_path))?;

    let misleading = batch.regimes.iter().filter(|r| **r == synth::Regime::Misleading).count();
    let summary = serde_json::json!({
        "records": out,
        "regimes": regimes_path,
        "n": batch.records.len(),
        "misleading": misleading,
        "aligned": batch.records.len() - misleading,
        "config": config,
    });
    match ctx.format {
        Format::Json => ctx.emit_json(&summary)?,
        Format::Table => ctx.emit(&format!(
            "wrote {} records ({} misleading, {} aligned) to {}\nregimes: {}\n",
            batch.records.len(),
            misleading,
            batch.records.len() - misleading,
            out.display(),
            regimes_path.display()
        ))?,
    }
    Ok(EXIT_OK)
}

fn cmd_fetch(
    ctx: &mut Ctx<'_>,
    config: EndpointConfig,
    examples_path: &Path,
    branches: &[Branch],
    out: &Path,
) -> Result<i32, CliError> {
    let text = String::from_utf8(read_input(examples_path)?).map_err(data)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: FetchExample = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", examples_path.display(), i + 1)))?;
        examples.push(ex);
    }
    let client = ScoreClient::new(config).map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = client.build_records(&examples, branches, out).map_err(data)?;

    let transport = outcome.failures.iter().any(|f| f.transport);
    let summary = serde_json::json!({
        "out": out,
        "records": outcome.records.len(),
        "fetched": outcome.fetched,
        "skipped": outcome.skipped,
        "failed": outcome.failures.len(),
        "manifest": if outcome.failures.is_empty() { None } else { Some(client::manifest_path(out)) },
        "requests": client.requests_sent(),
    });
    match ctx.format {
        Format::Json => ctx.emit_json(&summary)?,
        Format::Table => {
            let mut t = format!(
                "fetched {}, skipped {}, failed {}; {} records in {}\n",
                outcome.fetched,
                outcome.skipped,
                outcome.failures.len(),
                outcome.records.len(),
                out.display()
            );
            for f in &outcome.failures {
                t.push_str(&format!("FAIL {}: {}\n", f.id, f.reasons.join("; ")));
            }
            ctx.emit(&t)?;
        }
    }
    if outcome.failures.is_empty() {
        return Ok(EXIT_OK);
    }
    let msg = format!(
        "{} example(s) failed; see {}",
        outcome.failures.len(),
        client::manifest_path(out).display()
    );
    Err(if transport { CliError::Transport(msg) } else { CliError::Data(msg) })
}
