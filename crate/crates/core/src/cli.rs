//! Command-line front end. Every command prints its result to stdout and,
//! with `--report`, also writes it to a file. Files are written through a
//! temporary sibling and renamed into place.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::corpus::{self, TokenCounts, ZipfSampler};
use crate::error::{Error, Result};
use crate::kernels::{self, Posterior, Schedule, SubTokenGrid};
use crate::oracle::{self, TokenDist};
use crate::quadrature::Quadrature;
use crate::scaling::{self, ScalingFit};
use crate::spectra::{self, DenseMatrix};
use crate::subtok::{Strategy, StrategyKind, Subtokenizer};
use crate::trainer::{self, Checkpoint, EvalConfig, MarkovChain, ToyModel, TrainConfig};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "primelab", version, about = "Sub-token masked diffusion toolkit")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Also write the result to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, inspect and apply subtokenizers.
    #[command(subcommand)]
    Subtok(SubtokCmd),
    /// Forward masking and ancestral sampling.
    #[command(subcommand)]
    Kernels(KernelsCmd),
    /// Exact computations on enumerable instances.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Token-frequency statistics.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Power-law loss fits and compute allocation.
    #[command(subcommand)]
    Scaling(ScalingCmd),
    /// Toy denoiser training and evaluation.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Singular values and stable rank.
    #[command(subcommand)]
    Spectra(SpectraCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Identity,
    Random,
    Greedy,
}

#[derive(Debug, Subcommand)]
enum SubtokCmd {
    Build {
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        ell: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Identity)]
        strategy: StrategyArg,
        /// Frequency TSV used by the greedy strategy.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Encode {
        #[arg(long)]
        st: PathBuf,
        /// Comma-separated token ids.
        #[arg(long)]
        tokens: String,
    },
    Decode {
        #[arg(long)]
        st: PathBuf,
        /// Codes separated by `;`, digits by `,` (e.g. `1,0,1;0,0,1`).
        #[arg(long)]
        codes: String,
    },
    Info {
        #[arg(long)]
        st: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct ScheduleArg {
    /// `linear` or `power:K`.
    #[arg(long, default_value = "linear")]
    schedule: String,
}

impl ScheduleArg {
    fn parse(&self) -> Result<Schedule> {
        match self.schedule.as_str() {
            "linear" => Ok(Schedule::Linear),
            other => {
                let k = other
                    .strip_prefix("power:")
                    .and_then(|k| k.parse::<f64>().ok())
                    .filter(|k| *k > 0.0 && k.is_finite())
                    .ok_or_else(|| Error::InvalidConfig(format!("schedule `{other}`; expected linear or power:K with K > 0")))?;
                Ok(Schedule::power(k))
            }
        }
    }
}

#[derive(Debug, Subcommand)]
enum KernelsCmd {
    Mask {
        #[arg(long)]
        st: PathBuf,
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        t: f64,
        #[command(flatten)]
        schedule: ScheduleArg,
    },
    Sample {
        #[arg(long)]
        st: Option<PathBuf>,
        /// Toy-model checkpoint supplying the posterior; uniform if absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        schedule: ScheduleArg,
    },
}

#[derive(Debug, Clone, Args)]
struct DistArgs {
    /// Independent per-position marginal (comma-separated probabilities).
    #[arg(long, conflicts_with_all = ["uniform", "zipf"])]
    probs: Option<String>,
    /// Uniform distribution over this many tokens.
    #[arg(long)]
    uniform: Option<usize>,
    /// Zipf(1) marginal over this many tokens.
    #[arg(long)]
    zipf: Option<usize>,
    /// Sequence length.
    #[arg(long, default_value_t = 1)]
    len: usize,
}

impl DistArgs {
    fn marginal(&self) -> Result<Vec<f64>> {
        if let Some(p) = &self.probs {
            return parse_list::<f64>(p);
        }
        if let Some(v) = self.uniform {
            return Ok(vec![1.0 / v as f64; v]);
        }
        if let Some(v) = self.zipf {
            return Ok(corpus::zipf_probs(v, 1.0));
        }
        Err(Error::InvalidConfig("one of --probs, --uniform, --zipf is required".into()))
    }

    fn dist(&self) -> Result<TokenDist> {
        let m = self.marginal()?;
        let total: f64 = m.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(total));
        }
        let m: Vec<f64> = m.iter().map(|p| p / total).collect();
        TokenDist::iid(&m, self.len)
    }
}

#[derive(Debug, Clone, Args)]
struct StArgs {
    #[arg(long)]
    ell: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Identity)]
    strategy: StrategyArg,
}

impl StArgs {
    fn build(&self, vocab: usize, seed: u64, marginal: &[f64]) -> Result<Subtokenizer> {
        match self.strategy {
            StrategyArg::Identity => Subtokenizer::build(vocab, self.ell, Strategy::Identity),
            StrategyArg::Random => Subtokenizer::build(vocab, self.ell, Strategy::Random(seed)),
            StrategyArg::Greedy => {
                let counts: Vec<u64> = marginal.iter().map(|p| (p * 1e12).round() as u64).collect();
                Subtokenizer::build(vocab, self.ell, Strategy::Greedy(&counts))
            }
        }
    }
}

#[derive(Debug, Subcommand)]
enum OracleCmd {
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Expected log posterior on a grid of times.
    Profile {
        #[command(flatten)]
        dist: DistArgs,
        #[command(flatten)]
        st: StArgs,
        #[arg(long, default_value_t = 11)]
        points: usize,
        #[arg(long)]
        budget: Option<u64>,
    },
    Nelbo {
        #[command(flatten)]
        dist: DistArgs,
        #[command(flatten)]
        st: StArgs,
        #[arg(long)]
        budget: Option<u64>,
    },
    BestPerm {
        #[command(flatten)]
        dist: DistArgs,
        #[arg(long)]
        ell: usize,
    },
}

#[derive(Debug, Clone, Args)]
struct CountsArgs {
    /// Frequency TSV (`id<TAB>count`).
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    vocab: usize,
}

impl CountsArgs {
    fn load(&self) -> Result<TokenCounts> {
        TokenCounts::from_tsv(&fs::read_to_string(&self.counts)?, self.vocab)
    }
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    Count {
        #[arg(long)]
        vocab: usize,
        /// Newline-delimited id stream.
        #[arg(long, conflicts_with = "zipf_samples")]
        input: Option<PathBuf>,
        /// Draw this many Zipf ids instead of reading a file.
        #[arg(long)]
        zipf_samples: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        zipf_s: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Cdf {
        #[command(flatten)]
        counts: CountsArgs,
    },
    Entropy {
        #[command(flatten)]
        counts: CountsArgs,
        #[command(flatten)]
        st: StArgs,
    },
    Report {
        #[command(flatten)]
        counts: CountsArgs,
        #[arg(long)]
        ell: usize,
        /// Comma-separated seeds for the random strategy.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
}

#[derive(Debug, Subcommand)]
enum ScalingCmd {
    Fit {
        /// CSV with header `N,D,loss`.
        #[arg(long)]
        input: PathBuf,
    },
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long = "n")]
        n: f64,
        #[arg(long = "d")]
        d: f64,
    },
    Optimal {
        #[arg(long)]
        fit: PathBuf,
        /// Comma-separated FLOP budgets.
        #[arg(long)]
        compute: String,
        /// Emit an iso-loss table for these losses instead.
        #[arg(long)]
        iso_loss: Option<String>,
    },
    Exponents {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long = "a")]
        a: Option<f64>,
        #[arg(long = "b")]
        b: Option<f64>,
    },
}

#[derive(Debug, Clone, Args)]
struct MarkovArgs {
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    len: usize,
    /// Weight of the cyclic-successor move in each transition.
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf_s: f64,
}

impl MarkovArgs {
    fn chain(&self) -> Result<MarkovChain> {
        if !(0.0..=1.0).contains(&self.lambda) || self.vocab < 2 || self.len == 0 {
            return Err(Error::InvalidConfig("need vocab >= 2, len >= 1 and lambda in [0, 1]".into()));
        }
        Ok(MarkovChain::sticky_zipf(self.vocab, self.zipf_s, self.lambda))
    }
}

#[derive(Debug, Subcommand)]
enum TrainCmd {
    Run {
        #[command(flatten)]
        data: MarkovArgs,
        #[arg(long, default_value_t = 4)]
        ell: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Identity)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long)]
        out: PathBuf,
        /// `step,loss` CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: MarkovArgs,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long)]
        budget: Option<u64>,
    },
    Gradcheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Args)]
struct MatrixArgs {
    /// CSV matrix, one row per line.
    #[arg(long, conflicts_with = "model")]
    matrix: Option<PathBuf>,
    /// Toy-model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Block name inside the checkpoint (`W1`, `W2`, `W2.0`, `E.1`, `P`).
    #[arg(long, default_value = "W1")]
    block: String,
}

impl MatrixArgs {
    fn load(&self) -> Result<DenseMatrix> {
        match (&self.matrix, &self.model) {
            (Some(p), _) => DenseMatrix::from_csv(&fs::read_to_string(p)?),
            (None, Some(p)) => load_checkpoint(p)?.matrix(&self.block),
            _ => Err(Error::InvalidConfig("one of --matrix or --model is required".into())),
        }
    }
}

#[derive(Debug, Subcommand)]
enum SpectraCmd {
    Svd {
        #[command(flatten)]
        input: MatrixArgs,
    },
    StableRank {
        #[command(flatten)]
        input: MatrixArgs,
    },
}

/// Outcome of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub code: i32,
    pub reports: Vec<PathBuf>,
}

/// A rendered result: JSON plus an optional table for CSV output.
struct Output {
    json: Value,
    table: Option<(Vec<&'static str>, Vec<Vec<String>>)>,
    failed: bool,
}

impl Output {
    fn json<T: Serialize>(v: &T) -> Result<Self> {
        Ok(Self { json: serde_json::to_value(v)?, table: None, failed: false })
    }

    fn with_table(mut self, header: Vec<&'static str>, rows: Vec<Vec<String>>) -> Self {
        self.table = Some((header, rows));
        self
    }

    fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => Ok(serde_json::to_string_pretty(&self.json)? + "\n"),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let io = |e: csv::Error| Error::Parse(e.to_string());
                match &self.table {
                    Some((header, rows)) => {
                        w.write_record(header).map_err(io)?;
                        for r in rows {
                            w.write_record(r).map_err(io)?;
                        }
                    }
                    None => {
                        w.write_record(["key", "value"]).map_err(io)?;
                        if let Value::Object(map) = &self.json {
                            for (k, v) in map {
                                let v = match v {
                                    Value::String(s) => s.clone(),
                                    other => other.to_string(),
                                };
                                w.write_record([k.as_str(), v.as_str()]).map_err(io)?;
                            }
                        }
                    }
                }
                let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
                String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
            }
        }
    }
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::CorruptFile(_) | Error::Json(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| Error::Parse(format!("`{x}`: {e}"))))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
}

fn load_fit(path: &Path) -> Result<ScalingFit> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    // accept either a bare fit or the full report written by `scaling fit`
    let fit = v.get("fit").cloned().unwrap_or(v);
    let f: ScalingFit = serde_json::from_value(fit)?;
    Ok(ScalingFit::new(f.e, f.a, f.b, f.alpha_n, f.beta_d))
}

fn grid_json(g: &SubTokenGrid) -> Value {
    let rows: Vec<Vec<Value>> = (0..g.rows())
        .map(|r| g.row(r).iter().map(|c| c.map_or(Value::String("M".into()), |v| json!(v))).collect())
        .collect();
    json!(rows)
}

/// Parses `argv` and runs one command. Never panics on bad input; the
/// return value carries the process exit code.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return CommandResult { code, reports: vec![] };
        }
    };
    let mut reports = Vec::new();
    let outcome = dispatch(&cli, &mut reports).and_then(|out| {
        let text = out.render(cli.format)?;
        if let Some(path) = &cli.report {
            write_atomic(path, text.as_bytes())?;
            reports.push(path.clone());
        }
        print!("{text}");
        Ok(out.failed)
    });
    match outcome {
        Ok(false) => CommandResult { code: EXIT_OK, reports },
        Ok(true) => CommandResult { code: EXIT_VERIFY, reports },
        Err(e) => {
            eprintln!("error: {e}");
            CommandResult { code: exit_code(&e), reports }
        }
    }
}

fn dispatch(cli: &Cli, reports: &mut Vec<PathBuf>) -> Result<Output> {
    let seed = cli.seed;
    match &cli.command {
        Command::Subtok(cmd) => subtok_cmd(cmd, seed, reports),
        Command::Kernels(cmd) => kernels_cmd(cmd, seed),
        Command::Oracle(cmd) => oracle_cmd(cmd, seed),
        Command::Corpus(cmd) => corpus_cmd(cmd, seed, reports),
        Command::Scaling(cmd) => scaling_cmd(cmd),
        Command::Train(cmd) => train_cmd(cmd, seed, reports),
        Command::Spectra(cmd) => spectra_cmd(cmd),
    }
}

fn st_info(st: &Subtokenizer) -> Value {
    json!({
        "V": st.vocab(),
        "ell": st.ell(),
        "b": st.base(),
        "strategy": st.strategy().to_string(),
        "seed": st.seed(),
        "code_space": st.code_space(),
        "max_granularity": crate::subtok::max_granularity(st.vocab()),
        "checksum": format!("{:016x}", crate::subtok::perm_checksum(st.perm())),
    })
}

fn subtok_cmd(cmd: &SubtokCmd, seed: u64, reports: &mut Vec<PathBuf>) -> Result<Output> {
    match cmd {
        SubtokCmd::Build { vocab, ell, strategy, counts, out } => {
            let st = match strategy {
                StrategyArg::Identity => Subtokenizer::build(*vocab, *ell, Strategy::Identity)?,
                StrategyArg::Random => Subtokenizer::build(*vocab, *ell, Strategy::Random(seed))?,
                StrategyArg::Greedy => {
                    let path = counts.as_ref().ok_or_else(|| Error::InvalidConfig("greedy needs --counts".into()))?;
                    let c = TokenCounts::from_tsv(&fs::read_to_string(path)?, *vocab)?;
                    Subtokenizer::build(*vocab, *ell, Strategy::Greedy(c.counts()))?
                }
            };
            write_atomic(out, st.to_json().as_bytes())?;
            reports.push(out.clone());
            Output::json(&st_info(&st))
        }
        SubtokCmd::Encode { st, tokens } => {
            let st = Subtokenizer::load(st)?;
            let toks = parse_list::<usize>(tokens)?;
            let codes = toks.iter().map(|&t| Ok(st.encode(t)?.to_vec())).collect::<Result<Vec<_>>>()?;
            let rows = toks
                .iter()
                .zip(&codes)
                .map(|(t, c)| vec![t.to_string(), c.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")])
                .collect();
            Ok(Output::json(&json!({ "tokens": toks, "codes": codes }))?.with_table(vec!["token", "code"], rows))
        }
        SubtokCmd::Decode { st, codes } => {
            let st = Subtokenizer::load(st)?;
            let codes = codes.split(';').map(parse_list::<usize>).collect::<Result<Vec<_>>>()?;
            let toks = codes.iter().map(|c| st.decode(c)).collect::<Result<Vec<_>>>()?;
            let rows = toks.iter().map(|t| vec![t.to_string()]).collect();
            Ok(Output::json(&json!({ "tokens": toks }))?.with_table(vec!["token"], rows))
        }
        SubtokCmd::Info { st } => Output::json(&st_info(&Subtokenizer::load(st)?)),
    }
}

fn kernels_cmd(cmd: &KernelsCmd, seed: u64) -> Result<Output> {
    match cmd {
        KernelsCmd::Mask { st, tokens, t, schedule } => {
            let st = Subtokenizer::load(st)?;
            let toks = parse_list::<usize>(tokens)?;
            let y0 = SubTokenGrid::encode(&st, &toks)?;
            let sched = schedule.parse()?;
            let yt = kernels::forward_mask(&y0, &sched, *t, seed)?;
            let (alpha, _) = sched.alpha(*t)?;
            Output::json(&json!({ "t": t, "alpha": alpha, "y0": grid_json(&y0), "yt": grid_json(&yt), "masked": yt.masked_count() }))
        }
        KernelsCmd::Sample { st, model, len, steps, count, schedule } => {
            let sched = schedule.parse()?;
            let (posterior, st, len): (Box<dyn Posterior>, Subtokenizer, usize) = match (model, st) {
                (Some(m), _) => {
                    let m = ToyModel::from_checkpoint(load_checkpoint(m)?)?;
                    let st = m.subtokenizer().clone();
                    let len = m.dims().len;
                    (Box::new(m), st, len)
                }
                (None, Some(p)) => {
                    let st = Subtokenizer::load(p)?;
                    let b = st.base();
                    let uniform = move |yt: &SubTokenGrid| -> Vec<Vec<f64>> {
                        yt.cells()
                            .iter()
                            .map(|c| match c {
                                Some(v) => (0..b).map(|i| if i == *v { 1.0 } else { 0.0 }).collect(),
                                None => vec![1.0 / b as f64; b],
                            })
                            .collect()
                    };
                    (Box::new(uniform), st, *len)
                }
                (None, None) => return Err(Error::InvalidConfig("one of --model or --st is required".into())),
            };
            let samples = (0..*count)
                .map(|i| kernels::sample(posterior.as_ref(), &st, len, *steps, &sched, crate::rng::mix64(seed ^ i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let rows = samples
                .iter()
                .map(|s| vec![s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")])
                .collect();
            Ok(Output::json(&json!({ "steps": steps, "samples": samples }))?.with_table(vec!["tokens"], rows))
        }
    }
}

fn oracle_cmd(cmd: &OracleCmd, seed: u64) -> Result<Output> {
    let budget = |b: &Option<u64>| b.unwrap_or_else(oracle::budget_from_env);
    match cmd {
        OracleCmd::Verify { suite, budget: b } => {
            let report = verify::run_suite(suite, budget(b))?;
            for c in report.failures() {
                eprintln!("FAIL {} / {}: lhs {} rhs {} (tolerance {})", c.instance, c.name, c.lhs, c.rhs, c.tolerance);
            }
            let rows = report
                .checks
                .iter()
                .map(|c| vec![c.instance.clone(), c.name.clone(), c.lhs.to_string(), c.rhs.to_string(), c.tolerance.to_string(), c.pass.to_string()])
                .collect();
            let mut out = Output::json(&report)?.with_table(vec!["instance", "name", "lhs", "rhs", "tolerance", "pass"], rows);
            out.failed = !report.all_pass();
            Ok(out)
        }
        OracleCmd::Profile { dist, st, points, budget: b } => {
            let q = dist.dist()?;
            let st = st.build(q.vocab(), seed, &dist.marginal()?)?;
            let n = (*points).max(2);
            let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let prof = oracle::loglik_profile(&q, &st, &grid, budget(b))?;
            let rows = grid.iter().zip(&prof).map(|(t, v)| vec![t.to_string(), v.to_string()]).collect();
            Ok(Output::json(&json!({ "t": grid, "expected_log_posterior": prof }))?.with_table(vec!["t", "expected_log_posterior"], rows))
        }
        OracleCmd::Nelbo { dist, st, budget: b } => {
            let q = dist.dist()?;
            let st = st.build(q.vocab(), seed, &dist.marginal()?)?;
            let r = oracle::optimal_nelbo(&q, &st, &Quadrature::default(), budget(b))?;
            Output::json(&json!({
                "value": r.value,
                "route_decomposition": r.route_decomposition,
                "route_posterior": r.route_posterior,
                "data_entropy": q.entropy(),
                "ell": st.ell(),
                "b": st.base(),
            }))
        }
        OracleCmd::BestPerm { dist, ell } => {
            let a = oracle::best_assignment_bruteforce(&dist.marginal()?, *ell)?;
            Output::json(&a)
        }
    }
}

fn corpus_cmd(cmd: &CorpusCmd, seed: u64, reports: &mut Vec<PathBuf>) -> Result<Output> {
    match cmd {
        CorpusCmd::Count { vocab, input, zipf_samples, zipf_s, out } => {
            let counts = match (input, zipf_samples) {
                (Some(p), _) => corpus::count_reader(BufReader::new(fs::File::open(p)?), *vocab)?,
                (None, Some(n)) => corpus::count_tokens(ZipfSampler::new(*vocab, *zipf_s).stream(*n, seed), *vocab)?,
                (None, None) => return Err(Error::InvalidConfig("one of --input or --zipf-samples is required".into())),
            };
            write_atomic(out, counts.to_tsv().as_bytes())?;
            reports.push(out.clone());
            let nonzero = counts.counts().iter().filter(|&&c| c > 0).count();
            Output::json(&json!({ "V": counts.vocab(), "total": counts.total(), "distinct": nonzero }))
        }
        CorpusCmd::Cdf { counts } => {
            let cdf = corpus::token_cdf(&counts.load()?)?;
            let dev = corpus::cdf_max_deviation(&cdf);
            let rows = cdf.iter().enumerate().map(|(k, c)| vec![k.to_string(), c.to_string()]).collect();
            Ok(Output::json(&json!({ "cdf": cdf, "max_deviation_from_uniform": dev }))?.with_table(vec!["token", "cdf"], rows))
        }
        CorpusCmd::Entropy { counts, st } => {
            let c = counts.load()?;
            let probs = c.probs()?;
            let st = st.build(c.vocab(), seed, &probs)?;
            let e = corpus::subtoken_entropies(&c, &st)?;
            let rows = e.per_position.iter().enumerate().map(|(j, h)| vec![j.to_string(), h.to_string()]).collect();
            Ok(Output::json(&json!({
                "per_position": e.per_position,
                "average": e.average,
                "maximum": (st.base() as f64).log2(),
                "strategy": st.strategy().to_string(),
            }))?
            .with_table(vec!["position", "entropy_bits"], rows))
        }
        CorpusCmd::Report { counts, ell, seeds } => {
            let rows = corpus::entropy_report(&counts.load()?, *ell, &parse_list::<u64>(seeds)?)?;
            let table = rows
                .iter()
                .map(|r| vec![r.strategy.clone(), r.seed.map(|s| s.to_string()).unwrap_or_default(), r.average_bits.to_string()])
                .collect();
            Ok(Output::json(&rows)?.with_table(vec!["strategy", "seed", "average_bits"], table))
        }
    }
}

fn scaling_cmd(cmd: &ScalingCmd) -> Result<Output> {
    match cmd {
        ScalingCmd::Fit { input } => {
            let pts = scaling::read_points_csv(&fs::read_to_string(input)?)?;
            let rep = scaling::fit(&pts)?;
            let rows = pts
                .iter()
                .zip(&rep.residuals)
                .map(|(p, r)| vec![p.n.to_string(), p.d.to_string(), p.loss.to_string(), r.to_string()])
                .collect();
            let json = json!({
                "fit": rep.fit,
                "objective": rep.objective,
                "points": pts,
                "residuals": rep.residuals,
            });
            Ok(Output::json(&json)?.with_table(vec!["N", "D", "loss", "log_residual"], rows))
        }
        ScalingCmd::Predict { fit, n, d } => {
            if !(*n > 0.0 && *d > 0.0) {
                return Err(Error::InvalidPoint(format!("N = {n}, D = {d}")));
            }
            let f = load_fit(fit)?;
            Output::json(&json!({ "N": n, "D": d, "loss": scaling::predict_loss(&f, *n, *d) }))
        }
        ScalingCmd::Optimal { fit, compute, iso_loss } => {
            let f = load_fit(fit)?;
            let budgets = parse_list::<f64>(compute)?;
            if budgets.iter().any(|c| !(*c > 0.0)) {
                return Err(Error::InvalidConfig("compute budgets must be positive".into()));
            }
            if let Some(losses) = iso_loss {
                let allocs: Vec<_> = budgets.iter().map(|&c| scaling::optimal_allocation(&f, c)).collect();
                let lo = allocs.iter().map(|a| a.n_opt).fold(f64::INFINITY, f64::min) / 100.0;
                let hi = allocs.iter().map(|a| a.n_opt).fold(0.0, f64::max) * 100.0;
                let table = scaling::iso_loss_table(&f, &parse_list::<f64>(losses)?, &scaling::log_grid(lo, hi, 41));
                let rows = table.iter().map(|(l, n, d, c)| vec![l.to_string(), n.to_string(), d.to_string(), c.to_string()]).collect();
                let json: Vec<Value> = table.iter().map(|(l, n, d, c)| json!({ "loss": l, "N": n, "D": d, "C": c })).collect();
                return Ok(Output::json(&json)?.with_table(vec!["loss", "N", "D", "C"], rows));
            }
            let allocs: Vec<_> = budgets.iter().map(|&c| scaling::optimal_allocation(&f, c)).collect();
            let rows = allocs
                .iter()
                .map(|a| vec![a.compute.to_string(), a.n_opt.to_string(), a.d_opt.to_string(), scaling::predict_loss(&f, a.n_opt, a.d_opt).to_string()])
                .collect();
            Ok(Output::json(&allocs)?.with_table(vec!["C", "N_opt", "D_opt", "loss"], rows))
        }
        ScalingCmd::Exponents { alpha, beta, a, b } => {
            if !(*alpha > 0.0 && *beta > 0.0) {
                return Err(Error::InvalidConfig("exponents must be positive".into()));
            }
            let (a_hat, b_hat) = scaling::allocation_exponents(*alpha, *beta);
            let mut v = json!({ "a_hat": round4(a_hat), "b_hat": round4(b_hat) });
            if let (Some(a), Some(b)) = (a, b) {
                v["G"] = json!(scaling::exponents(&ScalingFit::new(0.0, *a, *b, *alpha, *beta)).g);
            }
            Output::json(&v)
        }
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn train_cmd(cmd: &TrainCmd, seed: u64, reports: &mut Vec<PathBuf>) -> Result<Output> {
    match cmd {
        TrainCmd::Run { data, ell, strategy, steps, batch, lr, width, hidden, out, history } => {
            let chain = data.chain()?;
            let strategy = match strategy {
                StrategyArg::Identity => StrategyKind::Identity,
                StrategyArg::Random => StrategyKind::Random,
                StrategyArg::Greedy => StrategyKind::Greedy,
            };
            let cfg = TrainConfig {
                vocab: data.vocab,
                ell: *ell,
                len: data.len,
                d: *width,
                h: *hidden,
                strategy,
                perm_seed: seed,
                steps: *steps,
                batch: *batch,
                lr: *lr,
                seed,
                ..TrainConfig::default()
            };
            let st = match strategy {
                StrategyKind::Greedy => {
                    let counts: Vec<u64> = chain.init.iter().map(|p| (p * 1e12).round() as u64).collect();
                    Subtokenizer::build(cfg.vocab, cfg.ell, Strategy::Greedy(&counts))?
                }
                _ => cfg.subtokenizer()?,
            };
            let len = data.len;
            let res = trainer::train_with(&cfg, st, |r| chain.sample(len, r))?;
            write_atomic(out, serde_json::to_string(&res.model.to_checkpoint())?.as_bytes())?;
            reports.push(out.clone());
            if let Some(h) = history {
                write_atomic(h, trainer::history_csv(&res.history).as_bytes())?;
                reports.push(h.clone());
            }
            let last = res.history.last().map(|h| h.1);
            let tail = &res.history[res.history.len().saturating_sub(100)..];
            let tail_mean = tail.iter().map(|h| h.1).sum::<f64>() / tail.len().max(1) as f64;
            Output::json(&json!({ "steps": steps, "final_loss": last, "mean_loss_last_100": tail_mean, "params": res.model.params().len() }))
        }
        TrainCmd::Eval { model, data, samples, budget } => {
            let m = ToyModel::from_checkpoint(load_checkpoint(model)?)?;
            let chain = data.chain()?;
            if chain.vocab() != m.dims().vocab || data.len != m.dims().len {
                return Err(Error::InvalidConfig("data dimensions do not match the checkpoint".into()));
            }
            let q = chain.to_dist(data.len)?;
            let cfg = EvalConfig { budget: budget.unwrap_or_else(oracle::budget_from_env), mc_samples: *samples, seed };
            let quad = Quadrature::default();
            let r = trainer::eval_nelbo(&m, &q, m.subtokenizer(), &quad, &cfg)?;
            let mut v = serde_json::to_value(r)?;
            v["data_entropy"] = json!(q.entropy());
            let states = q.states() as u64;
            if states <= cfg.budget.max(1 << 16) {
                let inst = oracle::ExactInstance::new(&q, m.subtokenizer(), states)?;
                v["optimum"] = json!(oracle::nelbo_by_decomposition(&inst, &quad));
            }
            Ok(Output { json: v, table: None, failed: false })
        }
        TrainCmd::Gradcheck { model, count, batch, tolerance } => {
            let m = match model {
                Some(p) => ToyModel::from_checkpoint(load_checkpoint(p)?)?,
                None => ToyModel::init(Subtokenizer::build(8, 3, Strategy::Random(seed))?, 3, 8, 8, seed),
            };
            let mut rng = crate::rng::SplitMix64::keyed(seed, &[0xBA7C]);
            let dims = m.dims();
            let grids = (0..*batch)
                .map(|_| {
                    let toks: Vec<usize> = (0..dims.len).map(|_| rng.below(dims.vocab as u64) as usize).collect();
                    SubTokenGrid::encode(m.subtokenizer(), &toks)
                })
                .collect::<Result<Vec<_>>>()?;
            let checks = trainer::gradcheck(&m, &grids, &Schedule::Linear, seed, *count, seed, 1e-5)?;
            let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
            let rows = checks
                .iter()
                .map(|c| vec![c.index.to_string(), c.tensor.to_string(), c.analytic.to_string(), c.numeric.to_string(), c.rel_err.to_string()])
                .collect();
            let mut out = Output::json(&json!({ "checks": checks, "max_rel_err": worst, "tolerance": tolerance }))?
                .with_table(vec!["index", "tensor", "analytic", "numeric", "rel_err"], rows);
            out.failed = worst >= *tolerance;
            Ok(out)
        }
    }
}

fn spectra_cmd(cmd: &SpectraCmd) -> Result<Output> {
    match cmd {
        SpectraCmd::Svd { input } => {
            let m = input.load()?;
            let sv = spectra::singular_values(&m)?;
            let rows = sv.iter().enumerate().map(|(i, s)| vec![i.to_string(), s.to_string()]).collect();
            Ok(Output::json(&json!({ "rows": m.rows(), "cols": m.cols(), "singular_values": sv }))?.with_table(vec!["index", "sigma"], rows))
        }
        SpectraCmd::StableRank { input } => {
            let m = input.load()?;
            Output::json(&json!({ "rows": m.rows(), "cols": m.cols(), "stable_rank": spectra::stable_rank(&m)? }))
        }
    }
}
