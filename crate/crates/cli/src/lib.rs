//! `ross` command line: data generation, the three training stages,
//! evaluation, SNR sweeps and the verification suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a check or
//! self-test row failed.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ross_core::channel::ChannelKind;
use ross_core::nnblocks::ParamStore;
use ross_core::selfcheck::{self, CheckRow, SuiteOptions};
use ross_core::OpKind;
use ross_s2t::data::{generate_corpus, load_corpus, save_corpus, Corpus};
use ross_s2t::eval::{results_csv, snr_sweep, MetricReport, SweepConfig, System};
use ross_s2t::pipeline::{self, write_loss_csv, Bundle, PipelineError, TrainOutcome};
use ross_s2t::selfcheck::{digital_checks, network_checks};
use ross_s2t::txmodels::Networks;

pub use config::{Config, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Name of the resolved-config echo written into the output directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.ini";

#[derive(Parser, Debug)]
#[command(name = "ross", version, about = "Speech-to-text semantic communication simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file (`[section]` headers, `key = value`, `#` comments).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; same as `run.out=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; same as `run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` overrides, applied in order after the file.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train, validation and test corpora.
    GenData(Common),
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Continue from this stage's checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score every configured system at one channel and SNR.
    Eval {
        #[arg(long, default_value = "rayleigh")]
        channel: String,
        #[arg(long, default_value = "6", allow_hyphen_values = true)]
        snr: String,
        #[command(flatten)]
        common: Common,
    },
    /// Score every configured system over the SNR grid.
    Sweep(Common),
    /// Finite-difference checks of ops, blocks, losses and networks.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Op whose reverse rule is deliberately perturbed.
        #[arg(long)]
        fault: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient, loss, channel and digital-chain checks at reduced size.
    SelfTest {
        #[arg(long)]
        fault: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Check(usize),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_RUNTIME
        }
        Err(Failure::Check(n)) => {
            let _ = writeln!(err, "{n} check(s) failed");
            EXIT_CHECK
        }
    }
}

fn resolve(c: &Common) -> Result<Config, Failure> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &c.overrides {
        cfg.apply(o)?;
    }
    if let Some(o) = &c.out {
        cfg.set("run.out", &o.display().to_string())?;
    }
    if let Some(s) = c.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    Ok(cfg)
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare(cfg: &Config) -> Result<PathBuf, Failure> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir.join(RESOLVED_CONFIG), &cfg.render())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn corpus_path(dir: &Path, split: &str) -> PathBuf {
    dir.join("data").join(format!("{split}.corpus"))
}

pub fn checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn load_split(dir: &Path, split: &str) -> Result<Corpus, Failure> {
    let p = corpus_path(dir, split);
    if !p.exists() {
        return Err(runtime(format!("{split} corpus missing: {} (run gen-data first)", p.display())));
    }
    load_corpus(&p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn load_stage(dir: &Path, stage: u8) -> Result<ParamStore, Failure> {
    let p = checkpoint_path(dir, stage);
    if !p.exists() {
        return Err(runtime(PipelineError::MissingCheckpoint { stage, path: p }));
    }
    ParamStore::load(&p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn dispatch(cmd: Command, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    match cmd {
        Command::GenData(c) => gen_data(&resolve(&c)?, out),
        Command::Train { stage, resume, common } => train(&resolve(&common)?, stage, resume, out),
        Command::Eval { channel, snr, common } => {
            let cfg = resolve(&common)?;
            let kind = ChannelKind::from_name(&channel)
                .ok_or_else(|| Failure::Usage(format!("unknown channel '{channel}' (awgn or rayleigh)")))?;
            let snr_db = match snr.as_str() {
                "inf" => f64::INFINITY,
                s => s.parse().map_err(|_| Failure::Usage(format!("--snr expects a number or inf, got '{s}'")))?,
            };
            let mut sweep = cfg.sweep()?;
            sweep.snrs = vec![snr_db];
            sweep.channels = vec![kind];
            evaluate(&cfg, &sweep, "eval.csv", out)
        }
        Command::Sweep(c) => {
            let cfg = resolve(&c)?;
            let sweep = cfg.sweep()?;
            evaluate(&cfg, &sweep, "results.csv", out)
        }
        Command::GradCheck { points, fault, common } => {
            let cfg = resolve(&common)?;
            let opts = SuiteOptions { points, fault: parse_fault(fault.as_deref())?, ..SuiteOptions::default() };
            let model = cfg.model()?;
            let mut rows = selfcheck::op_checks(&opts);
            rows.extend(selfcheck::block_checks(&opts));
            rows.extend(selfcheck::loss_checks(&opts));
            rows.extend(network_checks(&model, &opts));
            report(&rows, out)
        }
        Command::SelfTest { fault } => {
            let opts = SuiteOptions { fault: parse_fault(fault.as_deref())?, ..SuiteOptions::default() };
            report(&self_test_rows(&opts), out)
        }
    }
}

fn parse_fault(name: Option<&str>) -> Result<Option<OpKind>, Failure> {
    let Some(name) = name else { return Ok(None) };
    OpKind::ALL.iter().copied().find(|k| k.name() == name).map(Some).ok_or_else(|| {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        Failure::Usage(format!("unknown op '{name}'; ops are: {}", names.join(", ")))
    })
}

/// Rows of `self-test`: every op, block and loss gradient, the loss
/// oracles, channel statistics on 10⁵ symbols and the digital chain.
pub fn self_test_rows(opts: &SuiteOptions) -> Vec<CheckRow> {
    let mut rows = selfcheck::op_checks(opts);
    rows.extend(selfcheck::block_checks(opts));
    rows.extend(selfcheck::loss_checks(opts));
    rows.extend(selfcheck::loss_oracle_checks(opts.seed));
    rows.extend(selfcheck::channel_checks(100, 1000, 10_000));
    rows.extend(digital_checks());
    rows
}

/// Fixed-width pass/fail table.
pub fn render_table(rows: &[CheckRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:<34} {:>7} {:>12}  result", "group", "check", "points", "max_err");
    for r in rows {
        let verdict = if r.passed { "PASS".to_string() } else { format!("FAIL {}", r.detail) };
        let _ = writeln!(s, "{:<8} {:<34} {:>7} {:>12.3e}  {verdict}", r.group, r.name, r.points, r.max_rel_err);
    }
    s
}

fn report(rows: &[CheckRow], out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let _ = write!(out, "{}", render_table(rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Check(failed))
    }
}

fn gen_data(cfg: &Config, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let spec = cfg.corpus()?;
    let (n_valid, n_test) = cfg.split_sizes()?;
    let dir = prepare(cfg)?;
    std::fs::create_dir_all(dir.join("data")).map_err(runtime)?;
    for (split, s) in [("train", spec.clone()), ("valid", spec.validation(n_valid)), ("test", spec.held_out(n_test))] {
        let corpus = generate_corpus(&s).map_err(runtime)?;
        let p = corpus_path(&dir, split);
        save_corpus(&corpus, &p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        let _ = writeln!(out, "{split}: {} utterances -> {}", corpus.len(), p.display());
    }
    Ok(())
}

fn train(cfg: &Config, stage: u8, resume: bool, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let tc = cfg.train(stage)?;
    let nets = Networks::new(&cfg.model()?).map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = cfg.out_dir();
    // dependencies first, so a missing checkpoint is reported before any work
    let prior: Vec<ParamStore> = (1..stage).map(|s| load_stage(&dir, s)).collect::<Result<_, _>>()?;
    let corpus = load_split(&dir, "train")?;
    let resume_from = if resume { Some(load_stage(&dir, stage)?) } else { None };
    let dir = prepare(cfg)?;
    let result = match stage {
        1 => pipeline::train_stage1(&nets, &tc, &corpus, resume_from.as_ref()),
        2 => {
            let valid = load_split(&dir, "valid")?;
            pipeline::train_stage2(&nets, &tc, &corpus, &prior[0], &valid, resume_from.as_ref())
        }
        _ => pipeline::train_stage3(&nets, &tc, &corpus, &prior[0], &prior[1], resume_from.as_ref()),
    };
    let outcome: TrainOutcome = match result {
        Ok(o) => o,
        Err(PipelineError::Diverged { stage, step, loss, last_good }) => {
            let p = dir.join(format!("stage{stage}.last_good.ckpt"));
            last_good.save(&p).map_err(runtime)?;
            return Err(runtime(format!(
                "stage {stage} diverged at step {step} (loss {loss}); last good parameters in {}",
                p.display()
            )));
        }
        Err(e) => return Err(runtime(e)),
    };
    let ck = checkpoint_path(&dir, stage);
    outcome.checkpoint.save(&ck).map_err(runtime)?;
    write_loss_csv(&outcome.losses, dir.join(format!("stage{stage}_losses.csv"))).map_err(runtime)?;
    let mut metrics = String::new();
    for (k, v) in &outcome.metrics {
        let _ = writeln!(metrics, "{k} = {v}");
    }
    write(&dir.join(format!("stage{stage}_metrics.txt")), &metrics)?;
    let _ = write!(out, "{metrics}");
    for w in &outcome.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let _ = writeln!(out, "stage {stage} checkpoint -> {}", ck.display());
    Ok(())
}

fn needed_stage(systems: &[System]) -> u8 {
    systems
        .iter()
        .map(|s| match s {
            System::RossFull => 3,
            System::GeneratorOnly => 2,
            _ => 1,
        })
        .max()
        .unwrap_or(1)
}

fn evaluate(cfg: &Config, sweep: &SweepConfig, file: &str, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    sweep.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let nets = Networks::new(&cfg.model()?).map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = cfg.out_dir();
    let paths: Vec<(u8, PathBuf)> = (1..=needed_stage(&sweep.systems)).map(|s| (s, checkpoint_path(&dir, s))).collect();
    let refs: Vec<(u8, &Path)> = paths.iter().map(|(s, p)| (*s, p.as_path())).collect();
    let bundle = Bundle::load(&nets, &refs).map_err(runtime)?;
    let test = load_split(&dir, "test")?;
    let dir = prepare(cfg)?;
    let reports: Vec<MetricReport> = snr_sweep(sweep, &bundle, &test).map_err(runtime)?;
    let csv = results_csv(&reports);
    let p = dir.join(file);
    write(&p, &csv)?;
    let _ = write!(out, "{csv}");
    for r in &reports {
        if !r.failures.is_empty() {
            let _ = writeln!(out, "warning: {} {} {} dB: {} failed utterances", r.system.name(), r.channel.name(), r.snr_db, r.failures.len());
        }
    }
    let _ = writeln!(out, "results -> {}", p.display());
    Ok(())
}
