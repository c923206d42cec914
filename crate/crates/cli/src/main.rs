use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sympdx_core::checkpoint::{Checkpoint, CheckpointError};
use sympdx_core::eval::{
    self, EvalError, EvalOptions, EvalSpec, InitCsvRow, SweepCsvRow,
};
use sympdx_core::kb::{gen_toy_kb, validate, Flavor, KbError, KnowledgeBase, ToyKbSpec};
use sympdx_core::patient_sim::{simulate, SimError};
use sympdx_core::rng::{stream_rng, Stream};
use sympdx_core::session::{consult_terminal, SessionEngine, SessionStore, DEFAULT_TOP_K};
use sympdx_core::thresholds::ThresholdInit;
use sympdx_core::trainer::{write_curves_csv, ActionSelection, TrainConfig, TrainError, Trainer};

/// File name of the checkpoint inside a training output directory.
const CHECKPOINT_FILE: &str = "ckpt";

#[derive(Parser, Debug)]
#[command(name = "sympdx", version, about = "Sequential diagnosis by reinforcement-learned inquiry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FlavorArg {
    Probabilistic,
    SetValued,
}

impl From<FlavorArg> for Flavor {
    fn from(f: FlavorArg) -> Self {
        match f {
            FlavorArg::Probabilistic => Flavor::Probabilistic,
            FlavorArg::SetValued => Flavor::SetValued,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic toy knowledge base.
    GenKb {
        #[arg(long, default_value_t = 20)]
        diseases: usize,
        /// Findings shared between diseases, on top of one signature finding each.
        #[arg(long, default_value_t = 10)]
        shared: usize,
        #[arg(long, default_value_t = 1.0)]
        signature_prob: f64,
        #[arg(long, default_value_t = 0.3)]
        noise_prob: f64,
        #[arg(long, value_enum, default_value = "probabilistic")]
        flavor: FlavorArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a knowledge base and list every violation.
    Validate {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Draw simulated patients as JSON lines.
    Simulate {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training config supplying the set-valued Poisson means.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train policy, classifier and thresholds.
    Train {
        #[arg(long)]
        kb: PathBuf,
        /// TOML (or .json) training config; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's episode budget.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output directory for ckpt, curves.csv, thresholds.csv and threshold_log.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out simulated patients.
    Eval {
        /// Checkpoint file or training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Knowledge base to simulate from; the embedded one when absent.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Repeat on consecutive seeds and report mean and std.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Sample inquiries from the policy instead of taking the argmax.
        #[arg(long)]
        sample: bool,
        /// Continue when the knowledge base differs from the training one.
        #[arg(long)]
        allow_kb_mismatch: bool,
        /// Metrics JSON file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-disease threshold table as CSV.
        #[arg(long)]
        thresholds_out: Option<PathBuf>,
    },
    /// Train once adaptively and once per fixed threshold, then evaluate.
    SweepFixed {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,1,0.1,0.01")]
        thresholds: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for sweep.csv and sweep.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adaptively from several initial thresholds, then evaluate.
    SweepInit {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Uniform values, or `random:LOW:HIGH:SEED`.
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,2,4,random:0.1:4:7")]
        inits: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for sweep_init.csv and sweep_init.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Interactive consultation in the terminal.
    Consult {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Serve the HTTP consultation API.
    Serve {
        /// Starts without a model (every session request gets 503) when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static files served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1800)]
        idle_timeout_secs: u64,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Data(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Data(_) => "data",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Checkpoint(e) => e.into(),
            EvalError::Train(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        Some(p) => TrainConfig::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => Ok(TrainConfig::default()),
    }
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn parse_init(s: &str) -> Result<ThresholdInit, CliError> {
    let bad = || CliError::Data(format!("bad threshold init `{s}`"));
    if let Some(rest) = s.strip_prefix("random") {
        let parts: Vec<&str> = rest.split(':').filter(|p| !p.is_empty()).collect();
        let (low, high, seed) = match parts[..] {
            [] => (0.1, 4.0, 0),
            [l, h, sd] => (
                l.parse().map_err(|_| bad())?,
                h.parse().map_err(|_| bad())?,
                sd.parse().map_err(|_| bad())?,
            ),
            _ => return Err(bad()),
        };
        return Ok(ThresholdInit::Random { low, high, seed });
    }
    s.parse().map(ThresholdInit::Uniform).map_err(|_| bad())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenKb {
            diseases,
            shared,
            signature_prob,
            noise_prob,
            flavor,
            seed,
            out,
        } => {
            let spec = ToyKbSpec {
                flavor: flavor.into(),
                ..ToyKbSpec::new(diseases, shared, signature_prob, noise_prob)
            };
            let kb = gen_toy_kb(&spec, seed)?;
            kb.save(&out)?;
            log::info!("wrote {} ({} findings, {} diseases)", out.display(), kb.n_findings(), kb.n_diseases());
        }
        Command::Validate { kb } => {
            let text = fs::read_to_string(&kb).map_err(|e| CliError::Data(format!("{}: {e}", kb.display())))?;
            let parsed: KnowledgeBase =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", kb.display())))?;
            let report = validate(&parsed);
            if !report.is_empty() {
                for v in &report.violations {
                    eprintln!("{v}");
                }
                return Err(CliError::Data(format!("{} violations", report.violations.len())));
            }
            println!("ok: {} findings, {} diseases", parsed.n_findings(), parsed.n_diseases());
        }
        Command::Simulate {
            kb,
            n,
            seed,
            config,
            out,
        } => {
            let kb = KnowledgeBase::load(&kb)?;
            let cfg = load_config(config.as_deref())?;
            let mut text = String::new();
            for i in 0..n {
                let mut rng = stream_rng(seed, Stream::Simulation, 0, i as u64);
                text.push_str(&simulate(&kb, &mut rng, &cfg.sim)?.to_json_line());
                text.push('\n');
            }
            match out {
                Some(p) => fs::write(&p, text).map_err(io_err(&p))?,
                None => io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| CliError::Runtime(e.to_string()))?,
            }
        }
        Command::Train {
            kb,
            config,
            seed,
            episodes,
            out,
        } => {
            let kb = KnowledgeBase::load(&kb)?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(e) = episodes {
                cfg.total_episodes = e;
            }
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let n_windows = cfg.n_windows();
            let mut trainer = Trainer::new(&kb, cfg)?;
            while !trainer.is_done() {
                let row = trainer.run_window()?;
                if row.window % 50 == 0 || row.window + 1 == n_windows {
                    log::info!(
                        "window {}/{n_windows}: acc {:.3} turns {:.2} return {:.3} K mean {:.4}",
                        row.window + 1,
                        row.accuracy,
                        row.mean_turns,
                        row.mean_return,
                        row.threshold_mean
                    );
                }
            }
            let outcome = trainer.finish();
            outcome.checkpoint.save(out.join(CHECKPOINT_FILE))?;
            write_curves_csv(&outcome.curves, out.join("curves.csv"))?;
            eval::write_thresholds_csv(&outcome.checkpoint.thresholds, &kb, out.join("thresholds.csv"))?;
            let mut log_text = String::new();
            for entry in &outcome.threshold_log {
                log_text.push_str(&serde_json::to_string(entry).expect("serializable"));
                log_text.push('\n');
            }
            let log_path = out.join("threshold_log.jsonl");
            fs::write(&log_path, log_text).map_err(io_err(&log_path))?;
            log::info!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            kb,
            n,
            seed,
            repeat,
            sample,
            allow_kb_mismatch,
            out,
            thresholds_out,
        } => {
            let ckpt = Checkpoint::load(checkpoint_path(&checkpoint))?;
            let kb = match kb {
                Some(p) => KnowledgeBase::load(&p)?,
                None => ckpt.kb.clone(),
            };
            let opts = EvalOptions {
                selection: if sample {
                    ActionSelection::Sample
                } else {
                    ActionSelection::Greedy
                },
                allow_kb_mismatch,
            };
            if repeat > 1 {
                let metrics = eval::evaluate_repeated(&ckpt, &kb, n, seed, repeat, &opts)?;
                write_json(&metrics, out.as_deref())?;
            } else {
                let metrics = eval::evaluate(&ckpt, &kb, n, seed, &opts)?;
                write_json(&metrics, out.as_deref())?;
            }
            if let Some(p) = thresholds_out {
                eval::write_thresholds_csv(&ckpt.thresholds, &ckpt.kb, &p)?;
            }
        }
        Command::SweepFixed {
            kb,
            config,
            thresholds,
            episodes,
            n,
            seed,
            out,
        } => {
            let kb = KnowledgeBase::load(&kb)?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = episodes {
                cfg.total_episodes = e;
            }
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let rows = eval::fixed_threshold_sweep(&kb, &cfg, &thresholds, &EvalSpec { n_patients: n, seed })?;
            let flat: Vec<SweepCsvRow> = rows.iter().map(SweepCsvRow::from).collect();
            eval::write_rows_csv(&flat, out.join("sweep.csv"))?;
            write_json(&rows, Some(&out.join("sweep.json")))?;
        }
        Command::SweepInit {
            kb,
            config,
            inits,
            episodes,
            n,
            seed,
            out,
        } => {
            let kb = KnowledgeBase::load(&kb)?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = episodes {
                cfg.total_episodes = e;
            }
            let inits = inits.iter().map(|s| parse_init(s)).collect::<Result<Vec<_>, _>>()?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let rows = eval::init_robustness(&kb, &cfg, &inits, &EvalSpec { n_patients: n, seed })?;
            let flat: Vec<InitCsvRow> = rows.iter().map(InitCsvRow::from).collect();
            eval::write_rows_csv(&flat, out.join("sweep_init.csv"))?;
            write_json(&rows, Some(&out.join("sweep_init.json")))?;
        }
        Command::Consult { checkpoint, top_k } => {
            let ckpt = Checkpoint::load(checkpoint_path(&checkpoint))?;
            let engine = SessionEngine::new(Arc::new(ckpt)).with_top_k(top_k);
            let stdin = io::stdin();
            let done = consult_terminal(&engine, stdin.lock(), io::stdout().lock())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            if done.is_none() {
                return Err(CliError::Data("input ended before a diagnosis".into()));
            }
        }
        Command::Serve {
            checkpoint,
            addr,
            static_dir,
            idle_timeout_secs,
            top_k,
        } => {
            let engine = match checkpoint {
                Some(p) => Some(Arc::new(
                    SessionEngine::new(Arc::new(Checkpoint::load(checkpoint_path(&p))?)).with_top_k(top_k),
                )),
                None => None,
            };
            let store = Arc::new(SessionStore::new(engine, Duration::from_secs(idle_timeout_secs)));
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            runtime
                .block_on(sympdx_server::serve(store, addr, static_dir))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.message() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
