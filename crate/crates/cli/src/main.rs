//! Command-line entry point: training, evaluation, generation, cost
//! estimation, data packing, and the equivalence-check suites.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 runtime error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use zebra_core::attention::AttnKind;
use zebra_core::checks::{run_checks, CheckOptions};
use zebra_core::complexity::{sweep, CostModel, Strategy, SWEEP_HEADER};
use zebra_core::data;
use zebra_core::error::Error;
use zebra_core::inference;
use zebra_core::model;
use zebra_core::trainer;
use zebra_core::Result;

#[derive(Parser)]
#[command(
    name = "zebra",
    version,
    about = "Grouped local-global attention language model"
)]
#[command(after_help = config_key_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every config key with its default, for --help.
fn config_key_help() -> String {
    let defaults = RunConfig::default().to_kv();
    let mut out = String::from("Config keys (file or --set key=value; shown with defaults):\n");
    for key in config::KNOWN_KEYS {
        match defaults.get(key) {
            Some(v) => out.push_str(&format!("  {key}={v}\n")),
            None => out.push_str(&format!("  {key}=   (no default)\n")),
        }
    }
    out
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set window=64
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load_with(&self, extra: &[String]) -> Result<RunConfig> {
        let mut all = self.set.clone();
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a text corpus and write a checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus: text file (one document per line), directory of .txt
        /// files, or a packed .zbra file
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics CSV output path
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Length-bucketed perplexity of a checkpoint over a corpus (CSV on stdout)
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Greedy continuation from a checkpoint
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long = "max-new", default_value_t = 64)]
        max_new: usize,
        /// Decode with a different attention strategy than the checkpoint
        /// (global | local | global_approx | group); window/chunk/group
        /// size come from --set window=... etc.
        #[arg(long = "attn-override")]
        attn_override: Option<String>,
    },
    /// Closed-form operation counts (CSV on stdout)
    Flops {
        /// Strategy to report, or "all"
        #[arg(long, default_value = "all")]
        attn: String,
        #[arg(long, default_value_t = 768.0)]
        d: f64,
        #[arg(long, default_value_t = 16384.0)]
        n: f64,
        #[arg(long, default_value_t = 512.0)]
        w: f64,
        #[arg(long, default_value_t = 16.0)]
        c: f64,
        #[arg(long, default_value_t = 4.0)]
        l: f64,
        /// Comma-separated sequence lengths overriding --n
        #[arg(long)]
        grid: Option<String>,
    },
    /// Data utilities
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Run the equivalence-oracle suites
    Check {
        /// Run a single suite (blockwise, global_approx, group, rope,
        /// alibi, cache, grad)
        #[arg(long)]
        suite: Option<String>,
        /// Fault-injection hook: corrupt the blockwise reference mask
        #[arg(long, hide = true)]
        corrupt_blockwise: bool,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Pack a corpus into fixed-length rows in the blob format
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "seq-len", default_value_t = 256)]
        seq_len: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        mask_cross_doc: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            cfg,
            data,
            out,
            metrics,
        } => {
            let mut extra = Vec::new();
            if let Some(d) = &data {
                extra.push(format!("data_path={}", d.display()));
            }
            if let Some(o) = &out {
                extra.push(format!("checkpoint_path={}", o.display()));
            }
            if let Some(m) = &metrics {
                extra.push(format!("metrics_path={}", m.display()));
            }
            let rc = cfg.load_with(&extra)?;
            eprint!("{}", rc.echo());
            let packed = load_training_data(&rc)?;
            let outcome = trainer::train(&rc.train_config()?, &packed)?;
            std::fs::write(&rc.metrics_path, trainer::metrics_csv(&outcome.metrics))?;
            model::save_checkpoint(Path::new(&rc.checkpoint_path), &outcome.weights)?;
            if let Some(reason) = &outcome.aborted {
                eprintln!("training aborted: {reason}; last good checkpoint written");
                return Ok(ExitCode::from(3));
            }
            if let Some(last) = outcome.metrics.last() {
                println!("final step {} loss {}", last.step, last.loss);
            }
            eprintln!(
                "checkpoint -> {}; metrics -> {}",
                rc.checkpoint_path, rc.metrics_path
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            cfg,
            checkpoint,
            data,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = &checkpoint {
                extra.push(format!("checkpoint_path={}", c.display()));
            }
            if let Some(d) = &data {
                extra.push(format!("data_path={}", d.display()));
            }
            let rc = cfg.load_with(&extra)?;
            eprint!("{}", rc.echo());
            let weights = model::load_checkpoint(Path::new(&rc.checkpoint_path))?;
            let docs = data::load_corpus(Path::new(require_data(&rc)?))?;
            let buckets = data::bucket_by_length(&docs, rc.max_bucket_exponent)?;
            let rows = trainer::eval_ppl(&weights, &docs, &buckets, rc.eval_window)?;
            print!("{}", trainer::eval_csv(&rows));
            Ok(ExitCode::SUCCESS)
        }

        Command::Generate {
            cfg,
            checkpoint,
            prompt,
            max_new,
            attn_override,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = &checkpoint {
                extra.push(format!("checkpoint_path={}", c.display()));
            }
            let rc = cfg.load_with(&extra)?;
            let mut weights = model::load_checkpoint(Path::new(&rc.checkpoint_path))?;
            if let Some(kind) = &attn_override {
                weights.config.attn = parse_attn_override(kind, &rc)?;
                weights.config.validate()?;
                eprintln!("attention override: {:?}", weights.config.attn);
            }
            if max_new == 0 {
                return Err(Error::config("--max-new must be >= 1"));
            }
            let mut tokens = vec![data::BOS];
            tokens.extend(data::tokenize(&prompt));
            let out = inference::generate(&weights, &tokens, max_new)?;
            println!("{}", data::detokenize(&out[tokens.len()..])?);
            Ok(ExitCode::SUCCESS)
        }

        Command::Flops {
            attn,
            d,
            n,
            w,
            c,
            l,
            grid,
        } => {
            let m = CostModel::new(d, n, w, c, l)?;
            let kinds: Vec<Strategy> = match attn.as_str() {
                "all" => vec![
                    Strategy::Global,
                    Strategy::Local,
                    Strategy::LocalBanded,
                    Strategy::GlobalApprox,
                    Strategy::Group,
                ],
                "global" => vec![Strategy::Global],
                "local" => vec![Strategy::Local],
                "local_banded" => vec![Strategy::LocalBanded],
                "global_approx" => vec![Strategy::GlobalApprox],
                "group" => vec![Strategy::Group],
                other => return Err(Error::config(format!("--attn: unknown strategy {other:?}"))),
            };
            let lengths: Vec<f64> = match grid {
                Some(g) => g
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::config(format!("--grid: bad length {x:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => vec![n],
            };
            println!("{SWEEP_HEADER}");
            for row in sweep(&m, &lengths, &kinds)? {
                println!("{}", row.csv());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Data { command } => match command {
            DataCommand::Pack {
                input,
                seq_len,
                out,
                mask_cross_doc,
            } => {
                let docs = data::load_corpus(&input)?;
                let packed = data::pack_documents(&docs, seq_len, mask_cross_doc)?;
                data::save_packed(&out, &packed)?;
                println!(
                    "packed {} documents into {} rows of {} ({} tokens, {} padding) -> {}",
                    docs.len(),
                    packed.rows.len(),
                    seq_len,
                    packed.token_count(),
                    packed.padding_count(),
                    out.display()
                );
                Ok(ExitCode::SUCCESS)
            }
        },

        Command::Check {
            suite,
            corrupt_blockwise,
        } => {
            let reports = run_checks(suite.as_deref(), &CheckOptions { corrupt_blockwise })?;
            let mut all_ok = true;
            for r in &reports {
                println!("{}", r.line());
                all_ok &= r.passed;
            }
            Ok(if all_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn require_data(rc: &RunConfig) -> Result<&str> {
    rc.data_path
        .as_deref()
        .ok_or_else(|| Error::config("data_path is required (set --data or data_path=...)"))
}

fn load_training_data(rc: &RunConfig) -> Result<data::PackedData> {
    let path = require_data(rc)?;
    if path.ends_with(".zbra") {
        data::load_packed(Path::new(path))
    } else {
        let docs = data::load_corpus(Path::new(path))?;
        data::pack_documents(&docs, rc.seq_len, rc.mask_cross_doc)
    }
}

fn parse_attn_override(kind: &str, rc: &RunConfig) -> Result<AttnKind> {
    Ok(match kind {
        "global" => AttnKind::Global,
        "local" => AttnKind::Local { window: rc.window },
        "global_approx" => AttnKind::GlobalApprox {
            window: rc.window,
            chunk: rc.chunk,
        },
        "group" => AttnKind::Group {
            group_size: rc
                .group_size
                .ok_or_else(|| Error::config("--attn-override group requires group_size"))?,
            window: rc.window,
        },
        other => {
            return Err(Error::config(format!(
                "--attn-override: unknown strategy {other:?}"
            )))
        }
    })
}
