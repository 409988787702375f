mod bench;
mod config;
mod pipeline;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use store_core::data::{gen_synthetic, read_embeddings, write_embeddings, write_synthetic_csv};
use store_core::model::evaluate;
use store_core::tokenizer::{tokenize_catalog, train_opmq, train_rq_baseline, write_sid_table, OpmqModel};

use config::{RunConfig, SweepParam, TokenizerKind};
use pipeline::{load_data, load_embeddings, train_run, write_lines, TrainedModel};

#[derive(Parser)]
#[command(name = "store", version, about = "Semantic-ID CTR ranking with sparse attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file and STORE_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic click log and item embeddings.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the semantic-ID tokenizer and write the SID table.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<TokenizerKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign semantic IDs with a trained tokenizer.
    Tokenize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ranking model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        sids: Option<PathBuf>,
        #[arg(long)]
        tokenizer_model: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        tokenizer: Option<TokenizerKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model. Pass the run's resolved_config.toml to
    /// reproduce its validation split, or --data to score a whole file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time dense against block-routed attention.
    BenchAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: Option<SweepParam>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<TokenizerKind, String> {
    match s {
        "opmq" => Ok(TokenizerKind::Opmq),
        "rq" => Ok(TokenizerKind::Rq),
        "raw_id" | "raw-id" => Ok(TokenizerKind::RawId),
        _ => Err(format!("unknown tokenizer {s}; expected opmq, rq or raw_id")),
    }
}

fn load(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    edit(&mut cfg);
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn apply_sweep(cfg: &mut RunConfig, param: SweepParam, v: f64) -> Result<()> {
    let as_count = || -> Result<usize> {
        if v < 1.0 || v.fract() != 0.0 {
            bail!("sweep value {v} must be a positive integer");
        }
        Ok(v as usize)
    };
    match param {
        SweepParam::Epochs => cfg.model.epochs = as_count()?,
        SweepParam::KSid => {
            if cfg.tokenizer.sids.is_some() || cfg.tokenizer.model.is_some() {
                bail!("sweeping k_sid needs the tokenizer trained in process; unset tokenizer.sids and tokenizer.model");
            }
            cfg.model.h = as_count()?;
        }
        SweepParam::Layers => cfg.model.n_layers = as_count()?,
        SweepParam::Rho => cfg.model.sparsity = v,
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { common, out } => {
            let cfg = load(&common, |_| {})?;
            fs::create_dir_all(&out)?;
            let data = gen_synthetic(&cfg.synthetic)?;
            write_synthetic_csv(&data.dataset, &out.join("data.csv"))?;
            write_embeddings(&data.embeddings, &out.join("embeddings.csv"))?;
            cfg.write_resolved(&out)?;
            info!("wrote {} rows, {} items", data.dataset.len(), data.embeddings.len());
        }
        Command::TrainTokenizer {
            common,
            embeddings,
            kind,
            out,
        } => {
            let cfg = load(&common, |c| {
                if embeddings.is_some() {
                    c.data.embeddings = embeddings;
                }
                if let Some(k) = kind {
                    c.tokenizer.kind = k;
                }
            })?;
            fs::create_dir_all(&out)?;
            cfg.write_resolved(&out)?;
            let emb = load_embeddings(&cfg)?;
            let table = match cfg.tokenizer.kind {
                TokenizerKind::Opmq => {
                    let (model, log) = train_opmq(&emb, &cfg.tokenizer.opmq)?;
                    let lines = log
                        .epochs
                        .iter()
                        .map(serde_json::to_string)
                        .collect::<Result<Vec<_>, _>>()?;
                    write_lines(&out.join("tokenizer_log.jsonl"), &lines)?;
                    model.write(&out.join("tokenizer.opmq"))?;
                    tokenize_catalog(&emb, &model)?
                }
                TokenizerKind::Rq => {
                    let (table, model) = train_rq_baseline(&emb, &cfg.tokenizer.rq)?;
                    fs::write(out.join("rq_residuals.json"), serde_json::to_string(&model.residual_sse)?)?;
                    table
                }
                TokenizerKind::RawId => bail!("raw_id needs no tokenizer training"),
            };
            write_sid_table(&table, &out.join("sids.csv"))?;
        }
        Command::Tokenize { model, embeddings, out } => {
            let model = OpmqModel::read(&model)?;
            let emb = read_embeddings(&embeddings)?;
            write_sid_table(&tokenize_catalog(&emb, &model)?, &out)?;
        }
        Command::Train {
            common,
            data,
            embeddings,
            sids,
            tokenizer_model,
            tokenizer,
            epochs,
            out,
        } => {
            let cfg = load(&common, |c| {
                if data.is_some() {
                    c.data.path = data;
                }
                if embeddings.is_some() {
                    c.data.embeddings = embeddings;
                }
                if sids.is_some() {
                    c.tokenizer.sids = sids;
                }
                if tokenizer_model.is_some() {
                    c.tokenizer.model = tokenizer_model;
                }
                if let Some(k) = tokenizer {
                    c.tokenizer.kind = k;
                }
                if let Some(e) = epochs {
                    c.model.epochs = e;
                }
            })?;
            train_run(&cfg, &out)?;
        }
        Command::Eval {
            common,
            model,
            data,
            out,
        } => {
            let cfg = load(&common, |_| {})?;
            let trained = TrainedModel::read(&model)?;
            let ds = match &data {
                Some(p) => {
                    let vocab = trained
                        .vocab
                        .as_ref()
                        .ok_or_else(|| anyhow!("model was trained on in-memory data and has no vocabulary"))?;
                    pipeline::encode_file(&cfg, p, vocab)?
                }
                None => load_data(&cfg)?.val,
            };
            let lookup = trained.lookup_for(&ds)?;
            let summary = evaluate(&trained.model, &ds, &lookup, cfg.train.eval_batch)?;
            let json = serde_json::to_string(&summary)?;
            println!("{json}");
            if let Some(p) = out {
                fs::write(p, format!("{json}\n"))?;
            }
        }
        Command::BenchAttention { common, out } => {
            let cfg = load(&common, |_| {})?;
            let rows = bench::run(&cfg.bench, cfg.model.seed)?;
            write_file(&out, &bench::to_csv(&rows))?;
        }
        Command::Sweep {
            common,
            param,
            values,
            out,
        } => {
            let base = load(&common, |c| {
                if let Some(p) = param {
                    c.sweep.param = p;
                }
                if let Some(v) = values {
                    c.sweep.values = v;
                }
            })?;
            if base.sweep.values.is_empty() {
                bail!("sweep.values is empty");
            }
            fs::create_dir_all(&out)?;
            let name = serde_json::to_value(base.sweep.param)?
                .as_str()
                .unwrap_or("param")
                .to_string();
            let mut csv = format!("{name},epoch,train_loss,val_auc,val_gauc,val_logloss,flops_per_batch,forward_madds\n");
            for &v in &base.sweep.values {
                let mut cfg = base.clone();
                apply_sweep(&mut cfg, base.sweep.param, v)?;
                let dir = out.join(format!("{name}_{}", fmt_value(v)));
                info!("sweep {name}={} -> {}", fmt_value(v), dir.display());
                let outcome = train_run(&cfg, &dir)?;
                for e in &outcome.epochs {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{}",
                        fmt_value(v),
                        e.epoch,
                        e.train_loss,
                        e.val_auc,
                        e.val_gauc,
                        e.val_logloss,
                        e.flops_per_batch,
                        outcome.flops.forward_madds_per_instance
                    );
                }
            }
            fs::write(out.join("sweep.csv"), csv)?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<store_core::Error>() {
            return err.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
    }
    "config"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            let body = serde_json::json!({ "error": { "kind": error_kind(&e), "message": msg } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
