use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mtldr::cache::{compact, Cache};
use mtldr::commands::{self, default_features_dir, load_config};
use mtldr::dataset::Prepared;
use mtldr::engine::Engine;
use mtldr::service::{self, AppState, ServiceConfig};
use mtldr::synth::{write_corpus, SynthOptions};
use mtldr::AppError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mtldr", version, about = "Multimodal extreme summarization")]
struct Cli {
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract features and build the vocabulary for a manifest.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory [default: <manifest dir>/prepared].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Train a model on prepared features.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Prepared feature directory [default: <manifest dir>/prepared].
        #[arg(long)]
        features: Option<PathBuf>,
        /// Run directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from <out>/last.ckpt.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        json: bool,
    },
    /// Score a checkpoint on every prepared sample.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Write per-split scores as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Summarize one document with optional audio and video features.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// WAV file.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Video feature tensor file.
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "cache.jsonl")]
        cache: PathBuf,
        /// Parent directory for transient request files.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Also fetch plain-http URLs.
        #[arg(long)]
        allow_http_urls: bool,
    },
    /// Rewrite a cache log with one entry per input hash.
    CompactCache {
        #[arg(long)]
        cache: PathBuf,
    },
    /// Write a synthetic corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn features_dir(manifest: &std::path::Path, features: Option<PathBuf>) -> PathBuf {
    features.unwrap_or_else(|| default_features_dir(manifest))
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Prepare { manifest, out, config, json } => {
            let cfg = load_config(config.as_deref(), None)?;
            let out = out.unwrap_or_else(|| default_features_dir(&manifest));
            let r = commands::run_prepare(&manifest, &out, &cfg)?;
            if json {
                let failures: Vec<_> = r.failures.iter().map(|f| json!({"id": f.id, "split": f.split, "reason": f.reason})).collect();
                println!("{}", json!({"prepared": r.prepared, "vocab_size": r.vocab_size, "failures": failures, "out": out}));
            } else {
                println!("prepared {} samples into {} (vocabulary {})", r.prepared, out.display(), r.vocab_size);
                for f in &r.failures {
                    println!("failed {} ({}): {}", f.id, f.split, f.reason);
                }
            }
        }
        Cmd::Train { config, manifest, features, out, seed, resume, json } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let prepared = Prepared::load(&features_dir(&manifest, features))?;
            let outcome = commands::run_train(cfg, &prepared, &out, resume, |m| {
                if m.step % 10 == 0 || m.val_total.is_some() {
                    log::info!("step {} epoch {} lr {:.3e} nll {:.4} total {:.4}", m.step, m.epoch, m.lr, m.nll, m.total);
                }
            })?;
            if json {
                println!("{}", json!({"steps": outcome.steps, "train_nll": outcome.train_nll, "out": outcome.out}));
            } else {
                println!("trained {} steps; train NLL {:.4}; checkpoints in {}", outcome.steps, outcome.train_nll, outcome.out.display());
            }
        }
        Cmd::Evaluate { checkpoint, manifest, features, out, json } => {
            let engine = Engine::load(&checkpoint)?;
            let prepared = Prepared::load(&features_dir(&manifest, features))?;
            let report = commands::run_evaluate(&engine, &prepared)?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            if json {
                let splits: serde_json::Map<_, _> = report
                    .rouge
                    .iter()
                    .map(|(k, m)| {
                        let v = json!({
                            "count": m.count,
                            "rouge1": m.rouge1.percent(),
                            "rouge2": m.rouge2.percent(),
                            "rougeL": m.rouge_l.percent(),
                        });
                        (k.clone(), v)
                    })
                    .collect();
                println!("{}", json!({"samples": report.stats.samples, "novel_ngram_pct": report.stats.novel_ngram_pct, "splits": splits}));
            } else {
                print!("{}", report.to_table());
            }
        }
        Cmd::Summarize { checkpoint, text, audio, video, json } => {
            let engine = Engine::load(&checkpoint)?;
            let inputs = commands::read_inputs(&text, audio.as_deref(), video.as_deref())?;
            let (summary, elapsed) = commands::run_summarize(&engine, &inputs)?;
            let ms = elapsed.as_millis() as u64;
            if json {
                println!("{}", json!({"summary": summary, "elapsed_ms": ms, "id": inputs.content_hash()}));
            } else {
                println!("{summary}");
                eprintln!("({ms} ms)");
            }
        }
        Cmd::Serve { checkpoint, port, cache, work_dir, allow_http_urls } => {
            let engine = Engine::load(&checkpoint)?;
            let work_dir = work_dir.unwrap_or_else(|| std::env::temp_dir().join("mtldr-work"));
            let mut cfg = ServiceConfig::new(&work_dir);
            cfg.allow_http_urls = allow_http_urls;
            let state = Arc::new(AppState::new(Arc::new(engine), Cache::open(&cache)?, cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let addr = SocketAddr::from(([0, 0, 0, 0], port));
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                log::info!("listening on {addr}");
                service::serve(state, listener).await?;
                anyhow::Ok(())
            })?;
        }
        Cmd::CompactCache { cache } => {
            let r = compact(&cache)?;
            println!("compacted {}: {} lines -> {} entries", cache.display(), r.lines_before, r.entries_after);
        }
        Cmd::Synth { out, samples, seed } => {
            let opts = SynthOptions { samples, seed, ..SynthOptions::default() };
            let manifest = write_corpus(&out, &opts)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<AppError>().map_or(1, AppError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
