use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use triage_core::corpus::{generate_corpus, split};
use triage_core::ingest::{read_raw_emails, RawEmail};

use crate::config::Config;
use crate::registry::trainable_rows;
use crate::service::Service;

#[derive(Debug, Parser)]
#[command(name = "triage", version, about = "Help-desk email triage engine")]
pub struct Cli {
    /// TOML config file; TRIAGE_* environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for corpus generation, splits and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus, mapping table and sender directory.
    GenCorpus {
        /// Output directory; defaults to the directory of `inputs.corpus`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Builds and publishes the next model version.
    Train,
    /// Scores the current version on the held-out share of the corpus.
    Eval,
    /// Routes the emails in a JSON or JSON-lines file without recording them.
    Classify { file: PathBuf },
    /// Runs the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

impl Cli {
    pub fn load_config(&self) -> anyhow::Result<Config> {
        let mut cfg = Config::load(self.config.as_deref(), self.seed).context("loading configuration")?;
        if let Some(dir) = self.config.as_deref().and_then(|p| p.parent()) {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read_emails(file: &std::path::Path) -> anyhow::Result<Vec<RawEmail>> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        Ok(serde_json::from_str(trimmed)?)
    } else if trimmed.starts_with('{') && serde_json::from_str::<RawEmail>(trimmed).is_ok() {
        Ok(vec![serde_json::from_str(trimmed)?])
    } else {
        Ok(read_raw_emails(&text)?)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.load_config()?;
    match cli.command {
        Command::GenCorpus { out } => {
            let dir = out
                .or_else(|| cfg.inputs.corpus.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let corpus = generate_corpus(&cfg.generator)?;
            corpus.write_to(&dir)?;
            print_json(&json!({
                "dir": dir,
                "emails": corpus.emails.len(),
                "categories": cfg.generator.n_categories,
                "seed": cfg.generator.seed,
            }))
        }
        Command::Train => {
            let svc = Service::open(cfg)?;
            let reg = svc.retrain()?;
            print_json(&reg)
        }
        Command::Eval => {
            let svc = Service::open(cfg)?;
            let Some(dep) = svc.deployed() else {
                bail!("no model version has been built; run `train` first");
            };
            let (rows, _) = trainable_rows(svc.base().rows.clone());
            let (_, test) = split(&rows, svc.config().seed)?;
            let (flat, gated) = dep.ctx.model.evaluate(&test)?;
            print_json(&json!({
                "version": dep.registry.version,
                "test_rows": test.len(),
                "flat": flat,
                "gated": gated,
            }))
        }
        Command::Classify { file } => {
            let svc = Service::open(cfg)?;
            for raw in read_emails(&file)? {
                let (outcome, ml) = svc.dry_run(&raw)?;
                println!(
                    "{}",
                    serde_json::to_string(&json!({"email_id": raw.id, "outcome": outcome, "ml": ml}))?
                );
            }
            Ok(())
        }
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| cfg.bind.clone());
            let svc = Arc::new(Service::open(cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&bind)
                    .await
                    .with_context(|| format!("binding {bind}"))?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                axum::serve(listener, crate::http::app(svc))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok(())
            })
        }
    }
}
