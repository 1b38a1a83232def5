use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use histoloop_core::cluster::SessionConfig;
use histoloop_service::sessions::{session_id_for, SessionSlot};
use histoloop_service::{DataRoot, ServiceConfig};

use crate::context::print_json;

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service configuration. `--root` and `--port` override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 0 picks a free port.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
}

fn service_config(root: &Path, args: &ServeArgs) -> Result<ServiceConfig> {
    let mut config = ServiceConfig::load(args.config.as_deref())?;
    config.data_root = root.to_path_buf();
    if let Some(p) = args.port {
        config.port = p;
    }
    if let Some(b) = &args.bind {
        config.bind = b.clone();
    }
    Ok(config)
}

fn run_server(config: ServiceConfig) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
    runtime.block_on(histoloop_service::serve(config, std::future::pending()))?;
    Ok(())
}

pub fn serve(root: &Path, args: ServeArgs) -> Result<()> {
    run_server(service_config(root, &args)?)
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    slide: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "annotator")]
    actor: String,
    /// Keep running as the annotation service after opening the session.
    #[arg(long)]
    serve: bool,
    #[command(flatten)]
    service: ServeArgs,
}

pub fn annotate(root: &Path, args: AnnotateArgs) -> Result<()> {
    let config = service_config(root, &args.service)?;
    let data = DataRoot::new(&config.data_root);
    let session_id = session_id_for(&args.slide);
    let slot = match SessionSlot::load(&data, &session_id)? {
        Some(slot) => slot,
        None => {
            let session = SessionConfig { k: args.k.unwrap_or(config.default_k), seed: args.seed.unwrap_or(config.default_seed) };
            SessionSlot::create(&data, &args.slide, session, &args.actor)?
        }
    };
    let progress = slot.session.progress();
    print_json(&serde_json::json!({
        "session_id": slot.meta.session_id,
        "slide_id": slot.meta.slide_id,
        "token": slot.meta.token,
        "finalized": slot.session.is_finalized(),
        "progress": progress,
    }))?;
    drop(slot);
    if args.serve {
        run_server(config)?;
    }
    Ok(())
}
