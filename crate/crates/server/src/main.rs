use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use coachme_core::{Catalog, CoachMe};
use coachme_server::{router, App, Settings, SystemClock};

#[derive(Debug, Parser)]
#[command(
    name = "coachme-server",
    about = "CoachMe caregiver API and bot ingress"
)]
struct Args {
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides COACHME_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Overrides COACHME_PORT.
    #[arg(long)]
    port: Option<u16>,
    /// Directory holding pool.json, templates.json, vocabulary.json, corpus.json.
    #[arg(long)]
    catalog_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Args::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coachme-server: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let mut settings = Settings::load(args.config.as_deref(), |k| std::env::var(k).ok())?;
    if let Some(dir) = args.data_dir {
        settings.data_dir = dir;
    }
    if let Some(port) = args.port {
        settings.port = port;
    }
    if let Some(dir) = args.catalog_dir {
        settings.catalog_dir = Some(dir);
    }
    let catalog = match &settings.catalog_dir {
        Some(dir) => Catalog::load_dir(dir)?,
        None => Catalog::starter(),
    };
    std::fs::create_dir_all(&settings.data_dir)?;
    let (svc, recovered) = CoachMe::open(
        settings.core.clone(),
        catalog,
        &settings.data_dir,
        Arc::new(SystemClock),
    )?;
    if let Some(e) = recovered {
        eprintln!("coachme-server: recovered from damaged log tail: {e}");
    }
    eprintln!(
        "coachme-server: {} events replayed, listening on {}",
        svc.log().last_seq(),
        settings.addr()
    );
    let app = App::new(svc, settings.token.clone());
    let listener = tokio::net::TcpListener::bind(settings.addr()).await?;
    axum::serve(listener, router(app.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    let data_dir = settings.data_dir.clone();
    app.with_service(|svc| -> Result<(), coachme_core::ServiceError> {
        svc.flush()?;
        svc.write_snapshot(&data_dir)?;
        Ok(())
    })?;
    Ok(())
}
