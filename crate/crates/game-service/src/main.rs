use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;

use pragma_game_service::{router, Store};

#[derive(Parser)]
#[command(version, about = "Serve reference games to human listeners")]
struct Args {
    /// Data directory with scenes, pair sets and captions.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let store =
        Store::open(&args.data).with_context(|| format!("opening {}", args.data.display()))?;
    eprintln!(
        "{} pair sets, {} sessions on record",
        store.catalog.pair_sets.len(),
        store.session_ids().len()
    );
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
