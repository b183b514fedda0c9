//! The user-facing surface of datax: declarative manifests, the control
//! plane service, its HTTP API, the `datax` CLI, and synthetic workers.

pub mod cli;
pub mod client;
pub mod http;
pub mod kind;
pub mod manifest;
pub mod service;
pub mod synth;

use std::sync::Arc;

pub use kind::Kind;
pub use service::{ApplyReport, ControlPlane, Outcome, PlatformOptions, ServiceError};

/// Runs the control plane and API server until interrupted.
pub fn serve(args: cli::ServeArgs) -> Result<(), Box<dyn std::error::Error>> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();

    let scratch;
    let work_dir = match &args.work_dir {
        Some(dir) => dir.clone(),
        None => {
            scratch = std::env::temp_dir().join(format!("datax-{}", std::process::id()));
            scratch.clone()
        }
    };
    let mut options = PlatformOptions::new(work_dir);
    options.data_dir = args.data_dir.clone();
    options.node_id = args.node_id.clone();
    options.node_capacity = args.capacity;
    options.broker_listen = args.broker_listen;
    let cp = ControlPlane::start(options)?;
    if let Some(addr) = cp.broker_addr() {
        tracing::info!(%addr, "broker listening");
    }
    http::serve_forever(Arc::clone(&cp), args.listen)?;
    cp.shutdown();
    Ok(())
}
