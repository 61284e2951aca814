use std::io::Write;
use std::net::SocketAddr;

use deepinsight_core::gateway::mock::{MockScript, MockServer};
use deepinsight_service::{serve_on, AppState};
use tokio::net::TcpListener;

use super::{read_text, Ctx};
use crate::args::{MockLlmArgs, ServeArgs};
use crate::error::{failure, CliError, CliResult};

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

/// Announce the address on stdout so scripts can pick up an ephemeral port.
fn announce(line: String) -> CliResult {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").map_err(failure)?;
    out.flush().map_err(failure)
}

pub async fn serve(ctx: Ctx, args: ServeArgs) -> CliResult {
    let mut config = ctx.settings.service.clone();
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    if let Some(dir) = args.audit_dir {
        config.audit_dir = dir;
    }
    let gateway = ctx.gateway()?;
    let listener = TcpListener::bind(config.bind)
        .await
        .map_err(|e| CliError::Failure(format!("cannot bind {}: {e}", config.bind)))?;
    let addr = listener.local_addr().map_err(failure)?;
    let state = AppState::new(config, gateway).map_err(failure)?;
    if state.token.is_none() {
        tracing::warn!("no bearer token configured; the API is open");
    }
    announce(format!("listening on http://{addr}"))?;
    serve_on(listener, state, shutdown_signal())
        .await
        .map_err(failure)
}

pub async fn mock_llm(args: MockLlmArgs) -> CliResult {
    let script = match &args.script {
        Some(path) => serde_json::from_str::<MockScript>(&read_text(path)?)
            .map_err(|e| CliError::Usage(format!("invalid script {}: {e}", path.display())))?,
        None => MockScript::default(),
    };
    let server = MockServer::start(script, SocketAddr::from(([127, 0, 0, 1], args.port)))
        .await
        .map_err(failure)?;
    announce(server.endpoint())?;
    shutdown_signal().await;
    Ok(())
}
