mod audit;
mod corpus;
mod entropy;
mod eval;
mod serve;

use std::path::Path;

use deepinsight_core::Gateway;
use serde::Serialize;

use crate::args::Command;
use crate::config::Settings;
use crate::error::{failure, CliError, CliResult};

pub struct Ctx {
    pub json: bool,
    pub seed: u64,
    pub settings: Settings,
}

impl Ctx {
    /// Client for the configured endpoint; the key comes from the
    /// environment variable named in the gateway config.
    pub fn gateway(&self) -> CliResult<Gateway> {
        Gateway::from_env(self.settings.service.gateway.clone())
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn print_json<T: Serialize>(&self, value: &T) -> CliResult {
        let text = serde_json::to_string_pretty(value).map_err(failure)?;
        println!("{text}");
        Ok(())
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Failure(format!("cannot read {}: {e}", path.display())))
}

pub async fn dispatch(command: Command, ctx: Ctx) -> CliResult {
    match command {
        Command::Annotate(a) => corpus::annotate(&ctx, a).await,
        Command::Validate(a) => corpus::validate(&ctx, &a.input),
        Command::Stats(a) => corpus::stats(&ctx, &a.input),
        Command::EmitStages(a) => corpus::emit_stages(&ctx, a),
        Command::Judge(a) => eval::judge(&ctx, a).await,
        Command::Reward(a) => eval::reward(&ctx, a).await,
        Command::Entropy(c) => entropy::run(&ctx, c),
        Command::Audit(c) => audit::run(&ctx, c),
        Command::Serve(a) => serve::serve(ctx, a).await,
        Command::MockLlm(a) => serve::mock_llm(a).await,
    }
}
