#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use tokio::process::Command;

pub fn core_fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

pub fn command() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_deepinsight"));
    cmd.env("DEEPINSIGHT_API_KEY", "test-key")
        .env_remove("DEEPINSIGHT_ENDPOINT")
        .env_remove("DEEPINSIGHT_BIND")
        .env_remove("DEEPINSIGHT_AUDIT_DIR")
        .env_remove("DEEPINSIGHT_SERVICE_TOKEN")
        .kill_on_drop(true);
    cmd
}

pub async fn run(args: &[&str]) -> Output {
    command().args(args).output().await.expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Config with millisecond backoff so failure paths finish quickly.
pub fn fast_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        "[gateway.retry]\nmax_retries = 1\nbase_delay_ms = 1\nmax_delay_ms = 5\n[judge]\nmax_in_flight = 4\n",
    )
    .unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
