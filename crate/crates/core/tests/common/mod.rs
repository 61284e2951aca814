#![allow(dead_code)]

use std::path::PathBuf;

use deepinsight_core::gateway::mock::{MockScript, MockServer};
use deepinsight_core::gateway::{ApiKey, Gateway, GatewayConfig, RetryPolicy};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

pub fn annotation_script() -> MockScript {
    serde_json::from_str(&read_fixture("mock_annotation_script.json")).expect("mock script parses")
}

pub fn gateway_for(server: &MockServer) -> Gateway {
    let config = GatewayConfig {
        endpoint: server.endpoint(),
        retry: RetryPolicy::fast(2),
        ..GatewayConfig::default()
    };
    Gateway::new(config, Some(ApiKey::new("test-key"))).expect("gateway builds")
}
