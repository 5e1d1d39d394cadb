#![no_main]

use denkf_cli::config::{merge, set_dotted};
use denkf_cli::RunConfig;
use libfuzzer_sys::fuzz_target;
use serde_json::Value;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut value = serde_json::to_value(RunConfig::defaults("smoke").unwrap()).unwrap();
    match serde_json::from_str::<Value>(text) {
        Ok(patch @ Value::Object(_)) => merge(&mut value, patch),
        _ => {
            if set_dotted(&mut value, text).is_err() {
                return;
            }
        }
    }
    if let Ok(config) = serde_json::from_value::<RunConfig>(value) {
        let again: RunConfig = serde_json::from_value(serde_json::to_value(&config).unwrap()).unwrap();
        assert_eq!(again, config);
    }
});
