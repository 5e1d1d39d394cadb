#![no_main]

use denkf::tasks::DatasetSidecar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(side) = DatasetSidecar::from_json(text) {
        assert_eq!(DatasetSidecar::from_json(&side.to_json().unwrap()).unwrap(), side);
    }
});
