#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = denkf::tasks::parse_dataset(text) {
        let n = records.first().map(|r| r.true_state.len());
        assert!(records.iter().all(|r| Some(r.true_state.len()) == n));
    }
});
