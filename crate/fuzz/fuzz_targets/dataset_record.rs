#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = denkf::tasks::parse_record(line) {
        let again = serde_json::to_string(&rec).unwrap();
        assert_eq!(denkf::tasks::parse_record(&again).unwrap(), rec);
    }
});
