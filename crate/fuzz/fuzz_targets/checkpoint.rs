#![no_main]

use denkf::training::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // a parsed checkpoint must be usable: shapes were checked on the way in
    if let Ok(ckpt) = Checkpoint::from_json(text) {
        ckpt.models.check_shapes().unwrap();
        let again = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(again.epoch, ckpt.epoch);
    }
});
