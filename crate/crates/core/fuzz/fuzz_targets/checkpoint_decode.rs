#![no_main]

use flowiar::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
        let _ = ck.restore();
    }
});
