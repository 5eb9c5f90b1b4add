#![no_main]

use flowiar::harness::ExperimentSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = ExperimentSpec::from_toml(text) {
            assert_eq!(ExperimentSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        }
    }
});
