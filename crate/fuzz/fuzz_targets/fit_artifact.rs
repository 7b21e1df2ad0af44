#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tgnq_cli::io::parse_fit_artifact(data);
});
