#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(edges) = tgnq_cli::io::parse_edge_list(data) {
        let _ = tgnq_cli::io::build_network(64, &edges);
    }
});
