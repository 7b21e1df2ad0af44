#![no_main]

use libfuzzer_sys::fuzz_target;
use tgnq_cli::config::{
    EvaluateConfig, FitConfig, InferConfig, ReplicateConfig, SelectConfig, SimulateConfig,
};

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<SimulateConfig>(data);
    let _ = serde_json::from_slice::<FitConfig>(data);
    let _ = serde_json::from_slice::<SelectConfig>(data);
    let _ = serde_json::from_slice::<InferConfig>(data);
    let _ = serde_json::from_slice::<ReplicateConfig>(data);
    let _ = serde_json::from_slice::<EvaluateConfig>(data);
});
