#![no_main]

use kvevict::config::{apply_config_text, Experiment, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut cfg = RunConfig::defaults(Experiment::Recall);
    if apply_config_text(&mut cfg, text).is_ok() {
        let _ = cfg.validate();
        let _ = cfg.describe();
    }
});
