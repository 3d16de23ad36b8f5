#![no_main]

use kvevict_core::trace::{decode_trace, write_trace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must validate, widen per layer, and re-encode to the same bytes.
    let Ok(trace) = decode_trace(data) else { return };
    trace.validate().expect("decoded trace validates");
    for l in 0..trace.num_layers() {
        trace.layer(l).expect("decoded layer widens");
    }
    let mut out = Vec::new();
    write_trace(&trace, &mut out).expect("re-encode");
    assert_eq!(out, data);
});
