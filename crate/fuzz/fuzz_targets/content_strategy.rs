#![no_main]

use kvevict_core::policy::{build_pseudo_window, ContentStrategy, PseudoQuerySpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(strategy) = s.parse::<ContentStrategy>() else { return };
    assert_eq!(strategy.to_string().parse::<ContentStrategy>().unwrap(), strategy);

    // Resolve against a short prompt; errors are fine, panics are not.
    let prompt: Vec<u32> = (0..64).map(|i| i % 17).collect();
    for len in [1, 8, 64, 200] {
        let spec = PseudoQuerySpec::new(len, strategy.clone());
        if let Ok(w) = build_pseudo_window(&prompt, &spec) {
            assert_eq!(w.sources.len(), len);
            assert!(w.sources.iter().all(|&i| i < prompt.len()));
        }
    }
});
