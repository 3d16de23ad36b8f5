#![no_main]

use kvevict::budget::parse_budget_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(list) = parse_budget_list(s) else { return };
    for b in list {
        let again = parse_budget_list(&b.to_string()).expect("display parses");
        for lp in [1, 7, 4096, usize::MAX / 2] {
            let t = b.resolve(lp);
            assert!(t >= 1);
            assert_eq!(again[0].resolve(lp), t);
        }
    }
});
