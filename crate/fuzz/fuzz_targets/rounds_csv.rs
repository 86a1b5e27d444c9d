#![no_main]

use inhoc::report::{parse_rounds_csv, rounds_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_rounds_csv(data) {
        let out = rounds_to_csv(&rows).unwrap();
        let back = parse_rounds_csv(out.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
    }
});
