#![no_main]

use inhoc::model::{forward, ModelParams};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(params) = ModelParams::from_json(text) {
        let x = vec![1.0; params.input_dim()];
        // overflow is reported as an error, never a panic
        let _ = forward(&params, &x);
        assert_eq!(ModelParams::from_json(&params.to_json()).unwrap(), params);
    }
});
