#![no_main]

use inhoc::datagen::{SliceDataset, SliceId};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = SliceDataset::read_csv(data, 1, SliceId::Embb) {
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let back = SliceDataset::read_csv(out.as_slice(), 1, SliceId::Embb).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.targets, ds.targets);
    }
});
