#![no_main]
use complab::metrics::FeatureSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(fs) = FeatureSet::from_jsonl(data) {
        assert_eq!(fs.as_slice().len(), fs.len() * fs.dim());
        assert!(fs.as_slice().iter().all(|v| v.is_finite()));
    }
});
