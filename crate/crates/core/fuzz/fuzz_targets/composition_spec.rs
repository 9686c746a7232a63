#![no_main]
use complab::guidance::CompositionSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(spec) = data.parse::<CompositionSpec>() {
        spec.validate().expect("parsed composition is valid");
        let text = spec.to_string();
        let again: CompositionSpec = text.parse().expect("displayed composition parses");
        assert_eq!(again, spec);
    }
});
