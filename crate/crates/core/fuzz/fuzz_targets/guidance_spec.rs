#![no_main]
use complab::experiment::Scenario;
use complab::guidance::GuidanceConfig;
use complab::net::TrainMode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(g) = data.parse::<GuidanceConfig>() {
        g.validate().expect("parsed guidance is valid");
        let text = g.to_string();
        let again: GuidanceConfig = text.parse().expect("displayed guidance parses");
        assert_eq!(again.to_string(), text);
    }
    let _ = data.parse::<Scenario>();
    let _ = data.parse::<TrainMode>();
});
