#![no_main]
use complab::pipeline::{read_records, write_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_records(data) {
        let text = write_records(&records).expect("parsed records serialize");
        let again = read_records(text.as_bytes()).expect("serialized records parse");
        assert_eq!(again, records);
    }
});
