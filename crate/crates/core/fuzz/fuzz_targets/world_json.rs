#![no_main]
use complab::world::World;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(world) = World::from_json_str(data) {
        let text = world.to_json_string().expect("a parsed world serializes");
        let again = World::from_json_str(&text).expect("serialized world parses");
        assert_eq!(again.to_json_string().unwrap(), text);
    }
});
