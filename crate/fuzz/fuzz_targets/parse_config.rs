#![no_main]

use internodes::harness::parse_config;
use libfuzzer_sys::fuzz_target;

// Accepted configurations must survive a serialize/parse round trip.
fuzz_target!(|text: &str| {
    if let Ok(cfg) = parse_config(text) {
        let _ = cfg.options();
        let again = toml::to_string(&cfg).expect("accepted config serializes");
        parse_config(&again).expect("serialized config parses");
    }
});
