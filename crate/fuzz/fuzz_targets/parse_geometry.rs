#![no_main]

use internodes::geometry::{parse_geometry, write_geometry};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(patches) = parse_geometry(text) {
        for p in &patches {
            let mid = vec![0.5; p.dim()];
            let _ = p.map(&mid);
        }
        let again = parse_geometry(&write_geometry(&patches)).expect("written geometry parses");
        assert_eq!(again.len(), patches.len());
    }
});
