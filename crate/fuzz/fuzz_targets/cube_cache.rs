#![no_main]

use libfuzzer_sys::fuzz_target;
use ststnet::flow::{parse_cube_cache, write_cube_cache};

fuzz_target!(|data: &[u8]| {
    if let Ok(cubes) = parse_cube_cache(data) {
        let mut buf = Vec::new();
        write_cube_cache(&mut buf, &cubes).expect("rewrite");
        assert_eq!(parse_cube_cache(&buf).expect("reparse").len(), cubes.len());
    }
});
