#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use ststnet::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text, Path::new("/fuzz")) {
        let _ = cfg.validate();
        let _ = cfg.hash();
    }
});
