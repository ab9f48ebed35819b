#![no_main]

use libfuzzer_sys::fuzz_target;
use ststnet::ststnet::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_model(data) {
        assert_eq!(encode_model(&params), data);
    }
});
