#![no_main]

use bridgekit::bten::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode(data) {
        let bytes = encode(&entries).expect("decoded entries re-encode");
        assert_eq!(bytes, data);
    }
});
