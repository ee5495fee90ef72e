#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = chips_core::datastore::surrogate::decode_surrogate(data);
});
