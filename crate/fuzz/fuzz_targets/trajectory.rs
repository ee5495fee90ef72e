#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = chips_core::datastore::params::decode_trajectory(data);
});
