#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = chips_core::datastore::params::decode_params(data) {
        let again = chips_core::datastore::params::encode_params(&p).unwrap();
        assert_eq!(chips_core::datastore::params::decode_params(&again).unwrap(), p);
    }
});
