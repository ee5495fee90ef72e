#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, records)) = chips_core::datastore::scores::decode_scores(data) {
        let again = chips_core::datastore::scores::encode_scores(&header, &records).unwrap();
        assert_eq!(again, data);
    }
});
