#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, records)) = chips_core::datastore::shard::decode_shard(data) {
        let again = chips_core::datastore::shard::encode_shard(header.d_v, header.d_t, header.has_tags, &records).unwrap();
        assert_eq!(chips_core::datastore::shard::decode_shard(&again).unwrap().1, records);
    }
});
