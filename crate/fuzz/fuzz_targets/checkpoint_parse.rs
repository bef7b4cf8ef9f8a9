#![no_main]

use libfuzzer_sys::fuzz_target;
use symnet::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        // accepted inputs must round-trip bit-exactly
        let bytes = ck.to_bytes();
        assert_eq!(bytes, data, "parse/serialize round-trip changed the bytes");
        let again = Checkpoint::from_bytes(&bytes).expect("serialized checkpoint reparses");
        assert_eq!(again, ck);
    }
});
