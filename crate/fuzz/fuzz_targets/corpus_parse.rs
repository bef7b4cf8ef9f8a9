#![no_main]

use libfuzzer_sys::fuzz_target;
use symnet::data::import_parallel_text;

fuzz_target!(|data: &[u8]| {
    // input is two text documents separated by the first NUL byte
    let (src_bytes, tgt_bytes) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let src = String::from_utf8_lossy(src_bytes);
    let tgt = String::from_utf8_lossy(tgt_bytes);
    let _ = import_parallel_text(&src, &tgt, 1, 64);
});
