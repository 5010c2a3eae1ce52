#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = occgrasp::occupancy::io::decode_field(data);
});
