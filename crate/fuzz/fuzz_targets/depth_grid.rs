#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = occgrasp::camera::io::parse_float_grid(data);
});
