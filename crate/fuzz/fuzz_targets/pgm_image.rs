#![no_main]

use libfuzzer_sys::fuzz_target;
use denn_core::bvp::PgmImage;

fuzz_target!(|data: &[u8]| {
    let Ok(value) = PgmImage::parse(data) else { return };
    let bytes = value.to_bytes();
    let again = PgmImage::parse(&bytes).expect("serialised form reparses");
    assert_eq!(again.to_bytes(), bytes);
});
