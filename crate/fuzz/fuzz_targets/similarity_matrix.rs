#![no_main]

use libfuzzer_sys::fuzz_target;
use denn_core::generality::SimilarityMatrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(value) = SimilarityMatrix::parse(text) else { return };
    let text = value.to_text();
    let again = SimilarityMatrix::parse(&text).expect("serialised form reparses");
    assert_eq!(again.to_text(), text);
});
