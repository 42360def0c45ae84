#![no_main]

use libfuzzer_sys::fuzz_target;
use denn_core::svcca::CcaResult;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(value) = CcaResult::parse(text) else { return };
    let text = value.to_text();
    let again = CcaResult::parse(&text).expect("serialised form reparses");
    assert_eq!(again.to_text(), text);
});
