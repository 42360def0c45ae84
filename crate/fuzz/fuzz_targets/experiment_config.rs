#![no_main]

use libfuzzer_sys::fuzz_target;
use denn_cli::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(value) = ExperimentConfig::from_toml(text) else { return };
    let text = value.to_toml();
    let again = ExperimentConfig::from_toml(&text).expect("serialised form reparses");
    assert_eq!(again.to_toml(), text);
});
