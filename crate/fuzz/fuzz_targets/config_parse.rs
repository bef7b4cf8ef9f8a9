#![no_main]

use libfuzzer_sys::fuzz_target;
use symnet::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_toml_str(text) else {
        return;
    };
    if cfg.validate().is_ok() {
        // a valid config must survive serialize -> parse unchanged
        let rendered = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&rendered).expect("rendered config reparses");
        assert_eq!(back, cfg, "config round-trip drifted");
    }
});
