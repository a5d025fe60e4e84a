#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = dnpr_cli::parse_config(text) {
        // accepted configs must survive their own echo
        let again = dnpr_cli::parse_config(&cfg.to_toml()).expect("echo re-parses");
        assert_eq!(again, cfg);
    }
});
