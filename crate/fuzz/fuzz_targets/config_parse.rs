#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = inhoc::config::parse_config_str(text) {
        // validation must reject bad values without panicking
        let _ = cfg.validate();
        let again = inhoc::config::parse_config_str(&cfg.to_toml()).expect("emitted TOML reparses");
        assert_eq!(again.federation.n_cls, cfg.federation.n_cls);
    }
});
