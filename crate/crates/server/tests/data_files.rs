//! Shipped phantom/config files must equal the built-in defaults.
//! Regenerate with `SELDINGER_BLESS=1 cargo test --test data_files`.

use std::path::PathBuf;

use seldinger_core::mechanism::DeviceConfig;
use seldinger_core::PhantomModel;

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn bless() -> bool {
    std::env::var_os("SELDINGER_BLESS").is_some()
}

#[test]
fn phantoms_match_defaults() {
    for (file, model) in [("phantoms/human.json", PhantomModel::human()), ("phantoms/porcine.json", PhantomModel::porcine())] {
        let path = data(file);
        if bless() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, model.to_json() + "\n").unwrap();
        }
        let parsed = PhantomModel::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed, model, "{file}");
    }
}

#[test]
fn configs_match_defaults() {
    for (file, cfg) in [("configs/human.json", DeviceConfig::human()), ("configs/porcine.json", DeviceConfig::porcine())] {
        let path = data(file);
        if bless() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, cfg.to_json() + "\n").unwrap();
        }
        let parsed = DeviceConfig::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed, cfg, "{file}");
    }
}
