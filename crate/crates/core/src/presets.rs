//! Bundled model files.

use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const TANH: &str = include_str!("../models/tanh.toml");
pub const LINEAR: &str = include_str!("../models/linear.toml");
pub const OU: &str = include_str!("../models/ou.toml");
pub const LAPLACE: &str = include_str!("../models/laplace.toml");
pub const ONE_MODE: &str = include_str!("../models/onemode.toml");

pub const NAMES: [&str; 5] = ["tanh", "linear", "ou", "laplace", "onemode"];

pub fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "tanh" => TANH,
        "linear" => LINEAR,
        "ou" => OU,
        "laplace" => LAPLACE,
        "onemode" => ONE_MODE,
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<ModelSpec> {
    let text = source(name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`; available: {}", NAMES.join(", "))))?;
    ModelSpec::from_toml(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_regime, HypothesisParams};

    #[test]
    fn presets_load_and_pass_hypotheses() {
        for name in NAMES {
            let spec = preset(name).unwrap();
            let model = spec.model().unwrap();
            let report = model.check_hypotheses(&HypothesisParams::default()).unwrap();
            assert!(report.pass(), "{name}: {:?}", report.failures());
            spec.initial_slow().unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn study_schedules_are_in_regime() {
        for name in ["tanh", "linear"] {
            let schedule = preset(name).unwrap().schedule().unwrap().unwrap();
            assert!(check_regime(&schedule).unwrap().pass);
            let windows: Vec<f64> = schedule.entries.iter().map(|e| e.window).collect();
            for (w, want) in windows.iter().zip([0.028, 0.016, 0.009]) {
                assert!((w - want).abs() < 1e-12, "{windows:?}");
            }
        }
    }
}
