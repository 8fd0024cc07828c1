//! Plain-text key-value configuration.
//!
//! Files hold one `dotted.key = value` pair per line; `#` starts a comment.
//! Command-line `--set key=value` overrides file values. Every known key is
//! declared in [`KEYS`] with its default and description, which is also the
//! source for the CLI help text.

use crate::error::{FaceCycleError, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One configuration key: name, default (empty = unset), description.
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Registry of every configuration key.
pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "arch.profile", default: "paper", help: "architecture profile: paper or tiny" },
    KeySpec { name: "data.corpus_root", default: "", help: "root of the identity/clip/frame corpus" },
    KeySpec { name: "data.image_size", default: "64", help: "square face resolution" },
    KeySpec { name: "data.flip_probability", default: "0.5", help: "stage-1 probability of a mirror pair instead of a frame pair" },
    KeySpec { name: "backbone.weights", default: "", help: "path to the perceptual backbone weight file" },
    KeySpec { name: "backbone.synthetic_seed", default: "", help: "seeded backbone init when no weight file is available" },
    KeySpec { name: "train.stage", default: "1", help: "training stage: 1 (expression) or 2 (identity)" },
    KeySpec { name: "train.batch_size", default: "32", help: "pairs per optimizer step" },
    KeySpec { name: "train.lr_stage1", default: "0.00005", help: "initial learning rate for stage 1" },
    KeySpec { name: "train.lr_stage2", default: "0.0001", help: "initial learning rate for stage 2" },
    KeySpec { name: "train.epochs_stage1", default: "40", help: "stage-1 epochs" },
    KeySpec { name: "train.epochs_stage2", default: "20", help: "stage-2 epochs" },
    KeySpec { name: "train.steps_per_epoch", default: "0", help: "steps per epoch; 0 derives ceil(frames / batch)" },
    KeySpec { name: "train.adam_beta1", default: "0.5", help: "Adam beta1" },
    KeySpec { name: "train.adam_beta2", default: "0.999", help: "Adam beta2" },
    KeySpec { name: "train.lr_drop_factor", default: "10", help: "learning-rate divisor applied at half of total epochs" },
    KeySpec { name: "train.grad_clip_norm", default: "10", help: "global gradient-norm clip" },
    KeySpec { name: "train.seed", default: "0", help: "seed for sampling and initialization" },
    KeySpec { name: "train.checkpoint_every_epochs", default: "0", help: "checkpoint interval in epochs; 0 = automatic" },
    KeySpec { name: "train.stage1_checkpoint", default: "", help: "stage-1 checkpoint required when training stage 2" },
    KeySpec { name: "train.resume_from", default: "", help: "checkpoint to resume from" },
    KeySpec { name: "train.log_every", default: "1", help: "metric log interval in steps" },
    KeySpec { name: "loss.lambda_perc", default: "0.05", help: "perceptual term weight inside cycle losses" },
    KeySpec { name: "loss.alpha_margin", default: "0.1", help: "mean-face margin" },
    KeySpec { name: "loss.w_flow", default: "1", help: "flow cycle loss weight" },
    KeySpec { name: "loss.w_exp", default: "1", help: "expression cycle loss weight" },
    KeySpec { name: "loss.w_id", default: "1", help: "identity cycle loss weight" },
    KeySpec { name: "loss.w_margin", default: "1", help: "margin loss weight" },
    KeySpec { name: "probe.task", default: "expression_classify", help: "probe task: expression_classify or pose_regress" },
    KeySpec { name: "probe.epochs", default: "300", help: "linear probe epochs" },
    KeySpec { name: "probe.lr_initial", default: "30", help: "probe learning rate (classification)" },
    KeySpec { name: "probe.lr_initial_regress", default: "0.01", help: "probe learning rate (regression)" },
    KeySpec { name: "probe.lr_drop_every", default: "80", help: "probe learning-rate drop interval in epochs" },
    KeySpec { name: "probe.batch_size", default: "256", help: "probe batch size (classification default; regression uses 16)" },
    KeySpec { name: "verify.folds", default: "0", help: "cross-validation folds for verification; 0 = single sweep" },
];

/// Parsed configuration: file values overlaid with command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FaceCycleError::io(path, e))?;
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FaceCycleError::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set one key, validating it against the registry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|k| k.name == key) {
            return Err(FaceCycleError::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply repeatable `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                FaceCycleError::Config(format!("--set expects key=value, got '{entry}'"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Raw value: explicit setting, else registry default, else None.
    pub fn get(&self, key: &str) -> Option<&str> {
        if let Some(v) = self.values.get(key) {
            return Some(v.as_str());
        }
        KEYS.iter()
            .find(|k| k.name == key)
            .and_then(|k| (!k.default.is_empty()).then_some(k.default))
    }

    pub fn get_string(&self, key: &str) -> Result<String> {
        self.get(key)
            .map(str::to_string)
            .ok_or_else(|| FaceCycleError::Config(format!("missing required config key '{key}'")))
    }

    pub fn get_path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.get_string(key)?))
    }

    pub fn get_opt_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn get_f32(&self, key: &str) -> Result<f32> {
        self.parse(key)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_string(key)?;
        raw.parse().map_err(|_| {
            FaceCycleError::Config(format!("config key '{key}': cannot parse '{raw}'"))
        })
    }

    /// Every effective key-value pair (defaults plus overrides), for log
    /// headers and run-directory hashing.
    pub fn effective(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for k in KEYS {
            if let Some(v) = self.get(k.name) {
                out.insert(k.name.to_string(), v.to_string());
            }
        }
        out
    }
}

/// Help text block enumerating every config key with its default.
pub fn render_key_help() -> String {
    let mut out = String::from("Configuration keys (file `key = value` lines or --set key=value):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "(unset)" } else { k.default };
        out.push_str(&format!("  {:<32} default: {:<12} {}\n", k.name, default, k.help));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_paper_hyperparameters() {
        let cfg = Config::empty();
        assert_eq!(cfg.get_f32("train.lr_stage1").unwrap(), 5e-5);
        assert_eq!(cfg.get_f32("train.lr_stage2").unwrap(), 1e-4);
        assert_eq!(cfg.get_usize("train.batch_size").unwrap(), 32);
        assert_eq!(cfg.get_f32("train.adam_beta1").unwrap(), 0.5);
        assert_eq!(cfg.get_f32("train.adam_beta2").unwrap(), 0.999);
        assert_eq!(cfg.get_usize("train.epochs_stage1").unwrap(), 40);
        assert_eq!(cfg.get_usize("train.epochs_stage2").unwrap(), 20);
        assert_eq!(cfg.get_f32("loss.lambda_perc").unwrap(), 0.05);
        assert_eq!(cfg.get_f32("loss.alpha_margin").unwrap(), 0.1);
        assert_eq!(cfg.get_f32("train.lr_drop_factor").unwrap(), 10.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = Config::empty();
        assert!(cfg.set("tran.lr", "1").is_err());
        assert!(cfg
            .apply_overrides(&["data.image_size=32".to_string()])
            .is_ok());
        assert_eq!(cfg.get_usize("data.image_size").unwrap(), 32);
    }

    #[test]
    fn file_parse_and_override_precedence() {
        let dir = std::env::temp_dir().join("facecycle_config_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# comment\n\ntrain.batch_size = 8\narch.profile = tiny\n",
        )
        .unwrap();
        let mut cfg = Config::from_file(&path).unwrap();
        assert_eq!(cfg.get_usize("train.batch_size").unwrap(), 8);
        cfg.apply_overrides(&["train.batch_size=4".into()]).unwrap();
        assert_eq!(cfg.get_usize("train.batch_size").unwrap(), 4);
        assert_eq!(cfg.get_string("arch.profile").unwrap(), "tiny");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_lines_error_with_location() {
        let dir = std::env::temp_dir().join("facecycle_config_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        std::fs::write(&path, "train.batch_size 8\n").unwrap();
        let err = Config::from_file(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn help_lists_every_key() {
        let help = render_key_help();
        for k in KEYS {
            assert!(help.contains(k.name), "help missing {}", k.name);
        }
    }
}
