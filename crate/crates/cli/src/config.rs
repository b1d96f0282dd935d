//! TOML run configuration. Precedence: command-line flags, then the config
//! file, then built-in defaults.
//!
//! ```toml
//! jobs = 4
//!
//! [region]
//! conf_threshold = 0.3
//! extension_k = 0.5
//! scale_s = 1.5
//! merge_iou = 0.4
//!
//! [render]
//! px_per_unit = 80.0
//! limb_thickness = 4.0
//! point_radius = 4.0
//!
//! [label]
//! iomin_threshold = 0.5
//!
//! [model]
//! variant = "HRC_P"          # or "HRC"
//! backbone_scale = "full"    # or "reduced"
//!
//! [train]
//! batch_size = 4
//! epochs = 60
//! learning_rate = 1e-4
//! seed = 0
//!
//! [eval]
//! iomin_threshold = 0.5
//! score_threshold = 0.5
//! interpolation = "all_point"   # or "eleven_point"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use poseguard_classifier::{ModelConfig, TrainConfig};
use poseguard_core::autolabel::DEFAULT_IOMIN_THRESHOLD;
use poseguard_core::evaluation::EvalConfig;
use poseguard_core::hand_region::RegionParams;
use poseguard_core::pose_render::RenderStyle;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_ENV: &str = "POSEGUARD_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub iomin_threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            iomin_threshold: DEFAULT_IOMIN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub jobs: Option<usize>,
    pub region: RegionParams,
    pub render: RenderStyle,
    pub label: LabelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn ratio(name: &str, v: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{name} must lie in [0, 1], got {v}"
        )))
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Config from `flag`, else from the `POSEGUARD_CONFIG` variable, else
    /// defaults.
    pub fn resolve(flag: Option<&Path>) -> Result<Self, CliError> {
        let from_env = std::env::var_os(CONFIG_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        match flag.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    /// Checks every value; called after flag overrides are applied.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == Some(0) {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        self.region
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let r = &self.render;
        if !(r.px_per_unit > 0.0 && r.limb_thickness >= 0.0 && r.point_radius >= 0.0) {
            return Err(CliError::Usage(format!("invalid render style {r:?}")));
        }
        ratio("label.iomin_threshold", self.label.iomin_threshold)?;
        ratio("eval.iomin_threshold", self.eval.iomin_threshold)?;
        ratio("eval.score_threshold", self.eval.score_threshold)?;
        self.train.validate()?;
        Ok(())
    }
}
