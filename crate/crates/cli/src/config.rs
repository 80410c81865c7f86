use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use combo_lab::datagen::{SceneSpec, ScenarioSpec};
use combo_lab::model::ModelConfig;
use combo_lab::protocol::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs, as one TOML document. Loss weights and method
/// flags live under `[train.weights]` and `[train.flags]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_val_images")]
    pub val_images: usize,
    /// Defaults to the six-class catalog at the model's image size.
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_val_images() -> usize {
    40
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn scene(&self) -> SceneSpec {
        self.scene
            .clone()
            .unwrap_or_else(|| SceneSpec::default_six(self.model.height, self.model.width))
    }

    pub fn validate(&self) -> Result<()> {
        let scene = self.scene();
        scene.validate()?;
        self.scenario.validate(&scene)?;
        self.model.validate()?;
        self.train.validate()?;
        if (scene.height, scene.width) != (self.model.height, self.model.width) {
            bail!(
                "scene is {}x{} but the model expects {}x{}",
                scene.height,
                scene.width,
                self.model.height,
                self.model.width
            );
        }
        if self.val_images == 0 {
            bail!("val_images must be positive");
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.train.seed = seed;
    }
}
