//! TOML run configuration: presets, file loading, and whole-file validation
//! that reports every problem at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::OrbitSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nerf::{NerfConfig, RenderConfig};
use crate::training::{ModelConfig, TrainConfig};
use crate::triform::TriformConfig;

/// Serializable orbit settings (the camera OrbitSpec is plain data but lives
/// with the pose math; this mirrors it for the config file).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OrbitConfig {
    pub n_high: usize,
    pub n_low: usize,
    pub elevation_high_deg: f64,
    pub elevation_low_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
}

impl OrbitConfig {
    pub fn to_spec(self) -> OrbitSpec {
        OrbitSpec {
            n_high: self.n_high,
            n_low: self.n_low,
            elevation_high_deg: self.elevation_high_deg,
            elevation_low_deg: self.elevation_low_deg,
            radius: self.radius,
            fov_deg: self.fov_deg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_high == 0 || self.n_high % 2 != 0 {
            bad.push(format!("orbit.n_high {} must be even and positive", self.n_high));
        }
        if self.n_low == 0 || self.n_low % 2 != 0 {
            bad.push(format!("orbit.n_low {} must be even and positive", self.n_low));
        }
        if self.radius <= 0.0 {
            bad.push(format!("orbit.radius {} must be > 0", self.radius));
        }
        if !(1.0..180.0).contains(&self.fov_deg) {
            bad.push(format!("orbit.fov_deg {} must be in [1, 180)", self.fov_deg));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

impl Default for OrbitConfig {
    fn default() -> Self {
        let s = OrbitSpec::default();
        OrbitConfig {
            n_high: s.n_high,
            n_low: s.n_low,
            elevation_high_deg: s.elevation_high_deg,
            elevation_low_deg: s.elevation_low_deg,
            radius: s.radius,
            fov_deg: s.fov_deg,
        }
    }
}

/// Dataset generation settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub resolution: usize,
    pub gt_samples: usize,
    pub orbit: OrbitConfig,
}

impl DataConfig {
    pub fn desk() -> Self {
        DataConfig {
            n_scenes: 8,
            resolution: 64,
            gt_samples: 96,
            orbit: OrbitConfig { n_high: 8, n_low: 4, ..OrbitConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_scenes == 0 {
            bad.push("data.n_scenes must be ≥ 1".to_string());
        }
        if self.resolution < 8 {
            bad.push(format!("data.resolution {} must be ≥ 8", self.resolution));
        }
        if self.gt_samples < 2 {
            bad.push(format!("data.gt_samples {} must be ≥ 2", self.gt_samples));
        }
        if let Err(Error::Config(msg)) = self.orbit.validate() {
            bad.push(msg);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Everything one run needs: model shapes, training settings, dataset
/// generation, and the evaluation renderer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval_render: RenderConfig,
}

impl AppConfig {
    /// Small configuration sized for a single workstation.
    pub fn desk() -> Self {
        AppConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig::desk(),
            eval_render: RenderConfig::desk(),
        }
    }

    /// Full-scale reference configuration. Orders of magnitude heavier than
    /// the desk preset; provided for completeness, not for CI.
    pub fn paper() -> Self {
        let triform = TriformConfig::paper();
        let encoder = EncoderConfig {
            image_size: 512,
            patch: 16,
            width: triform.d_ctx,
            n_blocks: 12,
            n_heads: 16,
        };
        let mut train = TrainConfig::desk();
        train.render = RenderConfig { width: 64, height: 64, n_samples: 96, stratified: true };
        train.total_steps = 20_000;
        train.warmup_steps = 1_000;
        train.views_per_scene = 4;
        AppConfig {
            model: ModelConfig {
                encoder,
                triform,
                nerf: NerfConfig::paper(),
                fusion_window: 8,
                init_seed: 0,
            },
            train,
            data: DataConfig {
                n_scenes: 512,
                resolution: 512,
                gt_samples: 256,
                orbit: OrbitConfig::default(),
            },
            eval_render: RenderConfig::paper_dense(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"desk\" or \"paper\")"
            ))),
        }
    }

    /// Check every section and report all problems in one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for result in [
            self.model.validate(),
            self.train.validate(),
            self.data.validate(),
            self.eval_render.validate(),
        ] {
            if let Err(Error::Config(msg)) = result {
                bad.push(msg);
            }
        }
        if self.train.render.width > self.data.resolution {
            bad.push(format!(
                "train.render.width {} exceeds data.resolution {}",
                self.train.render.width, self.data.resolution
            ));
        }
        if self.model.encoder.image_size > self.data.resolution {
            bad.push(format!(
                "model.encoder.image_size {} exceeds data.resolution {}",
                self.model.encoder.image_size, self.data.resolution
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parse and validate a TOML config file. Unknown keys are rejected by the
/// parser; semantic problems are all listed in a single error.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: AppConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid_and_round_trips_through_toml() {
        let cfg = AppConfig::desk();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.eval_render, cfg.eval_render);
    }

    #[test]
    fn paper_preset_is_internally_consistent() {
        let cfg = AppConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.encoder.width, cfg.model.triform.d_ctx);
        assert_eq!(cfg.model.nerf.d_in, cfg.model.triform.d_triplane);
        assert_eq!(cfg.eval_render.n_samples, 128);
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!(AppConfig::preset("napkin"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_lists_all_problems_at_once() {
        let mut cfg = AppConfig::desk();
        cfg.train.lr = -1.0;
        cfg.data.n_scenes = 0;
        cfg.data.orbit.n_high = 3;
        match cfg.validate().unwrap_err() {
            Error::Config(msg) => {
                assert!(msg.contains("lr"), "{msg}");
                assert!(msg.contains("n_scenes"), "{msg}");
                assert!(msg.contains("n_high"), "{msg}");
            }
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn load_config_reads_a_written_file_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(&good, AppConfig::desk().to_toml().unwrap()).unwrap();
        load_config(&good).unwrap();

        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "model = \"yes\"\n").unwrap();
        assert!(matches!(load_config(&bad), Err(Error::Config(_))));
    }
}
