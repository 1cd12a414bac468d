//! Run configuration: a JSON file with every field optional, then flag
//! overrides on top.

use std::path::{Path, PathBuf};

use motionedit_core::diffusion::{make_schedule, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_TRAIN_STEPS};
use motionedit_core::injection::InjectionPolicy;
use motionedit_core::network::NetConfig;
use motionedit_core::pipeline::{EditConfig, SamplerConfig, TrainConfig};
use motionedit_core::skeleton::AlignMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Length `T` of the training noise schedule.
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Job file; relative paths inside it resolve against its directory.
    pub job: Option<PathBuf>,
    /// Checkpoint directory to start from. Without one, the seeded base
    /// model is used.
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Network dimensions. The input resolution is
    /// `latent_height·image_scale × latent_width·image_scale`.
    pub model: NetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub injection: InjectionPolicy,
    pub align_mode: AlignMode,
    pub recon_control: bool,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        let edit = EditConfig::default();
        Self {
            seed: 0,
            model: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sampler: edit.sampler,
            injection: edit.injection,
            align_mode: edit.align_mode,
            recon_control: edit.recon_control,
            paths: Paths::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub guidance: Option<f32>,
    pub no_injection: bool,
    pub inject_mid: bool,
    pub drop_masked_tokens: bool,
}

impl Config {
    /// Parses and validates a config file. Paths in it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|e| CliError::input(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.job, &mut cfg.paths.weights, &mut cfg.paths.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(|e| CliError::input(path, e))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.paths.out = Some(out.clone());
        }
        if let Some(g) = o.guidance {
            self.sampler.guidance = g;
        }
        if o.no_injection {
            self.injection.enabled = false;
        }
        if o.inject_mid {
            self.injection.inject_mid = true;
        }
        if o.drop_masked_tokens {
            self.injection.drop_masked_tokens = true;
        }
        self.validate().map_err(CliError::Usage)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.noise_schedule().map_err(|e| e.to_string())?;
        self.edit_config().validate().map_err(|e| e.to_string())?;
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(format!("train.lr {} must be positive", self.train.lr));
        }
        if self.sampler.steps > self.schedule.train_steps {
            return Err(format!(
                "sampler.steps {} exceeds schedule.train_steps {}",
                self.sampler.steps, self.schedule.train_steps
            ));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> motionedit_core::Result<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.train_steps, s.beta_min, s.beta_max)
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            sampler: self.sampler.clone(),
            injection: self.injection.clone(),
            align_mode: self.align_mode,
            recon_control: self.recon_control,
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set paths.out".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("config.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_match_training_protocol() {
        let c = Config::default();
        assert_eq!(c.train.steps, 300);
        assert_eq!(c.train.lr, 3e-5);
        assert_eq!(c.sampler.steps, 50);
        assert_eq!(c.sampler.guidance, 7.5);
        assert!(c.recon_control && c.injection.enabled);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_file_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"seed": 9, "train": {"steps": 12}, "paths": {"job": "job.json"}}"#);
        let c = Config::load(&p).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 12);
        assert_eq!(c.train.lr, 3e-5);
        assert_eq!(c.paths.job.unwrap(), dir.path().join("job.json"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = Config::load(&write(dir.path(), r#"{"sampler": {"stpes": 3}}"#)).unwrap_err();
        assert!(err.to_string().contains("unknown field `stpes`"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = Config::load(&write(dir.path(), r#"{"sampler": {"steps": 0}}"#)).unwrap_err();
        assert!(err.to_string().contains("sampler steps"), "{err}");
        let err = Config::load(&write(dir.path(), r#"{"injection": {"trailing_fraction": 2.0}}"#)).unwrap_err();
        assert!(err.to_string().contains("trailing_fraction"), "{err}");
        let err = Config::load(&write(dir.path(), "{\n  \"seed\": ,\n}")).unwrap_err();
        assert!(err.to_string().contains("line 2 column"), "{err}");
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::default();
        c.apply(&Overrides {
            seed: Some(4),
            guidance: Some(1.0),
            no_injection: true,
            inject_mid: true,
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!((c.seed, c.sampler.guidance), (4, 1.0));
        assert!(!c.injection.enabled && c.injection.inject_mid);
        assert!(c.apply(&Overrides { guidance: Some(f32::NAN), ..Overrides::default() }).is_err());
    }
}
