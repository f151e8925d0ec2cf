//! JSON run configuration. Every section and field is optional; missing
//! values take the defaults below and unknown keys are rejected.

use std::path::Path;

use kanrecon_core::diffusion::{make_schedule, ClipSchedule, DiffusionSchedule, TrainConfig};
use kanrecon_core::kspace::{make_mask, SamplingMask};
use kanrecon_core::mfukan::UKanConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsutil;

/// Acceleration factors the mask generator accepts.
pub const ACCELERATIONS: [u32; 4] = [4, 6, 8, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Copy> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            Self::One(v) => vec![*v],
            Self::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            size: 32,
            n_train: 64,
            n_eval: 16,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    /// One factor or a list; each is evaluated separately.
    pub accel: OneOrMany<u32>,
    /// `null` picks 0.08 below 8x and 0.04 from 8x up.
    pub center_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            accel: OneOrMany::One(4),
            center_fraction: None,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: [usize; 3],
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Backbone scale per decoder stage (one value is broadcast).
    pub b_l: OneOrMany<f64>,
    /// Skip low-frequency scale per decoder stage.
    pub s_l: OneOrMany<f64>,
    /// Normalized frequency radius of the skip filter per decoder stage.
    pub r_thresh: OneOrMany<f64>,
    pub mf_enabled: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = UKanConfig::default();
        Self {
            channels: d.channels,
            patch_size: d.patch_size,
            token_dim: d.token_dim,
            heads: d.heads,
            b_l: OneOrMany::One(d.b_l[0]),
            s_l: OneOrMany::One(d.s_l[0]),
            r_thresh: OneOrMany::One(d.r_thresh[0]),
            mf_enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSection {
    /// `null` means `1 / T`.
    pub omega: Option<f64>,
    pub b: f64,
    pub s_min: f64,
}

impl Default for ClipSection {
    fn default() -> Self {
        Self {
            omega: None,
            b: 1.5,
            s_min: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub clip: ClipSection,
    pub dc_every: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            clip: ClipSection::default(),
            dc_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 8,
            lr: 1e-3,
            seed: 3,
        }
    }
}

/// Component switches; `false` removes the component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub mf: bool,
    pub tokkan: bool,
    pub dynamic_clip: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            mf: true,
            tokkan: true,
            dynamic_clip: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub mask: MaskSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
}

fn per_stage(name: &str, v: &OneOrMany<f64>) -> CliResult<[f64; 3]> {
    match v.to_vec()[..] {
        [x] => Ok([x; 3]),
        [a, b, c] => Ok([a, b, c]),
        ref other => Err(CliError::config(format!(
            "model.{name}: expected one value or three, got {}",
            other.len()
        ))),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::config(format!("{}: not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replace every seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.mask.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        if d.size < 16 || !d.size.is_power_of_two() {
            return Err(CliError::config(format!("data.size: {} is not a power of two >= 16", d.size)));
        }
        if d.n_train == 0 || d.n_eval == 0 {
            return Err(CliError::config("data.n_train and data.n_eval must be positive"));
        }
        let accels = self.mask.accel.to_vec();
        if accels.is_empty() {
            return Err(CliError::config("mask.accel: empty list"));
        }
        if let Some(a) = accels.iter().find(|a| !ACCELERATIONS.contains(a)) {
            return Err(CliError::config(format!("mask.accel: {a} is not one of {ACCELERATIONS:?}")));
        }
        for &a in &accels {
            let cf = self.center_fraction(a);
            if !(cf > 0.0 && cf < 1.0) {
                return Err(CliError::config(format!("mask.center_fraction: {cf} outside (0, 1)")));
            }
            make_mask(d.size, a, cf, self.mask.seed).map_err(|e| CliError::config(format!("mask: {e}")))?;
        }
        self.ukan_config()?
            .validate()
            .map_err(|e| CliError::config(format!("model: {e}")))?;
        if self.ukan_config()?.check_input(&[1, d.size, d.size], 1).is_err() {
            return Err(CliError::config(format!(
                "model: data.size {} incompatible with the patch size and depth",
                d.size
            )));
        }
        self.schedule()?;
        self.clip()?;
        if self.diffusion.dc_every == 0 {
            return Err(CliError::config("diffusion.dc_every must be at least 1"));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(CliError::config("train.batch must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::config(format!("train.lr: {} must be positive", t.lr)));
        }
        Ok(())
    }

    pub fn accelerations(&self) -> Vec<u32> {
        self.mask.accel.to_vec()
    }

    pub fn center_fraction(&self, accel: u32) -> f64 {
        self.mask
            .center_fraction
            .unwrap_or(if accel >= 8 { 0.04 } else { 0.08 })
    }

    pub fn mask(&self, accel: u32) -> CliResult<SamplingMask> {
        make_mask(self.data.size, accel, self.center_fraction(accel), self.mask.seed)
            .map_err(|e| CliError::config(format!("mask: {e}")))
    }

    pub fn ukan_config(&self) -> CliResult<UKanConfig> {
        let m = &self.model;
        Ok(UKanConfig {
            in_channels: 1,
            channels: m.channels,
            patch_size: m.patch_size,
            token_dim: m.token_dim,
            heads: m.heads,
            b_l: per_stage("b_l", &m.b_l)?,
            s_l: per_stage("s_l", &m.s_l)?,
            r_thresh: per_stage("r_thresh", &m.r_thresh)?,
            mf_enabled: m.mf_enabled && self.ablation.mf,
            tokkan_enabled: self.ablation.tokkan,
            timesteps: self.diffusion.steps,
        })
    }

    pub fn schedule(&self) -> CliResult<DiffusionSchedule> {
        let d = &self.diffusion;
        make_schedule(d.steps, d.beta_start, d.beta_end).map_err(|e| CliError::config(format!("diffusion: {e}")))
    }

    /// The fixed `[-1, 1]` clamp when dynamic clipping is ablated.
    pub fn clip(&self) -> CliResult<ClipSchedule> {
        if !self.ablation.dynamic_clip {
            return Ok(ClipSchedule::fixed());
        }
        let c = &self.diffusion.clip;
        let omega = c.omega.unwrap_or(1.0 / self.diffusion.steps.max(1) as f64);
        ClipSchedule::new(omega, c.b, c.s_min).map_err(|e| CliError::config(format!("diffusion.clip: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.train.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let text = RunConfig::default().to_json();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [r#"{"dat": {}}"#, r#"{"ablation": {"mff": false}}"#, r#"{"diffusion": {"clip": {"w": 1}}}"#] {
            let e = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(e.code, 2, "{doc}");
        }
    }

    #[test]
    fn accel_must_be_supported() {
        let e = RunConfig::from_json(r#"{"mask": {"accel": 5}}"#).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("mask.accel"));
        let c = RunConfig::from_json(r#"{"mask": {"accel": [4, 6, 8, 10]}}"#).unwrap();
        assert_eq!(c.accelerations(), vec![4, 6, 8, 10]);
        assert_eq!(c.center_fraction(4), 0.08);
        assert_eq!(c.center_fraction(10), 0.04);
    }

    #[test]
    fn per_stage_values() {
        let c = RunConfig::from_json(r#"{"model": {"b_l": [1.1, 1.2, 1.3], "s_l": 0.8}}"#).unwrap();
        let u = c.ukan_config().unwrap();
        assert_eq!(u.b_l, [1.1, 1.2, 1.3]);
        assert_eq!(u.s_l, [0.8; 3]);
        assert!(RunConfig::from_json(r#"{"model": {"b_l": [1.1, 1.2]}}"#).is_err());
    }

    #[test]
    fn ablation_switches() {
        let c = RunConfig::from_json(r#"{"ablation": {"mf": false, "tokkan": false, "dynamic_clip": false}}"#).unwrap();
        let u = c.ukan_config().unwrap();
        assert!(!u.mf_enabled && !u.tokkan_enabled);
        assert_eq!(c.clip().unwrap(), ClipSchedule::fixed());
        let d = RunConfig::default().clip().unwrap();
        assert_eq!((d.omega, d.b, d.s_min), (1.0 / 50.0, 1.5, 1.0));
    }

    #[test]
    fn invalid_values() {
        for doc in [
            r#"{"data": {"size": 24}}"#,
            r#"{"data": {"n_eval": 0}}"#,
            r#"{"diffusion": {"T": 1}}"#,
            r#"{"diffusion": {"dc_every": 0}}"#,
            r#"{"diffusion": {"clip": {"b": 0.5}}}"#,
            r#"{"train": {"lr": -1.0}}"#,
            r#"{"mask": {"center_fraction": 1.5}}"#,
            r#"{"model": {"heads": 3}}"#,
        ] {
            assert_eq!(RunConfig::from_json(doc).unwrap_err().code, 2, "{doc}");
        }
    }

    #[test]
    fn seed_override_touches_every_seed() {
        let mut c = RunConfig::default();
        c.override_seed(100);
        assert_eq!((c.data.seed, c.mask.seed, c.train.seed), (100, 101, 102));
    }
}
