use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BenchmarkSpec;
use crate::diffusion::ScheduleConfig;
use crate::error::{io_err, validation, Error, Result};
use crate::metrics::Averaging;
use crate::nn::{DenoiserConfig, LaeConfig};
use crate::sampling::SamplerConfig;
use crate::training::{OptimizerKind, Stage, TrainConfig};

pub const OUT_ENV: &str = "HISTODIFF_OUT";

/// Where the datasets come from: the procedural benchmark (written under
/// `<output_dir>/benchmark` on first use) or existing manifests whose paths
/// are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchmarkSource {
    Generated(BenchmarkSpec),
    Manifests { pool: PathBuf, labeled: PathBuf, test: PathBuf },
}

impl Default for BenchmarkSource {
    fn default() -> Self {
        Self::Generated(BenchmarkSpec::default())
    }
}

/// The small labeled set drawn evenly per class from the labeled split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSubset {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for LabeledSubset {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentClfWidths {
    pub width: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfigs {
    pub schedule: ScheduleConfig,
    pub lae: LaeConfig,
    pub denoiser: DenoiserConfig,
    pub latent_clf: LatentClfWidths,
    pub aux_clf: [usize; 3],
    pub downstream_clf: [usize; 3],
    pub fid_clf: [usize; 3],
}

impl Default for ModelConfigs {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            lae: LaeConfig::default(),
            denoiser: DenoiserConfig::default(),
            latent_clf: LatentClfWidths {
                width: 32,
                feature_dim: 64,
            },
            aux_clf: [32, 64, 128],
            downstream_clf: [32, 64, 128],
            fid_clf: [32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfigs {
    pub lae: TrainConfig,
    pub dm: TrainConfig,
    pub aux_clf: TrainConfig,
    pub latent_clf: TrainConfig,
    pub decoder_ft: TrainConfig,
    pub downstream: TrainConfig,
    pub fid_clf: TrainConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        Self {
            lae: TrainConfig::defaults(Stage::Lae),
            dm: TrainConfig::defaults(Stage::Dm),
            aux_clf: TrainConfig::defaults(Stage::ImageClf),
            latent_clf: TrainConfig::defaults(Stage::LatentClf),
            decoder_ft: TrainConfig::defaults(Stage::DecoderFt),
            downstream: TrainConfig::downstream(),
            fid_clf: TrainConfig {
                epochs: 30,
                batch_size: 64,
                learning_rate: 1e-3,
                optimizer: OptimizerKind::Adam,
                ..TrainConfig::defaults(Stage::ImageClf)
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Selective,
    Random,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Selective => "selective",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Ratios swept with selective augmentation.
    pub ratios: Vec<f64>,
    /// Ratios evaluated with unfiltered random picks from the same pool.
    pub random_ratios: Vec<f64>,
    pub confidence_min: f64,
    /// Candidates generated per class, as a multiple of the largest quota.
    pub pool_multiplier: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.5, 1.0, 2.0, 3.0],
            random_ratios: vec![0.5],
            confidence_min: 0.5,
            pool_multiplier: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Sample through the pre-trained decoder D instead of D′.
    NoFinetune,
    /// Train the autoencoder and denoiser on the small labeled set only.
    NoPretrain,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::NoFinetune => "no_finetune",
            Self::NoPretrain => "no_pretrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSource,
    pub labeled: LabeledSubset,
    pub models: ModelConfigs,
    pub stages: StageConfigs,
    pub sampler: SamplerConfig,
    pub selection: SelectionConfig,
    pub ablation: Ablation,
    pub averaging: Averaging,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkSource::default(),
            labeled: LabeledSubset::default(),
            models: ModelConfigs::default(),
            stages: StageConfigs::default(),
            sampler: SamplerConfig::default(),
            selection: SelectionConfig::default(),
            ablation: Ablation::None,
            averaging: Averaging::Macro,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// One row group of the report: the baseline or a (mode, ratio) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub label: String,
    pub mode: Option<SelectionMode>,
    pub ratio: f64,
}

impl Configuration {
    fn new(mode: SelectionMode, ratio: f64) -> Self {
        Self {
            label: format!("{}_{}", mode.as_str(), (ratio * 100.0).round() as i64),
            mode: Some(mode),
            ratio,
        }
    }

    pub fn baseline() -> Self {
        Self {
            label: "baseline".into(),
            mode: None,
            ratio: 0.0,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.mode.is_none()
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; missing sections take their defaults and
    /// `HISTODIFF_OUT` replaces `output_dir` when set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let Some(out) = std::env::var_os(OUT_ENV) {
            cfg.output_dir = PathBuf::from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.selection;
        if self.seeds.is_empty() {
            return Err(validation("at least one seed is required"));
        }
        if s.ratios.iter().chain(&s.random_ratios).any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(validation("augmentation ratios must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&s.confidence_min) {
            return Err(validation("confidence_min must lie in [0, 1]"));
        }
        if s.pool_multiplier == 0 {
            return Err(validation("pool_multiplier must be at least 1"));
        }
        let f = self.labeled.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(validation(format!("labeled fraction {f} outside (0, 1]")));
        }
        let m = &self.models;
        if m.denoiser.latent_channels != m.lae.latent_channels {
            return Err(Error::Config("denoiser and autoencoder disagree on latent channels".into()));
        }
        if m.denoiser.timesteps != m.schedule.timesteps {
            return Err(Error::Config("denoiser and schedule disagree on the number of timesteps".into()));
        }
        m.schedule.build()?;
        self.sampler.validate(m.schedule.timesteps)?;
        let st = &self.stages;
        for c in [&st.lae, &st.dm, &st.aux_clf, &st.latent_clf, &st.decoder_ft, &st.downstream, &st.fid_clf] {
            c.validate()?;
        }
        if let BenchmarkSource::Generated(spec) = &self.benchmark {
            spec.validate(m.lae.downsample_factor)?;
        }
        Ok(())
    }

    /// Baseline first, then selective ratios, then random ratios, each in
    /// config order with duplicates and zero ratios dropped.
    pub fn configurations(&self) -> Vec<Configuration> {
        let mut out = vec![Configuration::baseline()];
        let sweeps = [
            (SelectionMode::Selective, &self.selection.ratios),
            (SelectionMode::Random, &self.selection.random_ratios),
        ];
        for (mode, ratios) in sweeps {
            for &r in ratios.iter() {
                let c = Configuration::new(mode, r);
                if r > 0.0 && !out.iter().any(|o| o.label == c.label) {
                    out.push(c);
                }
            }
        }
        out
    }
}
