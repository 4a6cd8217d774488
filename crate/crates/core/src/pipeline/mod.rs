//! Stage orchestration over an on-disk artifact tree, experiment sweeps and
//! report rendering.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! benchmark/                      manifests + PNGs of the procedural benchmark
//! fid_clf/                        frozen fid-feature classifier
//! <models>/{lae,dm,aux_clf,latent_clf,decoder_ft}/
//! <models>/latent_cache/          guided latents shared by decoders
//! arms/<ablation>/seed<s>/{generate,select,downstream,evaluate}/
//! arms/<ablation>/report/
//! ```
//!
//! `<models>` is `pretrained`, or `no_pretrain` for that ablation. Every
//! stage directory carries `meta.json` with a hash of the config sections it
//! depends on, chained through the hashes of its prerequisites.

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    Ablation, BenchmarkSource, Configuration, ExperimentConfig, LabeledSubset, LatentClfWidths, ModelConfigs,
    SelectionConfig, SelectionMode, StageConfigs, OUT_ENV,
};
pub use report::{render_grid, render_report, ExperimentReport, ReportRow, RowSeed, GRID_COLUMNS, GRID_PNG, REPORT_CSV, REPORT_MD};

use crate::checkpoint::{config_hash, load_blob, read_meta, write_checkpoint, CheckpointMeta, META_FILE};
use crate::data::{self, generate_benchmark, images_to_tensor, load_manifest, subsample_evenly, Image, PatchDataset};
use crate::diffusion::NoiseSchedule;
use crate::error::{io_err, validation, Error, Result};
use crate::metrics::{classification_metrics, frechet_distance, ConfusionMatrix, FeatureStats};
use crate::nn::classifier::predictions;
use crate::nn::{
    ClassifierRole, Decoder, Denoiser, ImageClassifier, ImageClassifierConfig, LatentAutoencoder, LatentClassifier,
    LatentClassifierConfig, ParamStore, PerceptualSurrogate,
};
use crate::rng;
use crate::sampling::{decode_latents, sample_latents, SampleRequest};
use crate::selection::{
    apportion, compute_centroids, euclidean, random_select, select, synthetic_total, write_selection_report,
    build_augmented_set, CandidateSample, ClassCentroid,
};
use crate::training::{
    finetune_decoder, predict_images, train_dm, train_image_classifier, train_lae, train_latent_classifier, TrainConfig,
    TrainLog,
};

const TRAIN_LOG: &str = "train_log.csv";
const SAMPLES_CSV: &str = "samples.csv";
const SELECTION_JSON: &str = "selection.json";
const METRICS_CSV: &str = "metrics.csv";
const INFER_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageName {
    Lae,
    Dm,
    AuxClf,
    LatentClf,
    DecoderFt,
    FidClf,
    Generate,
    Select,
    Downstream,
    Evaluate,
}

impl StageName {
    pub const ALL: [StageName; 10] = [
        Self::Lae,
        Self::Dm,
        Self::AuxClf,
        Self::LatentClf,
        Self::DecoderFt,
        Self::FidClf,
        Self::Generate,
        Self::Select,
        Self::Downstream,
        Self::Evaluate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lae => "lae",
            Self::Dm => "dm",
            Self::AuxClf => "aux_clf",
            Self::LatentClf => "latent_clf",
            Self::DecoderFt => "decoder_ft",
            Self::FidClf => "fid_clf",
            Self::Generate => "generate",
            Self::Select => "select",
            Self::Downstream => "downstream",
            Self::Evaluate => "evaluate",
        }
    }

    /// Stages run once per experiment seed.
    pub fn per_seed(&self) -> bool {
        matches!(self, Self::Generate | Self::Select | Self::Downstream | Self::Evaluate)
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| validation(format!("unknown stage `{s}`")))
    }
}

/// The datasets of one experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub pool: PatchDataset,
    /// The full labeled split of the target source.
    pub labeled_full: PatchDataset,
    /// The small even subsample used for all conditional stages.
    pub labeled: PatchDataset,
    pub test: PatchDataset,
}

/// Chosen candidate ids per class for one configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct SelectedSet {
    classes: Vec<Vec<usize>>,
    shortfall: Vec<usize>,
}

enum ArtifactState {
    Missing,
    Current,
    Stale(String),
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
    dtype: DType,
    device: Device,
    data: OnceLock<Datasets>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    log.write_csv(&dir.join(TRAIN_LOG))
}

fn loss_metrics(log: &TrainLog) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if let Some(l) = log.final_loss() {
        m.insert("final_loss".into(), l);
    }
    m
}

/// Labels, max-softmax confidences and penultimate features.
fn classify(clf: &ImageClassifier, images: &[&Image], dtype: DType, device: &Device) -> Result<(Vec<usize>, Vec<f64>, Vec<Vec<f64>>)> {
    let (mut pred, mut conf, mut feats) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in images.chunks(INFER_BATCH) {
        let x = images_to_tensor(chunk, dtype, device)?;
        let (logits, f) = clf.forward_with_features(&x)?;
        let (p, c) = predictions(&logits)?;
        pred.extend(p);
        conf.extend(c);
        feats.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok((pred, conf, feats))
}

/// 8-bit round trip, so in-memory candidates equal their PNGs.
fn quantize(img: &Image) -> Image {
    Image::from_rgb8(&img.to_rgb8())
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            out: cfg.output_dir.clone(),
            cfg,
            force,
            dtype: DType::F32,
            device: Device::Cpu,
            data: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    fn models_root(&self) -> PathBuf {
        self.out.join(match self.cfg.ablation {
            Ablation::NoPretrain => "no_pretrain",
            _ => "pretrained",
        })
    }

    fn arm_root(&self) -> PathBuf {
        self.out.join("arms").join(self.cfg.ablation.as_str())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.arm_root().join("report")
    }

    pub fn stage_dir(&self, stage: StageName, seed: Option<u64>) -> PathBuf {
        match stage {
            StageName::FidClf => self.out.join(stage.as_str()),
            s if s.per_seed() => self
                .arm_root()
                .join(format!("seed{}", seed.unwrap_or_default()))
                .join(stage.as_str()),
            _ => self.models_root().join(stage.as_str()),
        }
    }

    pub fn prerequisites(&self, stage: StageName) -> Vec<StageName> {
        use StageName::*;
        match stage {
            Lae | FidClf => vec![],
            Dm => vec![Lae],
            AuxClf | LatentClf => vec![Dm],
            DecoderFt => vec![AuxClf, LatentClf],
            Generate if self.cfg.ablation == Ablation::NoFinetune => vec![AuxClf, LatentClf],
            Generate => vec![DecoderFt],
            Select => vec![Generate],
            Downstream => vec![Select],
            Evaluate => vec![Downstream, FidClf],
        }
    }

    /// Shared stages in run order for the configured ablation.
    fn shared_stages(&self) -> Vec<StageName> {
        use StageName::*;
        let mut s = vec![Lae, Dm, AuxClf, LatentClf];
        if self.cfg.ablation != Ablation::NoFinetune {
            s.push(DecoderFt);
        }
        s.push(FidClf);
        s
    }

    fn provenance(&self, stage: StageName) -> Vec<String> {
        let mut seen: Vec<StageName> = Vec::new();
        let mut stack = self.prerequisites(stage);
        while let Some(s) = stack.pop() {
            if !seen.contains(&s) {
                seen.push(s);
                stack.extend(self.prerequisites(s));
            }
        }
        StageName::ALL
            .iter()
            .filter(|s| seen.contains(s))
            .map(|s| s.as_str().to_string())
            .collect()
    }

    pub fn stage_hash(&self, stage: StageName, seed: Option<u64>) -> Result<String> {
        use StageName::*;
        let c = &self.cfg;
        let (m, st) = (&c.models, &c.stages);
        let models = self.models_root().file_name().map(|n| n.to_string_lossy().into_owned());
        let fragment = match stage {
            Lae => json!({"benchmark": c.benchmark, "models": models, "labeled": c.labeled, "train": st.lae, "model": m.lae}),
            Dm => json!({"train": st.dm, "model": m.denoiser, "schedule": m.schedule}),
            AuxClf => json!({"labeled": c.labeled, "train": st.aux_clf, "widths": m.aux_clf}),
            LatentClf => json!({"labeled": c.labeled, "train": st.latent_clf, "model": m.latent_clf}),
            DecoderFt => json!({"train": st.decoder_ft}),
            FidClf => json!({"benchmark": c.benchmark, "train": st.fid_clf, "widths": m.fid_clf}),
            Generate => json!({"sampler": c.sampler, "selection": c.selection, "ablation": c.ablation, "seed": seed}),
            Select => json!({"selection": c.selection, "seed": seed}),
            Downstream => json!({"train": st.downstream, "widths": m.downstream_clf, "seed": seed}),
            Evaluate => json!({"averaging": c.averaging, "seed": seed}),
        };
        let inputs = self
            .prerequisites(stage)
            .into_iter()
            .map(|p| self.stage_hash(p, seed))
            .collect::<Result<Vec<_>>>()?;
        config_hash(&json!({"stage": stage.as_str(), "config": fragment, "inputs": inputs}))
    }

    fn state(&self, stage: StageName, seed: Option<u64>) -> Result<ArtifactState> {
        let dir = self.stage_dir(stage, seed);
        if !dir.join(META_FILE).exists() {
            return Ok(ArtifactState::Missing);
        }
        let found = read_meta(&dir)?.config_hash;
        Ok(if found == self.stage_hash(stage, seed)? {
            ArtifactState::Current
        } else {
            ArtifactState::Stale(found)
        })
    }

    fn seeds(&self) -> &[u64] {
        &self.cfg.seeds
    }

    /// Runs one stage (for every configured seed if it is a per-seed stage)
    /// and returns the artifact directories.
    pub fn run(&self, stage: StageName) -> Result<Vec<PathBuf>> {
        if stage.per_seed() {
            self.seeds().iter().map(|&s| self.run_stage(stage, Some(s))).collect()
        } else {
            Ok(vec![self.run_stage(stage, None)?])
        }
    }

    /// Runs `stage` if its artifact is missing; an existing artifact with the
    /// same config hash is left alone unless `force` is set.
    pub fn run_stage(&self, stage: StageName, seed: Option<u64>) -> Result<PathBuf> {
        for p in self.prerequisites(stage) {
            match self.state(p, seed)? {
                ArtifactState::Current => {}
                ArtifactState::Missing => {
                    return Err(Error::MissingStage {
                        stage: stage.to_string(),
                        missing: p.to_string(),
                    })
                }
                ArtifactState::Stale(_) => {
                    return Err(Error::MissingStage {
                        stage: stage.to_string(),
                        missing: format!("{p} (artifact is out of date)"),
                    })
                }
            }
        }
        let dir = self.stage_dir(stage, seed);
        let hash = self.stage_hash(stage, seed)?;
        match self.state(stage, seed)? {
            ArtifactState::Current if !self.force => {
                log::info!("{stage}: up to date ({})", dir.display());
                return Ok(dir);
            }
            ArtifactState::Stale(found) if !self.force => {
                return Err(Error::ConfigHashMismatch {
                    stage: stage.to_string(),
                    expected: hash,
                    found,
                })
            }
            _ => {}
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        create_dir(&dir)?;
        log::info!("{stage}: running{}", seed.map(|s| format!(" for seed {s}")).unwrap_or_default());
        let mut meta = CheckpointMeta::new(stage.as_str(), &hash, seed.unwrap_or(0));
        meta.provenance = self.provenance(stage);
        self.execute(stage, seed.unwrap_or(0), &dir, meta)?;
        Ok(dir)
    }

    fn execute(&self, stage: StageName, seed: u64, dir: &Path, meta: CheckpointMeta) -> Result<()> {
        use StageName::*;
        match stage {
            Lae => self.train_lae_stage(dir, meta),
            Dm => self.train_dm_stage(dir, meta),
            AuxClf => self.train_aux_stage(dir, meta),
            LatentClf => self.train_latent_clf_stage(dir, meta),
            DecoderFt => self.decoder_ft_stage(dir, meta),
            FidClf => self.fid_clf_stage(dir, meta),
            Generate => self.generate_stage(seed, dir, meta),
            Select => self.select_stage(seed, dir, meta),
            Downstream => self.downstream_stage(seed, dir, meta),
            Evaluate => self.evaluate_stage(seed, dir, meta),
        }
    }

    // ---- data -------------------------------------------------------------

    fn benchmark_dir(&self) -> PathBuf {
        self.out.join("benchmark")
    }

    /// Writes the procedural benchmark as PNGs plus manifests. Returns the
    /// benchmark directory; an existing benchmark for the same spec is kept.
    pub fn gen_benchmark(&self) -> Result<PathBuf> {
        let BenchmarkSource::Generated(spec) = &self.cfg.benchmark else {
            return Err(Error::Config("the config points at existing manifests; nothing to generate".into()));
        };
        let dir = self.benchmark_dir();
        let hash = config_hash(spec)?;
        let meta_path = dir.join("benchmark.json");
        if meta_path.exists() {
            let found: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
            let found = found["config_hash"].as_str().unwrap_or_default().to_string();
            if found == hash && !self.force {
                return Ok(dir);
            }
            if found != hash && !self.force {
                return Err(Error::ConfigHashMismatch {
                    stage: "gen-benchmark".into(),
                    expected: hash,
                    found,
                });
            }
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        create_dir(&dir)?;
        let b = generate_benchmark(spec, self.cfg.models.lae.downsample_factor)?;
        data::write_dataset(&b.pretrain_pool, &dir, "pool")?;
        data::write_dataset(&b.labeled_set, &dir, "labeled")?;
        data::write_dataset(&b.test_set, &dir, "test")?;
        let meta = json!({"config_hash": hash, "spec": spec});
        write_file(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(dir)
    }

    pub fn datasets(&self) -> Result<&Datasets> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let load = |p: &Path| load_manifest(p, p.parent().unwrap_or(Path::new(".")));
        let (pool, labeled_full, test) = match &self.cfg.benchmark {
            BenchmarkSource::Generated(_) => {
                let dir = self.gen_benchmark()?;
                (
                    load(&dir.join("pool.csv"))?,
                    load(&dir.join("labeled.csv"))?,
                    load(&dir.join("test.csv"))?,
                )
            }
            BenchmarkSource::Manifests { pool, labeled, test } => (load(pool)?, load(labeled)?, load(test)?),
        };
        if labeled_full.class_names != test.class_names {
            return Err(validation("labeled and test manifests use different class sets"));
        }
        let labeled = subsample_evenly(&labeled_full, self.cfg.labeled.fraction, self.cfg.labeled.seed)?;
        let _ = self.data.set(Datasets {
            pool: pool.without_labels(),
            labeled_full,
            labeled,
            test,
        });
        Ok(self.data.get().expect("just set"))
    }

    fn num_classes(&self) -> Result<usize> {
        Ok(self.datasets()?.labeled.num_classes())
    }

    fn image_size(&self) -> Result<usize> {
        let (h, w) = self
            .datasets()?
            .labeled
            .image_size()
            .ok_or_else(|| validation("labeled set is empty"))?;
        if h != w {
            return Err(validation("images must be square"));
        }
        Ok(h)
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        self.cfg.models.schedule.build()
    }

    // ---- model loading ----------------------------------------------------

    fn load_lae(&self) -> Result<LatentAutoencoder> {
        let lae = LatentAutoencoder::new(self.cfg.models.lae, 0, self.dtype, &self.device)?;
        let dir = self.stage_dir(StageName::Lae, None);
        load_blob(&dir, "encoder", lae.encoder.params())?;
        load_blob(&dir, "decoder", lae.decoder.params())?;
        Ok(lae)
    }

    fn load_denoiser(&self) -> Result<Denoiser> {
        let d = Denoiser::new(self.cfg.models.denoiser, ParamStore::new(0), self.dtype, &self.device)?;
        load_blob(&self.stage_dir(StageName::Dm, None), "params", d.params())?;
        Ok(d)
    }

    fn latent_clf_config(&self) -> Result<LatentClassifierConfig> {
        let m = &self.cfg.models;
        Ok(LatentClassifierConfig {
            latent_channels: m.lae.latent_channels,
            width: m.latent_clf.width,
            feature_dim: m.latent_clf.feature_dim,
            num_classes: self.num_classes()?,
            timesteps: m.schedule.timesteps,
        })
    }

    fn load_latent_clf(&self) -> Result<LatentClassifier> {
        let c = LatentClassifier::new(self.latent_clf_config()?, ParamStore::new(0), self.dtype, &self.device)?;
        load_blob(&self.stage_dir(StageName::LatentClf, None), "params", c.params())?;
        Ok(c)
    }

    fn image_clf(&self, widths: [usize; 3], role: ClassifierRole, seed: u64) -> Result<ImageClassifier> {
        let cfg = ImageClassifierConfig {
            widths,
            num_classes: self.num_classes()?,
        };
        ImageClassifier::new(cfg, role, ParamStore::new(seed), self.dtype, &self.device)
    }

    fn load_image_clf(&self, dir: &Path, widths: [usize; 3], role: ClassifierRole) -> Result<ImageClassifier> {
        let c = self.image_clf(widths, role, 0)?;
        load_blob(dir, "params", c.params())?;
        Ok(c)
    }

    fn load_aux(&self) -> Result<ImageClassifier> {
        self.load_image_clf(
            &self.stage_dir(StageName::AuxClf, None),
            self.cfg.models.aux_clf,
            ClassifierRole::Auxiliary,
        )
    }

    /// D′, or the pre-trained D under the no-fine-tuning ablation.
    fn load_sampling_decoder(&self, lae: &LatentAutoencoder) -> Result<Decoder> {
        if self.cfg.ablation == Ablation::NoFinetune {
            return Ok(lae.decoder.clone());
        }
        let d = lae.decoder.duplicate(0)?;
        load_blob(&self.stage_dir(StageName::DecoderFt, None), "decoder", d.params())?;
        Ok(d)
    }

    // ---- shared stages ----------------------------------------------------

    /// Unlabeled images the autoencoder and denoiser learn from.
    fn pretrain_set(&self) -> Result<PatchDataset> {
        let d = self.datasets()?;
        Ok(match self.cfg.ablation {
            Ablation::NoPretrain => d.labeled.without_labels(),
            _ => d.pool.clone(),
        })
    }

    fn train_lae_stage(&self, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let tc = &self.cfg.stages.lae;
        let set = self.pretrain_set()?;
        let lae = LatentAutoencoder::new(self.cfg.models.lae, tc.seed, self.dtype, &self.device)?;
        let perceptual = PerceptualSurrogate::new(self.dtype, &self.device)?;
        let log = train_lae(&set, &lae, &perceptual, tc)?;
        write_log(dir, &log)?;
        meta.metrics = loss_metrics(&log);
        meta.metrics.insert("train_images".into(), set.len() as f64);
        write_checkpoint(dir, &meta, &[("encoder", lae.encoder.params()), ("decoder", lae.decoder.params())])
    }

    fn train_dm_stage(&self, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let tc = &self.cfg.stages.dm;
        let set = self.pretrain_set()?;
        let lae = self.load_lae()?;
        let dm = Denoiser::new(self.cfg.models.denoiser, ParamStore::new(tc.seed), self.dtype, &self.device)?;
        let log = train_dm(&set, &lae.encoder, &dm, &self.schedule()?, tc)?;
        write_log(dir, &log)?;
        meta.metrics = loss_metrics(&log);
        write_checkpoint(dir, &meta, &[("params", dm.params())])
    }

    fn train_aux_stage(&self, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let tc = &self.cfg.stages.aux_clf;
        let labeled = &self.datasets()?.labeled;
        let clf = self.image_clf(self.cfg.models.aux_clf, ClassifierRole::Auxiliary, tc.seed)?;
        let log = train_image_classifier(labeled, &clf, tc)?;
        write_log(dir, &log)?;
        meta.metrics = loss_metrics(&log);
        let acc = crate::training::accuracy(&predict_images(&clf, labeled, INFER_BATCH)?, &labeled.labels()?);
        meta.metrics.insert("train_accuracy".into(), acc);
        meta.role = Some(clf.role().as_str().into());
        write_checkpoint(dir, &meta, &[("params", clf.params())])
    }

    fn train_latent_clf_stage(&self, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let tc = &self.cfg.stages.latent_clf;
        let labeled = &self.datasets()?.labeled;
        let lae = self.load_lae()?;
        let clf = LatentClassifier::new(self.latent_clf_config()?, ParamStore::new(tc.seed), self.dtype, &self.device)?;
        let log = train_latent_classifier(labeled, &lae.encoder, &clf, &self.schedule()?, tc)?;
        write_log(dir, &log)?;
        meta.metrics = loss_metrics(&log);
        write_checkpoint(dir, &meta, &[("params", clf.params())])
    }

    /// Accuracy of the auxiliary classifier on `decoder(E(x))` over the
    /// labeled set.
    fn reconstruction_accuracy(&self, lae: &LatentAutoencoder, decoder: &Decoder, aux: &ImageClassifier) -> Result<f64> {
        let labeled = &self.datasets()?.labeled;
        let idx: Vec<usize> = (0..labeled.len()).collect();
        let mut pred = Vec::new();
        for chunk in idx.chunks(INFER_BATCH) {
            let x = labeled.batch(chunk, self.dtype, &self.device)?;
            let logits = aux.forward(&decoder.forward(&lae.encode_mean(&x)?)?)?;
            pred.extend(predictions(&logits)?.0);
        }
        Ok(crate::training::accuracy(&pred, &labeled.labels()?))
    }

    fn decoder_ft_stage(&self, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let tc = &self.cfg.stages.decoder_ft;
        let labeled = &self.datasets()?.labeled;
        let lae = self.load_lae()?;
        let aux = self.load_aux()?;
        let perceptual = PerceptualSurrogate::new(self.dtype, &self.device)?;
        let decoder = lae.decoder.duplicate(tc.seed)?;
        let before = self.reconstruction_accuracy(&lae, &decoder, &aux)?;
        let log = finetune_decoder(labeled, &lae.encoder, &decoder, &aux, &perceptual, tc)?;
        write_log(dir, &log)?;
        meta.metrics = loss_metrics(&log);
        meta.metrics.insert("aux_accuracy_before".into(), before);
        meta.metrics
            .insert("aux_accuracy_after".into(), self.reconstruction_accuracy(&lae, &decoder, &aux)?);
        write_checkpoint(dir, &meta, &[("decoder", decoder.params())])
    }

    fn fid_clf_stage(&self, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let tc = &self.cfg.stages.fid_clf;
        let full = &self.datasets()?.labeled_full;
        let clf = self.image_clf(self.cfg.models.fid_clf, ClassifierRole::FidFeature, tc.seed)?;
        let log = train_image_classifier(full, &clf, tc)?;
        write_log(dir, &log)?;
        meta.metrics = loss_metrics(&log);
        meta.role = Some(clf.role().as_str().into());
        write_checkpoint(dir, &meta, &[("params", clf.params())])
    }

    // ---- per-seed stages --------------------------------------------------

    /// Candidates per class: `pool_multiplier` times the largest quota any
    /// configuration asks of that class.
    fn candidates_per_class(&self) -> Result<Vec<usize>> {
        let counts = self.datasets()?.labeled.class_counts();
        let n = self.datasets()?.labeled.len();
        let mut most = vec![0usize; counts.len()];
        for c in self.cfg.configurations() {
            let quotas = apportion(synthetic_total(c.ratio, n)?, &counts);
            for (m, q) in most.iter_mut().zip(quotas) {
                *m = (*m).max(q);
            }
        }
        Ok(most.into_iter().map(|q| q * self.cfg.selection.pool_multiplier).collect())
    }

    /// Guided latents for every request; cached by everything they depend
    /// on so decoders of different ablations reuse one draw.
    fn guided_latents(&self, seed: u64, requests: &[SampleRequest], shape: (usize, usize, usize)) -> Result<Option<Tensor>> {
        let mut sampler = self.cfg.sampler;
        sampler.seed = rng::derive_seed(self.cfg.sampler.seed, &[seed]);
        let labels: Vec<Option<usize>> = requests.iter().map(|r| r.label).collect();
        let key = config_hash(&json!({
            "dm": self.stage_hash(StageName::Dm, None)?,
            "latent_clf": self.stage_hash(StageName::LatentClf, None)?,
            "sampler": sampler,
            "labels": labels,
            "shape": [shape.0, shape.1, shape.2],
        }))?;
        let cache_dir = self.models_root().join("latent_cache");
        let path = cache_dir.join(format!("{}.safetensors", &key[..16]));
        if path.exists() && !self.force {
            let mut t = candle_core::safetensors::load(&path, &self.device)?;
            if let Some(z) = t.remove("z") {
                return Ok(Some(z));
            }
        }
        let denoiser = self.load_denoiser()?;
        let clf = self.load_latent_clf()?;
        let z = sample_latents(&denoiser, Some(&clf), &self.schedule()?, &sampler, shape, self.dtype, requests)?;
        if let Some(z) = &z {
            create_dir(&cache_dir)?;
            candle_core::safetensors::save(&HashMap::from([("z".to_string(), z.clone())]), &path)?;
        }
        Ok(z)
    }

    fn generate_stage(&self, seed: u64, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let per_class = self.candidates_per_class()?;
        let mut requests = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                requests.push(SampleRequest {
                    index: requests.len() as u64,
                    label: Some(label),
                });
            }
        }
        let lae = self.load_lae()?;
        let size = self.image_size()?;
        let shape = lae.latent_shape(size, size)?;
        let mut rows = Vec::new();
        let cand_dir = dir.join("candidates");
        create_dir(&cand_dir)?;
        if let Some(z) = self.guided_latents(seed, &requests, shape)? {
            let decoder = self.load_sampling_decoder(&lae)?;
            let aux = self.load_aux()?;
            let images: Vec<Image> = decode_latents(&decoder, &z, self.cfg.sampler.batch)?
                .iter()
                .map(quantize)
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let (_, conf, _) = classify(&aux, &refs, self.dtype, &self.device)?;
            for ((req, img), c) in requests.iter().zip(&images).zip(conf) {
                img.save_png(&cand_dir.join(format!("{:06}.png", req.index)))?;
                rows.push((req.index, req.label.unwrap_or_default(), c));
            }
        }
        let path = dir.join(SAMPLES_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["index", "target_label", "seed", "confidence"])?;
        for (index, label, c) in &rows {
            w.write_record([index.to_string(), label.to_string(), seed.to_string(), format!("{c:.6}")])?;
        }
        w.flush().map_err(io_err(&path))?;
        meta.metrics.insert("candidates".into(), rows.len() as f64);
        write_checkpoint(dir, &meta, &[])
    }

    /// The candidate pool of `seed` scored by the auxiliary classifier,
    /// with centroids of the real labeled set in the same feature space.
    fn scored_candidates(&self, seed: u64) -> Result<(Vec<CandidateSample>, Vec<ClassCentroid>)> {
        let gen_dir = self.stage_dir(StageName::Generate, Some(seed));
        let mut rdr = csv::Reader::from_path(gen_dir.join(SAMPLES_CSV))?;
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| validation("malformed samples.csv row"))
            };
            let index = parse(0)?;
            let img = image::open(gen_dir.join("candidates").join(format!("{index:06}.png")))?;
            entries.push((index, parse(1)?, Image::from_rgb8(&img.to_rgb8())));
        }
        let aux = self.load_aux()?;
        let labeled = &self.datasets()?.labeled;
        let real: Vec<&Image> = labeled.items.iter().map(|p| &p.image).collect();
        let (_, _, real_feats) = classify(&aux, &real, self.dtype, &self.device)?;
        let centroids = compute_centroids(&real_feats, &labeled.labels()?, labeled.num_classes())?;
        let images: Vec<&Image> = entries.iter().map(|e| &e.2).collect();
        let (pred, conf, feats) = if images.is_empty() {
            Default::default()
        } else {
            classify(&aux, &images, self.dtype, &self.device)?
        };
        let mut out = Vec::with_capacity(entries.len());
        for (((index, target, image), (p, c)), f) in entries.into_iter().zip(pred.into_iter().zip(conf)).zip(feats) {
            let centroid = centroids
                .get(target)
                .ok_or_else(|| validation(format!("candidate {index} targets unknown class {target}")))?;
            out.push(CandidateSample {
                index,
                image,
                latent: Vec::new(),
                target_label: target,
                predicted_label: p,
                confidence: c,
                centroid_distance: euclidean(&f, &centroid.centroid),
                feature: f,
            });
        }
        Ok((out, centroids))
    }

    fn select_stage(&self, seed: u64, dir: &Path, mut meta: CheckpointMeta) -> Result<()> {
        let (cands, centroids) = self.scored_candidates(seed)?;
        let labeled = &self.datasets()?.labeled;
        let counts = labeled.class_counts();
        let cmin = self.cfg.selection.confidence_min;
        let mut all = BTreeMap::new();
        for conf in self.cfg.configurations() {
            let Some(mode) = conf.mode else { continue };
            let quotas = apportion(synthetic_total(conf.ratio, labeled.len())?, &counts);
            let sub = dir.join(&conf.label);
            create_dir(&sub)?;
            let mut set = SelectedSet::default();
            for (k, &q) in quotas.iter().enumerate() {
                let (chosen, min) = match mode {
                    SelectionMode::Selective => (select(&cands, &centroids, k, q, cmin)?, Some(cmin)),
                    SelectionMode::Random => {
                        let s = rng::derive_seed(seed, &[rng::name_id(&conf.label)]);
                        (random_select(&cands, k, q, s), None)
                    }
                };
                write_selection_report(&sub.join(format!("class{k}.csv")), &cands, &centroids, k, &chosen, min)?;
                if chosen.shortfall {
                    set.shortfall.push(k);
                }
                set.classes.push(chosen.items.iter().map(|c| c.index).collect());
            }
            meta.metrics
                .insert(format!("{}_selected", conf.label), set.classes.iter().map(Vec::len).sum::<usize>() as f64);
            all.insert(conf.label.clone(), set);
        }
        write_file(&dir.join(SELECTION_JSON), serde_json::to_string_pretty(&all)? + "\n")?;
        write_checkpoint(dir, &meta, &[])
    }

    fn read_selection(&self, seed: u64) -> Result<BTreeMap<String, SelectedSet>> {
        let path = self.stage_dir(StageName::Select, Some(seed)).join(SELECTION_JSON);
        Ok(serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?)
    }

    /// Selected candidates of one configuration, per class in rank order.
    fn selected_candidates(
        &self,
        conf: &Configuration,
        selection: &BTreeMap<String, SelectedSet>,
        cands: &[CandidateSample],
    ) -> Result<(Vec<Vec<CandidateSample>>, Vec<usize>)> {
        let set = selection
            .get(&conf.label)
            .ok_or_else(|| validation(format!("selection has no entry for {}", conf.label)))?;
        let by_index: HashMap<usize, &CandidateSample> = cands.iter().map(|c| (c.index, c)).collect();
        let classes = set
            .classes
            .iter()
            .map(|ids| {
                ids.iter()
                    .map(|i| {
                        by_index
                            .get(i)
                            .map(|c| (*c).clone())
                            .ok_or_else(|| validation(format!("selected candidate {i} missing from pool")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((classes, set.shortfall.clone()))
    }

    fn downstream_stage(&self, seed: u64, dir: &Path, meta: CheckpointMeta) -> Result<()> {
        let labeled = &self.datasets()?.labeled;
        let (cands, _) = self.scored_candidates(seed)?;
        let selection = self.read_selection(seed)?;
        let mut tc: TrainConfig = self.cfg.stages.downstream;
        tc.seed = rng::derive_seed(tc.seed, &[seed]);
        // one initialisation per seed, shared by all configurations
        let init = rng::derive_seed(seed, &[rng::name_id("downstream")]);
        for conf in self.cfg.configurations() {
            let train = if conf.is_baseline() {
                labeled.clone()
            } else {
                let (classes, _) = self.selected_candidates(&conf, &selection, &cands)?;
                build_augmented_set(labeled, &classes, conf.ratio)?.dataset
            };
            let clf = self.image_clf(self.cfg.models.downstream_clf, ClassifierRole::Downstream, init)?;
            let log = train_image_classifier(&train, &clf, &tc)?;
            let sub = dir.join(&conf.label);
            create_dir(&sub)?;
            write_log(&sub, &log)?;
            let mut m = CheckpointMeta::new(StageName::Downstream.as_str(), &meta.config_hash, seed);
            m.metrics = loss_metrics(&log);
            m.metrics.insert("train_images".into(), train.len() as f64);
            m.role = Some(clf.role().as_str().into());
            m.provenance = meta.provenance.clone();
            write_checkpoint(&sub, &m, &[("params", clf.params())])?;
        }
        write_checkpoint(dir, &meta, &[])
    }

    fn evaluate_stage(&self, seed: u64, dir: &Path, meta: CheckpointMeta) -> Result<()> {
        let data = self.datasets()?;
        let fid_clf = self.load_image_clf(
            &self.stage_dir(StageName::FidClf, None),
            self.cfg.models.fid_clf,
            ClassifierRole::FidFeature,
        )?;
        let reference: Vec<&Image> = data.labeled_full.items.iter().map(|p| &p.image).collect();
        let (_, _, ref_feats) = classify(&fid_clf, &reference, self.dtype, &self.device)?;
        let ref_stats = FeatureStats::from_features(&ref_feats)?;
        let (cands, _) = self.scored_candidates(seed)?;
        let selection = self.read_selection(seed)?;
        let test_labels = data.test.labels()?;
        let down_dir = self.stage_dir(StageName::Downstream, Some(seed));
        let mut rows = Vec::new();
        for conf in self.cfg.configurations() {
            let clf = self.load_image_clf(
                &down_dir.join(&conf.label),
                self.cfg.models.downstream_clf,
                ClassifierRole::Downstream,
            )?;
            let pred = predict_images(&clf, &data.test, INFER_BATCH)?;
            let cm = ConfusionMatrix::from_predictions(&test_labels, &pred, data.test.num_classes())?;
            let m = classification_metrics(&cm, self.cfg.averaging)?;
            let (mut fid, mut shortfall) = (None, Vec::new());
            if !conf.is_baseline() {
                let (classes, sf) = self.selected_candidates(&conf, &selection, &cands)?;
                shortfall = sf;
                let imgs: Vec<&Image> = classes.iter().flatten().map(|c| &c.image).collect();
                if imgs.len() >= 2 {
                    let (_, _, f) = classify(&fid_clf, &imgs, self.dtype, &self.device)?;
                    fid = Some(frechet_distance(&FeatureStats::from_features(&f)?, &ref_stats)?);
                }
            }
            rows.push(ReportRow {
                configuration: conf.label.clone(),
                mode: conf.mode.map(|m| m.as_str().to_string()).unwrap_or_default(),
                ratio: conf.ratio,
                seed: RowSeed::Seed(seed),
                fid,
                accuracy: Some(m.accuracy),
                f1: Some(m.f1),
                sensitivity: Some(m.sensitivity),
                specificity: Some(m.specificity),
                shortfall: shortfall.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
                status: "ok".into(),
            });
        }
        write_file(&dir.join(METRICS_CSV), ExperimentReport { rows }.to_csv()?)?;
        write_checkpoint(dir, &meta, &[])
    }

    // ---- experiment -------------------------------------------------------

    fn failed_rows(&self, seed: u64, reason: &str) -> Vec<ReportRow> {
        self.cfg
            .configurations()
            .iter()
            .map(|c| {
                let mode = c.mode.map(|m| m.as_str()).unwrap_or_default();
                ReportRow::failed(&c.label, mode, c.ratio, seed, reason)
            })
            .collect()
    }

    fn seed_rows(&self, seed: u64) -> Result<Vec<ReportRow>> {
        let path = self.stage_dir(StageName::Evaluate, Some(seed)).join(METRICS_CSV);
        if !matches!(self.state(StageName::Evaluate, Some(seed))?, ArtifactState::Current) {
            return Err(Error::MissingStage {
                stage: "report".into(),
                missing: format!("evaluate for seed {seed}"),
            });
        }
        Ok(ExperimentReport::from_csv(&fs::read(&path).map_err(io_err(&path))?)?.rows)
    }

    /// Shared stages, then every seed through evaluation, then the report.
    /// A failing seed yields failure rows instead of aborting the sweep.
    pub fn run_experiment(&self) -> Result<ExperimentReport> {
        let mut shared_error = None;
        for stage in self.shared_stages() {
            if let Err(e) = self.run_stage(stage, None) {
                log::error!("{stage}: {e}");
                shared_error = Some(format!("{stage}: {e}"));
                break;
            }
        }
        let mut rows = Vec::new();
        for &seed in self.seeds() {
            if let Some(e) = &shared_error {
                rows.extend(self.failed_rows(seed, e));
                continue;
            }
            let run = || -> Result<Vec<ReportRow>> {
                for stage in [StageName::Generate, StageName::Select, StageName::Downstream, StageName::Evaluate] {
                    self.run_stage(stage, Some(seed))?;
                }
                self.seed_rows(seed)
            };
            match run() {
                Ok(r) => rows.extend(r),
                Err(e) => {
                    log::error!("seed {seed}: {e}");
                    rows.extend(self.failed_rows(seed, &e.to_string()));
                }
            }
        }
        let report = ExperimentReport::from_seed_rows(rows);
        self.write_report(&report)?;
        Ok(report)
    }

    /// Collects the evaluation rows of every seed and renders the report.
    pub fn report(&self) -> Result<ExperimentReport> {
        let mut rows = Vec::new();
        for &seed in self.seeds() {
            rows.extend(self.seed_rows(seed)?);
        }
        let report = ExperimentReport::from_seed_rows(rows);
        self.write_report(&report)?;
        Ok(report)
    }

    fn write_report(&self, report: &ExperimentReport) -> Result<()> {
        let dir = self.report_dir();
        render_report(report, &dir)?;
        match self.grid_rows() {
            Ok(Some((rows, patch))) => render_grid(&rows, patch, &dir.join(GRID_PNG))?,
            Ok(None) => {}
            Err(e) => log::warn!("image grid skipped: {e}"),
        }
        Ok(())
    }

    /// Up to eight top-ranked selected samples per class from the first seed
    /// at the largest selective ratio, falling back to raw candidates.
    fn grid_rows(&self) -> Result<Option<(Vec<Vec<Image>>, usize)>> {
        let Some(&seed) = self.seeds().first() else { return Ok(None) };
        if !matches!(self.state(StageName::Select, Some(seed))?, ArtifactState::Current) {
            return Ok(None);
        }
        let (cands, _) = self.scored_candidates(seed)?;
        let k = self.num_classes()?;
        let selection = self.read_selection(seed)?;
        let best = self
            .cfg
            .configurations()
            .into_iter()
            .filter(|c| c.mode == Some(SelectionMode::Selective))
            .max_by(|a, b| a.ratio.total_cmp(&b.ratio));
        let mut rows: Vec<Vec<Image>> = match best {
            Some(conf) => self
                .selected_candidates(&conf, &selection, &cands)?
                .0
                .into_iter()
                .map(|cls| cls.into_iter().take(GRID_COLUMNS).map(|c| c.image).collect())
                .collect(),
            None => vec![Vec::new(); k],
        };
        for (label, row) in rows.iter_mut().enumerate() {
            if row.is_empty() {
                row.extend(
                    cands
                        .iter()
                        .filter(|c| c.target_label == label)
                        .take(GRID_COLUMNS)
                        .map(|c| c.image.clone()),
                );
            }
        }
        Ok(Some((rows, self.image_size()?)))
    }
}
