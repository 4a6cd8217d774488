//! Training loops for the autoencoder, denoiser, fine-tuned decoder and the
//! classifiers.
//!
//! Every trainer updates the passed model in place and returns a per-epoch
//! log. Frozen components are only ever read. Minibatch order and all noise
//! come from streams keyed by `(seed, epoch)`, so a run is reproducible.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchDataset;
use crate::diffusion::{dm_loss, q_sample_batch, NoiseSchedule};
use crate::error::{io_err, validation, Error, Result};
use crate::nn::{Decoder, Encoder, ImageClassifier, LatentAutoencoder, LatentClassifier, PerceptualSurrogate};
use crate::nn::Denoiser;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Lae,
    Dm,
    DecoderFt,
    LatentClf,
    ImageClf,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lae => "lae",
            Self::Dm => "dm",
            Self::DecoderFt => "decoder_ft",
            Self::LatentClf => "latent_clf",
            Self::ImageClf => "image_clf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_ce: f64,
    /// Weight of the perceptual-surrogate term inside the reconstruction loss.
    pub lambda_perc: f64,
    /// Reserved for a patch discriminator term; not implemented, so it must
    /// stay off.
    #[serde(default)]
    pub adversarial: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 1e-6,
            lambda_ce: 1.0,
            lambda_perc: 0.1,
            adversarial: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay, used only by AdamW.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

fn default_weight_decay() -> f64 {
    0.01
}

impl TrainConfig {
    /// Published per-stage defaults. `ImageClf` gets the auxiliary-classifier
    /// column; see [`TrainConfig::downstream`] for the baseline classifier.
    pub fn defaults(stage: Stage) -> Self {
        let (epochs, batch_size, learning_rate, optimizer) = match stage {
            Stage::Lae => (10, 6, 4.5e-6, OptimizerKind::Adam),
            Stage::Dm => (10, 4, 5e-5, OptimizerKind::AdamW),
            Stage::LatentClf => (100, 32, 5e-5, OptimizerKind::AdamW),
            Stage::ImageClf => (100, 64, 5e-5, OptimizerKind::Adam),
            Stage::DecoderFt => (50, 4, 5e-5, OptimizerKind::Adam),
        };
        Self {
            stage,
            epochs,
            batch_size,
            learning_rate,
            optimizer,
            weight_decay: default_weight_decay(),
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn downstream() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::AdamW,
            ..Self::defaults(Stage::ImageClf)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        if self.batch_size == 0 {
            return Err(validation("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(validation("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(validation("weight decay must be non-negative"));
        }
        if !(w.lambda_kl >= 0.0 && w.lambda_ce >= 0.0 && w.lambda_perc >= 0.0) {
            return Err(validation("loss weights must be non-negative"));
        }
        if w.adversarial {
            return Err(validation("the adversarial reconstruction term is not implemented"));
        }
        Ok(())
    }

    fn optimizer(&self, vars: Vec<Var>) -> Result<AdamW> {
        let weight_decay = match self.optimizer {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::AdamW => self.weight_decay,
        };
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                weight_decay,
                ..ParamsAdamW::default()
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Weighted loss terms; they add up to `loss`.
    pub parts: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// `epoch,loss,<part>...` with one row per epoch.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "loss".to_string()];
        if let Some(first) = self.epochs.first() {
            header.extend(first.parts.iter().map(|(n, _)| n.clone()));
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.loss.to_string()];
            row.extend(e.parts.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Weighted loss terms of one minibatch, as scalar tensors.
pub struct LossTerms {
    pub total: Tensor,
    pub parts: Vec<(&'static str, f64)>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn device_of(vars: &[Var]) -> Result<(DType, Device)> {
    let v = vars.first().ok_or_else(|| validation("model has no parameters"))?;
    Ok((v.dtype(), v.device().clone()))
}

fn run_epochs<F>(cfg: &TrainConfig, n: usize, vars: Vec<Var>, mut step: F) -> Result<TrainLog>
where
    F: FnMut(&[usize], &mut ChaCha8Rng) -> Result<LossTerms>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(validation(format!("stage {} got an empty dataset", cfg.stage.as_str())));
    }
    let mut opt = cfg.optimizer(vars)?;
    let mut log = TrainLog {
        stage: cfg.stage.as_str().to_string(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut part_sums: Vec<(&'static str, f64)> = Vec::new();
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let terms = step(chunk, &mut r)?;
            let loss = scalar(&terms.total)?;
            if !loss.is_finite() || terms.parts.iter().any(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    stage: cfg.stage.as_str().to_string(),
                    epoch,
                    step: i,
                });
            }
            opt.backward_step(&terms.total)?;
            let w = chunk.len() as f64;
            loss_sum += w * loss;
            if part_sums.is_empty() {
                part_sums = terms.parts.iter().map(|(k, _)| (*k, 0.0)).collect();
            }
            for (acc, (_, v)) in part_sums.iter_mut().zip(&terms.parts) {
                acc.1 += w * v;
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n as f64,
            parts: part_sums.into_iter().map(|(k, v)| (k.to_string(), v / n as f64)).collect(),
        };
        log::info!("{} epoch {epoch}: loss {:.6}", log.stage, record.loss);
        log.epochs.push(record);
    }
    Ok(log)
}

/// `0.5 · Σ (μ² + σ² − 1 − log σ²)` over all latent elements, averaged over
/// the batch.
pub fn kl_divergence(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let b = mean.dim(0)? as f64;
    let per = ((mean.sqr()? + logvar.exp()?)? - logvar)?;
    Ok((((per - 1.0)?.sum_all()? * 0.5)? / b)?)
}

/// Pixel L1 plus the weighted perceptual-surrogate distance.
pub fn reconstruction_loss(
    x_hat: &Tensor,
    x: &Tensor,
    perceptual: &PerceptualSurrogate,
    lambda_perc: f64,
) -> Result<Tensor> {
    let l1 = (x_hat - x)?.abs()?.mean_all()?;
    if lambda_perc == 0.0 {
        return Ok(l1);
    }
    Ok((l1 + (perceptual.distance(x_hat, x)? * lambda_perc)?)?)
}

/// Autoencoder objective on a batch `x` in model space: reconstruction of a
/// reparameterised draw plus the weighted KL term.
pub fn lae_loss<R: Rng>(
    lae: &LatentAutoencoder,
    perceptual: &PerceptualSurrogate,
    x: &Tensor,
    weights: &LossWeights,
    r: &mut R,
) -> Result<LossTerms> {
    let (mean, logvar) = lae.encoder.forward(x)?;
    let xi = rng::normal_tensor(r, mean.dims(), mean.dtype(), mean.device())?;
    let z = (&mean + (&logvar * 0.5)?.exp()?.mul(&xi)?)?;
    let x_hat = lae.decode(&z)?;
    let rec = reconstruction_loss(&x_hat, x, perceptual, weights.lambda_perc)?;
    let kl = (kl_divergence(&mean, &logvar)? * weights.lambda_kl)?;
    let parts = vec![("rec", scalar(&rec)?), ("kl", scalar(&kl)?)];
    Ok(LossTerms {
        total: (rec + kl)?,
        parts,
    })
}

pub fn train_lae(
    pool: &PatchDataset,
    lae: &LatentAutoencoder,
    perceptual: &PerceptualSurrogate,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut vars = lae.encoder.params().vars();
    vars.extend(lae.decoder.params().vars());
    let (dtype, dev) = device_of(&vars)?;
    run_epochs(cfg, pool.len(), vars, |idx, r| {
        let x = pool.batch(idx, dtype, &dev)?;
        lae_loss(lae, perceptual, &x, &cfg.loss_weights, r)
    })
}

/// Posterior means of every image, `[n, c, h, w]`, computed without gradients.
pub fn encode_dataset(encoder: &Encoder, ds: &PatchDataset, batch: usize) -> Result<Tensor> {
    let vars = encoder.params().vars();
    let (dtype, dev) = device_of(&vars)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        parts.push(encoder.forward(&ds.batch(chunk, dtype, &dev)?)?.0.detach().contiguous()?);
    }
    if parts.is_empty() {
        return Err(validation("cannot encode an empty dataset"));
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// `n` timesteps drawn uniformly from `1..=timesteps`.
pub fn sample_timesteps<R: Rng>(r: &mut R, n: usize, timesteps: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(1..=timesteps)).collect()
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

/// Trains the denoiser on posterior-mean latents of the frozen encoder.
pub fn train_dm(
    pool: &PatchDataset,
    encoder: &Encoder,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let z0 = encode_dataset(encoder, pool, 64)?;
    run_epochs(cfg, pool.len(), denoiser.params().vars(), |idx, r| {
        let z = rows(&z0, idx)?;
        let ts = sample_timesteps(r, idx.len(), sched.timesteps());
        let eps = rng::normal_tensor(r, z.dims(), z.dtype(), z.device())?;
        let loss = dm_loss(denoiser, &z, &ts, &eps, sched)?;
        let v = scalar(&loss)?;
        Ok(LossTerms {
            total: loss,
            parts: vec![("mse", v)],
        })
    })
}

/// Fine-tuning objective: reconstruction through `decoder` of the frozen
/// latents `z` plus the weighted cross-entropy of the frozen auxiliary
/// classifier on the reconstructions.
pub fn decoder_ft_loss(
    decoder: &Decoder,
    aux: &ImageClassifier,
    perceptual: &PerceptualSurrogate,
    z: &Tensor,
    x: &Tensor,
    y: &Tensor,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let x_hat = decoder.forward(z)?;
    let rec = reconstruction_loss(&x_hat, x, perceptual, weights.lambda_perc)?;
    if weights.lambda_ce == 0.0 {
        let v = scalar(&rec)?;
        return Ok(LossTerms {
            total: rec,
            parts: vec![("rec", v), ("ce", 0.0)],
        });
    }
    let ce = (candle_nn::loss::cross_entropy(&aux.forward(&x_hat)?, y)? * weights.lambda_ce)?;
    let parts = vec![("rec", scalar(&rec)?), ("ce", scalar(&ce)?)];
    Ok(LossTerms {
        total: (rec + ce)?,
        parts,
    })
}

/// Adapts `decoder` (a copy of D) to the labeled set; encoder and auxiliary
/// classifier stay fixed.
pub fn finetune_decoder(
    labeled: &PatchDataset,
    encoder: &Encoder,
    decoder: &Decoder,
    aux: &ImageClassifier,
    perceptual: &PerceptualSurrogate,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if !labeled.is_fully_labeled() {
        return Err(validation("decoder fine-tuning needs a fully labeled set"));
    }
    let vars = decoder.params().vars();
    let (dtype, dev) = device_of(&vars)?;
    let z0 = encode_dataset(encoder, labeled, 64)?;
    run_epochs(cfg, labeled.len(), vars, |idx, _| {
        let x = labeled.batch(idx, dtype, &dev)?;
        let y = labeled.label_tensor(idx, &dev)?;
        decoder_ft_loss(decoder, aux, perceptual, &rows(&z0, idx)?, &x, &y, &cfg.loss_weights)
    })
}

/// Trains φ on `(q_sample(E(x), t, ε), y)` with uniform `t`.
pub fn train_latent_classifier(
    labeled: &PatchDataset,
    encoder: &Encoder,
    clf: &LatentClassifier,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if !labeled.is_fully_labeled() {
        return Err(validation("latent classifier training needs a fully labeled set"));
    }
    let z0 = encode_dataset(encoder, labeled, 64)?;
    let dev = z0.device().clone();
    run_epochs(cfg, labeled.len(), clf.params().vars(), |idx, r| {
        let z = rows(&z0, idx)?;
        let ts = sample_timesteps(r, idx.len(), sched.timesteps());
        let eps = rng::normal_tensor(r, z.dims(), z.dtype(), z.device())?;
        let z_t = q_sample_batch(&z, &ts, &eps, sched)?;
        let y = labeled.label_tensor(idx, &dev)?;
        let ce = candle_nn::loss::cross_entropy(&clf.forward(&z_t, &ts)?, &y)?;
        let v = scalar(&ce)?;
        Ok(LossTerms {
            total: ce,
            parts: vec![("ce", v)],
        })
    })
}

/// Plain supervised cross-entropy training of an image classifier.
pub fn train_image_classifier(labeled: &PatchDataset, clf: &ImageClassifier, cfg: &TrainConfig) -> Result<TrainLog> {
    if !labeled.is_fully_labeled() {
        return Err(validation("image classifier training needs a fully labeled set"));
    }
    let vars = clf.params().vars();
    let (dtype, dev) = device_of(&vars)?;
    run_epochs(cfg, labeled.len(), vars, |idx, _| {
        let x = labeled.batch(idx, dtype, &dev)?;
        let y = labeled.label_tensor(idx, &dev)?;
        let ce = candle_nn::loss::cross_entropy(&clf.forward(&x)?, &y)?;
        let v = scalar(&ce)?;
        Ok(LossTerms {
            total: ce,
            parts: vec![("ce", v)],
        })
    })
}

/// Predicted labels of an image classifier over a whole dataset.
pub fn predict_images(clf: &ImageClassifier, ds: &PatchDataset, batch: usize) -> Result<Vec<usize>> {
    let vars = clf.params().vars();
    let (dtype, dev) = device_of(&vars)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch.max(1)) {
        let logits = clf.forward(&ds.batch(chunk, dtype, &dev)?)?;
        out.extend(logits.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize));
    }
    Ok(out)
}

/// Fraction of items whose prediction matches the label.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
