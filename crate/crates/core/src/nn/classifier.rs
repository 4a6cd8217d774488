//! Time-dependent latent classifier and image classifiers, both ending in an
//! attention-pooling layer before the linear output head.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use super::conv::{avg_pool2, silu, Conv2d, GroupNorm};
use super::layers::{conv3x3, norm, to_tokens, AttentionPool, ResBlock, TimeEmbedding};
use super::ParamStore;
use crate::error::{validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentClassifierConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
}

/// φ(z_t, t): residual trunk over noisy latents with a sinusoidal time
/// embedding, attention pooling and a linear head.
#[derive(Debug, Clone)]
pub struct LatentClassifier {
    cfg: LatentClassifierConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    res0: ResBlock,
    down: Conv2d,
    res1: ResBlock,
    norm_out: GroupNorm,
    pool: AttentionPool,
    head: Linear,
    params: ParamStore,
}

impl LatentClassifier {
    pub fn new(cfg: LatentClassifierConfig, params: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(validation("classifier needs at least one class"));
        }
        let vb = params.var_builder(dtype, device);
        let td = cfg.feature_dim;
        Ok(Self {
            cfg,
            time: TimeEmbedding::new((cfg.width / 2).max(1) * 2, td, vb.pp("time"))?,
            conv_in: conv3x3(cfg.latent_channels, cfg.width, 1, vb.pp("conv_in"))?,
            res0: ResBlock::new(cfg.width, cfg.width, Some(td), vb.pp("res0"))?,
            down: conv3x3(cfg.width, cfg.feature_dim, 2, vb.pp("down"))?,
            res1: ResBlock::new(cfg.feature_dim, cfg.feature_dim, Some(td), vb.pp("res1"))?,
            norm_out: norm(cfg.feature_dim, vb.pp("norm_out"))?,
            pool: AttentionPool::new(cfg.feature_dim, cfg.feature_dim, vb.pp("pool"))?,
            head: candle_nn::linear(cfg.feature_dim, cfg.num_classes, vb.pp("head"))?,
            params,
        })
    }

    pub fn config(&self) -> LatentClassifierConfig {
        self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits `[b, K]`.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, c, _, _) = z_t.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(validation(format!("latent classifier expects {} channels", self.cfg.latent_channels)));
        }
        if ts.len() != b {
            return Err(validation("one timestep per batch entry required"));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.cfg.timesteps) {
            return Err(validation(format!("timestep {t} outside 1..={}", self.cfg.timesteps)));
        }
        let temb = self.time.forward(ts, z_t.dtype(), z_t.device())?;
        let x = self.res0.forward(&self.conv_in.forward(z_t)?, Some(&temb))?;
        let x = self.res1.forward(&self.down.forward(&x)?, Some(&temb))?;
        let x = silu(&self.norm_out.forward(&x)?)?;
        let pooled = self.pool.forward(&to_tokens(&x)?)?;
        Ok(self.head.forward(&pooled)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierRole {
    Auxiliary,
    Downstream,
    FidFeature,
}

impl ClassifierRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Auxiliary => "auxiliary",
            Self::Downstream => "downstream",
            Self::FidFeature => "fid-feature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageClassifierConfig {
    /// Channels of the three conv blocks; the last one is the feature size.
    pub widths: [usize; 3],
    pub num_classes: usize,
}

impl ImageClassifierConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            widths: [32, 64, 128],
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

/// Three conv blocks (each halving resolution), attention pooling, linear head.
#[derive(Debug, Clone)]
pub struct ImageClassifier {
    cfg: ImageClassifierConfig,
    role: ClassifierRole,
    blocks: Vec<ConvBlock>,
    pool: AttentionPool,
    head: Linear,
    params: ParamStore,
}

impl ImageClassifier {
    pub fn new(
        cfg: ImageClassifierConfig,
        role: ClassifierRole,
        params: ParamStore,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(validation("classifier needs at least one class"));
        }
        let vb = params.var_builder(dtype, device);
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(3);
        for (i, &w) in cfg.widths.iter().enumerate() {
            let vb = vb.pp(format!("block{i}"));
            blocks.push(ConvBlock {
                conv: conv3x3(cin, w, 1, vb.pp("conv"))?,
                norm: norm(w, vb.pp("norm"))?,
            });
            cin = w;
        }
        let d = cfg.feature_dim();
        Ok(Self {
            cfg,
            role,
            blocks,
            pool: AttentionPool::new(d, d, vb.pp("pool"))?,
            head: candle_nn::linear(d, cfg.num_classes, vb.pp("head"))?,
            params,
        })
    }

    pub fn config(&self) -> ImageClassifierConfig {
        self.cfg
    }

    pub fn role(&self) -> ClassifierRole {
        self.role
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Penultimate (pooled) features `[b, d_feat]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(validation(format!("image classifier cannot take {c}×{h}×{w}")));
        }
        let mut x = x.clone();
        for b in &self.blocks {
            x = avg_pool2(&silu(&b.norm.forward(&b.conv.forward(&x)?)?)?)?;
        }
        self.pool.forward(&to_tokens(&x)?)
    }

    pub fn forward_with_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.features(x)?;
        let logits = self.head.forward(&f)?;
        Ok((logits, f))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_features(x)?.0)
    }
}

/// Row-wise argmax and max softmax probability of a `[b, K]` logit tensor.
pub fn predictions(logits: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let probs = candle_nn::ops::softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?;
    let rows = probs.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        })
        .unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn latent_cfg(k: usize) -> LatentClassifierConfig {
        LatentClassifierConfig {
            latent_channels: 3,
            width: 32,
            feature_dim: 64,
            num_classes: k,
            timesteps: 1000,
        }
    }

    #[test]
    fn latent_logits_shape_and_softmax() {
        let c = LatentClassifier::new(latent_cfg(6), ParamStore::new(0), DType::F64, &Device::Cpu).unwrap();
        let z = rng::normal_tensor(&mut rng::stream(0, &[]), &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
        let logits = c.forward(&z, &[500, 500]).unwrap();
        assert_eq!(logits.dims(), &[2, 6]);
        let p = candle_nn::ops::softmax(&logits, D::Minus1).unwrap();
        for row in p.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(c.forward(&z, &[0, 1]).is_err());
    }

    #[test]
    fn image_classifier_exposes_features() {
        let c = ImageClassifier::new(
            ImageClassifierConfig::new(4),
            ClassifierRole::Downstream,
            ParamStore::new(0),
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        let x = rng::normal_tensor(&mut rng::stream(0, &[]), &[3, 3, 32, 32], DType::F32, &Device::Cpu).unwrap();
        let (logits, f) = c.forward_with_features(&x).unwrap();
        assert_eq!(logits.dims(), &[3, 4]);
        assert_eq!(f.dims(), &[3, 128]);
        assert_eq!(c.role().as_str(), "downstream");
    }

    #[test]
    fn predictions_pick_argmax() {
        let l = Tensor::new(&[[0.0f32, 2.0, 1.0], [5.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let (p, conf) = predictions(&l).unwrap();
        assert_eq!(p, vec![1, 0]);
        assert!(conf[1] > conf[0]);
    }
}
