//! KL-regularised latent autoencoder.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{silu, upsample2, Conv2d, GroupNorm};
use super::layers::{conv3x3, norm, ResBlock};
use super::ParamStore;
use crate::error::{validation, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaeConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    /// Spatial downsampling factor, a power of two.
    pub downsample_factor: usize,
}

impl Default for LaeConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            latent_channels: 3,
            downsample_factor: 4,
        }
    }
}

impl LaeConfig {
    fn levels(&self) -> Result<usize> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(validation(format!("downsample factor {f} must be a power of two ≥ 2")));
        }
        Ok(f.trailing_zeros() as usize)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * if level == 0 { 1 } else { 2 }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: LaeConfig,
    conv_in: Conv2d,
    blocks: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    params: ParamStore,
}

impl Encoder {
    pub fn new(cfg: LaeConfig, params: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        let levels = cfg.levels()?;
        let vb = params.var_builder(dtype, device);
        let conv_in = conv3x3(3, cfg.channels(0), 1, vb.pp("conv_in"))?;
        let mut blocks = Vec::with_capacity(levels);
        for l in 0..levels {
            let vb = vb.pp(format!("down{l}"));
            blocks.push((
                ResBlock::new(cfg.channels(l), cfg.channels(l), None, vb.pp("res"))?,
                conv3x3(cfg.channels(l), cfg.channels(l + 1), 2, vb.pp("down"))?,
            ));
        }
        let top = cfg.channels(levels);
        Ok(Self {
            cfg,
            conv_in,
            blocks,
            mid: ResBlock::new(top, top, None, vb.pp("mid"))?,
            norm_out: norm(top, vb.pp("norm_out"))?,
            conv_out: conv3x3(top, 2 * cfg.latent_channels, 1, vb.pp("conv_out"))?,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Posterior mean and log-variance, each `[b, c, H/f, W/f]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, ch, h, w) = x.dims4()?;
        let f = self.cfg.downsample_factor;
        if ch != 3 || h % f != 0 || w % f != 0 {
            return Err(validation(format!(
                "encoder input {ch}×{h}×{w} must have 3 channels and sides divisible by {f}"
            )));
        }
        let mut x = self.conv_in.forward(x)?;
        for (res, down) in &self.blocks {
            x = down.forward(&res.forward(&x, None)?)?;
        }
        let x = self.mid.forward(&x, None)?;
        let moments = self.conv_out.forward(&silu(&self.norm_out.forward(&x)?)?)?;
        let c = self.cfg.latent_channels;
        let mean = moments.narrow(1, 0, c)?;
        let logvar = moments.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: LaeConfig,
    conv_in: Conv2d,
    mid: ResBlock,
    blocks: Vec<(Conv2d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    params: ParamStore,
}

impl Decoder {
    pub fn new(cfg: LaeConfig, params: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        let levels = cfg.levels()?;
        let vb: VarBuilder = params.var_builder(dtype, device);
        let top = cfg.channels(levels);
        let mut blocks = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let vb = vb.pp(format!("up{l}"));
            blocks.push((
                conv3x3(cfg.channels(l + 1), cfg.channels(l), 1, vb.pp("up"))?,
                ResBlock::new(cfg.channels(l), cfg.channels(l), None, vb.pp("res"))?,
            ));
        }
        Ok(Self {
            cfg,
            conv_in: conv3x3(cfg.latent_channels, top, 1, vb.pp("conv_in"))?,
            mid: ResBlock::new(top, top, None, vb.pp("mid"))?,
            blocks,
            norm_out: norm(cfg.channels(0), vb.pp("norm_out"))?,
            conv_out: conv3x3(cfg.channels(0), 3, 1, vb.pp("conv_out"))?,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> LaeConfig {
        self.cfg
    }

    /// A decoder with its own parameters initialised to a copy of this one's.
    pub fn duplicate(&self, seed: u64) -> Result<Self> {
        let w = self.conv_out.weight();
        let copy = Self::new(self.cfg, ParamStore::new(seed), w.dtype(), w.device())?;
        self.params.copy_into(&copy.params)?;
        Ok(copy)
    }

    /// `[b, c, h, w]` latents to `[b, 3, h·f, w·f]` images in model space.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(validation(format!(
                "latent has {c} channels, decoder expects {}",
                self.cfg.latent_channels
            )));
        }
        let mut x = self.mid.forward(&self.conv_in.forward(z)?, None)?;
        for (up, res) in &self.blocks {
            x = res.forward(&up.forward(&upsample2(&x)?)?, None)?;
        }
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LatentAutoencoder {
    pub cfg: LaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl LatentAutoencoder {
    pub fn new(cfg: LaeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            cfg,
            encoder: Encoder::new(cfg, ParamStore::new(rng::derive_seed(seed, &[0])), dtype, device)?,
            decoder: Decoder::new(cfg, ParamStore::new(rng::derive_seed(seed, &[1])), dtype, device)?,
        })
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.cfg.downsample_factor;
        if height % f != 0 || width % f != 0 {
            return Err(validation(format!("image {height}×{width} not divisible by factor {f}")));
        }
        Ok((self.cfg.latent_channels, height / f, width / f))
    }

    /// Posterior mean, or a reparameterised draw when `sampler` is given.
    pub fn encode<R: Rng>(&self, x: &Tensor, sampler: Option<&mut R>) -> Result<Tensor> {
        let (mean, logvar) = self.encoder.forward(x)?;
        match sampler {
            None => Ok(mean),
            Some(r) => {
                let xi = rng::normal_tensor(r, mean.dims(), mean.dtype(), mean.device())?;
                Ok((mean + (logvar * 0.5)?.exp()?.mul(&xi)?)?)
            }
        }
    }

    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(x)?.0)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }
}
