//! Time-conditioned U-Net noise predictor over latents.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::conv::{silu, upsample2, Conv2d, GroupNorm};
use super::layers::{conv3x3, norm, ResBlock, SelfAttention2d, TimeEmbedding};
use super::ParamStore;
use crate::diffusion::NoisePredictor;
use crate::error::{validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    /// Largest valid timestep.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_channels: 64,
            time_dim: 128,
            timesteps: 1000,
        }
    }
}

/// Two resolutions: full latent size and half size, with self-attention at
/// the coarse level and skip connections across.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    down0: ResBlock,
    downsample: Conv2d,
    down1: ResBlock,
    attn_down: SelfAttention2d,
    mid: ResBlock,
    attn_mid: SelfAttention2d,
    up1: ResBlock,
    attn_up: SelfAttention2d,
    upsample: Conv2d,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    params: ParamStore,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, params: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        let vb = params.var_builder(dtype, device);
        let (c0, c1, td) = (cfg.base_channels, 2 * cfg.base_channels, cfg.time_dim);
        Ok(Self {
            cfg,
            time: TimeEmbedding::new((c0 / 2).max(1) * 2, td, vb.pp("time"))?,
            conv_in: conv3x3(cfg.latent_channels, c0, 1, vb.pp("conv_in"))?,
            down0: ResBlock::new(c0, c0, Some(td), vb.pp("down0"))?,
            downsample: conv3x3(c0, c0, 2, vb.pp("downsample"))?,
            down1: ResBlock::new(c0, c1, Some(td), vb.pp("down1"))?,
            attn_down: SelfAttention2d::new(c1, vb.pp("attn_down"))?,
            mid: ResBlock::new(c1, c1, Some(td), vb.pp("mid"))?,
            attn_mid: SelfAttention2d::new(c1, vb.pp("attn_mid"))?,
            up1: ResBlock::new(2 * c1, c1, Some(td), vb.pp("up1"))?,
            attn_up: SelfAttention2d::new(c1, vb.pp("attn_up"))?,
            upsample: conv3x3(c1, c0, 1, vb.pp("upsample"))?,
            up0: ResBlock::new(2 * c0, c0, Some(td), vb.pp("up0"))?,
            norm_out: norm(c0, vb.pp("norm_out"))?,
            conv_out: conv3x3(c0, cfg.latent_channels, 1, vb.pp("conv_out"))?,
            params,
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.cfg.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(validation(format!("denoiser cannot take latent {c}×{h}×{w}")));
        }
        if ts.len() != b {
            return Err(validation("one timestep per batch entry required"));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.cfg.timesteps) {
            return Err(validation(format!("timestep {t} outside 1..={}", self.cfg.timesteps)));
        }
        let temb = self.time.forward(ts, z_t.dtype(), z_t.device())?;
        let temb = Some(&temb);

        let h0 = self.down0.forward(&self.conv_in.forward(z_t)?, temb)?;
        let x = self.downsample.forward(&h0)?;
        let h1 = self.attn_down.forward(&self.down1.forward(&x, temb)?)?;
        let x = self.attn_mid.forward(&self.mid.forward(&h1, temb)?)?;
        let x = self.attn_up.forward(&self.up1.forward(&Tensor::cat(&[&x, &h1], 1)?, temb)?)?;
        let x = self.upsample.forward(&upsample2(&x)?)?;
        let x = self.up0.forward(&Tensor::cat(&[&x, &h0], 1)?, temb)?;
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&x)?)?)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.forward(z_t, ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shape_and_range_checks() {
        let d = Denoiser::new(DenoiserConfig::default(), ParamStore::new(0), DType::F32, &Device::Cpu).unwrap();
        let z = rng::normal_tensor(&mut rng::stream(1, &[]), &[2, 3, 8, 8], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&z, &[1, 1000]).unwrap().dims(), &[2, 3, 8, 8]);
        assert!(d.forward(&z, &[0, 3]).is_err());
        assert!(d.forward(&z, &[1001, 3]).is_err());
        assert!(d.forward(&z, &[3]).is_err());
    }

    #[test]
    fn sane_output_scale_at_init() {
        let d = Denoiser::new(DenoiserConfig::default(), ParamStore::new(5), DType::F32, &Device::Cpu).unwrap();
        let z = rng::normal_tensor(&mut rng::stream(2, &[]), &[4, 3, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let out = d.forward(&z, &[10, 200, 500, 900]).unwrap();
        let v: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / v.len() as f32).sqrt();
        assert!(std > 0.1 && std < 10.0, "std {std}");
    }
}
