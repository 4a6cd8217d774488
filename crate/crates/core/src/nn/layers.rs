//! Building blocks shared by the autoencoder, denoiser and classifiers.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};

use super::conv::{silu, Conv2d, GroupNorm};

use crate::error::{validation, Result};

pub(crate) fn conv3x3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    Conv2d::new(cin, cout, 3, stride, vb)
}

pub(crate) fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    Conv2d::new(cin, cout, 1, 1, vb)
}

/// Largest group count ≤ 8 that divides `channels`.
pub(crate) fn norm(channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
    GroupNorm::new(groups, channels, 1e-5, vb)
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]` with sines in the
/// first half and cosines in the second.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(validation("timestep embedding dimension must be even"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        out.extend(sin);
        out.extend(cos);
    }
    Ok(Tensor::from_vec(out, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Two-layer MLP lifting the sinusoidal embedding.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    sin_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(sin_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            sin_dim,
            fc1: linear(sin_dim, out_dim, vb.pp("fc1"))?,
            fc2: linear(out_dim, out_dim, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let e = timestep_embedding(ts, self.sin_dim, dtype, device)?;
        Ok(self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)?)
    }
}

/// Pre-activation residual block with an optional additive time embedding.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, time_dim: Option<usize>, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: norm(cin, vb.pp("norm1"))?,
            conv1: conv3x3(cin, cout, 1, vb.pp("conv1"))?,
            time_proj: time_dim
                .map(|d| linear(d, cout, vb.pp("time_proj")))
                .transpose()?,
            norm2: norm(cout, vb.pp("norm2"))?,
            conv2: conv3x3(cout, cout, 1, vb.pp("conv2"))?,
            skip: (cin != cout).then(|| conv1x1(cin, cout, vb.pp("skip"))).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            let t = proj.forward(&silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention2d {
    norm: GroupNorm,
    qkv: Conv2d,
    out: Conv2d,
    channels: usize,
}

impl SelfAttention2d {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: norm(channels, vb.pp("norm"))?,
            qkv: conv1x1(channels, 3 * channels, vb.pp("qkv"))?,
            out: conv1x1(channels, channels, vb.pp("out"))?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k)? / (self.channels as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + self.out.forward(&o)?)?)
    }
}

/// Attention pooling: a query derived from the mean token scores every token
/// and the output is the softmax-weighted (convex) combination of the tokens.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    query: Linear,
    key: Linear,
    key_dim: usize,
}

impl AttentionPool {
    pub fn new(dim: usize, key_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            query: linear(dim, key_dim, vb.pp("query"))?,
            key: linear(dim, key_dim, vb.pp("key"))?,
            key_dim,
        })
    }

    /// Attention weights `[b, n]` over the tokens of `features: [b, n, d]`.
    pub fn weights(&self, features: &Tensor) -> Result<Tensor> {
        let (_, n, _) = features.dims3()?;
        if n == 0 {
            return Err(validation("attention pooling needs at least one token"));
        }
        let q = self.query.forward(&features.mean(1)?)?.unsqueeze(2)?;
        let k = self.key.forward(features)?;
        let scores = (k.matmul(&q)?.squeeze(2)? / (self.key_dim as f64).sqrt())?;
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let w = self.weights(features)?;
        pool_with_weights(features, &w)
    }
}

/// `Σ_i w_i f_i` for `features: [b, n, d]` and `weights: [b, n]`.
pub fn pool_with_weights(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, n, _) = features.dims3()?;
    if n == 0 {
        return Err(validation("attention pooling needs at least one token"));
    }
    if weights.dims() != [b, n] {
        return Err(validation("weights must be [batch, tokens]"));
    }
    Ok(weights.unsqueeze(1)?.matmul(features)?.squeeze(1)?)
}

/// `[b, c, h, w]` feature map to `[b, h·w, c]` tokens.
pub(crate) fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn rand_features(b: usize, n: usize, d: usize, seed: u64) -> Tensor {
        crate::rng::normal_tensor(&mut crate::rng::stream(seed, &[]), &[b, n, d], DType::F64, &Device::Cpu)
            .unwrap()
    }

    #[test]
    fn uniform_weights_give_row_mean() {
        let f = rand_features(2, 5, 3, 1);
        let w = Tensor::full(0.2f64, (2, 5), &Device::Cpu).unwrap();
        let pooled = pool_with_weights(&f, &w).unwrap();
        let mean = f.mean(1).unwrap();
        let d = (pooled - mean).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn singleton_returns_the_row() {
        let store = ParamStore::new(0);
        let pool = AttentionPool::new(4, 4, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        let f = rand_features(3, 1, 4, 2);
        let out = pool.forward(&f).unwrap();
        let d = (out - f.squeeze(1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn weights_are_normalised() {
        let store = ParamStore::new(0);
        let pool = AttentionPool::new(6, 8, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        for seed in 0..10 {
            let f = rand_features(4, 7, 6, seed);
            let w = pool.weights(&f).unwrap();
            for row in w.to_vec2::<f64>().unwrap() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn empty_token_set_rejected() {
        let f = Tensor::zeros((1, 0, 3), DType::F64, &Device::Cpu).unwrap();
        let w = Tensor::zeros((1, 0), DType::F64, &Device::Cpu).unwrap();
        assert!(pool_with_weights(&f, &w).is_err());
    }

    #[test]
    fn sinusoidal_embedding_layout() {
        let e = timestep_embedding(&[0, 5], 8, DType::F64, &Device::Cpu).unwrap();
        let rows = e.to_vec2::<f64>().unwrap();
        assert_eq!(&rows[0][..4], &[0.0; 4]);
        assert_eq!(&rows[0][4..], &[1.0; 4]);
        assert!((rows[1][0] - 5f64.sin()).abs() < 1e-12);
        assert!(timestep_embedding(&[1], 7, DType::F64, &Device::Cpu).is_err());
    }
}
