//! Fixed random-feature network standing in for a pretrained perceptual
//! metric. Its weights come from a constant seed and are never trained.

use candle_core::{DType, Device, Module, Tensor};

use super::conv::Conv2d;
use super::layers::conv3x3;
use super::ParamStore;
use crate::error::Result;

const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

#[derive(Debug, Clone)]
pub struct PerceptualSurrogate {
    convs: Vec<Conv2d>,
}

impl PerceptualSurrogate {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let params = ParamStore::new(PERCEPTUAL_SEED);
        let vb = params.var_builder(dtype, device);
        Ok(Self {
            convs: vec![
                conv3x3(3, 16, 1, vb.pp("conv0"))?,
                conv3x3(16, 32, 2, vb.pp("conv1"))?,
                conv3x3(32, 32, 2, vb.pp("conv2"))?,
            ]
            .iter()
            .map(Conv2d::frozen)
            .collect(),
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Sum over layers of the mean squared feature difference. Gradients flow
    /// only through `pred`.
    pub fn distance(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let fp = self.features(pred)?;
        let ft = self.features(&target.detach())?;
        let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;
        for (a, b) in fp.iter().zip(&ft) {
            total = (total + (a - b.detach())?.sqr()?.mean_all()?)?;
        }
        Ok(total)
    }
}
