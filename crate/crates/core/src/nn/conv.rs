//! Convolution and group normalisation backed by the fused kernels in `ops`.

use candle_core::{Module, Tensor};
use candle_nn::init::DEFAULT_KAIMING_NORMAL;
use candle_nn::{Init, VarBuilder};

use super::ops::{Conv2dOp, GroupNormOp, Pool2, Silu, Upsample2};
use crate::error::{validation, Result};

fn to_candle(e: crate::Error) -> candle_core::Error {
    match e {
        crate::Error::Tensor(e) => e,
        other => candle_core::Error::Msg(other.to_string()),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    /// `kernel` is 1 or 3 (padding `kernel / 2`); `stride` is 1 or 2.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        if !matches!(kernel, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(validation("only 1×1/3×3 kernels with stride 1 or 2 are supported"));
        }
        let weight = vb.get_with_hints((cout, cin, kernel, kernel), "weight", DEFAULT_KAIMING_NORMAL)?;
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let bias = vb.get_with_hints(cout, "bias", Init::Uniform { lo: -bound, up: bound })?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// A copy whose parameters are cut from the autograd graph.
    pub fn frozen(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
            ..*self
        }
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims4()?;
        let (_, cin, _, _) = self.weight.dims4()?;
        if dims.1 != cin {
            return Err(validation(format!("conv expects {cin} input channels, got {}", dims.1)));
        }
        if self.stride == 2 && (dims.2 % 2 != 0 || dims.3 % 2 != 0) {
            return Err(validation(format!("cannot stride-2 a {}×{} map", dims.2, dims.3)));
        }
        let op = Conv2dOp {
            kernel: self.kernel,
            stride: self.stride,
        };
        Ok(x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?)
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.run(x).map_err(to_candle)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    op: GroupNormOp,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(validation(format!("{channels} channels do not split into {groups} groups")));
        }
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            op: GroupNormOp { groups, eps },
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op3(&self.weight, &self.bias, self.op)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2 { scale: 1.0 })?)
}

/// 2×2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(validation(format!("cannot pool a {h}×{w} map")));
    }
    Ok(x.contiguous()?.apply_op1(Pool2 { scale: 0.25 })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng;
    use candle_core::{DType, Device};

    fn close(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_conv() {
        let dev = Device::Cpu;
        let x = rng::normal_tensor(&mut rng::stream(0, &[]), &[2, 5, 8, 6], DType::F64, &dev).unwrap();
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let store = ParamStore::new(1);
            let conv = Conv2d::new(5, 7, k, s, store.var_builder(DType::F64, &dev)).unwrap();
            let ours = conv.forward(&x).unwrap();
            let reference = x
                .conv2d(conv.weight(), k / 2, s, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, 7, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(close(&ours, &reference) < 1e-12, "k={k} s={s}");
        }
    }

    fn grads(loss: &Tensor, vars: &[&Tensor]) -> Vec<Tensor> {
        let g = loss.backward().unwrap();
        vars.iter().map(|v| g.get(v).unwrap().clone()).collect()
    }

    #[test]
    fn conv_gradients_match_candle() {
        let dev = Device::Cpu;
        let x = candle_core::Var::from_tensor(
            &rng::normal_tensor(&mut rng::stream(3, &[]), &[2, 4, 6, 6], DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let probe = rng::normal_tensor(&mut rng::stream(4, &[]), &[2, 5, 6, 6], DType::F64, &dev).unwrap();
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let store = ParamStore::new(5);
            let conv = Conv2d::new(4, 5, k, s, store.var_builder(DType::F64, &dev)).unwrap();
            let probe = probe.narrow(2, 0, 6 / s).unwrap().narrow(3, 0, 6 / s).unwrap();
            let ours = grads(&(conv.forward(&x).unwrap() * &probe).unwrap().sum_all().unwrap(), &[&x, &conv.weight, &conv.bias]);
            let reference = x
                .conv2d(&conv.weight, k / 2, s, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            let theirs = grads(&(reference * &probe).unwrap().sum_all().unwrap(), &[&x, &conv.weight, &conv.bias]);
            for (a, b) in ours.iter().zip(&theirs) {
                assert!(close(a, b) < 1e-10, "k={k} s={s}");
            }
        }
    }

    #[test]
    fn group_norm_matches_candle_forward_and_backward() {
        let dev = Device::Cpu;
        let x = candle_core::Var::from_tensor(
            &rng::normal_tensor(&mut rng::stream(6, &[]), &[3, 8, 4, 5], DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let probe = rng::normal_tensor(&mut rng::stream(7, &[]), &[3, 8, 4, 5], DType::F64, &dev).unwrap();
        let store = ParamStore::new(1);
        let vb = store.var_builder(DType::F64, &dev);
        let ours = GroupNorm::new(4, 8, 1e-5, vb.clone()).unwrap();
        let v = &store.vars();
        v[0].set(&rng::normal_tensor(&mut rng::stream(8, &[]), &[8], DType::F64, &dev).unwrap()).unwrap();
        v[1].set(&rng::normal_tensor(&mut rng::stream(9, &[]), &[8], DType::F64, &dev).unwrap()).unwrap();
        let theirs = candle_nn::group_norm(4, 8, 1e-5, vb).unwrap();
        let (a, b) = (ours.forward(&x).unwrap(), theirs.forward(&x).unwrap());
        assert!(close(&a, &b) < 1e-10);
        let ga = grads(&(a * &probe).unwrap().sum_all().unwrap(), &[&x, &ours.weight, &ours.bias]);
        let gb = grads(&(b * &probe).unwrap().sum_all().unwrap(), &[&x, &ours.weight, &ours.bias]);
        for (a, b) in ga.iter().zip(&gb) {
            assert!(close(a, b) < 1e-10);
        }
    }

    #[test]
    fn silu_matches_candle() {
        let x = candle_core::Var::from_tensor(
            &rng::normal_tensor(&mut rng::stream(10, &[]), &[4, 9], DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let (a, b) = (silu(&x).unwrap(), x.silu().unwrap());
        assert!(close(&a, &b) < 1e-12);
        let ga = grads(&a.sqr().unwrap().sum_all().unwrap(), &[&x]);
        let gb = grads(&b.sqr().unwrap().sum_all().unwrap(), &[&x]);
        assert!(close(&ga[0], &gb[0]) < 1e-12);
    }

    #[test]
    fn upsample_and_pool_match_candle() {
        let x = rng::normal_tensor(&mut rng::stream(2, &[]), &[2, 3, 4, 6], DType::F64, &Device::Cpu).unwrap();
        assert!(close(&upsample2(&x).unwrap(), &x.upsample_nearest2d(8, 12).unwrap()) < 1e-15);
        assert!(close(&avg_pool2(&x).unwrap(), &x.avg_pool2d(2).unwrap()) < 1e-12);
        let v = candle_core::Var::from_tensor(&x).unwrap();
        let probe = rng::normal_tensor(&mut rng::stream(3, &[]), &[2, 3, 8, 12], DType::F64, &Device::Cpu).unwrap();
        let up = |t: &Tensor| (t * &probe).unwrap().sum_all().unwrap();
        let ga = grads(&up(&upsample2(&v).unwrap()), &[&v]);
        let gb = grads(&up(&v.upsample_nearest2d(8, 12).unwrap()), &[&v]);
        assert!(close(&ga[0], &gb[0]) < 1e-12);
        let probe = probe.narrow(2, 0, 2).unwrap().narrow(3, 0, 3).unwrap();
        let pool = |t: &Tensor| (t * &probe).unwrap().sum_all().unwrap();
        let ga = grads(&pool(&avg_pool2(&v).unwrap()), &[&v]);
        let gb = grads(&pool(&v.avg_pool2d(2).unwrap()), &[&v]);
        assert!(close(&ga[0], &gb[0]) < 1e-12);
    }
}
