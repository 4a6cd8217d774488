//! Reverse-process sampling: ancestral DDPM, deterministic DDIM and
//! classifier guidance.
//!
//! Every sample owns a random stream derived from `(seed, index)`, used first
//! for its starting noise and then for the ancestral noise of each step, so
//! the result for an index does not depend on which other indices share its
//! batch.

use candle_core::{DType, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::data::Image;
use crate::diffusion::{posterior_params, NoisePredictor, NoiseSchedule};
use crate::error::{validation, Error, Result};
use crate::nn::{Decoder, LatentClassifier};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    /// Length of the DDIM timestep subsequence; ignored by DDPM.
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Ddim,
            num_steps: 200,
            guidance_scale: 1.0,
            seed: 0,
            batch: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > timesteps {
            return Err(validation(format!("num_steps must lie in 1..={timesteps}")));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(validation("guidance scale must be a finite non-negative number"));
        }
        if self.batch == 0 {
            return Err(validation("sampling batch must be positive"));
        }
        Ok(())
    }
}

/// Gradient of `log p(y | z_t)` with respect to `z_t`, one row per sample.
pub trait LogProbGradient {
    fn num_classes(&self) -> usize;
    fn grad_log_prob(&self, z_t: &Tensor, ts: &[usize], ys: &[usize]) -> Result<Tensor>;
}

impl LogProbGradient for LatentClassifier {
    fn num_classes(&self) -> usize {
        LatentClassifier::num_classes(self)
    }

    fn grad_log_prob(&self, z_t: &Tensor, ts: &[usize], ys: &[usize]) -> Result<Tensor> {
        let k = self.num_classes();
        if let Some(y) = ys.iter().find(|&&y| y >= k) {
            return Err(validation(format!("class {y} outside 0..{k}")));
        }
        if ys.len() != z_t.dim(0)? {
            return Err(validation("one target class per batch entry required"));
        }
        let z = Var::from_tensor(&z_t.detach())?;
        let logp = candle_nn::ops::log_softmax(&self.forward(z.as_tensor(), ts)?, D::Minus1)?;
        let ids = Tensor::from_vec(ys.iter().map(|&y| y as u32).collect::<Vec<_>>(), (ys.len(), 1), z_t.device())?;
        // rows are independent, so the gradient of the sum is the per-row gradient
        let grads = logp.gather(&ids, 1)?.sum_all()?.backward()?;
        match grads.get(z.as_tensor()) {
            Some(g) => Ok(g.clone()),
            None => Ok(z_t.zeros_like()?),
        }
    }
}

/// `∇_{z_t} log softmax_y(φ(z_t, t))` for a single latent `[c, h, w]`.
pub fn grad_log_prob(clf: &LatentClassifier, z_t: &Tensor, t: usize, y: usize) -> Result<Tensor> {
    Ok(clf.grad_log_prob(&z_t.unsqueeze(0)?, &[t], &[y])?.squeeze(0)?)
}

/// `mu + g · sigma2 · grad_logp`.
pub fn guided_mean(mu: &Tensor, sigma2: f64, grad_logp: &Tensor, g: f64) -> Result<Tensor> {
    if !(sigma2 >= 0.0) {
        return Err(validation(format!("variance must be non-negative, got {sigma2}")));
    }
    if mu.shape() != grad_logp.shape() {
        return Err(validation("mean and gradient shapes differ"));
    }
    if g == 0.0 {
        return Ok(mu.clone());
    }
    Ok((mu + (grad_logp * (g * sigma2))?)?)
}

/// Classifier, per-row target classes and scale.
pub struct Guidance<'a> {
    pub classifier: &'a dyn LogProbGradient,
    pub labels: &'a [usize],
    pub scale: f64,
}

impl Guidance<'_> {
    fn active(&self) -> bool {
        self.scale != 0.0
    }

    fn gradient(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let ts = vec![t; self.labels.len()];
        self.classifier.grad_log_prob(z_t, &ts, self.labels)
    }
}

fn row_noise(rngs: &mut [ChaCha8Rng], like: &Tensor) -> Result<Tensor> {
    let dims = like.dims();
    if dims[0] != rngs.len() {
        return Err(validation("one random stream per batch row required"));
    }
    let rows = rngs
        .iter_mut()
        .map(|r| rng::normal_tensor(r, &dims[1..], like.dtype(), like.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// One ancestral step `z_t → z_{t−1}`; no noise is added at `t = 1`.
pub fn ddpm_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    rngs: &mut [ChaCha8Rng],
    guidance: Option<&Guidance>,
) -> Result<Tensor> {
    let p = posterior_params(z_t, eps_hat, t, sched)?;
    let mean = match guidance {
        Some(g) if g.active() => guided_mean(&p.mean, p.variance, &g.gradient(z_t, t)?, g.scale)?,
        _ => p.mean,
    };
    if t == 1 {
        return Ok(mean);
    }
    Ok((mean + (row_noise(rngs, z_t)? * p.variance.sqrt())?)?)
}

/// Deterministic DDIM update `z_t → z_{t_prev}` (`t_prev = 0` yields ẑ_0).
pub fn ddim_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    guidance: Option<&Guidance>,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(validation(format!("DDIM step must go backwards, got {t} -> {t_prev}")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(validation("noise prediction shape differs from latent"));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let eps = match guidance {
        Some(g) if g.active() => (eps_hat - (g.gradient(z_t, t)? * (g.scale * (1.0 - ab).sqrt()))?)?,
        _ => eps_hat.clone(),
    };
    let z0 = ((z_t - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((z0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

/// Uniformly strided descending subsequence of `1..=timesteps` that starts at
/// `timesteps` and ends at 1.
pub fn ddim_timesteps(timesteps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > timesteps {
        return Err(validation(format!("num_steps must lie in 1..={timesteps}")));
    }
    if num_steps == 1 {
        return Ok(vec![timesteps]);
    }
    let span = (timesteps - 1) as f64 / (num_steps - 1) as f64;
    Ok((0..num_steps).rev().map(|i| 1 + (i as f64 * span).round() as usize).collect())
}

/// Which sample to draw: its stream index and optional target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRequest {
    pub index: u64,
    pub label: Option<usize>,
}

/// Runs the reverse process for every request and returns `[n, c, h, w]`
/// latents. Labeled requests are guided by `guide` with the configured scale.
pub fn sample_latents<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    guide: Option<&dyn LogProbGradient>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    latent_shape: (usize, usize, usize),
    dtype: DType,
    requests: &[SampleRequest],
) -> Result<Option<Tensor>> {
    cfg.validate(sched.timesteps())?;
    let device = candle_core::Device::Cpu;
    let (c, h, w) = latent_shape;
    let mut out = Vec::new();
    for chunk in requests.chunks(cfg.batch) {
        let labels: Option<Vec<usize>> = chunk.iter().map(|r| r.label).collect();
        if labels.is_none() && chunk.iter().any(|r| r.label.is_some()) {
            return Err(validation("a sampling batch cannot mix guided and unguided requests"));
        }
        let guidance_labels = labels.unwrap_or_default();
        let guidance = if guidance_labels.is_empty() {
            None
        } else {
            let classifier = guide.ok_or_else(|| Error::Config("class-conditional sampling needs a latent classifier".into()))?;
            if let Some(y) = guidance_labels.iter().find(|&&y| y >= classifier.num_classes()) {
                return Err(validation(format!("class {y} outside 0..{}", classifier.num_classes())));
            }
            Some(Guidance {
                classifier,
                labels: &guidance_labels,
                scale: cfg.guidance_scale,
            })
        };
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|r| rng::stream(cfg.seed, &[r.index])).collect();
        let start = Tensor::zeros((chunk.len(), c, h, w), dtype, &device)?;
        let mut z = row_noise(&mut rngs, &start)?;
        let b = chunk.len();
        match cfg.method {
            SamplerMethod::Ddpm => {
                for t in (1..=sched.timesteps()).rev() {
                    let eps = denoiser.predict_noise(&z, &vec![t; b])?;
                    z = ddpm_step(&z, t, &eps, sched, &mut rngs, guidance.as_ref())?;
                }
            }
            SamplerMethod::Ddim => {
                let seq = ddim_timesteps(sched.timesteps(), cfg.num_steps)?;
                for (i, &t) in seq.iter().enumerate() {
                    let t_prev = seq.get(i + 1).copied().unwrap_or(0);
                    let eps = denoiser.predict_noise(&z, &vec![t; b])?;
                    z = ddim_step(&z, t, t_prev, &eps, sched, guidance.as_ref())?;
                }
            }
        }
        out.push(z.detach());
    }
    if out.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::cat(&out, 0)?))
}

/// Decodes latents batch by batch into images in `[0, 1]`.
pub fn decode_latents(decoder: &Decoder, z: &Tensor, batch: usize) -> Result<Vec<Image>> {
    let n = z.dim(0)?;
    let mut images = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let x = decoder.forward(&z.narrow(0, start, len)?)?;
        for i in 0..len {
            images.push(Image::from_model_tensor(&x.get(i)?)?);
        }
        start += len;
    }
    Ok(images)
}

/// Draws `n` samples with indices `0..n`. With a target class the latents are
/// guided by the bundle's latent classifier and decoded with D′; without one
/// they are unguided and decoded with D.
pub fn sample(bundle: &ModelBundle, cfg: &SamplerConfig, y: Option<usize>, n: usize) -> Result<Vec<(Image, Tensor)>> {
    bundle.validate()?;
    let lae = bundle.lae()?;
    let (guide, decoder): (Option<&dyn LogProbGradient>, &Decoder) = match y {
        Some(_) => (Some(bundle.latent_clf()?), bundle.finetuned_decoder()?),
        None => (None, &lae.decoder),
    };
    let denoiser = bundle.denoiser()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let dc = denoiser.config();
    let requests: Vec<SampleRequest> = (0..n as u64).map(|index| SampleRequest { index, label: y }).collect();
    let dtype = lae.decoder.params().vars()[0].dtype();
    let (c, h, w) = lae.latent_shape(bundle.image_size, bundle.image_size)?;
    if c != dc.latent_channels {
        return Err(validation("denoiser and autoencoder disagree on latent channels"));
    }
    let shape = (c, h, w);
    let z = sample_latents(denoiser, guide, &bundle.schedule, cfg, shape, dtype, &requests)?
        .ok_or_else(|| validation("no samples drawn"))?;
    let images = decode_latents(decoder, &z, cfg.batch)?;
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(i, img)| Ok((img, z.get(i)?)))
        .collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// ε̂ = 0.3·z_t, independent of t.
    struct Linear;
    impl NoisePredictor for Linear {
        fn predict_noise(&self, z_t: &Tensor, _: &[usize]) -> Result<Tensor> {
            Ok((z_t * 0.3)?)
        }
    }

    /// log p(y|z) with logits −½‖z − m_y‖²; gradient is m_y − z + Σ p_k (z − m_k).
    struct Quadratic;
    impl LogProbGradient for Quadratic {
        fn num_classes(&self) -> usize {
            2
        }
        fn grad_log_prob(&self, z_t: &Tensor, _: &[usize], ys: &[usize]) -> Result<Tensor> {
            let rows = ys
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let z = z_t.get(i)?;
                    let shift = if y == 0 { 1.0 } else { -1.0 };
                    Ok(((z * -0.5)? + shift)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&rows, 0)?)
        }
    }

    fn z(seed: u64) -> Tensor {
        rng::normal_tensor(&mut rng::stream(seed, &[]), &[2, 1, 2, 2], DType::F64, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn guided_mean_cases() {
        let mu = Tensor::new(&[0.0f64], &Device::Cpu).unwrap();
        let grad = Tensor::new(&[2.0f64], &Device::Cpu).unwrap();
        let v = guided_mean(&mu, 0.5, &grad, 1.0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![1.0]);
        assert!(guided_mean(&mu, -0.1, &grad, 1.0).is_err());
        let m = z(1);
        let g = z(2);
        assert_eq!(
            guided_mean(&m, 0.3, &g, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            m.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let one = (guided_mean(&m, 0.3, &g, 1.5).unwrap() - &m).unwrap();
        let two = (guided_mean(&m, 0.3, &g, 3.0).unwrap() - &m).unwrap();
        assert!(max_diff(&(one * 2.0).unwrap(), &two) < 1e-9);
    }

    #[test]
    fn subsequence_is_uniform_and_spans_the_chain() {
        let s = ddim_timesteps(1000, 200).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!((s[0], s[199]), (1000, 1));
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(10, 1).unwrap(), vec![10]);
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn ddim_fixed_point_and_inversion() {
        let sched = NoiseSchedule::from_betas(vec![0.1, 1e-300, 0.2]).unwrap();
        let zt = z(3);
        let eps = z(4);
        let same = ddim_step(&zt, 2, 1, &eps, &sched, None).unwrap();
        assert!(max_diff(&same, &zt) < 1e-12);
        assert!(ddim_step(&zt, 2, 2, &eps, &sched, None).is_err());

        let z0 = z(5);
        let zt = crate::diffusion::q_sample(&z0, 3, &eps, &sched).unwrap();
        let rec = ddim_step(&zt, 3, 0, &eps, &sched, None).unwrap();
        assert!(max_diff(&rec, &z0) < 1e-9);
    }

    #[test]
    fn ddpm_last_step_is_deterministic() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let zt = z(6);
        let eps = z(7);
        let mut r1 = vec![rng::stream(1, &[]), rng::stream(2, &[])];
        let mut r2 = vec![rng::stream(8, &[]), rng::stream(9, &[])];
        let a = ddpm_step(&zt, 1, &eps, &sched, &mut r1, None).unwrap();
        let b = ddpm_step(&zt, 1, &eps, &sched, &mut r2, None).unwrap();
        assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn zero_guidance_is_bitwise_unconditional() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
            let cfg = SamplerConfig {
                method,
                num_steps: 5,
                guidance_scale: 0.0,
                seed: 11,
                batch: 3,
            };
            let guided: Vec<SampleRequest> = (0..4).map(|i| SampleRequest { index: i, label: Some(1) }).collect();
            let plain: Vec<SampleRequest> = (0..4).map(|i| SampleRequest { index: i, label: None }).collect();
            let a = sample_latents(&Linear, Some(&Quadratic), &sched, &cfg, (1, 2, 2), DType::F64, &guided)
                .unwrap()
                .unwrap();
            let b = sample_latents(&Linear, None, &sched, &cfg, (1, 2, 2), DType::F64, &plain).unwrap().unwrap();
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn samples_do_not_depend_on_batching() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let requests: Vec<SampleRequest> = (0..5).map(|i| SampleRequest { index: i, label: Some(0) }).collect();
        let run = |batch| {
            let cfg = SamplerConfig {
                method: SamplerMethod::Ddpm,
                num_steps: 20,
                guidance_scale: 1.0,
                seed: 2,
                batch,
            };
            sample_latents(&Linear, Some(&Quadratic), &sched, &cfg, (1, 2, 2), DType::F64, &requests)
                .unwrap()
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        };
        assert_eq!(run(1), run(5));
        assert_eq!(run(2), run(5));
    }

    #[test]
    fn labeled_requests_need_a_classifier() {
        let sched = NoiseSchedule::linear(5, 1e-3, 0.1).unwrap();
        let req = [SampleRequest { index: 0, label: Some(0) }];
        let err = sample_latents(&Linear, None, &sched, &SamplerConfig { num_steps: 5, ..Default::default() }, (1, 2, 2), DType::F64, &req);
        assert!(matches!(err, Err(Error::Config(_))));
        let none = sample_latents(&Linear, None, &sched, &SamplerConfig { num_steps: 5, ..Default::default() }, (1, 2, 2), DType::F64, &[]);
        assert!(none.unwrap().is_none());
    }
}
