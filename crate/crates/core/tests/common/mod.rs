//! Independent oracles shared by the integration tests. Each check returns
//! `Err(description)` on the first violated property.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, D};
use histodiff::diffusion::{dm_loss, posterior_params, q_sample, NoisePredictor, NoiseSchedule};
use histodiff::metrics::{classification_metrics, frechet_distance, Averaging, ConfusionMatrix, FeatureStats};
use histodiff::nn::{
    ClassifierRole, DenoiserConfig, Denoiser, ImageClassifier, ImageClassifierConfig, LaeConfig, LatentAutoencoder,
    LatentClassifier, LatentClassifierConfig, ParamStore, PerceptualSurrogate,
};
use histodiff::rng;
use histodiff::sampling::{
    grad_log_prob, guided_mean, sample_latents, LogProbGradient, SampleRequest, SamplerConfig, SamplerMethod,
};
use histodiff::selection::{euclidean, select, CandidateSample, ClassCentroid};
use histodiff::training::{decoder_ft_loss, kl_divergence, reconstruction_loss, LossWeights};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub type Check = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------------------
// forward process

/// Iterates `z ← √(1−β_t)·z + √β_t·ε` from a scalar `z0` for `draws` chains
/// and compares the empirical moments at `checkpoints` with the closed-form
/// marginal, and with draws from `q_sample`, to within 3 standard errors.
pub fn forward_process_monte_carlo(draws: usize) -> Check {
    let sched = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let z0 = 1.5f64;
    let checkpoints = [1usize, 10, 100, 500, 1000];
    let mut sums = vec![(0.0f64, 0.0f64); checkpoints.len()];
    let mut r = rng::stream(2024, &[0]);
    for _ in 0..draws {
        let mut z = z0;
        let mut next = 0;
        for t in 1..=1000 {
            let b = sched.beta(t);
            let e: f64 = r.sample(rand_distr::StandardNormal);
            z = (1.0 - b).sqrt() * z + b.sqrt() * e;
            if t == checkpoints[next] {
                sums[next].0 += z;
                sums[next].1 += z * z;
                next += 1;
                if next == checkpoints.len() {
                    break;
                }
            }
        }
    }
    let n = draws as f64;
    let zt = Tensor::from_vec(vec![z0; draws], draws, &Device::Cpu).unwrap();
    for (i, &t) in checkpoints.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (mean, var) = (ab.sqrt() * z0, 1.0 - ab);
        let se_mean = (var / n).sqrt();
        let se_var = var * (2.0 / (n - 1.0)).sqrt();
        let mut moments = vec![("kernel chain", sums[i].0 / n, sums[i].1 / n - (sums[i].0 / n).powi(2) )];
        let eps = rng::normal_tensor(&mut rng::stream(2024, &[1, t as u64]), &[draws], DType::F64, &Device::Cpu).unwrap();
        let q = flat(&q_sample(&zt, t, &eps, &sched).unwrap());
        let qm = q.iter().sum::<f64>() / n;
        moments.push(("q_sample", qm, q.iter().map(|v| (v - qm).powi(2)).sum::<f64>() / n));
        for (what, m, v) in moments {
            // the biased sample variance differs from the unbiased one by var/n,
            // far below the standard error
            ensure((m - mean).abs() <= 3.0 * se_mean, || {
                format!("{what} t={t}: mean {m} vs {mean} (se {se_mean})")
            })?;
            ensure((v - var).abs() <= 3.0 * se_var, || format!("{what} t={t}: variance {v} vs {var} (se {se_var})"))?;
        }
    }
    Ok(())
}

/// With the true noise, the reverse mean at t = 1 is exactly `z0`.
pub fn posterior_inversion_at_t1() -> Check {
    let sched = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let dev = Device::Cpu;
    let z0 = rng::normal_tensor(&mut rng::stream(7, &[0]), &[4, 3, 8, 8], DType::F64, &dev).unwrap();
    let eps = rng::normal_tensor(&mut rng::stream(7, &[1]), &[4, 3, 8, 8], DType::F64, &dev).unwrap();
    let z1 = q_sample(&z0, 1, &eps, &sched).unwrap();
    let p = posterior_params(&z1, &eps, 1, &sched).unwrap();
    let err = max_abs_diff(&flat(&p.mean), &flat(&z0));
    ensure(err <= 1e-9, || format!("posterior mean misses z0 by {err}"))?;
    ensure(p.variance.abs() <= 1e-15, || format!("posterior variance at t=1 is {}", p.variance))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// guidance

pub const TOY_CLASSES: usize = 4;

pub fn small_denoiser(timesteps: usize, seed: u64) -> Denoiser {
    let cfg = DenoiserConfig {
        latent_channels: 3,
        base_channels: 8,
        time_dim: 16,
        timesteps,
    };
    Denoiser::new(cfg, ParamStore::new(seed), DType::F64, &Device::Cpu).unwrap()
}

pub fn small_latent_clf(timesteps: usize, seed: u64) -> LatentClassifier {
    let cfg = LatentClassifierConfig {
        latent_channels: 3,
        width: 8,
        feature_dim: 16,
        num_classes: TOY_CLASSES,
        timesteps,
    };
    LatentClassifier::new(cfg, ParamStore::new(seed), DType::F64, &Device::Cpu).unwrap()
}

/// Guided requests with scale 0 reproduce unguided sampling bit for bit,
/// for both samplers.
pub fn zero_guidance_is_unconditional() -> Check {
    let sched = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
    let denoiser = small_denoiser(50, 1);
    let clf = small_latent_clf(50, 2);
    for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
        let cfg = SamplerConfig {
            method,
            num_steps: 10,
            guidance_scale: 0.0,
            seed: 11,
            batch: 3,
        };
        let run = |label: Option<usize>| {
            let reqs: Vec<_> = (0..5).map(|i| SampleRequest { index: i, label }).collect();
            let z = sample_latents(&denoiser, Some(&clf), &sched, &cfg, (3, 4, 4), DType::F64, &reqs).unwrap().unwrap();
            flat(&z)
        };
        let (a, b) = (run(None), run(Some(2)));
        ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), || {
            format!("{method:?}: g=0 guided sampling differs from unguided")
        })?;
    }
    Ok(())
}

/// `ε̂ = a·z + b·t`, elementwise.
pub struct AffinePredictor {
    pub a: f64,
    pub b: f64,
}

impl NoisePredictor for AffinePredictor {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> histodiff::Result<Tensor> {
        let n = z_t.dims()[1..].iter().product::<usize>();
        let shift: Vec<f64> = ts.iter().flat_map(|&t| std::iter::repeat_n(self.b * t as f64, n)).collect();
        let shift = Tensor::from_vec(shift, z_t.shape(), z_t.device())?;
        Ok(((z_t * self.a)? + shift)?)
    }
}

/// Classes are isotropic Gaussians around fixed means:
/// `log p(y | z) = log softmax_y(−‖z − m_y‖² / 2)`.
pub struct GaussianClasses {
    pub means: Vec<Vec<f64>>,
}

impl GaussianClasses {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[]);
        Self {
            means: (0..TOY_CLASSES).map(|_| rng::normal_vec(&mut r, dim)).collect(),
        }
    }

    /// Scalar reference gradient `m_y − Σ_k p_k m_k`.
    pub fn gradient(&self, z: &[f64], y: usize) -> Vec<f64> {
        let logits: Vec<f64> = self.means.iter().map(|m| -0.5 * m.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).collect();
        let top = logits.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let s: f64 = w.iter().sum();
        (0..z.len())
            .map(|i| self.means[y][i] - (0..self.means.len()).map(|k| w[k] / s * self.means[k][i]).sum::<f64>())
            .collect()
    }
}

impl LogProbGradient for GaussianClasses {
    fn num_classes(&self) -> usize {
        self.means.len()
    }

    fn grad_log_prob(&self, z_t: &Tensor, _ts: &[usize], ys: &[usize]) -> histodiff::Result<Tensor> {
        let z = flat(z_t);
        let n = z.len() / ys.len();
        let g: Vec<f64> = ys.iter().enumerate().flat_map(|(i, &y)| self.gradient(&z[i * n..(i + 1) * n], y)).collect();
        Ok(Tensor::from_vec(g, z_t.shape(), z_t.device())?)
    }
}

/// Ancestral guided sampling on a 10-step chain against a scalar
/// re-implementation, plus `guided_mean` against its formula.
pub fn toy_chain_matches_reference() -> Check {
    let (t_max, b0, b1) = (10usize, 1e-3, 0.2);
    let sched = NoiseSchedule::linear(t_max, b0, b1).unwrap();
    let shape = (2usize, 2usize, 2usize);
    let dim = shape.0 * shape.1 * shape.2;
    let predictor = AffinePredictor { a: 0.3, b: -0.02 };
    let classes = GaussianClasses::new(dim, 5);
    let g = 1.7;
    let cfg = SamplerConfig {
        method: SamplerMethod::Ddpm,
        num_steps: t_max,
        guidance_scale: g,
        seed: 99,
        batch: 4,
    };
    let reqs: Vec<SampleRequest> = (0..6).map(|i| SampleRequest { index: i, label: Some(i as usize % TOY_CLASSES) }).collect();
    let z = sample_latents(&predictor, Some(&classes), &sched, &cfg, shape, DType::F64, &reqs).unwrap().unwrap();
    let got = flat(&z);

    let betas: Vec<f64> = (0..t_max).map(|i| b0 + (b1 - b0) * i as f64 / (t_max - 1) as f64).collect();
    let mut abar = vec![1.0f64];
    for b in &betas {
        abar.push(abar.last().unwrap() * (1.0 - b));
    }
    let mut want = Vec::new();
    for req in &reqs {
        let y = req.label.unwrap();
        let mut r = rng::stream(cfg.seed, &[req.index]);
        let mut zv = rng::normal_vec(&mut r, dim);
        for t in (1..=t_max).rev() {
            let (beta, alpha) = (betas[t - 1], 1.0 - betas[t - 1]);
            let var = beta * (1.0 - abar[t - 1]) / (1.0 - abar[t]);
            let grad = classes.gradient(&zv, y);
            let mut mean: Vec<f64> = zv
                .iter()
                .map(|&zi| {
                    let eps = predictor.a * zi + predictor.b * t as f64;
                    (zi - beta / (1.0 - abar[t]).sqrt() * eps) / alpha.sqrt()
                })
                .collect();
            for (m, gr) in mean.iter_mut().zip(&grad) {
                *m += g * var * gr;
            }
            if t > 1 {
                let noise = rng::normal_vec(&mut r, dim);
                zv = mean.iter().zip(&noise).map(|(m, e)| m + var.sqrt() * e).collect();
            } else {
                zv = mean;
            }
        }
        want.extend(zv);
    }
    let err = max_abs_diff(&got, &want);
    ensure(err <= 1e-9, || format!("guided chain differs from the reference by {err}"))?;

    let dev = Device::Cpu;
    let mu = rng::normal_tensor(&mut rng::stream(3, &[0]), &[dim], DType::F64, &dev).unwrap();
    let grad = rng::normal_tensor(&mut rng::stream(3, &[1]), &[dim], DType::F64, &dev).unwrap();
    let (s2, scale) = (0.037, 2.5);
    let out = flat(&guided_mean(&mu, s2, &grad, scale).unwrap());
    let reference: Vec<f64> = flat(&mu).iter().zip(flat(&grad)).map(|(m, gr)| m + scale * s2 * gr).collect();
    let err = max_abs_diff(&out, &reference);
    ensure(err <= 1e-9, || format!("guided_mean differs from μ + gσ²∇ by {err}"))
}

fn log_prob(clf: &LatentClassifier, z: &Tensor, t: usize, y: usize) -> f64 {
    let lp = candle_nn::ops::log_softmax(&clf.forward(&z.unsqueeze(0).unwrap(), &[t]).unwrap(), D::Minus1).unwrap();
    flat(&lp)[y]
}

/// Central differences against the autograd gradient, and
/// `Σ_y p(y|z) ∇ log p(y|z) = 0`.
pub fn grad_log_prob_checks() -> Check {
    let clf = small_latent_clf(100, 21);
    let dev = Device::Cpu;
    let h = 1e-5;
    for (case, t) in [(0u64, 1usize), (1, 40), (2, 100)] {
        let z = rng::normal_tensor(&mut rng::stream(30, &[case]), &[3, 4, 4], DType::F64, &dev).unwrap();
        let zv = flat(&z);
        let logits = flat(&clf.forward(&z.unsqueeze(0).unwrap(), &[t]).unwrap());
        let top = logits.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut score_sum = vec![0.0; zv.len()];
        for y in 0..TOY_CLASSES {
            let g = flat(&grad_log_prob(&clf, &z, t, y).unwrap());
            let fd: Vec<f64> = (0..zv.len())
                .map(|i| {
                    let shifted = |d: f64| {
                        let mut v = zv.clone();
                        v[i] += d;
                        log_prob(&clf, &Tensor::from_vec(v, (3, 4, 4), &dev).unwrap(), t, y)
                    };
                    (shifted(h) - shifted(-h)) / (2.0 * h)
                })
                .collect();
            let num = fd.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            ensure(num / den <= 1e-3, || format!("t={t} y={y}: finite-difference relative error {}", num / den))?;
            for (s, gi) in score_sum.iter_mut().zip(&g) {
                *s += w[y] / total * gi;
            }
        }
        let worst = score_sum.iter().map(|v| v.abs()).fold(0.0, f64::max);
        ensure(worst <= 1e-5, || format!("t={t}: expected score sums to {worst}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// losses

pub fn loss_reductions() -> Check {
    let dev = Device::Cpu;
    let lae = LatentAutoencoder::new(LaeConfig::default(), 3, DType::F64, &dev).unwrap();
    let aux = ImageClassifier::new(
        ImageClassifierConfig { widths: [8, 8, 16], num_classes: 3 },
        ClassifierRole::Auxiliary,
        ParamStore::new(4),
        DType::F64,
        &dev,
    )
    .unwrap();
    let perceptual = PerceptualSurrogate::new(DType::F64, &dev).unwrap();
    let x = (rng::normal_tensor(&mut rng::stream(40, &[0]), &[2, 3, 16, 16], DType::F64, &dev).unwrap() * 0.5).unwrap();
    let z = rng::normal_tensor(&mut rng::stream(40, &[1]), &[2, 3, 4, 4], DType::F64, &dev).unwrap();
    let y = Tensor::new(&[0u32, 2], &dev).unwrap();
    let weights = LossWeights { lambda_ce: 0.0, ..LossWeights::default() };
    let ft = decoder_ft_loss(&lae.decoder, &aux, &perceptual, &z, &x, &y, &weights).unwrap();
    let rec = reconstruction_loss(&lae.decoder.forward(&z).unwrap(), &x, &perceptual, weights.lambda_perc).unwrap();
    let (a, b) = (flat(&ft.total)[0], flat(&rec)[0]);
    ensure((a - b).abs() <= 1e-9, || format!("λ_CE=0 fine-tuning loss {a} vs reconstruction {b}"))?;
    let full = decoder_ft_loss(&lae.decoder, &aux, &perceptual, &z, &x, &y, &LossWeights::default()).unwrap();
    let ce: f64 = full.parts.iter().find(|p| p.0 == "ce").unwrap().1;
    let c = flat(&full.total)[0];
    ensure((c - ce - b).abs() <= 1e-9 && ce > 0.0, || format!("λ_CE=1 loss {c} is not reconstruction {b} plus CE {ce}"))?;

    let zeros = Tensor::zeros((2, 3, 4, 4), DType::F64, &dev).unwrap();
    let kl0 = flat(&kl_divergence(&zeros, &zeros).unwrap())[0];
    ensure(kl0.abs() <= 1e-12, || format!("KL(N(0,1) ‖ N(0,1)) = {kl0}"))?;
    let ones = zeros.ones_like().unwrap();
    let per_sample = flat(&kl_divergence(&ones, &zeros).unwrap())[0];
    let per_element = per_sample / 48.0;
    ensure((per_element - 0.5).abs() <= 1e-12, || format!("μ=σ=1 gives {per_element} per element"))?;

    let sched = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let z0 = rng::normal_tensor(&mut rng::stream(41, &[0]), &[5, 3, 4, 4], DType::F64, &dev).unwrap();
    let eps = rng::normal_tensor(&mut rng::stream(41, &[1]), &[5, 3, 4, 4], DType::F64, &dev).unwrap();
    let ts = [1, 17, 250, 999, 1000];
    let oracle = KnowsZ0 { z0: z0.clone(), sched: sched.clone() };
    let l = flat(&dm_loss(&oracle, &z0, &ts, &eps, &sched).unwrap())[0];
    ensure(l.abs() <= 1e-12, || format!("perfect predictor has dm_loss {l}"))
}

/// Recovers the noise from `z_t` given the clean latents.
struct KnowsZ0 {
    z0: Tensor,
    sched: NoiseSchedule,
}

impl NoisePredictor for KnowsZ0 {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> histodiff::Result<Tensor> {
        let rows: Vec<Tensor> = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let ab = self.sched.alpha_bar(t);
                let zi = z_t.get(i).unwrap();
                ((zi - (self.z0.get(i).unwrap() * ab.sqrt()).unwrap()).unwrap() / (1.0 - ab).sqrt()).unwrap()
            })
            .collect();
        Ok(Tensor::stack(&rows, 0)?)
    }
}

// ---------------------------------------------------------------------------
// metrics

fn stats_1d(mean: f64, var: f64) -> FeatureStats {
    FeatureStats {
        mean: DVector::from_element(1, mean),
        covariance: DMatrix::from_element(1, 1, var),
        n: 2,
    }
}

pub fn frechet_analytic_cases() -> Check {
    let base = stats_1d(0.0, 1.0);
    for (other, want) in [(stats_1d(0.0, 1.0), 0.0), (stats_1d(2.0, 1.0), 4.0), (stats_1d(0.0, 4.0), 1.0)] {
        let got = frechet_distance(&base, &other).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-6, || format!("expected {want}, got {got}"))?;
    }
    Ok(())
}

/// Per-sample recomputation of accuracy and macro one-vs-rest scores.
pub fn brute_force_metrics(labels: &[usize], predicted: &[usize], k: usize) -> (f64, f64, f64, f64) {
    let correct = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / labels.len() as f64;
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut f1s, mut recalls, mut specs) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&y, &p) in labels.iter().zip(predicted) {
            match (y == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fn_);
        f1s += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        recalls += recall;
        specs += frac(tn, tn + fp);
    }
    let k = k as f64;
    (accuracy, f1s / k, recalls / k, specs / k)
}

pub fn random_confusion_matrices(count: usize) -> Check {
    let mut r = rng::stream(77, &[]);
    for case in 0..count {
        let k = r.random_range(2..=8);
        let n = r.random_range(1..=1000);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        // skew toward the true label so accuracy varies across cases
        let hit = r.random::<f64>();
        let predicted: Vec<usize> = labels.iter().map(|&y| if r.random::<f64>() < hit { y } else { r.random_range(0..k) }).collect();
        let cm = ConfusionMatrix::from_predictions(&labels, &predicted, k).map_err(|e| e.to_string())?;
        let m = classification_metrics(&cm, Averaging::Macro).map_err(|e| e.to_string())?;
        let want = brute_force_metrics(&labels, &predicted, k);
        ensure((m.accuracy, m.f1, m.sensitivity, m.specificity) == want, || {
            format!("case {case}: {:?} vs brute force {want:?}", (m.accuracy, m.f1, m.sensitivity, m.specificity))
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// selection

/// A pool with coarse, tie-prone confidences and features.
pub fn random_pool<R: Rng>(r: &mut R, classes: usize, dim: usize) -> (Vec<CandidateSample>, Vec<ClassCentroid>) {
    let n = r.random_range(0..40);
    let centroids = (0..classes)
        .map(|label| ClassCentroid {
            label,
            centroid: (0..dim).map(|_| r.random_range(-2i32..=2) as f64).collect(),
            support: 1,
        })
        .collect();
    let pool = (0..n)
        .map(|index| CandidateSample {
            index,
            image: histodiff::data::Image::new(1, 1, vec![0.0; 3]).unwrap(),
            latent: Vec::new(),
            target_label: r.random_range(0..classes),
            predicted_label: r.random_range(0..classes),
            confidence: r.random_range(0..=4) as f64 / 4.0,
            feature: (0..dim).map(|_| r.random_range(-2i32..=2) as f64).collect(),
            centroid_distance: 0.0,
        })
        .collect();
    (pool, centroids)
}

/// Filter, then order by (distance ↑, confidence ↓, index ↑) with a plain
/// insertion sort, then truncate.
pub fn brute_force_select(pool: &[CandidateSample], centroids: &[ClassCentroid], target: usize, count: usize, cmin: f64) -> Vec<usize> {
    let centroid = &centroids[target].centroid;
    let mut kept: Vec<(f64, f64, usize)> = Vec::new();
    for c in pool {
        if c.target_label == target && c.predicted_label == target && c.confidence >= cmin {
            kept.push((euclidean(&c.feature, centroid), c.confidence, c.index));
        }
    }
    let before = |a: &(f64, f64, usize), b: &(f64, f64, usize)| {
        a.0 < b.0 || (a.0 == b.0 && (a.1 > b.1 || (a.1 == b.1 && a.2 < b.2)))
    };
    for i in 1..kept.len() {
        let mut j = i;
        while j > 0 && before(&kept[j], &kept[j - 1]) {
            kept.swap(j, j - 1);
            j -= 1;
        }
    }
    kept.into_iter().take(count).map(|k| k.2).collect()
}

pub fn selection_oracle(pools: usize) -> Check {
    let mut r = rng::stream(88, &[]);
    for case in 0..pools {
        let classes = r.random_range(1..=4);
        let (pool, centroids) = random_pool(&mut r, classes, 3);
        let target = r.random_range(0..classes);
        let cmin = r.random_range(0..=4) as f64 / 4.0;
        let counts = [0, 1, 2, 3, 5, 8, 13, 40];
        let mut previous: Vec<usize> = Vec::new();
        for &count in &counts {
            let got: Vec<usize> = select(&pool, &centroids, target, count, cmin)
                .map_err(|e| e.to_string())?
                .items
                .iter()
                .map(|c| c.index)
                .collect();
            let want = brute_force_select(&pool, &centroids, target, count, cmin);
            ensure(got == want, || format!("pool {case}, count {count}: {got:?} vs brute force {want:?}"))?;
            ensure(got.starts_with(&previous), || format!("pool {case}: count {count} does not extend the smaller selection"))?;
            previous = got;
        }
    }
    Ok(())
}
