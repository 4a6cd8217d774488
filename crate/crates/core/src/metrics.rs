//! Fréchet feature distance and confusion-matrix classification metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{validation, Result};
use crate::nn::ImageClassifier;

/// Gaussian summary of a feature set: mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(validation(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(validation("feature rows differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let covariance = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, covariance, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Penultimate-feature rows of `images` under a frozen extractor.
pub fn extract_features(extractor: &ImageClassifier, images: &[&Image], batch: usize) -> Result<Vec<Vec<f64>>> {
    let vars = extractor.params().vars();
    let v = vars.first().ok_or_else(|| validation("extractor has no parameters"))?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = crate::data::images_to_tensor(chunk, v.dtype(), v.device())?;
        let f = extractor.features(&x)?.to_dtype(candle_core::DType::F64)?;
        out.extend(f.to_vec2::<f64>()?);
    }
    Ok(out)
}

pub fn feature_stats(images: &[&Image], extractor: &ImageClassifier) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(validation("feature statistics need at least 2 images"));
    }
    FeatureStats::from_features(&extract_features(extractor, images, 64)?)
}

/// Symmetric positive semi-definite square root, clamping tiny negative
/// eigenvalues from round-off to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`, with the trace of the
/// square root taken from the eigenvalues of the symmetric `√Σ_a Σ_b √Σ_a`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(validation(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.covariance);
    let m = &sa * &b.covariance * &sa;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&v| if v < 1e-10 { 0.0f64.max(v).sqrt() } else { v.sqrt() })
        .sum();
    let d = diff.dot(&diff) + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Counts with rows = true class and columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_predictions(labels: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(validation("labels and predictions differ in length"));
        }
        let mut cm = Self::new(num_classes);
        for (&y, &p) in labels.iter().zip(predicted) {
            if y >= num_classes || p >= num_classes {
                return Err(validation(format!("class id outside 0..{num_classes}")));
            }
            cm.counts[y][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Classes where some per-class ratio had a zero denominator and was
    /// counted as 0.
    pub degenerate_classes: Vec<usize>,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus one-vs-rest F1, sensitivity (recall) and specificity,
/// macro- or micro-averaged over classes.
pub fn classification_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<ClassificationMetrics> {
    let k = cm.num_classes();
    if cm.counts.iter().any(|r| r.len() != k) {
        return Err(validation("confusion matrix must be square"));
    }
    let total = cm.total();
    if total == 0 {
        return Err(validation("confusion matrix is empty"));
    }
    let diag: u64 = (0..k).map(|i| cm.counts[i][i]).sum();
    let accuracy = diag as f64 / total as f64;
    let mut per = Vec::with_capacity(k);
    let mut degenerate_classes = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all, mut tn_all) = (0, 0, 0, 0);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let fn_ = cm.counts[c].iter().sum::<u64>() - tp;
        let fp = (0..k).map(|r| cm.counts[r][c]).sum::<u64>() - tp;
        let tn = total - tp - fn_ - fp;
        let mut bad = false;
        let precision = ratio(tp, tp + fp, &mut bad);
        let recall = ratio(tp, tp + fn_, &mut bad);
        let specificity = ratio(tn, tn + fp, &mut bad);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            bad = true;
            0.0
        };
        if bad {
            degenerate_classes.push(c);
        }
        per.push((f1, recall, specificity));
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        tn_all += tn;
    }
    let (f1, sensitivity, specificity) = match averaging {
        Averaging::Macro => {
            let mean = |f: fn(&(f64, f64, f64)) -> f64| per.iter().map(f).sum::<f64>() / k as f64;
            (mean(|p| p.0), mean(|p| p.1), mean(|p| p.2))
        }
        Averaging::Micro => {
            let mut bad = false;
            let p = ratio(tp_all, tp_all + fp_all, &mut bad);
            let r = ratio(tp_all, tp_all + fn_all, &mut bad);
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (f1, r, ratio(tn_all, tn_all + fp_all, &mut bad))
        }
    };
    Ok(ClassificationMetrics {
        accuracy,
        f1,
        sensitivity,
        specificity,
        degenerate_classes,
    })
}
