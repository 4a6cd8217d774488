//! Selective augmentation: confidence filtering, centroid-distance ranking
//! and ratio-driven assembly of the augmented training set.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Patch, PatchDataset};
use crate::error::{io_err, validation, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSample {
    /// Position in the generated pool; the final tie-breaker.
    pub index: usize,
    pub image: Image,
    pub latent: Vec<f32>,
    pub target_label: usize,
    pub predicted_label: usize,
    pub confidence: f64,
    pub feature: Vec<f64>,
    /// Euclidean distance from `feature` to the target class centroid.
    pub centroid_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroid {
    pub label: usize,
    pub centroid: Vec<f64>,
    pub support: usize,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-class arithmetic means for classes `0..num_classes`, ordered by label.
pub fn compute_centroids(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Vec<ClassCentroid>> {
    if features.len() != labels.len() {
        return Err(validation("one label per feature row required"));
    }
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) {
        return Err(validation("feature rows differ in length"));
    }
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= num_classes {
            return Err(validation(format!("label {y} outside 0..{num_classes}")));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(f) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(label, (sum, n))| {
            if n == 0 {
                return Err(validation(format!("class {label} has no samples to form a centroid")));
            }
            Ok(ClassCentroid {
                label,
                centroid: sum.into_iter().map(|s| s / n as f64).collect(),
                support: n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub items: Vec<CandidateSample>,
    /// Fewer candidates than requested were available.
    pub shortfall: bool,
}

fn centroid_for(centroids: &[ClassCentroid], label: usize) -> Result<&ClassCentroid> {
    centroids
        .iter()
        .find(|c| c.label == label)
        .ok_or_else(|| validation(format!("no centroid for class {label}")))
}

fn ranking(a: &CandidateSample, b: &CandidateSample) -> Ordering {
    a.centroid_distance
        .total_cmp(&b.centroid_distance)
        .then(b.confidence.total_cmp(&a.confidence))
        .then(a.index.cmp(&b.index))
}

fn passes(c: &CandidateSample, target: usize, confidence_min: f64) -> bool {
    c.target_label == target && c.predicted_label == target && c.confidence >= confidence_min
}

/// Keeps candidates for `target` that the feature classifier assigns to
/// `target` with confidence at least `confidence_min`, ranks them by distance
/// to the target centroid (then confidence descending, then index) and
/// returns the first `count`.
pub fn select(
    candidates: &[CandidateSample],
    centroids: &[ClassCentroid],
    target: usize,
    count: usize,
    confidence_min: f64,
) -> Result<Selection> {
    let centroid = &centroid_for(centroids, target)?.centroid;
    let mut kept: Vec<CandidateSample> = candidates
        .iter()
        .filter(|c| passes(c, target, confidence_min))
        .map(|c| CandidateSample {
            centroid_distance: euclidean(&c.feature, centroid),
            ..c.clone()
        })
        .collect();
    kept.sort_by(ranking);
    let shortfall = kept.len() < count;
    kept.truncate(count);
    Ok(Selection { items: kept, shortfall })
}

/// Uniform draw without replacement among candidates for `target`, ignoring
/// confidence and distance. Output follows pool order.
pub fn random_select(candidates: &[CandidateSample], target: usize, count: usize, seed: u64) -> Selection {
    let pool: Vec<&CandidateSample> = candidates.iter().filter(|c| c.target_label == target).collect();
    let shortfall = pool.len() < count;
    let take = count.min(pool.len());
    let mut r = rng::stream(seed, &[target as u64]);
    let mut picked = sample(&mut r, pool.len(), take).into_vec();
    picked.sort_unstable();
    Selection {
        items: picked.into_iter().map(|i| pool[i].clone()).collect(),
        shortfall,
    }
}

/// Splits `total` across classes proportionally to `weights` with
/// largest-remainder rounding (ties to the lower class id).
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (total * w % sum, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// Number of synthetic images for `ratio` relative to `real` images.
pub fn synthetic_total(ratio: f64, real: usize) -> Result<usize> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(validation(format!("augmentation ratio must be non-negative, got {ratio}")));
    }
    Ok((ratio * real as f64).round() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub dataset: PatchDataset,
    /// `true` for synthetic items, aligned with `dataset.items`.
    pub synthetic: Vec<bool>,
    /// Classes that could not fill their quota.
    pub shortfall_classes: Vec<usize>,
}

/// Real set plus `round(ratio·|real|)` synthetic images drawn from the front
/// of each class's ranked selection, apportioned like the real class counts.
pub fn build_augmented_set(real: &PatchDataset, selections: &[Vec<CandidateSample>], ratio: f64) -> Result<AugmentedSet> {
    let counts = real.class_counts();
    if selections.len() != counts.len() {
        return Err(validation(format!(
            "expected selections for {} classes, got {}",
            counts.len(),
            selections.len()
        )));
    }
    let quotas = apportion(synthetic_total(ratio, real.len())?, &counts);
    let source_id = real.source_names.len() as u32;
    let mut ds = real.clone();
    ds.source_names.push("synthetic".into());
    let mut synthetic = vec![false; real.len()];
    let mut shortfall_classes = Vec::new();
    for (label, (ranked, &quota)) in selections.iter().zip(&quotas).enumerate() {
        if ranked.len() < quota {
            shortfall_classes.push(label);
        }
        for c in ranked.iter().take(quota) {
            ds.items.push(Patch {
                image: c.image.clone(),
                label: Some(label),
                source_id,
            });
            synthetic.push(true);
        }
    }
    Ok(AugmentedSet {
        dataset: ds,
        synthetic,
        shortfall_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Selected,
    LabelMismatch,
    LowConfidence,
    RankCutoff,
    /// Left out by a random draw.
    NotDrawn,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Selected => "selected",
            Self::LabelMismatch => "label_mismatch",
            Self::LowConfidence => "low_confidence",
            Self::RankCutoff => "rank_cutoff",
            Self::NotDrawn => "not_drawn",
        }
    }
}

/// Writes `candidate_id,confidence,distance,selected,reason` for every
/// candidate of `target`, in pool order. `confidence_min` is `None` for a
/// random draw, where nothing is filtered.
pub fn write_selection_report(
    path: &Path,
    candidates: &[CandidateSample],
    centroids: &[ClassCentroid],
    target: usize,
    chosen: &Selection,
    confidence_min: Option<f64>,
) -> Result<()> {
    let centroid = &centroid_for(centroids, target)?.centroid;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["candidate_id", "confidence", "distance", "selected", "reason"])?;
    for c in candidates.iter().filter(|c| c.target_label == target) {
        let selected = chosen.items.iter().any(|s| s.index == c.index);
        let reason = match confidence_min {
            _ if selected => Reason::Selected,
            None => Reason::NotDrawn,
            Some(_) if c.predicted_label != target => Reason::LabelMismatch,
            Some(min) if c.confidence < min => Reason::LowConfidence,
            Some(_) => Reason::RankCutoff,
        };
        w.write_record([
            c.index.to_string(),
            format!("{:.6}", c.confidence),
            format!("{:.6}", euclidean(&c.feature, centroid)),
            selected.to_string(),
            reason.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
