//! Patch datasets: manifest ingestion, even per-class subsampling and the
//! procedural multi-source benchmark.
//!
//! Pixels are stored channel-major (`3 × H × W`) in `[0, 1]`. The single
//! conversion to the model domain `[-1, 1]` happens in [`PatchDataset::batch`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, validation, Error, Result};
use crate::rng;

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "source"];

/// An RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(validation(format!(
                "image buffer has {} values, expected 3×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Converts a `[3, H, W]` tensor in model space `[-1, 1]` back to an image.
    pub fn from_model_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(validation(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0f32; 3 * plane];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + i] = p.0[c] as f32 / 255.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub label: Option<usize>,
    pub source_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub items: Vec<Patch>,
    /// Class names indexed by dense label id. Empty for unlabeled data.
    pub class_names: Vec<String>,
    /// Source names indexed by source id.
    pub source_names: Vec<String>,
}

impl PatchDataset {
    pub fn new(items: Vec<Patch>, class_names: Vec<String>, source_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            items,
            class_names,
            source_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.items.first() else {
            return Ok(());
        };
        let (h, w) = (first.image.height, first.image.width);
        for (i, p) in self.items.iter().enumerate() {
            if p.image.height != h || p.image.width != w {
                return Err(validation(format!(
                    "item {i} is {}×{}, dataset images are {h}×{w}",
                    p.image.height, p.image.width
                )));
            }
            if let Some(l) = p.label {
                if l >= self.class_names.len() {
                    return Err(validation(format!(
                        "item {i} has label {l}, only {} classes",
                        self.class_names.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.items.first().map(|p| (p.image.height, p.image.width))
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.items.iter().all(|p| p.label.is_some())
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, p)| p.label.ok_or_else(|| validation(format!("item {i} is unlabeled"))))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for l in self.items.iter().filter_map(|p| p.label) {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of items per class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, p) in self.items.iter().enumerate() {
            if let Some(l) = p.label {
                by[l].push(i);
            }
        }
        by
    }

    /// Stacks the selected images into an `[n, 3, H, W]` tensor in `[-1, 1]`.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let images: Vec<&Image> = indices.iter().map(|&i| &self.items[i].image).collect();
        images_to_tensor(&images, dtype, device)
    }

    pub fn label_tensor(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.items[i]
                    .label
                    .map(|l| l as u32)
                    .ok_or_else(|| validation(format!("item {i} is unlabeled")))
            })
            .collect::<Result<Vec<u32>>>()?;
        Ok(Tensor::from_vec(labels, indices.len(), device)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            source_names: self.source_names.clone(),
        }
    }

    /// Concatenates two datasets sharing image size and class names.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if !self.is_empty() && !other.is_empty() && self.class_names != other.class_names {
            return Err(validation("cannot concatenate datasets with different classes"));
        }
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        let class_names = if self.class_names.is_empty() {
            other.class_names.clone()
        } else {
            self.class_names.clone()
        };
        let mut source_names = self.source_names.clone();
        for (i, s) in other.source_names.iter().enumerate() {
            if i >= source_names.len() {
                source_names.push(s.clone());
            }
        }
        Self::new(items, class_names, source_names)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            items: self
                .items
                .iter()
                .map(|p| Patch {
                    label: None,
                    ..p.clone()
                })
                .collect(),
            class_names: Vec::new(),
            source_names: self.source_names.clone(),
        }
    }
}

pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(validation("cannot batch zero images"));
    };
    let (h, w) = (first.height, first.width);
    let mut buf = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(validation("images in a batch must share a size"));
        }
        buf.extend(img.data.iter().map(|&v| v * 2.0 - 1.0));
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    path: String,
    label: String,
    source: String,
}

/// Reads a `path,label,source` manifest. Label ids follow sorted label-name
/// order, source ids sorted source-name order.
pub fn load_manifest(manifest_path: &Path, root: &Path) -> Result<PatchDataset> {
    let file = std::fs::File::open(manifest_path).map_err(io_err(manifest_path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(validation(format!(
            "manifest header must be `path,label,source`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;

    let label_names: Vec<String> = rows
        .iter()
        .filter(|r| !r.label.is_empty())
        .map(|r| r.label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let source_names: Vec<String> = rows
        .iter()
        .map(|r| r.source.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let label_ids: BTreeMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let source_ids: BTreeMap<&str, usize> = source_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut items = Vec::with_capacity(rows.len());
    for (row, r) in rows.iter().enumerate() {
        let path = root.join(&r.path);
        let img = image::open(&path).map_err(|e| Error::ManifestRow {
            row: row + 1,
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        items.push(Patch {
            image: Image::from_rgb8(&img.to_rgb8()),
            label: (!r.label.is_empty()).then(|| label_ids[r.label.as_str()]),
            source_id: source_ids[r.source.as_str()] as u32,
        });
    }
    PatchDataset::new(items, label_names, source_names)
}

/// Writes every image as PNG under `root/<subdir>/` and a manifest at
/// `root/<subdir>.csv` whose paths are relative to `root`.
pub fn write_dataset(ds: &PatchDataset, root: &Path, subdir: &str) -> Result<PathBuf> {
    let dir = root.join(subdir);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = root.join(format!("{subdir}.csv"));
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(MANIFEST_HEADER)?;
    for (i, p) in ds.items.iter().enumerate() {
        let rel = format!("{subdir}/{i:06}.png");
        p.image.save_png(&root.join(&rel))?;
        let label = p
            .label
            .map(|l| ds.class_names[l].clone())
            .unwrap_or_default();
        let source = ds
            .source_names
            .get(p.source_id as usize)
            .cloned()
            .unwrap_or_else(|| format!("source{}", p.source_id));
        w.write_record([rel.as_str(), label.as_str(), source.as_str()])?;
    }
    w.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

/// Draws `floor(fraction · n_c)` items from every class without replacement.
///
/// Each class uses its own stream seeded by `(seed, class)`; the selected items
/// keep their original dataset order.
pub fn subsample_evenly(ds: &PatchDataset, fraction: f64, seed: u64) -> Result<PatchDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(validation(format!("fraction {fraction} outside (0, 1]")));
    }
    if !ds.is_fully_labeled() {
        return Err(validation("subsample_evenly needs a fully labeled dataset"));
    }
    let mut chosen = Vec::new();
    for (class, members) in ds.indices_by_class().iter().enumerate() {
        // the epsilon absorbs binary rounding such as 0.29 * 100 = 28.999...
        let take = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if take == 0 {
            return Err(validation(format!(
                "class {} ({} items) would vanish at fraction {fraction}",
                ds.class_names[class],
                members.len()
            )));
        }
        let mut rng = rng::stream(seed, &[class as u64]);
        let picked = index::sample(&mut rng, members.len(), take);
        chosen.extend(picked.into_iter().map(|k| members[k]));
    }
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}

/// Parameters of the procedural multi-source benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub num_sources: usize,
    pub classes_per_source: usize,
    pub patches_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_sources: 3,
            classes_per_source: 6,
            patches_per_class: 200,
            image_size: 32,
            seed: 7,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        if self.num_sources < 1 {
            return Err(validation("benchmark needs at least one source"));
        }
        if self.classes_per_source < 1 || self.patches_per_class < 1 {
            return Err(validation("benchmark needs at least one class and one patch per class"));
        }
        if self.image_size == 0 || self.image_size % downsample_factor != 0 {
            return Err(validation(format!(
                "image size {} is not a multiple of the downsampling factor {downsample_factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn test_patches_per_class(&self) -> usize {
        (self.patches_per_class / 2).max(1)
    }
}

pub struct Benchmark {
    pub pretrain_pool: PatchDataset,
    pub labeled_set: PatchDataset,
    pub test_set: PatchDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Stripes,
    Checker,
    Dots,
    /// Reserved for the held-out source.
    Waves,
}

const PRETRAIN_FAMILIES: [Family; 3] = [Family::Stripes, Family::Checker, Family::Dots];

/// (background, foreground) colors.
const PRETRAIN_PALETTES: [([f64; 3], [f64; 3]); 4] = [
    ([0.90, 0.85, 0.45], [0.15, 0.25, 0.60]),
    ([0.55, 0.80, 0.50], [0.45, 0.25, 0.10]),
    ([0.35, 0.70, 0.75], [0.95, 0.60, 0.20]),
    ([0.80, 0.80, 0.80], [0.20, 0.20, 0.20]),
];
const HELD_OUT_PALETTE: ([f64; 3], [f64; 3]) = ([0.93, 0.72, 0.85], [0.42, 0.16, 0.52]);

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    orientation: f64,
    cycles: f64,
}

fn class_style(class: usize, num_classes: usize) -> ClassStyle {
    // orientations spread over half a turn, two frequency bands interleaved
    let n_orient = num_classes.div_ceil(2).max(1);
    ClassStyle {
        orientation: (class % n_orient) as f64 * PI / n_orient as f64,
        cycles: if (class / n_orient) % 2 == 0 { 2.5 } else { 4.5 },
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn render_patch<R: Rng>(
    rng: &mut R,
    family: Family,
    palette: ([f64; 3], [f64; 3]),
    style: ClassStyle,
    size: usize,
) -> Image {
    let theta = style.orientation + rng.random_range(-0.35..0.35);
    let cycles = style.cycles * rng.random_range(0.75..1.3);
    let phase_u = rng.random_range(0.0..2.0 * PI);
    let phase_v = rng.random_range(0.0..2.0 * PI);
    let wobble = rng.random_range(0.5..2.2);
    let shade = rng.random_range(-0.1..0.1);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let contrast = rng.random_range(0.25..1.0);
    let grain = rng.random_range(0.03..0.2);
    // slow illumination ramp across the patch
    let ramp_angle = rng.random_range(0.0..2.0 * PI);
    let ramp = rng.random_range(0.0..0.25) / size as f64;
    let (bg, fg) = palette;
    let (s, c) = theta.sin_cos();
    let omega = 2.0 * PI * cycles / size as f64;

    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 - size as f64 / 2.0, y as f64 - size as f64 / 2.0);
            let u = c * xf + s * yf;
            let v = -s * xf + c * yf;
            let pattern = match family {
                Family::Stripes => 0.5 + 0.5 * (omega * u + phase_u).sin(),
                Family::Checker => {
                    let p = (omega * u + phase_u).sin() * (omega * v + phase_v).sin();
                    smoothstep(0.5 + 2.0 * p)
                }
                Family::Dots => {
                    let p = (omega * u + phase_u).cos() + (omega * v + phase_v).cos();
                    smoothstep((p - 0.6) * 1.5)
                }
                Family::Waves => {
                    let bend = wobble * (2.0 * PI * 1.5 * v / size as f64 + phase_v).sin();
                    smoothstep(0.5 + 0.9 * (omega * u + phase_u + bend).sin())
                }
            };
            let noise = rng.sample::<f64, _>(rand_distr::StandardNormal) * grain;
            let light = shade + ramp * (ramp_angle.cos() * xf + ramp_angle.sin() * yf);
            let pattern = 0.5 + contrast * (pattern - 0.5);
            for ch in 0..3 {
                let val = bg[ch] + (fg[ch] - bg[ch]) * pattern + light + tint[ch] + noise;
                data[ch * plane + y * size + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}

const SPLIT_POOL: u64 = 0;
const SPLIT_LABELED: u64 = 1;
const SPLIT_TEST: u64 = 2;

/// Generates the unlabeled multi-source pool and the held-out labeled/test
/// splits. The held-out source (id `num_sources`) uses a texture family and
/// palette that no pre-training source uses.
pub fn generate_benchmark(spec: &BenchmarkSpec, downsample_factor: usize) -> Result<Benchmark> {
    spec.validate(downsample_factor)?;
    let k = spec.classes_per_source;
    let size = spec.image_size;
    let mut source_names: Vec<String> = (0..spec.num_sources).map(|s| format!("source{s}")).collect();
    source_names.push("heldout".to_string());
    let class_names: Vec<String> = (0..k).map(|c| format!("class{c}")).collect();

    let make = |source: usize, split: u64, class: usize, i: usize| {
        let (family, palette) = if source == spec.num_sources {
            (Family::Waves, HELD_OUT_PALETTE)
        } else {
            (
                PRETRAIN_FAMILIES[source % PRETRAIN_FAMILIES.len()],
                PRETRAIN_PALETTES[source % PRETRAIN_PALETTES.len()],
            )
        };
        let mut rng = rng::stream(spec.seed, &[source as u64, split, class as u64, i as u64]);
        render_patch(&mut rng, family, palette, class_style(class, k), size)
    };

    let mut pool = Vec::with_capacity(spec.num_sources * k * spec.patches_per_class);
    for source in 0..spec.num_sources {
        for class in 0..k {
            for i in 0..spec.patches_per_class {
                pool.push(Patch {
                    image: make(source, SPLIT_POOL, class, i),
                    label: None,
                    source_id: source as u32,
                });
            }
        }
    }
    let held_out = |split: u64, per_class: usize| {
        let mut items = Vec::with_capacity(k * per_class);
        for class in 0..k {
            for i in 0..per_class {
                items.push(Patch {
                    image: make(spec.num_sources, split, class, i),
                    label: Some(class),
                    source_id: spec.num_sources as u32,
                });
            }
        }
        items
    };

    Ok(Benchmark {
        pretrain_pool: PatchDataset::new(pool, Vec::new(), source_names.clone())?,
        labeled_set: PatchDataset::new(
            held_out(SPLIT_LABELED, spec.patches_per_class),
            class_names.clone(),
            source_names.clone(),
        )?,
        test_set: PatchDataset::new(
            held_out(SPLIT_TEST, spec.test_patches_per_class()),
            class_names,
            source_names,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(counts: &[usize]) -> PatchDataset {
        let mut items = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                items.push(Patch {
                    image: Image::filled(4, 4, [i as f32 / n as f32, c as f32 / 10.0, 0.0]),
                    label: Some(c),
                    source_id: 0,
                });
            }
        }
        let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
        PatchDataset::new(items, names, vec!["s".into()]).unwrap()
    }

    #[test]
    fn subsample_takes_floor_per_class() {
        let ds = toy(&[1000; 9]);
        let sub = subsample_evenly(&ds, 0.05, 3).unwrap();
        assert_eq!(sub.len(), 450);
        assert_eq!(sub.class_counts(), vec![50; 9]);
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let ds = toy(&[5, 7]);
        assert_eq!(subsample_evenly(&ds, 1.0, 11).unwrap(), ds);
    }

    #[test]
    fn subsample_mirrors_five_percent_protocol() {
        // 100,000 items over 9 classes cannot be exactly balanced, so the
        // balanced analogue is checked: equal classes, 5% each.
        let per_class = 100_000 / 10;
        let ds = toy(&[per_class; 10]);
        let sub = subsample_evenly(&ds, 0.05, 0).unwrap();
        assert_eq!(sub.len(), 5_000);
    }

    #[test]
    fn subsample_rejects_bad_fraction_and_vanishing_class() {
        let ds = toy(&[10, 3]);
        assert!(subsample_evenly(&ds, 0.0, 0).is_err());
        assert!(subsample_evenly(&ds, 1.5, 0).is_err());
        assert!(subsample_evenly(&ds, 0.2, 0).is_err());
    }

    #[test]
    fn subsample_is_deterministic_and_seed_sensitive() {
        let ds = toy(&[40, 40]);
        let a = subsample_evenly(&ds, 0.25, 1).unwrap();
        assert_eq!(a, subsample_evenly(&ds, 0.25, 1).unwrap());
        assert_ne!(a, subsample_evenly(&ds, 0.25, 2).unwrap());
    }

    #[test]
    fn subsample_handles_binary_rounding() {
        let ds = toy(&[100]);
        assert_eq!(subsample_evenly(&ds, 0.29, 0).unwrap().len(), 29);
    }

    #[test]
    fn benchmark_is_deterministic_and_disjoint() {
        let spec = BenchmarkSpec {
            num_sources: 3,
            classes_per_source: 6,
            patches_per_class: 12,
            image_size: 16,
            seed: 7,
        };
        let a = generate_benchmark(&spec, 4).unwrap();
        let b = generate_benchmark(&spec, 4).unwrap();
        assert_eq!(a.pretrain_pool, b.pretrain_pool);
        assert_eq!(a.labeled_set, b.labeled_set);
        assert_eq!(a.test_set, b.test_set);

        assert_eq!(a.pretrain_pool.len(), 3 * 6 * 12);
        assert_eq!(a.labeled_set.class_counts(), vec![12; 6]);
        assert_eq!(a.test_set.class_counts(), vec![6; 6]);
        assert!(a.pretrain_pool.items.iter().all(|p| p.label.is_none()));

        let held_out = spec.num_sources as u32;
        assert!(a.pretrain_pool.items.iter().all(|p| p.source_id != held_out));
        assert!(a.labeled_set.items.iter().all(|p| p.source_id == held_out));
        for t in &a.test_set.items {
            assert!(a.labeled_set.items.iter().all(|l| l.image != t.image));
        }
    }

    #[test]
    fn benchmark_rejects_indivisible_size() {
        let spec = BenchmarkSpec {
            image_size: 30,
            ..Default::default()
        };
        assert!(matches!(generate_benchmark(&spec, 4), Err(Error::Validation(_))));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let spec = BenchmarkSpec {
            patches_per_class: 2,
            image_size: 8,
            ..Default::default()
        };
        let b = generate_benchmark(&spec, 4).unwrap();
        for p in b.pretrain_pool.items.iter().chain(&b.labeled_set.items) {
            assert!(p.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_rejects_mixed_sizes() {
        let items = vec![
            Patch {
                image: Image::filled(4, 4, [0.0; 3]),
                label: None,
                source_id: 0,
            },
            Patch {
                image: Image::filled(8, 8, [0.0; 3]),
                label: None,
                source_id: 0,
            },
        ];
        assert!(PatchDataset::new(items, vec![], vec![]).is_err());
    }

    #[test]
    fn batch_maps_to_model_range() {
        let ds = toy(&[2]);
        let t = ds.batch(&[0, 1], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 4, 4]);
        let back = Image::from_model_tensor(&t.get(1).unwrap()).unwrap();
        for (a, b) in back.data.iter().zip(&ds.items[1].image.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
