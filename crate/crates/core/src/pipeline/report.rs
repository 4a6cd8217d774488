use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{io_err, validation, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
pub const GRID_PNG: &str = "grid.png";
pub const GRID_COLUMNS: usize = 8;

/// Seed column of a report row: a concrete seed or an aggregate over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSeed {
    Seed(u64),
    Mean,
    Std,
}

impl RowSeed {
    fn render(&self) -> String {
        match self {
            Self::Seed(s) => s.to_string(),
            Self::Mean => "mean".into(),
            Self::Std => "std".into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "std" => Ok(Self::Std),
            _ => s
                .parse()
                .map(Self::Seed)
                .map_err(|_| validation(format!("bad seed column `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub configuration: String,
    /// `selective`, `random`, or empty for the baseline.
    pub mode: String,
    pub ratio: f64,
    pub seed: RowSeed,
    pub fid: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Space-separated class ids whose selection fell short of the quota.
    pub shortfall: String,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl ReportRow {
    pub fn failed(configuration: &str, mode: &str, ratio: f64, seed: u64, reason: &str) -> Self {
        Self {
            configuration: configuration.into(),
            mode: mode.into(),
            ratio,
            seed: RowSeed::Seed(seed),
            fid: None,
            accuracy: None,
            f1: None,
            sensitivity: None,
            specificity: None,
            shortfall: String::new(),
            status: format!("failed: {}", reason.replace(['\n', '\r'], " ")),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.fid, self.accuracy, self.f1, self.sensitivity, self.specificity]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    configuration: String,
    mode: String,
    ratio: String,
    seed: String,
    fid: String,
    accuracy: String,
    f1: String,
    sensitivity: String,
    specificity: String,
    shortfall: String,
    status: String,
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| validation(format!("bad number `{s}` in report")))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

impl ExperimentReport {
    /// Per-seed rows followed by mean and sample-std rows for every
    /// configuration with at least one successful seed.
    pub fn from_seed_rows(rows: Vec<ReportRow>) -> Self {
        let mut order: Vec<(String, String, f64)> = Vec::new();
        for r in &rows {
            if !order.iter().any(|o| o.0 == r.configuration) {
                order.push((r.configuration.clone(), r.mode.clone(), r.ratio));
            }
        }
        let mut out = rows.clone();
        for (label, mode, ratio) in order {
            let ok: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.configuration == label && r.is_ok() && matches!(r.seed, RowSeed::Seed(_)))
                .collect();
            if ok.is_empty() {
                continue;
            }
            let mut mean = [None; 5];
            let mut std = [None; 5];
            for k in 0..5 {
                let vals: Vec<f64> = ok.iter().filter_map(|r| r.values()[k]).collect();
                (mean[k], std[k]) = mean_std(&vals);
            }
            let mut shortfall: Vec<&str> = ok.iter().flat_map(|r| r.shortfall.split_whitespace()).collect();
            shortfall.sort_unstable();
            shortfall.dedup();
            for (seed, v) in [(RowSeed::Mean, mean), (RowSeed::Std, std)] {
                out.push(ReportRow {
                    configuration: label.clone(),
                    mode: mode.clone(),
                    ratio,
                    seed,
                    fid: v[0],
                    accuracy: v[1],
                    f1: v[2],
                    sensitivity: v[3],
                    specificity: v[4],
                    shortfall: shortfall.join(" "),
                    status: "ok".into(),
                });
            }
        }
        Self { rows: out }
    }

    pub fn find(&self, configuration: &str, seed: RowSeed) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.configuration == configuration && r.seed == seed)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                configuration: r.configuration.clone(),
                mode: r.mode.clone(),
                ratio: format!("{:.4}", r.ratio),
                seed: r.seed.render(),
                fid: fmt(r.fid),
                accuracy: fmt(r.accuracy),
                f1: fmt(r.f1),
                sensitivity: fmt(r.sensitivity),
                specificity: fmt(r.specificity),
                shortfall: r.shortfall.clone(),
                status: r.status.clone(),
            })?;
        }
        w.into_inner().map_err(|e| validation(format!("report buffer: {e}")))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(bytes);
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<CsvRow>() {
            let r = rec?;
            rows.push(ReportRow {
                configuration: r.configuration,
                mode: r.mode,
                ratio: r
                    .ratio
                    .parse()
                    .map_err(|_| validation(format!("bad ratio `{}`", r.ratio)))?,
                seed: RowSeed::parse(&r.seed)?,
                fid: parse_opt(&r.fid)?,
                accuracy: parse_opt(&r.accuracy)?,
                f1: parse_opt(&r.f1)?,
                sensitivity: parse_opt(&r.sensitivity)?,
                specificity: parse_opt(&r.specificity)?,
                shortfall: r.shortfall,
                status: r.status,
            });
        }
        Ok(Self { rows })
    }

    /// Aggregate rows as `mean ± std`, columns in the order FID, Accuracy,
    /// F1, Sensitivity, Specificity.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Configuration | FID↓ | Accuracy↑ | F1↑ | Sensitivity↑ | Specificity↑ |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        let means = self.rows.iter().filter(|r| r.seed == RowSeed::Mean);
        for m in means {
            let std = self.find(&m.configuration, RowSeed::Std);
            let cell = |k: usize| match (m.values()[k], std.and_then(|s| s.values()[k])) {
                (Some(v), Some(sd)) => format!("{v:.4} ± {sd:.4}"),
                (Some(v), None) => format!("{v:.4}"),
                _ => "–".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                m.configuration,
                cell(0),
                cell(1),
                cell(2),
                cell(3),
                cell(4)
            );
        }
        for r in self.rows.iter().filter(|r| !r.is_ok()) {
            let _ = writeln!(s, "\nseed {} of {}: {}", r.seed.render(), r.configuration, r.status);
        }
        s
    }
}

/// Lays out `rows` (one per class) of up to [`GRID_COLUMNS`] images each,
/// padding missing cells with black.
pub fn render_grid(rows: &[Vec<Image>], patch: usize, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(validation("image grid needs at least one row"));
    }
    let mut canvas = image::RgbImage::new((GRID_COLUMNS * patch) as u32, (rows.len() * patch) as u32);
    for (r, imgs) in rows.iter().enumerate() {
        for (c, img) in imgs.iter().take(GRID_COLUMNS).enumerate() {
            if img.height != patch || img.width != patch {
                return Err(validation("grid images must match the patch size"));
            }
            image::imageops::replace(&mut canvas, &img.to_rgb8(), (c * patch) as i64, (r * patch) as i64);
        }
    }
    canvas.save(path)?;
    Ok(())
}

/// Writes the CSV and Markdown renderings into `dir`.
pub fn render_report(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if report.rows.is_empty() {
        return Err(validation("cannot render an empty report"));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join(REPORT_CSV);
    std::fs::write(&csv_path, report.to_csv()?).map_err(io_err(&csv_path))?;
    let md_path = dir.join(REPORT_MD);
    std::fs::write(&md_path, report.to_markdown()).map_err(io_err(&md_path))?;
    Ok((csv_path, md_path))
}
