use std::fs;
use std::path::Path;

use histodiff::data::BenchmarkSpec;
use histodiff::nn::{DenoiserConfig, LaeConfig};
use histodiff::pipeline::{BenchmarkSource, ExperimentConfig, Pipeline, StageName, GRID_PNG, REPORT_CSV, REPORT_MD};
use histodiff::sampling::{SamplerConfig, SamplerMethod};
use histodiff::Error;

/// A configuration small enough to run every stage in seconds.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        benchmark: BenchmarkSource::Generated(BenchmarkSpec {
            num_sources: 2,
            classes_per_source: 2,
            patches_per_class: 8,
            image_size: 16,
            seed: 3,
        }),
        output_dir: out.to_path_buf(),
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    cfg.labeled.fraction = 0.5;
    cfg.models.schedule.timesteps = 20;
    cfg.models.lae = LaeConfig {
        base_channels: 4,
        latent_channels: 3,
        downsample_factor: 4,
    };
    cfg.models.denoiser = DenoiserConfig {
        latent_channels: 3,
        base_channels: 4,
        time_dim: 8,
        timesteps: 20,
    };
    cfg.models.latent_clf.width = 4;
    cfg.models.latent_clf.feature_dim = 8;
    cfg.models.aux_clf = [4, 4, 8];
    cfg.models.downstream_clf = [4, 4, 8];
    cfg.models.fid_clf = [4, 4, 8];
    let st = &mut cfg.stages;
    for c in [&mut st.lae, &mut st.dm, &mut st.aux_clf, &mut st.latent_clf, &mut st.decoder_ft, &mut st.downstream, &mut st.fid_clf] {
        c.epochs = 1;
        c.batch_size = 8;
        c.learning_rate = 1e-3;
    }
    cfg.sampler = SamplerConfig {
        method: SamplerMethod::Ddim,
        num_steps: 3,
        guidance_scale: 1.0,
        seed: 0,
        batch: 8,
    };
    cfg.selection.ratios = vec![0.5, 1.0];
    cfg.selection.random_ratios = vec![0.5];
    cfg.validate().unwrap();
    cfg
}

#[test]
fn stage_needs_its_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path()), false).unwrap();
    let err = p.run(StageName::Dm).unwrap_err();
    assert!(matches!(err, Error::MissingStage { .. }), "{err}");
    assert_eq!(err.to_string(), "stage `dm` requires stage lae");
    let err = p.run(StageName::Evaluate).unwrap_err();
    assert!(err.to_string().contains("requires stage"));
}

#[test]
fn current_stage_is_skipped_and_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let p = Pipeline::new(cfg.clone(), false).unwrap();
    let lae = p.run_stage(StageName::Lae, None).unwrap();
    let meta = fs::read_to_string(lae.join("meta.json")).unwrap();
    let log = fs::read_to_string(lae.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,rec,kl\n"), "{log}");
    // a marker survives a skipped re-run
    fs::write(lae.join("marker"), "x").unwrap();
    p.run_stage(StageName::Lae, None).unwrap();
    assert!(lae.join("marker").exists());
    assert_eq!(fs::read_to_string(lae.join("meta.json")).unwrap(), meta);
    p.run_stage(StageName::Dm, None).unwrap();

    let mut changed = cfg.clone();
    changed.stages.lae.epochs = 2;
    let q = Pipeline::new(changed.clone(), false).unwrap();
    let err = q.run_stage(StageName::Lae, None).unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }), "{err}");
    let err = q.run_stage(StageName::Dm, None).unwrap_err();
    assert!(err.to_string().contains("out of date"), "{err}");

    let forced = Pipeline::new(changed, true).unwrap();
    forced.run_stage(StageName::Lae, None).unwrap();
    assert!(!lae.join("marker").exists());
    assert_eq!(fs::read_to_string(lae.join("train_log.csv")).unwrap().lines().count(), 3);
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn find_file(dir: &Path, name: &str) -> Option<std::path::PathBuf> {
    for e in fs::read_dir(dir).ok()?.flatten() {
        let p = e.path();
        if p.is_dir() {
            if let Some(f) = find_file(&p, name) {
                return Some(f);
            }
        } else if p.file_name().is_some_and(|n| n == name) {
            return Some(p);
        }
    }
    None
}

#[test]
fn full_run_writes_every_artifact_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("a"));
    let report = Pipeline::new(cfg.clone(), false).unwrap().run_experiment().unwrap();
    assert!(report.rows.iter().all(|r| r.is_ok()), "{:?}", report.rows);
    let out = &cfg.output_dir;
    assert_eq!(header(&out.join("benchmark/pool.csv")), "path,label,source");
    assert_eq!(header(&find_file(out, "samples.csv").unwrap()), "index,target_label,seed,confidence");
    assert_eq!(
        header(&find_file(&out.join("arms"), "class0.csv").unwrap()),
        "candidate_id,confidence,distance,selected,reason"
    );
    let report_dir = Pipeline::new(cfg.clone(), false).unwrap().report_dir();
    let md = fs::read_to_string(report_dir.join(REPORT_MD)).unwrap();
    assert!(md.contains("FID↓") && md.contains("Specificity↑"), "{md}");
    let grid = image::open(report_dir.join(GRID_PNG)).unwrap();
    assert_eq!(grid.width() % 8, 0);
    let first = fs::read(report_dir.join(REPORT_CSV)).unwrap();

    // rerunning in place skips every stage and reproduces the report
    Pipeline::new(cfg.clone(), false).unwrap().run_experiment().unwrap();
    assert_eq!(fs::read(report_dir.join(REPORT_CSV)).unwrap(), first);

    // a fresh directory recomputes everything and yields the same bytes
    let mut again = cfg.clone();
    again.output_dir = dir.path().join("b");
    let p = Pipeline::new(again, false).unwrap();
    p.run_experiment().unwrap();
    assert_eq!(fs::read(p.report_dir().join(REPORT_CSV)).unwrap(), first);
}
