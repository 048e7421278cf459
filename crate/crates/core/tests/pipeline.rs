use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use locstyle::checkpoint::Checkpoint;
use locstyle::config::RunConfig;
use locstyle::dataset::{ingest_dataset, Dataset, DatasetFormat};
use locstyle::field_model::ModelStage;
use locstyle::pipeline::{
    load_style_images, render_path, run_reconstruction, run_stylization, MetricsRecord, Reconstruction, RunDir,
    TrainingViews,
};
use locstyle::segmentation::{Provenance, RegionMap};
use locstyle::toy_scene::{style_image, ToyScene};
use locstyle::Error;

const CONFIG: &str = r#"
seed = 4
[model]
geometry_hidden = [16]
geometry_feature_dim = 3
appearance_hidden = [16]
segmentation_hidden = [16]
[model.geometry_grid]
num_levels = 4
base_resolution = 4
per_level_scale = 1.5
table_size = 1024
[model.appearance_grid]
num_levels = 4
base_resolution = 4
per_level_scale = 1.5
table_size = 1024
[reconstruction]
iterations = 100
post_transform_iterations = 10
batch_pixels = 128
samples_per_ray = 12
checkpoint_every = 50
[stylization]
iterations = 4
samples_per_ray = 12
style_long_side = 32
checkpoint_every = 2
[extractor]
kind = "random"
seed = 3
widths = [4, 8, 8]
[[styles]]
image = "style.png"
regions = "style_regions.png"
index = 0
"#;

/// Toy dataset, style files and the tiny config, shared read-only.
struct Setup {
    root: PathBuf,
    dataset: Dataset,
    config: RunConfig,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        ToyScene::default().write_dataset(&root.join("data")).unwrap();
        let (img, map) = style_image(32, 0);
        img.save_png(&root.join("style.png")).unwrap();
        map.save(&root.join("style_regions.png")).unwrap();
        std::fs::write(root.join("config.toml"), CONFIG).unwrap();
        let config = RunConfig::load(&root.join("config.toml")).unwrap();
        let dataset = ingest_dataset(&root.join("data"), DatasetFormat::CameraJson).unwrap();
        Setup { root, dataset, config }
    })
}

fn config_in(out: &Path) -> RunConfig {
    let mut c = setup().config.clone();
    c.out = out.to_path_buf();
    c
}

/// A reconstructed run, built once.
fn reconstructed() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let out = setup().root.join("reconstructed");
        run_reconstruction(&setup().dataset, &config_in(&out), &mut |_| {}).unwrap();
        out
    })
}

fn first_records(config: &RunConfig, n: usize) -> Vec<MetricsRecord> {
    let s = setup();
    let views = TrainingViews::load(&s.dataset, true).unwrap();
    let mut r = Reconstruction::new(&views, &s.dataset, config, load_style_images(config).unwrap()).unwrap();
    (0..n).map(|_| r.step().unwrap()).collect()
}

#[test]
fn reconstruction_writes_the_run_directory() {
    let dir = RunDir::new(reconstructed());
    for p in [dir.config(), dir.cameras(), dir.metrics(), dir.reconstruction_checkpoint()] {
        assert!(p.exists(), "{} missing", p.display());
    }
    assert!(!dir.reconstruction_progress().exists());
    let ck = Checkpoint::load(&dir.reconstruction_checkpoint()).unwrap();
    assert_eq!(ck.header.stage, ModelStage::Reconstructed);
    assert_eq!(ck.header.iteration, 110);
    assert_eq!(ck.header.geometry_digest, ck.model.geometry_digest().to_string());
    assert_eq!(ck.header.color_transforms.len(), 1);
    let lines = std::fs::read_to_string(dir.metrics()).unwrap();
    assert_eq!(lines.lines().count(), 110);
    let reloaded = RunConfig::load(&dir.config()).unwrap();
    assert_eq!(reloaded.reconstruction, setup().config.reconstruction);
}

#[test]
fn seeded_runs_log_identical_losses() {
    let c = config_in(Path::new("unused"));
    let a = first_records(&c, 100);
    let b = first_records(&c, 100);
    assert_eq!(a, b);
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(first_records(&other, 3), a[..3]);
}

#[test]
fn resume_continues_with_the_same_loss() {
    let s = setup();
    let c = config_in(Path::new("unused"));
    let views = TrainingViews::load(&s.dataset, true).unwrap();
    let styles = load_style_images(&c).unwrap();
    let mut straight = Reconstruction::new(&views, &s.dataset, &c, styles.clone()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    // once in the first phase, once after the colour transform is fitted
    for stop in [10, 103] {
        while straight.iteration < stop {
            straight.step().unwrap();
        }
        let path = tmp.path().join(format!("at{stop}.ckpt"));
        straight.progress_checkpoint().save(&path).unwrap();
        let mut resumed = Reconstruction::resume(&views, &c, styles.clone(), Checkpoint::load(&path).unwrap()).unwrap();
        let mut ahead = Reconstruction::resume(&views, &c, styles.clone(), straight.progress_checkpoint()).unwrap();
        let want = ahead.step().unwrap();
        assert_eq!(resumed.step().unwrap(), want, "diverged after resuming at {stop}");
    }
}

#[test]
fn stylization_needs_a_reconstructed_checkpoint() {
    let s = setup();
    let tmp = tempfile::tempdir().unwrap();
    let c = config_in(tmp.path());
    let views = TrainingViews::load(&s.dataset, true).unwrap();
    let r = Reconstruction::new(&views, &s.dataset, &c, load_style_images(&c).unwrap()).unwrap();
    let untrained = r.progress_checkpoint();
    assert!(matches!(run_stylization(untrained, &s.dataset, &c, &[], &mut |_| {}), Err(Error::State(_))));

    let dir = RunDir::new(reconstructed());
    let ck = Checkpoint::load(&dir.reconstruction_checkpoint()).unwrap();
    let stylized = run_stylization(ck, &s.dataset, &c, &[0], &mut |_| {}).unwrap();
    assert_eq!(stylized.header.stage, ModelStage::Stylized);
    let again = Checkpoint::load(&RunDir::new(tmp.path()).stylized_checkpoint()).unwrap();
    assert!(matches!(run_stylization(again, &s.dataset, &c, &[0], &mut |_| {}), Err(Error::State(_))));
}

#[test]
fn stylization_keeps_geometry_and_copies_the_matching() {
    let s = setup();
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path());
    let c = config_in(tmp.path());
    let ck = Checkpoint::load(&RunDir::new(reconstructed()).reconstruction_checkpoint()).unwrap();
    let geometry = ck.model.geometry_bytes();
    let mut seen = Vec::new();
    let out = run_stylization(ck, &s.dataset, &c, &[], &mut |p| {
        if let Some(path) = p.checkpoint {
            seen.push(Checkpoint::load(path).unwrap().model.geometry_bytes() == geometry);
        }
    })
    .unwrap();
    assert_eq!(seen, [true]);
    assert_eq!(out.model.geometry_bytes(), geometry);
    assert!(!dir.stylization_progress().exists());

    // the auto matching was written into the run directory; a rerun that
    // names that file reproduces the same result
    let saved = std::fs::read_to_string(dir.matching(0)).unwrap();
    let mut custom = c.clone();
    let copy = tmp.path().join("custom.json");
    std::fs::write(&copy, &saved).unwrap();
    custom.styles[0].matching = copy.to_string_lossy().into_owned();
    custom.out = tmp.path().join("rerun");
    let ck = Checkpoint::load(&RunDir::new(reconstructed()).reconstruction_checkpoint()).unwrap();
    run_stylization(ck, &s.dataset, &custom, &[], &mut |_| {}).unwrap();
    let copied: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(RunDir::new(&custom.out).matching(0)).unwrap()).unwrap();
    let original: serde_json::Value = serde_json::from_str(&saved).unwrap();
    assert_eq!(copied["pairs"], original["pairs"]);
}

#[test]
fn incomplete_matching_fails_before_optimizing() {
    let s = setup();
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config_in(tmp.path());
    let ck = Checkpoint::load(&RunDir::new(reconstructed()).reconstruction_checkpoint()).unwrap();
    let m = serde_json::json!({
        "version": 1, "scene_regions": ck.model.num_scene_regions(), "style_regions": 2,
        "mode": "custom", "pairs": [], "cost": null
    });
    let path = tmp.path().join("empty.json");
    std::fs::write(&path, m.to_string()).unwrap();
    c.styles[0].matching = path.to_string_lossy().into_owned();
    let mut calls = 0;
    let err = run_stylization(ck, &s.dataset, &c, &[], &mut |_| calls += 1).err().unwrap();
    assert!(matches!(err, Error::Config(ref msg) if msg.contains("has no style region")), "{err}");
    assert_eq!(calls, 0);
}

#[test]
fn render_path_is_deterministic() {
    let ck = Checkpoint::load(&RunDir::new(reconstructed()).reconstruction_checkpoint()).unwrap();
    let cams: Vec<_> = ToyScene::default().cameras().into_iter().take(2).collect();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let fa = render_path(&ck, &cams, 0, &a, 12, 4096).unwrap();
    let fb = render_path(&ck, &cams, 0, &b, 12, 1000).unwrap();
    assert_eq!(fa.len(), 2);
    for name in ["frame_0000.png", "frame_0001.png", "regions_0000.png", "regions_0001.png"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let one = render_path(&ck, &cams[..1], 0, &tmp.path().join("one"), 12, 4096).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(std::fs::read_dir(tmp.path().join("one")).unwrap().count(), 2);
    assert!(matches!(render_path(&ck, &cams, 1, &tmp.path().join("bad"), 12, 4096), Err(Error::Config(_))));
}

#[test]
fn style_region_map_must_match_its_image() {
    let s = setup();
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config_in(tmp.path());
    let wrong = tmp.path().join("wrong.png");
    RegionMap::new(16, 16, vec![0; 256], 1, Provenance::Style).unwrap().save(&wrong).unwrap();
    c.styles[0].regions = Some(wrong);
    let ck = Checkpoint::load(&RunDir::new(reconstructed()).reconstruction_checkpoint()).unwrap();
    assert!(matches!(run_stylization(ck, &s.dataset, &c, &[], &mut |_| {}), Err(Error::Config(_))));
}
