use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use locstyle::config::RunConfig;
use locstyle::dataset::{ingest_dataset, DatasetFormat};
use locstyle::pipeline::run_reconstruction;
use locstyle::segmentation::{Provenance, RegionMap};
use locstyle::toy_scene::{style_image, ToyScene};
use locstyle_server::{router, App, JobCreated, MatchingResponse, RegionCard};

const CONFIG: &str = r#"
seed = 1
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
iterations = 40
post_transform_iterations = 5
batch_pixels = 256
samples_per_ray = 16
checkpoint_every = 0
[stylization]
samples_per_ray = 16
style_long_side = 32
checkpoint_every = 0
[extractor]
kind = "random"
seed = 3
widths = [4, 8, 8]
[[styles]]
image = "style.png"
regions = "style_regions.png"
index = 0
"#;

/// A reconstructed run built once; tests work on private copies.
fn template() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        ToyScene::default().write_dataset(&root.join("data")).unwrap();
        let (img, _) = style_image(32, 0);
        img.save_png(&root.join("style.png")).unwrap();
        // three vertical stripes
        let labels = (0..32 * 32).map(|i| ((i % 32) / 11) as i32).collect();
        RegionMap::new(32, 32, labels, 3, Provenance::Style)
            .unwrap()
            .save(&root.join("style_regions.png"))
            .unwrap();
        std::fs::write(root.join("config.toml"), CONFIG).unwrap();
        let mut config = RunConfig::load(&root.join("config.toml")).unwrap();
        config.out = root.join("run");
        let ds = ingest_dataset(&root.join("data"), DatasetFormat::CameraJson).unwrap();
        run_reconstruction(&ds, &config, &mut |_| {}).unwrap();
        root.join("run")
    })
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    app: Arc<App>,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    copy_dir(template(), &dir);
    let app = App::open(&dir).unwrap();
    Fixture { _tmp: tmp, dir, app }
}

impl Fixture {
    fn router(&self) -> Router {
        router(self.app.clone())
    }

    async fn call(&self, method: Method, uri: &str, body: Option<String>, if_match: Option<&str>) -> (StatusCode, HeaderMap, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        if let Some(tag) = if_match {
            req = req.header("if-match", tag);
        }
        let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
        let res = self.router().oneshot(req).await.unwrap();
        let (parts, body) = res.into_parts();
        (parts.status, parts.headers, body.collect().await.unwrap().to_bytes().to_vec())
    }

    async fn get_json<T: serde::de::DeserializeOwned>(&self, uri: &str) -> T {
        let (status, _, body) = self.call(Method::GET, uri, None, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
        serde_json::from_slice(&body).unwrap()
    }

    fn journal(&self) -> Vec<Value> {
        std::fs::read_to_string(self.dir.join("journal.jsonl"))
            .unwrap_or_default()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn error_of(body: &[u8]) -> String {
    serde_json::from_slice::<Value>(body).unwrap()["error"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn region_listings() {
    let f = fixture();
    let scene: Vec<RegionCard> = f.get_json("/api/scene/regions").await;
    assert!(!scene.is_empty());
    for c in &scene {
        assert!(c.area > 0.0 && c.area <= 1.0);
        assert!(c.centroid.iter().all(|v| (0.0..=1.0).contains(v)));
        let (status, headers, png) = f.call(Method::GET, &c.overlay_png_url, None, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(headers["content-type"], "image/png");
        assert!(png.starts_with(b"\x89PNG"));
    }
    let style: Vec<RegionCard> = f.get_json("/api/style/0/regions").await;
    assert_eq!(style.iter().map(|c| c.id).collect::<Vec<_>>(), [0, 1, 2]);
    assert!((style.iter().map(|c| c.area).sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(style[0].centroid[0] < style[1].centroid[0] && style[1].centroid[0] < style[2].centroid[0]);
    let (status, _, _) = f.call(Method::GET, &style[2].overlay_png_url, None, None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _, _) = f.call(Method::GET, "/api/style/4/regions", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn auto_matching_is_served_with_cost() {
    let f = fixture();
    let (status, headers, body) = f.call(Method::GET, "/api/style/0/matching", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let m: MatchingResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(headers["etag"].to_str().unwrap(), m.version);
    assert!(m.matching.cost.is_some());
    let cost = m.cost.expect("cost table");
    assert_eq!(cost.style_regions, 3);
    assert_eq!(cost.rows.len(), cost.scene_labels.len());
    for l in &cost.scene_labels {
        assert!(m.matching.pairs.iter().any(|p| p.scene == *l as i64));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn matching_round_trip() {
    let f = fixture();
    let before: MatchingResponse = f.get_json("/api/style/0/matching").await;
    let mut edited = before.matching.clone();
    edited.mode = locstyle::region_matching::MatchingMode::Custom;
    edited.cost = None;
    for p in &mut edited.pairs {
        p.style = (p.style + 1) % 3;
    }
    let text = serde_json::to_string(&edited).unwrap();
    let (status, headers, body) = f.call(Method::PUT, "/api/style/0/matching", Some(text), Some(&before.version)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let put: MatchingResponse = serde_json::from_slice(&body).unwrap();
    assert_ne!(put.version, before.version);
    assert_eq!(headers["etag"].to_str().unwrap(), put.version);

    let after: MatchingResponse = f.get_json("/api/style/0/matching").await;
    assert_eq!(after, put);
    assert_eq!(
        serde_json::to_string(&after.matching.pairs).unwrap(),
        serde_json::to_string(&edited.pairs).unwrap()
    );
    // a fresh service on the same directory sees the saved pairs
    let reopened = App::open(&f.dir).unwrap();
    let again = Fixture {
        _tmp: tempfile::tempdir().unwrap(),
        dir: f.dir.clone(),
        app: reopened,
    };
    let reloaded: MatchingResponse = again.get_json("/api/style/0/matching").await;
    assert_eq!(reloaded.matching.pairs, edited.pairs);
    let journal = f.journal();
    assert_eq!(journal.last().unwrap()["action"], "put_matching");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rejected_edits_change_nothing() {
    let f = fixture();
    let before: MatchingResponse = f.get_json("/api/style/0/matching").await;
    let on_disk = std::fs::read(f.dir.join("styles/s0/matching.json")).unwrap();
    let scene = before.matching.scene_regions;

    let mut out_of_range = before.matching.clone();
    out_of_range.pairs[0].style = 99;
    let first = out_of_range.pairs[0].scene;
    let (status, _, body) = f
        .call(Method::PUT, "/api/style/0/matching", Some(serde_json::to_string(&out_of_range).unwrap()), None)
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(error_of(&body).contains(&format!("{{scene: {first}, style: 99}}")), "{}", error_of(&body));

    // injective file with two scene regions on one style region
    let dup = serde_json::json!({
        "version": 1, "scene_regions": scene, "style_regions": 3, "mode": "injective",
        "pairs": [{"scene": 0, "style": 1}, {"scene": 1, "style": 1}], "cost": null
    });
    let (status, _, body) = f.call(Method::PUT, "/api/style/0/matching", Some(dup.to_string()), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(error_of(&body).contains("{scene: 1, style: 1}"), "{}", error_of(&body));

    let (status, _, _) = f.call(Method::PUT, "/api/style/0/matching", Some("{not json".into()), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // leaving a present scene label unmatched
    let mut partial = before.matching.clone();
    partial.pairs.retain(|p| p.scene != before.cost.as_ref().unwrap().scene_labels[0] as i64);
    let (status, _, body) = f
        .call(Method::PUT, "/api/style/0/matching", Some(serde_json::to_string(&partial).unwrap()), None)
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(error_of(&body).contains("has no style region"));

    let (status, _, _) = f
        .call(Method::PUT, "/api/style/0/matching", Some(serde_json::to_string(&before.matching).unwrap()), Some("\"stale\""))
        .await;
    assert_eq!(status, StatusCode::PRECONDITION_FAILED);

    let after: MatchingResponse = f.get_json("/api/style/0/matching").await;
    assert_eq!(after, before);
    assert_eq!(std::fs::read(f.dir.join("styles/s0/matching.json")).unwrap(), on_disk);
    assert!(f.journal().iter().all(|l| l["action"] != "put_matching"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stylize_job_lifecycle() {
    let f = fixture();
    let body = serde_json::json!({ "style_index": 0, "iterations": 30 }).to_string();
    let (status, _, created) = f.call(Method::POST, "/api/jobs/stylize", Some(body.clone()), None).await;
    assert_eq!(status, StatusCode::OK);
    let JobCreated { job_id } = serde_json::from_slice(&created).unwrap();

    // one job at a time, and matchings stay locked while it runs
    let (status, _, _) = f.call(Method::POST, "/api/jobs/stylize", Some(body), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let current: MatchingResponse = f.get_json("/api/style/0/matching").await;
    let (status, _, _) = f
        .call(Method::PUT, "/api/style/0/matching", Some(serde_json::to_string(&current.matching).unwrap()), None)
        .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let start = Instant::now();
    let job = loop {
        let job: Value = f.get_json(&format!("/api/jobs/{job_id}")).await;
        let p = job["progress"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        match job["state"].as_str().unwrap() {
            "done" => break job,
            "failed" => panic!("job failed: {}", job["error"]),
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job did not finish");
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    assert_eq!(job["progress"], 1.0);
    let preview = job["preview"].as_str().unwrap().to_string();
    assert_eq!(preview, "/api/renders/latest?style=0");

    let states: Vec<String> = f
        .journal()
        .iter()
        .filter(|l| l["detail"]["job_id"] == job_id.as_str())
        .map(|l| match l["action"].as_str().unwrap() {
            "job_queued" => "queued".to_string(),
            _ => l["detail"]["state"].as_str().unwrap().to_string(),
        })
        .collect();
    assert_eq!(states, ["queued", "running", "done"]);

    let (status, headers, png) = f.call(Method::GET, &preview, None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert_eq!(png, std::fs::read(f.dir.join("renders/latest_s0.png")).unwrap());
    assert!(f.dir.join("checkpoints/stylized.ckpt").exists());

    // a new job may start once the first is done
    let body = serde_json::json!({ "style_index": 0, "iterations": 1 }).to_string();
    let (status, _, _) = f.call(Method::POST, "/api/jobs/stylize", Some(body), None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn job_and_render_errors() {
    let f = fixture();
    let (status, _, _) = f.call(Method::GET, "/api/jobs/job-404", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for (body, want) in [
        (serde_json::json!({ "style_index": 3, "iterations": 5 }), StatusCode::NOT_FOUND),
        (serde_json::json!({ "style_index": 0, "iterations": 0 }), StatusCode::UNPROCESSABLE_ENTITY),
    ] {
        let (status, _, _) = f.call(Method::POST, "/api/jobs/stylize", Some(body.to_string()), None).await;
        assert_eq!(status, want);
    }
    // before any stylization the reconstructed model is rendered
    let (status, _, png) = f.call(Method::GET, "/api/renders/latest?style=0", None, None).await;
    assert_eq!(status, StatusCode::OK);
    // IHDR width and height
    assert!(png.starts_with(b"\x89PNG"));
    let dim = |at: usize| u32::from_be_bytes(png[at..at + 4].try_into().unwrap());
    assert_eq!((dim(16), dim(20)), (64, 64));
    let (status, _, _) = f.call(Method::GET, "/api/renders/latest?style=5", None, None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(f.journal().is_empty());
}

#[test]
fn open_needs_a_reconstructed_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(App::open(tmp.path()).is_err());
}
