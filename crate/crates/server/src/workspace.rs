//! Everything the service reads from a run directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use locstyle::checkpoint::Checkpoint;
use locstyle::config::{RunConfig, StyleEntry};
use locstyle::dataset::{ingest_dataset, Dataset, DatasetFormat};
use locstyle::error::{Error, Result};
use locstyle::features::{FeatureExtractor, FeatureMap};
use locstyle::imageio::RgbImage;
use locstyle::pipeline::{resolve_matching, CostTable, RunDir, SceneRegions, StyleAsset, TrainingViews};
use locstyle::region_matching::{normalize_coord, Matching};
use locstyle::segmentation::RegionMap;

/// Read-only state shared by every request and job.
pub struct Workspace {
    pub dir: RunDir,
    pub config: RunConfig,
    pub dataset: Dataset,
    pub checkpoint: Checkpoint,
    pub views: TrainingViews,
    pub extractor: FeatureExtractor,
    pub scene: SceneRegions,
    scene_features: Vec<FeatureMap>,
}

/// Mutable per-style state: the asset is fixed, the matching is editable.
#[derive(Clone, Debug)]
pub struct StyleState {
    pub asset: StyleAsset,
    pub matching: Matching,
    pub cost: Option<CostTable>,
}

impl Workspace {
    /// Needs `config.toml`, `cameras.json` and a reconstructed checkpoint.
    /// Scene maps are re-rendered from the checkpoint; matchings already in
    /// the run directory win over the config's entries.
    pub fn open(root: &Path) -> Result<(Self, BTreeMap<u32, StyleState>)> {
        let dir = RunDir::new(root);
        let ck = dir.reconstruction_checkpoint();
        if !ck.exists() {
            return Err(Error::Precondition(format!("{} has no reconstructed checkpoint", root.display())));
        }
        let mut config = RunConfig::load(&dir.config())?;
        config.out = root.to_path_buf();
        let dataset = ingest_dataset(root, DatasetFormat::CameraJson)?;
        let checkpoint = Checkpoint::load(&ck)?;
        let views = TrainingViews::load(&dataset, false)?;
        let extractor = FeatureExtractor::from_config(&config.extractor)?;
        let scene = SceneRegions::render(&checkpoint.model, &views.cameras, &config)?;
        scene.save(&dir)?;
        let scene_features = views.images.iter().map(|im| extractor.extract(im)).collect::<Result<_>>()?;
        let ws = Self {
            dir,
            config,
            dataset,
            checkpoint,
            views,
            extractor,
            scene,
            scene_features,
        };
        let mut styles = BTreeMap::new();
        for entry in &ws.config.styles {
            styles.insert(entry.index, ws.load_style(entry)?);
        }
        Ok((ws, styles))
    }

    fn load_style(&self, entry: &StyleEntry) -> Result<StyleState> {
        let mut entry = entry.clone();
        let saved = self.dir.matching(entry.index);
        if saved.exists() {
            entry.matching = saved.to_string_lossy().into_owned();
        }
        let asset = StyleAsset::load(&entry, &self.config, &self.extractor)?;
        asset.save(&self.dir)?;
        let matching = resolve_matching(&entry, &asset, &self.scene_features, &self.scene, &self.config, Some(&self.dir))?;
        let cost = std::fs::read_to_string(self.dir.cost(entry.index))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        Ok(StyleState { asset, matching, cost })
    }

    pub fn num_scene_regions(&self) -> usize {
        self.checkpoint.model.num_scene_regions()
    }
}

/// One region as listed to the editor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCard {
    pub id: usize,
    /// Fraction of all pixels.
    pub area: f64,
    /// Mean normalized pixel position `(x, y)`.
    pub centroid: [f64; 2],
    pub overlay_png_url: String,
}

/// Cards for every label that occurs in `maps`, pooled over all maps.
pub fn region_cards(maps: &[RegionMap], url: impl Fn(usize) -> String) -> Vec<RegionCard> {
    let count = maps.iter().map(|m| m.count).max().unwrap_or(0);
    let mut n = vec![0usize; count];
    let mut sum = vec![[0.0f64; 2]; count];
    let mut total = 0usize;
    for m in maps {
        total += m.labels.len();
        for y in 0..m.height {
            for x in 0..m.width {
                let l = m.get(x, y);
                if l >= 0 {
                    let l = l as usize;
                    n[l] += 1;
                    sum[l][0] += normalize_coord(x, m.width);
                    sum[l][1] += normalize_coord(y, m.height);
                }
            }
        }
    }
    (0..count)
        .filter(|&i| n[i] > 0)
        .map(|i| RegionCard {
            id: i,
            area: n[i] as f64 / total as f64,
            centroid: [sum[i][0] / n[i] as f64, sum[i][1] / n[i] as f64],
            overlay_png_url: url(i),
        })
        .collect()
}

/// `image` with everything outside `region` dimmed.
pub fn overlay(image: &RgbImage, map: &RegionMap, region: usize) -> Result<RgbImage> {
    if (image.width, image.height) != (map.width, map.height) {
        return Err(Error::Domain("overlay image and region map differ in size".into()));
    }
    let mut out = image.clone();
    for y in 0..map.height {
        for x in 0..map.width {
            if map.get(x, y) != region as i32 {
                let p = out.pixel(x, y);
                out.set_pixel(x, y, p.map(|v| 0.25 * v));
            }
        }
    }
    Ok(out)
}
