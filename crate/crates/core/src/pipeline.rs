//! Two-stage training schedule, run directory layout and render export.
//!
//! Reconstruction fits the whole model to the training views (colour + region
//! distillation), optionally followed by a phase against colour-transformed
//! targets. Stylization freezes geometry and the segmentation head and
//! optimizes the appearance branch under the region style loss.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StyleEntry, StyleMaskSource};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureMap};
use crate::field_model::{trainable_parameters, ModelGrads, ModelOptimizer, ModelStage, RadianceModel, Stage};
use crate::imageio::RgbImage;
use crate::region_matching::{
    apply_custom_matching, build_cost_matrix, parse_matching_json, solve_auto, CostMatrix, Matching,
    RegionAccumulator,
};
use crate::segmentation::{
    extract_style_masks, filter_style_regions, CommandMaskBackend, MaskBackend, Provenance, RegionMap,
    SegmenterMaskBackend,
};
use crate::style_losses::{
    ce_from_logits, deferred_backprop_step, reconstruction_loss, ColorTransform, StyleObjective, StyleTerms,
};
use crate::volume_renderer::{backward_rays, render_rays_tape, render_view, Camera, RenderedView, SamplingConfig};

/// Files of one run, all below `root`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.renders(), self.scene_maps()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.json")
    }
    pub fn scene_maps(&self) -> PathBuf {
        self.root.join("scene_maps")
    }
    pub fn scene_map(&self, view: usize) -> PathBuf {
        self.scene_maps().join(format!("view_{view:03}.png"))
    }
    pub fn style_dir(&self, style: u32) -> PathBuf {
        self.root.join("styles").join(format!("s{style}"))
    }
    pub fn style_image(&self, style: u32) -> PathBuf {
        self.style_dir(style).join("style.png")
    }
    pub fn style_regions(&self, style: u32) -> PathBuf {
        self.style_dir(style).join("regions.png")
    }
    pub fn matching(&self, style: u32) -> PathBuf {
        self.style_dir(style).join("matching.json")
    }
    pub fn cost(&self, style: u32) -> PathBuf {
        self.style_dir(style).join("cost.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reconstruction_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("reconstructed.ckpt")
    }
    /// In-progress reconstruction state, replaced at every save.
    pub fn reconstruction_progress(&self) -> PathBuf {
        self.checkpoints().join("reconstruction-progress.ckpt")
    }
    pub fn stylized_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("stylized.ckpt")
    }
    pub fn stylization_progress(&self) -> PathBuf {
        self.checkpoints().join("stylization-progress.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn renders(&self) -> PathBuf {
        self.root.join("renders")
    }
    pub fn journal(&self) -> PathBuf {
        self.root.join("journal.jsonl")
    }
}

/// One line of the metrics log. Terms a stage does not compute are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub iteration: usize,
    pub style: u32,
    #[serde(rename = "L_R", skip_serializing_if = "Option::is_none", default)]
    pub l_r: Option<f64>,
    #[serde(rename = "L_K", skip_serializing_if = "Option::is_none", default)]
    pub l_k: Option<f64>,
    #[serde(rename = "L_C", skip_serializing_if = "Option::is_none", default)]
    pub l_c: Option<f64>,
    #[serde(rename = "L_S", skip_serializing_if = "Option::is_none", default)]
    pub l_s: Option<f64>,
    pub total: f64,
}

/// Keeps every record in memory and appends each one to a JSON-lines file
/// when a path is given.
#[derive(Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            file: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(&r)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Progress notification from a training loop.
#[derive(Clone, Debug)]
pub struct Progress<'a> {
    pub stage: &'static str,
    pub iteration: usize,
    pub total: usize,
    pub record: &'a MetricsRecord,
    /// Set when a checkpoint was just committed.
    pub checkpoint: Option<&'a Path>,
}

pub type ProgressFn<'a> = dyn FnMut(&Progress) + 'a;

/// Seed for one iteration of one stage, independent of how the run was split
/// across resumes.
fn iteration_seed(seed: u64, stage: u64, iteration: usize) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0xA076_1D64_78BD_642F) ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training views with their images and (when present) scene region maps.
#[derive(Clone, Debug)]
pub struct TrainingViews {
    /// Indices into the dataset's view list.
    pub indices: Vec<usize>,
    pub cameras: Vec<Camera>,
    pub images: Vec<RgbImage>,
    pub maps: Vec<RegionMap>,
}

impl TrainingViews {
    /// Loads the train split. With `require_maps`, every view needs a scene
    /// region map and all maps must agree on the region count.
    pub fn load(dataset: &Dataset, require_maps: bool) -> Result<Self> {
        let indices = dataset.train_indices();
        if indices.is_empty() {
            return Err(Error::Config("the dataset has no training views".into()));
        }
        let mut v = Self {
            cameras: indices.iter().map(|&i| dataset.views[i].camera.clone()).collect(),
            images: indices.iter().map(|&i| dataset.load_image(i)).collect::<Result<_>>()?,
            maps: Vec::new(),
            indices,
        };
        if require_maps {
            for &i in &v.indices {
                let map = dataset.load_region_map(i)?.ok_or_else(|| {
                    Error::Precondition(format!(
                        "training view {} has no scene region map; run scene segmentation first",
                        dataset.views[i].file.display()
                    ))
                })?;
                if map.provenance != Provenance::Scene {
                    return Err(Error::Precondition(format!("region map of view {i} is not a scene map")));
                }
                if (map.width, map.height) != (dataset.width, dataset.height) {
                    return Err(Error::Precondition(format!(
                        "region map of view {i} is {}×{}, images are {}×{}",
                        map.width, map.height, dataset.width, dataset.height
                    )));
                }
                if let Some(first) = v.maps.first() {
                    if first.count != map.count {
                        return Err(Error::Precondition(format!(
                            "scene region maps disagree on the region count ({} vs {})",
                            first.count, map.count
                        )));
                    }
                }
                v.maps.push(map);
            }
        }
        Ok(v)
    }

    pub fn num_regions(&self) -> usize {
        self.maps.first().map_or(0, |m| m.count)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Loads a style image and shrinks it to the configured long side.
pub fn load_style_image(entry: &StyleEntry, config: &RunConfig) -> Result<RgbImage> {
    Ok(RgbImage::load(&entry.image)?.limit_long_side(config.stylization.style_long_side))
}

fn pixel_sample(images: &[&RgbImage], limit: usize, seed: u64) -> Vec<[f32; 3]> {
    let all: Vec<[f32; 3]> = images
        .iter()
        .flat_map(|im| im.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]))
        .collect();
    if all.len() <= limit {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Fits one colour transform per style from the pooled training pixels.
pub fn fit_color_transforms(
    images: &[RgbImage],
    styles: &[RgbImage],
    limit: usize,
    seed: u64,
) -> Result<Vec<ColorTransform>> {
    let content = pixel_sample(&images.iter().collect::<Vec<_>>(), limit, seed);
    styles
        .iter()
        .enumerate()
        .map(|(s, im)| ColorTransform::fit(&content, &pixel_sample(&[im], limit, seed ^ (s as u64 + 1))))
        .collect()
}

/// The model configuration a run trains, with box, style count and region
/// count filled in.
pub fn effective_model_config(config: &RunConfig, dataset: &Dataset, num_regions: usize) -> crate::field_model::ModelConfig {
    let mut m = config.model.clone().with_bounding_box(dataset.bounding_box);
    let styles = config.num_styles();
    m.appearance_grid.num_styles = styles;
    m.num_scene_regions = num_regions;
    m
}

const STAGE_RECON: u64 = 1;
const STAGE_STYLE: u64 = 2;

/// Reconstruction loop state. Iterations `0..iterations` target the training
/// images, the following `post_transform_iterations` target each style's
/// colour-transformed images (skipped when the run has no styles).
pub struct Reconstruction<'a> {
    views: &'a TrainingViews,
    config: &'a RunConfig,
    style_images: Vec<RgbImage>,
    pub model: RadianceModel,
    optimizer: ModelOptimizer,
    pub transforms: Vec<ColorTransform>,
    targets: Vec<Vec<RgbImage>>,
    /// Iterations completed.
    pub iteration: usize,
    pub metrics: MetricsLog,
    last_good: Option<PathBuf>,
}

impl<'a> Reconstruction<'a> {
    pub fn new(
        views: &'a TrainingViews,
        dataset: &Dataset,
        config: &'a RunConfig,
        style_images: Vec<RgbImage>,
    ) -> Result<Self> {
        config.validate()?;
        if views.maps.len() != views.len() {
            return Err(Error::Precondition("reconstruction needs a scene region map for every training view".into()));
        }
        check_style_images(config, &style_images)?;
        let model = RadianceModel::new(effective_model_config(config, dataset, views.num_regions()), config.seed)?;
        let optimizer = ModelOptimizer::new(&model, config.reconstruction.adam);
        Ok(Self {
            views,
            config,
            style_images,
            model,
            optimizer,
            transforms: Vec::new(),
            targets: Vec::new(),
            iteration: 0,
            metrics: MetricsLog::in_memory(),
            last_good: None,
        })
    }

    /// Continues from an in-progress checkpoint.
    pub fn resume(
        views: &'a TrainingViews,
        config: &'a RunConfig,
        style_images: Vec<RgbImage>,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        check_style_images(config, &style_images)?;
        if checkpoint.model.stage() != ModelStage::Untrained {
            return Err(Error::State(format!(
                "cannot resume reconstruction from a {} checkpoint",
                checkpoint.model.stage()
            )));
        }
        if checkpoint.model.num_scene_regions() != views.num_regions() {
            return Err(Error::Precondition("checkpoint and scene maps disagree on the region count".into()));
        }
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::Precondition("checkpoint carries no optimizer state".into()))?;
        let mut r = Self {
            views,
            config,
            style_images,
            model: checkpoint.model,
            optimizer,
            transforms: checkpoint.header.color_transforms,
            targets: Vec::new(),
            iteration: checkpoint.header.iteration as usize,
            metrics: MetricsLog::in_memory(),
            last_good: None,
        };
        if !r.transforms.is_empty() {
            r.build_targets();
        }
        Ok(r)
    }

    pub fn total_iterations(&self) -> usize {
        let rc = &self.config.reconstruction;
        rc.iterations + if self.style_images.is_empty() { 0 } else { rc.post_transform_iterations }
    }

    pub fn set_metrics(&mut self, log: MetricsLog) {
        self.metrics = log;
    }

    fn build_targets(&mut self) {
        self.targets = self
            .transforms
            .iter()
            .map(|t| self.views.images.iter().map(|im| t.apply_image(im)).collect())
            .collect();
    }

    /// Runs one iteration and returns its metrics record.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let rc = &self.config.reconstruction;
        let it = self.iteration;
        let post = it >= rc.iterations;
        if post && self.transforms.is_empty() {
            self.transforms = fit_color_transforms(
                &self.views.images,
                &self.style_images,
                rc.color_sample_limit,
                self.config.seed,
            )?;
            self.build_targets();
        }
        let num_styles = self.model.num_styles();
        let style = (it % num_styles as usize) as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(self.config.seed, STAGE_RECON, it));
        let (w, h) = (self.views.images[0].width, self.views.images[0].height);
        let mut rays = Vec::with_capacity(rc.batch_pixels);
        let mut target = Vec::with_capacity(rc.batch_pixels * 3);
        let mut labels = Vec::with_capacity(rc.batch_pixels);
        for _ in 0..rc.batch_pixels {
            let v = rng.gen_range(0..self.views.len());
            let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
            rays.push(self.views.cameras[v].ray(x, y));
            let img = if post { &self.targets[style as usize][v] } else { &self.views.images[v] };
            target.extend_from_slice(&img.pixel(x, y));
            labels.push(self.views.maps[v].get(x, y));
        }
        let sampling = SamplingConfig {
            samples_per_ray: rc.samples_per_ray,
            stratified: true,
        };
        let groups = trainable_parameters(Stage::Reconstruction);
        let (batch, tape) = render_rays_tape(&self.model, &rays, style, &sampling, true, Some(rng.gen()), &groups)?;
        let (l_r, d_rgb) = reconstruction_loss(&batch.rgb, &target);
        let c = self.model.num_scene_regions();
        let lambda = rc.lambda_ce;
        let mut l_k = 0.0;
        let mut d_logits = vec![0.0f32; labels.len() * c];
        for (r, &label) in labels.iter().enumerate() {
            if label < 0 {
                continue;
            }
            let (l, g) = ce_from_logits(&batch.logits[r * c..(r + 1) * c], label as usize);
            l_k += l;
            for (d, gi) in d_logits[r * c..(r + 1) * c].iter_mut().zip(g) {
                *d = lambda * gi;
            }
        }
        let total = l_r + lambda as f64 * l_k;
        let mut grads = ModelGrads::zeros_like(&self.model);
        let d_logits = (lambda > 0.0).then_some(d_logits.as_slice());
        backward_rays(&self.model, &tape, &d_rgb, d_logits, &groups, &mut grads)?;
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                last_good: self.last_good.clone(),
            });
        }
        self.optimizer.step(&mut self.model, &grads, &groups, rc.learning_rate)?;
        self.iteration += 1;
        let record = MetricsRecord {
            stage: if post { "color_transform" } else { "reconstruction" }.into(),
            iteration: it,
            style,
            l_r: Some(l_r),
            l_k: Some(l_k),
            l_c: None,
            l_s: None,
            total,
        };
        self.metrics.push(record.clone())?;
        Ok(record)
    }

    /// Snapshot of the current state, resumable with [`Reconstruction::resume`].
    pub fn progress_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.model.clone(),
            Some(self.optimizer.clone()),
            self.iteration as u64,
            self.config.seed,
            self.transforms.clone(),
        )
    }

    /// Runs to the end of the schedule and returns the reconstructed
    /// checkpoint. With a run directory, progress checkpoints are written
    /// every `checkpoint_every` iterations and the result is saved.
    pub fn run(mut self, dir: Option<&RunDir>, progress: &mut ProgressFn) -> Result<Checkpoint> {
        let total = self.total_iterations();
        let every = self.config.reconstruction.checkpoint_every;
        while self.iteration < total {
            let record = self.step()?;
            let mut saved = None;
            if let Some(d) = dir {
                if every > 0 && self.iteration % every == 0 && self.iteration < total {
                    let p = d.reconstruction_progress();
                    self.progress_checkpoint().save(&p)?;
                    self.last_good = Some(p.clone());
                    saved = Some(p);
                }
            }
            progress(&Progress {
                stage: "reconstruction",
                iteration: self.iteration,
                total,
                record: &record,
                checkpoint: saved.as_deref(),
            });
        }
        self.model.set_stage(ModelStage::Reconstructed);
        let ck = Checkpoint::new(self.model, None, self.iteration as u64, self.config.seed, self.transforms);
        if let Some(d) = dir {
            ck.save(&d.reconstruction_checkpoint())?;
            let _ = std::fs::remove_file(d.reconstruction_progress());
        }
        Ok(ck)
    }
}

fn check_style_images(config: &RunConfig, style_images: &[RgbImage]) -> Result<()> {
    if !style_images.is_empty() && style_images.len() != config.styles.len() {
        return Err(Error::Config(format!(
            "{} style images for {} style entries",
            style_images.len(),
            config.styles.len()
        )));
    }
    Ok(())
}

/// Loads the style images in index order.
pub fn load_style_images(config: &RunConfig) -> Result<Vec<RgbImage>> {
    (0..config.styles.len() as u32)
        .map(|i| load_style_image(config.style(i)?, config))
        .collect()
}

/// Reconstructs from scratch, writing into `config.out`.
pub fn run_reconstruction(dataset: &Dataset, config: &RunConfig, progress: &mut ProgressFn) -> Result<Checkpoint> {
    let dir = RunDir::new(&config.out);
    dir.create()?;
    std::fs::write(dir.config(), config.to_toml()).map_err(|e| Error::io(dir.config(), e))?;
    dataset.write_canonical(&dir.root)?;
    let views = TrainingViews::load(dataset, true)?;
    let styles = load_style_images(config)?;
    let mut r = Reconstruction::new(&views, dataset, config, styles)?;
    r.set_metrics(MetricsLog::append_to(&dir.metrics())?);
    r.run(Some(&dir), progress)
}

/// Scene side of stylization: per-view region maps from the model's own
/// segmentation head, at image and at feature resolution.
pub struct SceneRegions {
    pub maps: Vec<RegionMap>,
    pub feature_maps: Vec<RegionMap>,
}

impl SceneRegions {
    pub fn render(model: &RadianceModel, cameras: &[Camera], config: &RunConfig) -> Result<Self> {
        let sampling = SamplingConfig {
            samples_per_ray: config.stylization.samples_per_ray,
            stratified: false,
        };
        let c = model.num_scene_regions();
        let mut maps = Vec::with_capacity(cameras.len());
        let mut feature_maps = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let view = render_view(model, cam, 0, config.chunk_size, &sampling)?;
            let map = RegionMap::new(cam.width, cam.height, view.argmax_labels(), c, Provenance::Scene)?;
            let (fw, fh) = FeatureExtractor::output_dims(cam.width, cam.height);
            feature_maps.push(map.downscale(fw, fh)?);
            maps.push(map);
        }
        Ok(Self { maps, feature_maps })
    }

    pub fn used_labels(&self) -> std::collections::BTreeSet<usize> {
        self.feature_maps.iter().flat_map(|m| m.used_labels()).collect()
    }

    pub fn save(&self, dir: &RunDir) -> Result<()> {
        std::fs::create_dir_all(dir.scene_maps()).map_err(|e| Error::io(dir.scene_maps(), e))?;
        for (i, m) in self.maps.iter().enumerate() {
            m.save(&dir.scene_map(i))?;
        }
        Ok(())
    }
}

/// Style image with its regions at image and feature resolution.
#[derive(Clone, Debug)]
pub struct StyleAsset {
    pub index: u32,
    pub image: RgbImage,
    pub regions: RegionMap,
    pub features: FeatureMap,
    pub feature_regions: RegionMap,
}

/// Style regions from a precomputed map, or from the configured mask source
/// followed by the overlap filter.
pub fn style_regions(entry: &StyleEntry, image: &RgbImage, config: &RunConfig) -> Result<RegionMap> {
    if let Some(path) = &entry.regions {
        let map = RegionMap::load(path)?;
        if map.provenance != Provenance::Style {
            return Err(Error::Config(format!("{} is not a style region map", path.display())));
        }
        let (ow, oh) = image::image_dimensions(&entry.image).map_err(|e| Error::image(&entry.image, e))?;
        if (map.width, map.height) != (ow as usize, oh as usize) {
            return Err(Error::Config(format!(
                "style region map {} is {}×{}, its image is {ow}×{oh}",
                path.display(),
                map.width,
                map.height
            )));
        }
        return map.downscale(image.width, image.height);
    }
    let seg = &config.segmentation;
    let backend: Box<dyn MaskBackend> = match &seg.style_masks {
        StyleMaskSource::Segmenter => Box::new(SegmenterMaskBackend {
            config: seg.segmenter.clone(),
            seed: config.seed ^ (entry.index as u64 + 1),
        }),
        StyleMaskSource::Command {
            program,
            args,
            timeout_secs,
        } => Box::new(CommandMaskBackend {
            program: program.clone(),
            args: args.clone(),
            timeout: std::time::Duration::from_secs(*timeout_secs),
        }),
    };
    let masks = extract_style_masks(image, backend.as_ref())?;
    Ok(filter_style_regions(&masks, seg.lambda_t, seg.lambda_m)?.region_map)
}

impl StyleAsset {
    pub fn new(index: u32, image: RgbImage, regions: RegionMap, extractor: &FeatureExtractor) -> Result<Self> {
        if (regions.width, regions.height) != (image.width, image.height) {
            return Err(Error::Domain("style region map and style image differ in size".into()));
        }
        let features = extractor.extract(&image)?;
        let feature_regions = regions.downscale(features.w, features.h)?;
        Ok(Self {
            index,
            image,
            regions,
            features,
            feature_regions,
        })
    }

    pub fn load(entry: &StyleEntry, config: &RunConfig, extractor: &FeatureExtractor) -> Result<Self> {
        let image = load_style_image(entry, config)?;
        let regions = style_regions(entry, &image, config)?;
        Self::new(entry.index, image, regions, extractor)
    }

    pub fn save(&self, dir: &RunDir) -> Result<()> {
        let d = dir.style_dir(self.index);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        self.image.save_png(&dir.style_image(self.index))?;
        self.regions.save(&dir.style_regions(self.index))
    }
}

/// Cost matrix over the scene labels that actually occur, as stored next to
/// a matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub scene_labels: Vec<usize>,
    pub style_regions: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Region summaries pooled over all views, then `W = feature + β·patch`
/// restricted to the scene labels that occur.
pub fn region_costs(
    scene_features: &[FeatureMap],
    scene_regions: &SceneRegions,
    style: &StyleAsset,
    beta: f64,
) -> Result<(CostTable, CostMatrix)> {
    let d = style.features.d;
    let c = scene_regions.feature_maps.first().map_or(0, |m| m.count);
    let mut scene: Vec<RegionAccumulator> = (0..c).map(|_| RegionAccumulator::new(d)).collect();
    for (f, map) in scene_features.iter().zip(&scene_regions.feature_maps) {
        accumulate(f, map, &mut scene);
    }
    let mut st: Vec<RegionAccumulator> = (0..style.regions.count).map(|_| RegionAccumulator::new(d)).collect();
    accumulate(&style.features, &style.feature_regions, &mut st);
    let labels: Vec<usize> = scene_regions.used_labels().into_iter().collect();
    let present: Vec<RegionAccumulator> = labels.iter().map(|&l| scene[l].clone()).collect();
    let w = build_cost_matrix(&present, &st, beta)?;
    let table = CostTable {
        scene_labels: labels,
        style_regions: w.cols,
        rows: w.to_rows(),
    };
    Ok((table, w))
}

fn accumulate(f: &FeatureMap, map: &RegionMap, acc: &mut [RegionAccumulator]) {
    for y in 0..f.h {
        for x in 0..f.w {
            let l = map.get(x, y);
            if l >= 0 {
                let a = &mut acc[l as usize];
                a.add_feature(f.cell(y * f.w + x));
                a.add_pixel(x, y, f.w, f.h);
            }
        }
    }
}

/// Auto matching over the occurring scene labels, reported against the full
/// scene region count.
pub fn auto_matching(table: &CostTable, w: &CostMatrix, scene_regions: usize) -> Result<Matching> {
    let solved = solve_auto(w)?;
    let mut m = Matching::new(scene_regions, table.style_regions, solved.mode);
    for (&row, &style) in solved.pairs() {
        m.set_pair(table.scene_labels[row], style)?;
    }
    m.total_cost = solved.total_cost;
    Ok(m)
}

/// Auto-solves or loads the style's matching, copies it into the run
/// directory and checks it covers every scene label in use.
pub fn resolve_matching(
    entry: &StyleEntry,
    style: &StyleAsset,
    scene_features: &[FeatureMap],
    scene_regions: &SceneRegions,
    config: &RunConfig,
    dir: Option<&RunDir>,
) -> Result<Matching> {
    let c = scene_regions.feature_maps.first().map_or(0, |m| m.count);
    let costs = region_costs(scene_features, scene_regions, style, config.matching.beta);
    let mut matching = if entry.is_auto() {
        let (table, w) = costs.as_ref().map_err(|e| Error::Config(format!("auto matching for style {}: {e}", entry.index)))?;
        auto_matching(table, w, c)?
    } else {
        let path = Path::new(&entry.matching);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        apply_custom_matching(&parse_matching_json(&text)?, c, style.regions.count)?
    };
    check_coverage(&matching, scene_regions, entry.index)?;
    matching.freeze();
    if let Some(d) = dir {
        std::fs::create_dir_all(d.style_dir(entry.index)).map_err(|e| Error::io(d.style_dir(entry.index), e))?;
        std::fs::write(d.matching(entry.index), matching.to_json()).map_err(|e| Error::io(d.matching(entry.index), e))?;
        if let Ok((table, _)) = &costs {
            std::fs::write(d.cost(entry.index), serde_json::to_string_pretty(table)?)
                .map_err(|e| Error::io(d.cost(entry.index), e))?;
        }
    }
    Ok(matching)
}

fn check_coverage(matching: &Matching, scene_regions: &SceneRegions, style: u32) -> Result<()> {
    matching
        .check_covers(scene_regions.used_labels())
        .map_err(|e| Error::Config(format!("matching for style {style}: {e}")))
}

/// Everything stylization needs for one style.
pub struct PreparedStyle {
    pub asset: StyleAsset,
    pub matching: Matching,
    /// `F(T_s(ŷ_v))` per training view.
    pub content_targets: Vec<FeatureMap>,
}

/// Stylization loop state.
pub struct Stylization<'a> {
    views: &'a TrainingViews,
    config: &'a RunConfig,
    extractor: &'a FeatureExtractor,
    scene: &'a SceneRegions,
    styles: &'a [PreparedStyle],
    pub model: RadianceModel,
    optimizer: ModelOptimizer,
    transforms: Vec<ColorTransform>,
    frozen: crate::field_model::GeometryDigest,
    pub iteration: usize,
    pub metrics: MetricsLog,
}

/// Content targets for one style: features of the colour-transformed
/// training images.
pub fn content_targets(
    views: &TrainingViews,
    transform: &ColorTransform,
    extractor: &FeatureExtractor,
) -> Result<Vec<FeatureMap>> {
    views.images.iter().map(|im| extractor.extract(&transform.apply_image(im))).collect()
}

impl<'a> Stylization<'a> {
    /// Takes a reconstructed checkpoint, freezes its geometry and checks
    /// every matching before any optimization.
    pub fn new(
        checkpoint: Checkpoint,
        views: &'a TrainingViews,
        config: &'a RunConfig,
        extractor: &'a FeatureExtractor,
        scene: &'a SceneRegions,
        styles: &'a [PreparedStyle],
    ) -> Result<Self> {
        let mut model = checkpoint.model;
        if model.stage() != ModelStage::Reconstructed {
            return Err(Error::State(format!(
                "stylization needs a reconstructed checkpoint, got stage {}",
                model.stage()
            )));
        }
        if styles.is_empty() {
            return Err(Error::Config("stylization needs at least one style".into()));
        }
        for s in styles {
            model.check_style(s.asset.index)?;
            check_coverage(&s.matching, scene, s.asset.index)?;
            if s.content_targets.len() != views.len() {
                return Err(Error::Internal("content targets do not cover every view".into()));
            }
        }
        let frozen = match model.frozen_geometry() {
            Some(d) => d,
            None => model.freeze_geometry()?,
        };
        let optimizer = ModelOptimizer::new(&model, config.stylization.adam);
        Ok(Self {
            views,
            config,
            extractor,
            scene,
            styles,
            model,
            optimizer,
            transforms: checkpoint.header.color_transforms,
            frozen,
            iteration: 0,
            metrics: MetricsLog::in_memory(),
        })
    }

    pub fn set_metrics(&mut self, log: MetricsLog) {
        self.metrics = log;
    }

    fn objective(&self, style: &'a PreparedStyle, view: usize) -> StyleObjective<'a> {
        let sc = &self.config.stylization;
        StyleObjective {
            extractor: self.extractor,
            style_features: &style.asset.features,
            style_map: &style.asset.feature_regions,
            content_target: &style.content_targets[view],
            scene_map: &self.scene.feature_maps[view],
            matching: &style.matching,
            lambda_content: sc.lambda_content,
            lambda_style: sc.lambda_style,
        }
    }

    fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            samples_per_ray: self.config.stylization.samples_per_ray,
            stratified: false,
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f32 {
        let sc = &self.config.stylization;
        if iteration as f64 >= sc.decay_at as f64 * sc.iterations as f64 {
            sc.learning_rate * sc.decay
        } else {
            sc.learning_rate
        }
    }

    /// One full-view step: round-robin style, seeded random training view.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let it = self.iteration;
        let styles = self.styles;
        let style = &styles[it % styles.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(self.config.seed, STAGE_STYLE, it));
        let view = rng.gen_range(0..self.views.len());
        let objective = self.objective(style, view);
        let groups = trainable_parameters(Stage::Stylization);
        let (terms, grads) = deferred_backprop_step(
            &self.model,
            &self.views.cameras[view],
            style.asset.index,
            &self.sampling(),
            self.config.stylization.patch_size,
            &groups,
            |img| objective.evaluate(img),
        )?;
        if !terms.total.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                last_good: None,
            });
        }
        let lr = self.learning_rate(it);
        self.optimizer.step(&mut self.model, &grads, &groups, lr)?;
        self.iteration += 1;
        let record = MetricsRecord {
            stage: "stylization".into(),
            iteration: it,
            style: style.asset.index,
            l_r: None,
            l_k: None,
            l_c: Some(terms.content),
            l_s: Some(terms.style),
            total: terms.total,
        };
        self.metrics.push(record.clone())?;
        Ok(record)
    }

    /// Mean loss terms over every training view for one prepared style.
    pub fn evaluate(&self, style_slot: usize) -> Result<StyleTerms> {
        let style = &self.styles[style_slot];
        let sampling = self.sampling();
        let mut sum = StyleTerms::default();
        for (v, cam) in self.views.cameras.iter().enumerate() {
            let view = render_view(&self.model, cam, style.asset.index, self.config.chunk_size, &sampling)?;
            let img = RgbImage::new(cam.width, cam.height, view.rgb)?;
            let (t, _) = self.objective(style, v).evaluate(&img)?;
            sum.content += t.content;
            sum.style += t.style;
            sum.total += t.total;
        }
        let n = self.views.len() as f64;
        Ok(StyleTerms {
            content: sum.content / n,
            style: sum.style / n,
            total: sum.total / n,
        })
    }

    fn check_geometry(&self) -> Result<()> {
        if self.model.geometry_digest() != self.frozen {
            return Err(Error::Internal("geometry changed during stylization".into()));
        }
        Ok(())
    }

    fn checkpoint(&self, stage: ModelStage) -> Checkpoint {
        let mut model = self.model.clone();
        model.set_stage(stage);
        Checkpoint::new(model, None, self.iteration as u64, self.config.seed, self.transforms.clone())
    }

    pub fn run(mut self, dir: Option<&RunDir>, progress: &mut ProgressFn) -> Result<Checkpoint> {
        let total = self.config.stylization.iterations;
        let every = self.config.stylization.checkpoint_every;
        while self.iteration < total {
            let record = self.step()?;
            let mut saved = None;
            if every > 0 && self.iteration % every == 0 && self.iteration < total {
                self.check_geometry()?;
                if let Some(d) = dir {
                    let p = d.stylization_progress();
                    self.checkpoint(ModelStage::Reconstructed).save(&p)?;
                    saved = Some(p);
                }
            }
            progress(&Progress {
                stage: "stylization",
                iteration: self.iteration,
                total,
                record: &record,
                checkpoint: saved.as_deref(),
            });
        }
        self.check_geometry()?;
        let ck = self.checkpoint(ModelStage::Stylized);
        if let Some(d) = dir {
            let _ = std::fs::remove_file(d.stylization_progress());
        }
        Ok(ck)
    }
}

/// Loads, segments and matches the given styles against the scene regions of
/// a reconstructed model. Files go into the run directory when given.
pub fn prepare_styles(
    entries: &[&StyleEntry],
    checkpoint: &Checkpoint,
    views: &TrainingViews,
    scene: &SceneRegions,
    extractor: &FeatureExtractor,
    config: &RunConfig,
    dir: Option<&RunDir>,
) -> Result<Vec<PreparedStyle>> {
    let scene_features: Vec<FeatureMap> = views.images.iter().map(|im| extractor.extract(im)).collect::<Result<_>>()?;
    entries
        .iter()
        .map(|entry| {
            let asset = StyleAsset::load(entry, config, extractor)?;
            if let Some(d) = dir {
                asset.save(d)?;
            }
            let matching = resolve_matching(entry, &asset, &scene_features, scene, config, dir)?;
            let t = checkpoint
                .header
                .color_transforms
                .get(entry.index as usize)
                .copied()
                .unwrap_or_else(ColorTransform::identity);
            let content_targets = content_targets(views, &t, extractor)?;
            Ok(PreparedStyle {
                asset,
                matching,
                content_targets,
            })
        })
        .collect()
}

/// Stylizes `style_indices` (all configured styles when empty) jointly,
/// round-robin, writing into `config.out`.
pub fn run_stylization(
    checkpoint: Checkpoint,
    dataset: &Dataset,
    config: &RunConfig,
    style_indices: &[u32],
    progress: &mut ProgressFn,
) -> Result<Checkpoint> {
    config.require_styles()?;
    if checkpoint.model.stage() != ModelStage::Reconstructed {
        return Err(Error::State(format!(
            "stylization needs a reconstructed checkpoint, got stage {}",
            checkpoint.model.stage()
        )));
    }
    let entries: Vec<&StyleEntry> = if style_indices.is_empty() {
        let mut e: Vec<&StyleEntry> = config.styles.iter().collect();
        e.sort_by_key(|s| s.index);
        e
    } else {
        style_indices.iter().map(|&i| config.style(i)).collect::<Result<_>>()?
    };
    let dir = RunDir::new(&config.out);
    dir.create()?;
    let extractor = FeatureExtractor::from_config(&config.extractor)?;
    let views = TrainingViews::load(dataset, false)?;
    let scene = SceneRegions::render(&checkpoint.model, &views.cameras, config)?;
    scene.save(&dir)?;
    let styles = prepare_styles(&entries, &checkpoint, &views, &scene, &extractor, config, Some(&dir))?;
    let mut s = Stylization::new(checkpoint, &views, config, &extractor, &scene, &styles)?;
    s.set_metrics(MetricsLog::append_to(&dir.metrics())?);
    let ck = s.run(Some(&dir), progress)?;
    ck.save(&dir.stylized_checkpoint())?;
    Ok(ck)
}

/// Renders every camera under `style_index` and writes `frame_NNNN.png` and
/// `regions_NNNN.png` into `out_dir`.
pub fn render_path(
    checkpoint: &Checkpoint,
    cameras: &[Camera],
    style_index: u32,
    out_dir: &Path,
    samples_per_ray: usize,
    chunk_size: usize,
) -> Result<Vec<PathBuf>> {
    let model = &checkpoint.model;
    if model.stage() == ModelStage::Untrained {
        return Err(Error::State("cannot render an untrained checkpoint".into()));
    }
    if style_index >= model.num_styles() {
        return Err(Error::Config(format!(
            "style index {style_index} is out of range for a checkpoint with {} styles",
            model.num_styles()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sampling = SamplingConfig {
        samples_per_ray,
        stratified: false,
    };
    let mut written = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let view = render_view(model, cam, style_index, chunk_size, &sampling)?;
        let (img, map) = view_outputs(&view)?;
        let frame = out_dir.join(format!("frame_{i:04}.png"));
        img.save_png(&frame)?;
        map.save_label_png8(&out_dir.join(format!("regions_{i:04}.png")))?;
        written.push(frame);
    }
    Ok(written)
}

/// Colour image and argmax region map of a rendered view.
pub fn view_outputs(view: &RenderedView) -> Result<(RgbImage, RegionMap)> {
    let img = RgbImage::new(view.width, view.height, view.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    let map = RegionMap::new(view.width, view.height, view.argmax_labels(), view.num_regions, Provenance::Scene)?;
    Ok((img, map))
}
