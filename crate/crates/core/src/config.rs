//! Run configuration, read from TOML.
//!
//! `model.*.bounding_box`, `model.appearance_grid.num_styles` and
//! `model.num_scene_regions` are filled in from the dataset, the style list
//! and the scene segmentation when a run starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ExtractorConfig;
use crate::field_model::ModelConfig;
use crate::optim::AdamConfig;
use crate::segmentation::SegNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub iterations: usize,
    /// Iterations run against colour-transformed targets after `iterations`.
    pub post_transform_iterations: usize,
    pub learning_rate: f32,
    /// N_T, pixels sampled per iteration.
    pub batch_pixels: usize,
    pub lambda_ce: f32,
    pub samples_per_ray: usize,
    pub checkpoint_every: usize,
    /// Pixels pooled when fitting the colour transform.
    pub color_sample_limit: usize,
    pub adam: AdamConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            iterations: 2_000,
            post_transform_iterations: 500,
            learning_rate: 0.01,
            batch_pixels: 4_096,
            lambda_ce: 0.01,
            samples_per_ray: 64,
            checkpoint_every: 500,
            color_sample_limit: 1 << 20,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizationConfig {
    pub iterations: usize,
    pub learning_rate: f32,
    /// Fraction of `iterations` after which the step size is multiplied by `decay`.
    pub decay_at: f32,
    pub decay: f32,
    pub lambda_content: f64,
    pub lambda_style: f64,
    pub patch_size: usize,
    pub samples_per_ray: usize,
    /// Style images are resized so their long side is at most this.
    pub style_long_side: usize,
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for StylizationConfig {
    fn default() -> Self {
        Self {
            iterations: 1_000,
            learning_rate: 0.01,
            decay_at: 0.8,
            decay: 0.1,
            lambda_content: 0.001,
            lambda_style: 1.0,
            patch_size: 64,
            samples_per_ray: 64,
            style_long_side: 512,
            checkpoint_every: 250,
            adam: AdamConfig::default(),
        }
    }
}

/// Where style-region masks come from before overlap filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StyleMaskSource {
    /// The unsupervised segmenter run on the style image; one mask per region.
    Segmenter,
    /// External mask generator: `program args.. <image.png> <out_dir>`, which
    /// must leave one PNG mask per region in `out_dir`.
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    600
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub segmenter: SegNetConfig,
    /// λ_t, the largest overlap fraction a kept style mask may share.
    pub lambda_t: f64,
    /// λ_m, the smallest area fraction a kept style mask may have.
    pub lambda_m: f64,
    pub style_masks: StyleMaskSource,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            segmenter: SegNetConfig::default(),
            lambda_t: 0.05,
            lambda_m: 0.004,
            style_masks: StyleMaskSource::Segmenter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    /// β, the weight of the patch distance in the cost matrix.
    pub beta: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleEntry {
    pub image: PathBuf,
    /// `"auto"` or a path to a matching JSON file.
    #[serde(default = "auto")]
    pub matching: String,
    /// Optional precomputed style region map (PNG with JSON sidecar).
    #[serde(default)]
    pub regions: Option<PathBuf>,
    pub index: u32,
}

fn auto() -> String {
    "auto".into()
}

impl StyleEntry {
    pub fn is_auto(&self) -> bool {
        self.matching == "auto"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub reconstruction: ReconstructionConfig,
    pub stylization: StylizationConfig,
    pub segmentation: SegmentationConfig,
    pub matching: MatchingConfig,
    pub extractor: ExtractorConfig,
    /// Render chunk size in rays.
    pub chunk_size: usize,
    pub styles: Vec<StyleEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            model: ModelConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            stylization: StylizationConfig::default(),
            segmentation: SegmentationConfig::default(),
            matching: MatchingConfig::default(),
            extractor: ExtractorConfig::default(),
            chunk_size: 4_096,
            styles: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Iteration counts of the original two-stage schedule.
    pub fn full_profile() -> Self {
        let mut c = Self::default();
        c.reconstruction.iterations = 20_000;
        c.reconstruction.post_transform_iterations = 2_000;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative paths in the file are relative to the file
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        c.resolve_paths(&std::path::absolute(&dir).map_err(|e| Error::io(&dir, e))?);
        c.validate()?;
        Ok(c)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for s in &mut self.styles {
            fix(&mut s.image);
            if let Some(r) = &mut s.regions {
                fix(r);
            }
            if !s.is_auto() {
                let mut m = PathBuf::from(&s.matching);
                fix(&mut m);
                s.matching = m.to_string_lossy().into_owned();
            }
        }
        if let ExtractorConfig::Pretrained { weights, .. } = &mut self.extractor {
            fix(weights);
        }
        if let StyleMaskSource::Command { program, .. } = &mut self.segmentation.style_masks {
            if program.components().count() > 1 {
                fix(program);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reconstruction;
        let s = &self.stylization;
        if !(r.lambda_ce >= 0.0) || !(s.lambda_content >= 0.0) || !(s.lambda_style >= 0.0) {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if r.batch_pixels == 0 || r.samples_per_ray == 0 || s.samples_per_ray == 0 {
            return Err(Error::Config("batch_pixels and samples_per_ray must be ≥ 1".into()));
        }
        if s.patch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("patch_size and chunk_size must be ≥ 1".into()));
        }
        if !(r.learning_rate > 0.0 && s.learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&s.decay_at) || !(s.decay > 0.0) {
            return Err(Error::Config("decay_at must lie in [0, 1] and decay be positive".into()));
        }
        if !(self.matching.beta >= 0.0) {
            return Err(Error::Config("matching.beta must be ≥ 0".into()));
        }
        self.segmentation.segmenter.validate()?;
        let mut idx: Vec<u32> = self.styles.iter().map(|e| e.index).collect();
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, v)| *v as usize != i) {
            return Err(Error::Config(format!(
                "style indices must be contiguous from 0, got {idx:?}"
            )));
        }
        Ok(())
    }

    /// Stricter check for stages that need at least one style.
    pub fn require_styles(&self) -> Result<()> {
        if self.styles.is_empty() {
            return Err(Error::Config("at least one [[styles]] entry is required".into()));
        }
        Ok(())
    }

    pub fn style(&self, index: u32) -> Result<&StyleEntry> {
        self.styles
            .iter()
            .find(|s| s.index == index)
            .ok_or_else(|| Error::Config(format!("no style with index {index}")))
    }

    pub fn num_styles(&self) -> u32 {
        self.styles.len().max(1) as u32
    }
}
