//! Scene and style region maps.
//!
//! Scene regions come from an unsupervised convolutional segmenter trained
//! jointly on all training views: each response vector is pulled towards its
//! own argmax class (similarity) while neighbouring responses are pulled
//! together (continuity). Style regions come from any mask generator, then
//! an overlap filter keeps large, mostly unclaimed masks.

use std::collections::BTreeSet;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{
    pixel_norm, pixel_norm_backward, relu_backward, relu_inplace, Conv2d, ConvGrads, PixelNormCache, Padding,
    Tensor,
};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Scene,
    Style,
}

pub const UNASSIGNED: i32 = -1;

/// Integer label image; `-1` marks unassigned pixels (style maps only).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<i32>,
    pub count: usize,
    pub provenance: Provenance,
    pub source_image: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    count: usize,
    provenance: Provenance,
    source_image: Option<String>,
}

/// Sidecar path for a region map PNG: `foo.png` → `foo.json`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

impl RegionMap {
    pub fn new(width: usize, height: usize, labels: Vec<i32>, count: usize, provenance: Provenance) -> Result<Self> {
        let m = Self {
            width,
            height,
            labels,
            count,
            provenance,
            source_image: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.width * self.height {
            return Err(Error::Domain(format!(
                "region map {}×{} has {} labels",
                self.width,
                self.height,
                self.labels.len()
            )));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            let ok = match self.provenance {
                Provenance::Scene => l >= 0 && (l as usize) < self.count,
                Provenance::Style => l == UNASSIGNED || (l >= 0 && (l as usize) < self.count),
            };
            if !ok {
                return Err(Error::Domain(format!(
                    "label {l} at pixel {i} is outside the valid range for {} {:?} regions",
                    self.count, self.provenance
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.count];
        for &l in &self.labels {
            if l >= 0 {
                a[l as usize] += 1;
            }
        }
        a
    }

    pub fn used_labels(&self) -> BTreeSet<usize> {
        self.labels.iter().filter(|l| **l >= 0).map(|l| *l as usize).collect()
    }

    /// Nearest-neighbour resampling: output pixel `(u, v)` reads input pixel
    /// `(⌊(u+½)·W_in/W_out⌋, ⌊(v+½)·H_in/H_out⌋)`.
    pub fn downscale(&self, target_w: usize, target_h: usize) -> Result<Self> {
        if target_w == 0 || target_h == 0 {
            return Err(Error::Domain("target dimensions must be ≥ 1".into()));
        }
        let src = |u: usize, out: usize, inp: usize| (((u as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1);
        let mut labels = Vec::with_capacity(target_w * target_h);
        for v in 0..target_h {
            let sy = src(v, target_h, self.height);
            for u in 0..target_w {
                labels.push(self.get(src(u, target_w, self.width), sy));
            }
        }
        Ok(Self {
            width: target_w,
            height: target_h,
            labels,
            ..self.clone()
        })
    }

    /// 16-bit PNG (65535 = unassigned) plus a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.count > 65535 {
            return Err(Error::Domain("too many regions for a 16-bit map".into()));
        }
        let raw: Vec<u16> = self
            .labels
            .iter()
            .map(|&l| if l < 0 { u16::MAX } else { l as u16 })
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("size matches");
        buf.save(path).map_err(|e| Error::image(path, e))?;
        let side = Sidecar {
            count: self.count,
            provenance: self.provenance,
            source_image: self.source_image.clone(),
        };
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma16();
        let (w, h) = img.dimensions();
        let labels = img
            .into_raw()
            .into_iter()
            .map(|v| if v == u16::MAX { UNASSIGNED } else { v as i32 })
            .collect();
        let m = Self {
            width: w as usize,
            height: h as usize,
            labels,
            count: side.count,
            provenance: side.provenance,
            source_image: side.source_image,
        };
        m.validate()?;
        Ok(m)
    }

    /// 8-bit display PNG, 255 = unassigned.
    pub fn save_label_png8(&self, path: &Path) -> Result<()> {
        if self.count > 255 {
            return Err(Error::Domain("8-bit label images hold at most 255 regions".into()));
        }
        let raw: Vec<u8> = self
            .labels
            .iter()
            .map(|&l| if l < 0 { 255 } else { l as u8 })
            .collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("size matches");
        buf.save(path).map_err(|e| Error::image(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    /// Upper bound `Q` on the number of regions.
    pub max_classes: usize,
    pub batch_size: usize,
    pub iterations: usize,
    /// Weight `μ` of the continuity term.
    pub continuity_weight: f32,
    pub learning_rate: f32,
    pub hidden_channels: usize,
    /// Training copies are downscaled so their long side is at most this.
    pub train_max_side: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            max_classes: 64,
            batch_size: 4,
            iterations: 500,
            continuity_weight: 5.0,
            learning_rate: 0.01,
            hidden_channels: 32,
            train_max_side: 128,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_classes < 2 {
            return Err(Error::Domain("max_classes (Q) must be ≥ 2".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Domain("batch_size (B) must be ≥ 1".into()));
        }
        if self.hidden_channels < 1 || self.train_max_side < 1 {
            return Err(Error::Domain("hidden_channels and train_max_side must be ≥ 1".into()));
        }
        if !(self.continuity_weight >= 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Domain("continuity_weight must be ≥ 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

/// Three convolutions, each followed by normalization of every response
/// vector across channels (ReLU before the normalization on the first two).
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub convs: [Conv2d; 3],
}

struct SegTape {
    input: Tensor,
    a1: Tensor,
    n1_cache: PixelNormCache,
    n1: Tensor,
    a2: Tensor,
    n2_cache: PixelNormCache,
    n2: Tensor,
    z_cache: PixelNormCache,
}

impl SegNet {
    pub fn new(hidden: usize, q: usize, seed: u64) -> Self {
        Self {
            convs: [
                Conv2d::new(3, hidden, 3, Padding::Replicate, seed ^ 0xa1),
                Conv2d::new(hidden, hidden, 3, Padding::Replicate, seed ^ 0xa2),
                Conv2d::new(hidden, q, 1, Padding::Replicate, seed ^ 0xa3),
            ],
        }
    }

    pub fn response(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_tape(image)?.0)
    }

    fn forward_tape(&self, image: &Tensor) -> Result<(Tensor, SegTape)> {
        let mut a1 = self.convs[0].forward(image)?;
        relu_inplace(&mut a1);
        let (n1, n1_cache) = pixel_norm(&a1);
        let mut a2 = self.convs[1].forward(&n1)?;
        relu_inplace(&mut a2);
        let (n2, n2_cache) = pixel_norm(&a2);
        let z = self.convs[2].forward(&n2)?;
        let (r, z_cache) = pixel_norm(&z);
        Ok((
            r,
            SegTape {
                input: image.clone(),
                a1,
                n1_cache,
                n1,
                a2,
                n2_cache,
                n2,
                z_cache,
            },
        ))
    }

    fn backward(&self, tape: &SegTape, dr: &Tensor, grads: &mut [ConvGrads; 3]) {
        let dz = pixel_norm_backward(&tape.z_cache, dr);
        let dn2 = self.convs[2].backward(&tape.n2, &dz, Some(&mut grads[2]));
        let mut da2 = pixel_norm_backward(&tape.n2_cache, &dn2);
        relu_backward(&tape.a2, &mut da2);
        let dn1 = self.convs[1].backward(&tape.n1, &da2, Some(&mut grads[1]));
        let mut da1 = pixel_norm_backward(&tape.n1_cache, &dn1);
        relu_backward(&tape.a1, &mut da1);
        self.convs[0].backward(&tape.input, &da1, Some(&mut grads[0]));
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Similarity plus `μ`·continuity loss of one response map, and its gradient.
/// Similarity: Σ_n −log softmax(r_n)[argmax r_n]. Continuity: Σ over the
/// `(W−1)×(H−1)` grid of L1 differences to the right and lower neighbours,
/// each divided by `Q` so `μ` does not scale with the class bound.
pub fn segmenter_loss(r: &Tensor, mu: f32) -> (f64, Tensor) {
    let q = r.c;
    let mut grad = Tensor::zeros(r.h, r.w, q);
    let mut sim = 0.0f64;
    for (rv, g) in r.data.chunks_exact(q).zip(grad.data.chunks_exact_mut(q)) {
        let t = argmax(rv);
        let m = rv[t];
        let e: Vec<f64> = rv.iter().map(|v| ((v - m) as f64).exp()).collect();
        let s: f64 = e.iter().sum();
        sim += s.ln();
        for i in 0..q {
            g[i] = (e[i] / s) as f32 - if i == t { 1.0 } else { 0.0 };
        }
    }
    let mut con = 0.0f64;
    for y in 0..r.h.saturating_sub(1) {
        for x in 0..r.w.saturating_sub(1) {
            let here = (y * r.w + x) * q;
            for nb in [here + q, here + r.w * q] {
                for i in 0..q {
                    let d = r.data[nb + i] - r.data[here + i];
                    con += d.abs() as f64 / q as f64;
                    let sg = mu * d.signum() / q as f32;
                    grad.data[nb + i] += sg;
                    grad.data[here + i] -= sg;
                }
            }
        }
    }
    (sim + mu as f64 * con, grad)
}

/// Trained segmenter plus the classes that survived on the training views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSegmenter {
    pub net: SegNet,
    pub active_classes: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl SceneSegmenter {
    pub fn num_regions(&self) -> usize {
        self.active_classes.len()
    }

    /// Labels restricted to the active classes, reindexed to `0..C`.
    pub fn segment(&self, image: &RgbImage) -> Result<RegionMap> {
        let r = self.net.response(&image.to_tensor())?;
        let labels = r
            .data
            .chunks_exact(r.c)
            .map(|v| {
                let mut best = 0;
                for (k, &cls) in self.active_classes.iter().enumerate() {
                    if v[cls] > v[self.active_classes[best]] {
                        best = k;
                    }
                }
                best as i32
            })
            .collect();
        RegionMap::new(image.width, image.height, labels, self.num_regions(), Provenance::Scene)
    }
}

fn check_common_resolution(images: &[RgbImage]) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Domain("segmentation needs at least one image".into()))?;
    for (i, im) in images.iter().enumerate() {
        if (im.width, im.height) != (first.width, first.height) {
            return Err(Error::Domain(format!(
                "image {i} is {}×{} but image 0 is {}×{}",
                im.width, im.height, first.width, first.height
            )));
        }
    }
    Ok((first.width, first.height))
}

/// Trains on batches of `B` views, then runs over all views and keeps the
/// classes that still occur. Returns the segmenter and that count `C`.
pub fn train_scene_segmenter(images: &[RgbImage], config: &SegNetConfig, rng_seed: u64) -> Result<(SceneSegmenter, usize)> {
    config.validate()?;
    let (width, height) = check_common_resolution(images)?;
    let mut net = SegNet::new(config.hidden_channels, config.max_classes, rng_seed);
    let train: Vec<Tensor> = images
        .iter()
        .map(|im| im.limit_long_side(config.train_max_side).to_tensor())
        .collect();
    let adam = AdamConfig {
        epsilon: 1e-8,
        ..Default::default()
    };
    let mut states: Vec<(AdamState, AdamState)> = net
        .convs
        .iter()
        .map(|c| (AdamState::new(c.weight.len()), AdamState::new(c.bias.len())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.iterations {
        order.shuffle(&mut rng);
        let mut grads = [net.convs[0].zero_grads(), net.convs[1].zero_grads(), net.convs[2].zero_grads()];
        for b in 0..config.batch_size {
            let img = &train[order[b % order.len()]];
            let (r, tape) = net.forward_tape(img)?;
            let (_, dr) = segmenter_loss(&r, config.continuity_weight);
            net.backward(&tape, &dr, &mut grads);
        }
        for ((conv, g), (sw, sb)) in net.convs.iter_mut().zip(&grads).zip(states.iter_mut()) {
            sw.update(&mut conv.weight, &g.weight, config.learning_rate, &adam);
            sb.update(&mut conv.bias, &g.bias, config.learning_rate, &adam);
        }
    }
    let mut used = BTreeSet::new();
    for im in images {
        let r = net.response(&im.to_tensor())?;
        used.extend(r.data.chunks_exact(r.c).map(argmax));
    }
    let seg = SceneSegmenter {
        net,
        active_classes: used.into_iter().collect(),
        width,
        height,
    };
    let c = seg.num_regions();
    Ok((seg, c))
}

/// One scene region map per view, labels in `[0, C)`.
pub fn segment_views(segmenter: &SceneSegmenter, images: &[RgbImage]) -> Result<Vec<RegionMap>> {
    for (i, im) in images.iter().enumerate() {
        if (im.width, im.height) != (segmenter.width, segmenter.height) {
            return Err(Error::Domain(format!(
                "view {i} is {}×{}, the segmenter was trained on {}×{}",
                im.width, im.height, segmenter.width, segmenter.height
            )));
        }
    }
    images.iter().map(|im| segmenter.segment(im)).collect()
}

/// Binary mask over an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Domain("mask size does not match its dimensions".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            width,
            height,
            pixels: (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect(),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|p| **p).count()
    }
}

/// Source of (possibly overlapping) candidate masks for a style image.
pub trait MaskBackend {
    fn generate(&self, image: &RgbImage) -> Result<Vec<Mask>>;
}

/// Returns a fixed list of masks.
pub struct StubMaskBackend {
    pub masks: Vec<Mask>,
}

impl MaskBackend for StubMaskBackend {
    fn generate(&self, _image: &RgbImage) -> Result<Vec<Mask>> {
        Ok(self.masks.clone())
    }
}

/// Runs an external mask generator: `program args.. <input.png> <out_dir>`.
/// The program must write one PNG per mask into `out_dir` (non-zero = inside).
pub struct CommandMaskBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl MaskBackend for CommandMaskBackend {
    fn generate(&self, image: &RgbImage) -> Result<Vec<Mask>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("style.png");
        let out = dir.path().join("masks");
        std::fs::create_dir(&out).map_err(|e| Error::io(&out, e))?;
        image.save_png(&input)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&out)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| {
                Error::ExternalDependency(format!(
                    "could not start mask generator '{}': {e}. Install a promptable mask generator that writes one PNG per mask, point the configuration at it, or use the built-in segmenter backend",
                    self.program.display()
                ))
            })?;
        let start = Instant::now();
        let status = loop {
            if let Some(s) = child.try_wait().map_err(|e| Error::io(&self.program, e))? {
                break s;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::ExternalDependency(format!(
                    "mask generator '{}' timed out after {:?}",
                    self.program.display(),
                    self.timeout
                )));
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        if !status.success() {
            let mut err = String::new();
            if let Some(mut s) = child.stderr.take() {
                let _ = s.read_to_string(&mut err);
            }
            return Err(Error::ExternalDependency(format!(
                "mask generator '{}' failed ({status}): {}",
                self.program.display(),
                err.trim()
            )));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&out)
            .map_err(|e| Error::io(&out, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| {
                let m = image::open(p).map_err(|e| Error::image(p, e))?.to_luma8();
                let (w, h) = m.dimensions();
                if (w as usize, h as usize) != (image.width, image.height) {
                    return Err(Error::ExternalDependency(format!(
                        "mask {} is {w}×{h}, expected {}×{}",
                        p.display(),
                        image.width,
                        image.height
                    )));
                }
                Mask::new(w as usize, h as usize, m.into_raw().into_iter().map(|v| v > 0).collect())
            })
            .collect()
    }
}

/// Uses the unsupervised segmenter on the style image itself; each surviving
/// class becomes one mask.
pub struct SegmenterMaskBackend {
    pub config: SegNetConfig,
    pub seed: u64,
}

impl MaskBackend for SegmenterMaskBackend {
    fn generate(&self, image: &RgbImage) -> Result<Vec<Mask>> {
        let (seg, c) = train_scene_segmenter(std::slice::from_ref(image), &self.config, self.seed)?;
        let map = seg.segment(image)?;
        Ok((0..c as i32)
            .map(|k| Mask {
                width: map.width,
                height: map.height,
                pixels: map.labels.iter().map(|l| *l == k).collect(),
            })
            .collect())
    }
}

/// Masks from the backend, sorted by decreasing area (stable for ties).
pub fn extract_style_masks(image: &RgbImage, backend: &dyn MaskBackend) -> Result<Vec<Mask>> {
    let mut masks = backend.generate(image)?;
    for (i, m) in masks.iter().enumerate() {
        if (m.width, m.height) != (image.width, image.height) {
            return Err(Error::Domain(format!("mask {i} does not match the style image size")));
        }
    }
    masks.sort_by_key(|m| std::cmp::Reverse(m.area()));
    Ok(masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleRegionSet {
    /// Accepted masks in acceptance order (as generated, before overwrites).
    pub masks: Vec<Mask>,
    pub areas: Vec<usize>,
    pub region_map: RegionMap,
}

/// Overlap filter over masks sorted by decreasing area. A mask is accepted
/// when at most `λ_t` of it is already claimed and it covers at least `λ_m`
/// of the image; accepted masks claim and relabel all their pixels.
pub fn filter_style_regions(masks: &[Mask], lambda_t: f64, lambda_m: f64) -> Result<StyleRegionSet> {
    if !(0.0..=1.0).contains(&lambda_t) {
        return Err(Error::Domain(format!("λ_t must lie in [0, 1], got {lambda_t}")));
    }
    if !(lambda_m > 0.0 && lambda_m < 1.0) {
        return Err(Error::Domain(format!("λ_m must lie in (0, 1), got {lambda_m}")));
    }
    let first = masks
        .first()
        .ok_or_else(|| Error::Domain("no candidate style masks to filter".into()))?;
    let (w, h) = (first.width, first.height);
    if masks.iter().any(|m| (m.width, m.height) != (w, h) || m.pixels.len() != w * h) {
        return Err(Error::Domain("candidate masks differ in size".into()));
    }
    if masks.windows(2).any(|p| p[0].area() < p[1].area()) {
        return Err(Error::Precondition("masks must be sorted by decreasing area".into()));
    }
    let total = (w * h) as f64;
    let mut claimed = vec![false; w * h];
    let mut labels = vec![UNASSIGNED; w * h];
    let mut accepted = Vec::new();
    for m in masks {
        let size = m.area();
        if size == 0 {
            continue;
        }
        let overlap = m.pixels.iter().zip(&claimed).filter(|(a, b)| **a && **b).count();
        if overlap as f64 / size as f64 <= lambda_t && size as f64 / total >= lambda_m {
            let idx = accepted.len() as i32;
            for (i, &inside) in m.pixels.iter().enumerate() {
                if inside {
                    claimed[i] = true;
                    labels[i] = idx;
                }
            }
            accepted.push(m.clone());
        }
    }
    let region_map = RegionMap::new(w, h, labels, accepted.len(), Provenance::Style)?;
    Ok(StyleRegionSet {
        areas: region_map.areas(),
        masks: accepted,
        region_map,
    })
}
