//! Training losses, the colour-statistics transform and the deferred
//! backpropagation driver.
//!
//! Loss values are accumulated in f64. Feature gradients are returned as f64
//! so finite-difference checks stay meaningful; the image-space path narrows
//! to f32.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureMap};
use crate::field_model::{GroupSet, ModelGrads, RadianceModel};
use crate::imageio::RgbImage;
use crate::region_matching::Matching;
use crate::segmentation::{Provenance, RegionMap};
use crate::volume_renderer::{backward_rays, camera_rays, render_rays, render_rays_tape, Camera, SamplingConfig};

/// Floor on feature norms inside the cosine distance.
pub const COSINE_EPS: f64 = 1e-8;
/// Added to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;
/// Diagonal loading of both colour covariances.
pub const COLOR_LOADING: f64 = 1e-6;
pub const MAX_COLOR_CONDITION: f64 = 1e6;

/// Cells of a feature-resolution region map grouped by label. Unassigned
/// cells are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureIndex {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Vec<usize>>,
}

impl RegionFeatureIndex {
    pub fn new(map: &RegionMap) -> Self {
        let mut cells = vec![Vec::new(); map.count];
        for (i, &l) in map.labels.iter().enumerate() {
            if l >= 0 {
                cells[l as usize].push(i);
            }
        }
        Self {
            width: map.width,
            height: map.height,
            cells,
        }
    }
}

struct Normalized {
    rows: Vec<f64>,
    norms: Vec<f64>,
    d: usize,
}

fn normalize(f: &FeatureMap) -> Normalized {
    let d = f.d;
    let mut rows = Vec::with_capacity(f.data.len());
    let mut norms = Vec::with_capacity(f.num_cells());
    for c in f.data.chunks_exact(d) {
        let n = c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let s = 1.0 / n.max(COSINE_EPS);
        rows.extend(c.iter().map(|v| *v as f64 * s));
        norms.push(n);
    }
    Normalized { rows, norms, d }
}

fn gather(n: &Normalized, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * n.d);
    for &i in idx {
        out.extend_from_slice(&n.rows[i * n.d..(i + 1) * n.d]);
    }
    out
}

/// For each query row, the candidate with the largest cosine (lowest index on
/// ties) and that cosine.
fn nearest(y: &Normalized, queries: &[usize], s: &Normalized, candidates: &[usize]) -> Vec<(usize, f64)> {
    const BLOCK: usize = 256;
    let d = y.d;
    let sc = gather(s, candidates);
    let mut out = Vec::with_capacity(queries.len());
    for qb in queries.chunks(BLOCK) {
        let yq = gather(y, qb);
        let mut sims = vec![0.0f64; qb.len() * candidates.len()];
        unsafe {
            matrixmultiply::dgemm(
                qb.len(),
                d,
                candidates.len(),
                1.0,
                yq.as_ptr(),
                d as isize,
                1,
                sc.as_ptr(),
                1,
                d as isize,
                0.0,
                sims.as_mut_ptr(),
                candidates.len() as isize,
                1,
            );
        }
        for row in sims.chunks_exact(candidates.len()) {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, &v) in row.iter().enumerate() {
                if v > best.1 {
                    best = (j, v);
                }
            }
            out.push((candidates[best.0], best.1));
        }
    }
    out
}

fn check_pair(f_y: &FeatureMap, f_s: &FeatureMap) -> Result<()> {
    if f_y.d != f_s.d {
        return Err(Error::Domain(format!("feature depths differ: {} vs {}", f_y.d, f_s.d)));
    }
    if f_y.num_cells() == 0 || f_s.num_cells() == 0 {
        return Err(Error::Domain("feature maps must be non-empty".into()));
    }
    Ok(())
}

/// Value and gradient of a nearest-neighbour cosine loss given, for every
/// rendered cell, the style cell it matched.
fn nn_value_grad(y: &Normalized, s: &Normalized, matches: &[(usize, usize, f64)], want_grad: bool) -> (f64, Vec<f64>) {
    let n = matches.len() as f64;
    let d = y.d;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; y.norms.len() * d] } else { Vec::new() };
    for &(i, j, cos) in matches {
        loss += 1.0 - cos;
        if want_grad {
            let g = &mut grad[i * d..(i + 1) * d];
            let sj = &s.rows[j * d..(j + 1) * d];
            let yi = &y.rows[i * d..(i + 1) * d];
            let norm = y.norms[i];
            if norm > COSINE_EPS {
                for k in 0..d {
                    g[k] = -(sj[k] - cos * yi[k]) / (norm * n);
                }
            } else {
                for k in 0..d {
                    g[k] = -sj[k] / (COSINE_EPS * n);
                }
            }
        }
    }
    (loss / n, grad)
}

/// Mean over rendered cells of the cosine distance to the nearest style cell.
pub fn nnfm_loss(f_y: &FeatureMap, f_s: &FeatureMap) -> Result<f64> {
    Ok(nnfm_loss_grad_impl(f_y, f_s, false)?.0)
}

pub fn nnfm_loss_grad(f_y: &FeatureMap, f_s: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    nnfm_loss_grad_impl(f_y, f_s, true)
}

fn nnfm_loss_grad_impl(f_y: &FeatureMap, f_s: &FeatureMap, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check_pair(f_y, f_s)?;
    let y = normalize(f_y);
    let s = normalize(f_s);
    let q: Vec<usize> = (0..f_y.num_cells()).collect();
    let c: Vec<usize> = (0..f_s.num_cells()).collect();
    let matches: Vec<_> = nearest(&y, &q, &s, &c)
        .into_iter()
        .enumerate()
        .map(|(i, (j, cos))| (i, j, cos))
        .collect();
    Ok(nn_value_grad(&y, &s, &matches, want_grad))
}

/// Nearest-neighbour cosine loss where each rendered cell searches only the
/// style region matched to its scene region. Style regions that are empty at
/// feature resolution fall back to the whole style image.
pub fn region_style_loss(
    f_y: &FeatureMap,
    f_s: &FeatureMap,
    scene_map: &RegionMap,
    style_map: &RegionMap,
    matching: &Matching,
) -> Result<f64> {
    Ok(region_style_impl(f_y, f_s, scene_map, style_map, matching, false)?.0)
}

pub fn region_style_loss_grad(
    f_y: &FeatureMap,
    f_s: &FeatureMap,
    scene_map: &RegionMap,
    style_map: &RegionMap,
    matching: &Matching,
) -> Result<(f64, Vec<f64>)> {
    region_style_impl(f_y, f_s, scene_map, style_map, matching, true)
}

fn region_style_impl(
    f_y: &FeatureMap,
    f_s: &FeatureMap,
    scene_map: &RegionMap,
    style_map: &RegionMap,
    matching: &Matching,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check_pair(f_y, f_s)?;
    if (scene_map.width, scene_map.height) != (f_y.w, f_y.h) {
        return Err(Error::Domain(format!(
            "scene map is {}×{}, rendered features are {}×{}",
            scene_map.width, scene_map.height, f_y.w, f_y.h
        )));
    }
    if (style_map.width, style_map.height) != (f_s.w, f_s.h) {
        return Err(Error::Domain(format!(
            "style map is {}×{}, style features are {}×{}",
            style_map.width, style_map.height, f_s.w, f_s.h
        )));
    }
    if scene_map.provenance != Provenance::Scene {
        return Err(Error::Domain("scene map must have scene provenance".into()));
    }
    let scene = RegionFeatureIndex::new(scene_map);
    let style = RegionFeatureIndex::new(style_map);
    let all_style: Vec<usize> = (0..f_s.num_cells()).collect();
    let y = normalize(f_y);
    let s = normalize(f_s);
    let mut matches = Vec::with_capacity(f_y.num_cells());
    for (label, cells) in scene.cells.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let target = matching
            .get(label)
            .ok_or_else(|| Error::Config(format!("scene region {label} has no matched style region")))?;
        if target >= style.cells.len() {
            return Err(Error::Config(format!(
                "scene region {label} is matched to style region {target}, but the style map has {} regions",
                style.cells.len()
            )));
        }
        let candidates = if style.cells[target].is_empty() {
            &all_style
        } else {
            &style.cells[target]
        };
        for (&i, (j, cos)) in cells.iter().zip(nearest(&y, cells, &s, candidates)) {
            matches.push((i, j, cos));
        }
    }
    Ok(nn_value_grad(&y, &s, &matches, want_grad))
}

/// Mean squared difference over all cells and channels.
pub fn content_loss(f_y: &FeatureMap, f_target: &FeatureMap) -> Result<f64> {
    Ok(content_loss_grad(f_y, f_target)?.0)
}

pub fn content_loss_grad(f_y: &FeatureMap, f_target: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    if (f_y.h, f_y.w, f_y.d) != (f_target.h, f_target.w, f_target.d) {
        return Err(Error::Domain(format!(
            "content loss needs equal shapes, got {}×{}×{} and {}×{}×{}",
            f_y.h, f_y.w, f_y.d, f_target.h, f_target.w, f_target.d
        )));
    }
    let n = f_y.data.len() as f64;
    let mut loss = 0.0;
    let grad = f_y
        .data
        .iter()
        .zip(&f_target.data)
        .map(|(a, b)| {
            let r = *a as f64 - *b as f64;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

fn check_ce(k: &[f64], k_hat: &[f64]) -> Result<usize> {
    if k.is_empty() || k.len() != k_hat.len() {
        return Err(Error::Domain(format!(
            "probability and target lengths must match and be non-empty ({} vs {})",
            k.len(),
            k_hat.len()
        )));
    }
    let sum: f64 = k.iter().sum();
    if (sum - 1.0).abs() > 1e-4 || k.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!("k is not a probability vector (sum {sum})")));
    }
    let ones: Vec<usize> = (0..k_hat.len()).filter(|&i| k_hat[i] == 1.0).collect();
    if ones.len() != 1 || k_hat.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Domain("target must be one-hot".into()));
    }
    Ok(ones[0])
}

/// −Σ k̂_c log(k_c + ε).
pub fn segmentation_ce_loss(k: &[f64], k_hat: &[f64]) -> Result<f64> {
    let t = check_ce(k, k_hat)?;
    Ok(-(k[t] + LOG_EPS).ln())
}

/// Gradient of [`segmentation_ce_loss`] with respect to `k`.
pub fn segmentation_ce_grad(k: &[f64], k_hat: &[f64]) -> Result<Vec<f64>> {
    check_ce(k, k_hat)?;
    Ok(k.iter().zip(k_hat).map(|(p, t)| -t / (p + LOG_EPS)).collect())
}

/// Cross-entropy of softmax(`logits`) against class `target`, with its
/// gradient with respect to the logits.
pub fn ce_from_logits(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    let e: Vec<f64> = logits.iter().map(|z| (*z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let k: Vec<f64> = e.iter().map(|v| v / s).collect();
    let kt = k[target];
    let scale = kt / (kt + LOG_EPS);
    let grad = k
        .iter()
        .enumerate()
        .map(|(j, kj)| (-scale * (if j == target { 1.0 } else { 0.0 } - kj)) as f32)
        .collect();
    (-(kt + LOG_EPS).ln(), grad)
}

/// Sum of squared colour errors and its gradient.
pub fn reconstruction_loss(pred: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += (r as f64).powi(2);
            2.0 * r
        })
        .collect();
    (loss, grad)
}

/// Affine colour map `A·c + b` that gives content pixels the style pixels'
/// mean and covariance.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColorTransform {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
}

fn moments(px: &[[f32; 3]]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = px.len() as f64;
    let mut mu = Vector3::zeros();
    for p in px {
        mu += Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
    }
    mu /= n;
    let mut cov = Matrix3::zeros();
    for p in px {
        let d = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) - mu;
        cov += d * d.transpose();
    }
    (mu, cov / n)
}

fn sym_pow(m: &Matrix3<f64>, p: f64) -> Result<Matrix3<f64>> {
    let eig = SymmetricEigen::new(*m);
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::DegeneratePalette(format!(
            "covariance eigenvalues {:?} are not positive after loading",
            eig.eigenvalues.as_slice()
        )));
    }
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.powf(p)));
    Ok(eig.eigenvectors * d * eig.eigenvectors.transpose())
}

impl ColorTransform {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            b: [0.0; 3],
        }
    }

    pub fn fit(content: &[[f32; 3]], style: &[[f32; 3]]) -> Result<Self> {
        if content.len() < 4 || style.len() < 4 {
            return Err(Error::Domain(format!(
                "colour transform needs ≥ 4 pixels per set, got {} and {}",
                content.len(),
                style.len()
            )));
        }
        if content.iter().chain(style).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite pixel value".into()));
        }
        let (mu_c, cov_c) = moments(content);
        let (mu_s, cov_s) = moments(style);
        let load = Matrix3::identity() * COLOR_LOADING;
        let a = sym_pow(&(cov_s + load), 0.5)? * sym_pow(&(cov_c + load), -0.5)?;
        let sv = a.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_COLOR_CONDITION) {
            return Err(Error::DegeneratePalette(format!(
                "colour transform condition number {cond:.3e} exceeds {MAX_COLOR_CONDITION:e}"
            )));
        }
        let b = mu_s - a * mu_c;
        Ok(Self {
            a: [
                [a[(0, 0)], a[(0, 1)], a[(0, 2)]],
                [a[(1, 0)], a[(1, 1)], a[(1, 2)]],
                [a[(2, 0)], a[(2, 1)], a[(2, 2)]],
            ],
            b: [b[0], b[1], b[2]],
        })
    }

    pub fn apply_unclamped(&self, rgb: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (self.a[r][0] * rgb[0] as f64 + self.a[r][1] * rgb[1] as f64 + self.a[r][2] * rgb[2] as f64 + self.b[r])
                as f32;
        }
        out
    }

    pub fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        self.apply_unclamped(rgb).map(|v| v.clamp(0.0, 1.0))
    }

    pub fn apply_image(&self, image: &RgbImage) -> RgbImage {
        let data = image
            .data
            .chunks_exact(3)
            .flat_map(|p| self.apply([p[0], p[1], p[2]]))
            .collect();
        RgbImage {
            width: image.width,
            height: image.height,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StyleTerms {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// λ_C·L_C + λ_S·L_S for one training view and one style, as a function of
/// the rendered image.
pub struct StyleObjective<'a> {
    pub extractor: &'a FeatureExtractor,
    pub style_features: &'a FeatureMap,
    pub style_map: &'a RegionMap,
    pub content_target: &'a FeatureMap,
    pub scene_map: &'a RegionMap,
    pub matching: &'a Matching,
    pub lambda_content: f64,
    pub lambda_style: f64,
}

impl StyleObjective<'_> {
    /// Loss terms and the gradient of the total with respect to the image.
    pub fn evaluate(&self, image: &RgbImage) -> Result<(StyleTerms, Vec<f32>)> {
        let (f_y, tape) = self.extractor.forward_tape(image)?;
        let (lc, gc) = content_loss_grad(&f_y, self.content_target)?;
        let (ls, gs) = region_style_loss_grad(&f_y, self.style_features, self.scene_map, self.style_map, self.matching)?;
        let d_feat: Vec<f32> = gc
            .iter()
            .zip(&gs)
            .map(|(c, s)| (self.lambda_content * c + self.lambda_style * s) as f32)
            .collect();
        let d_image = self.extractor.backward(&tape, &d_feat)?;
        let terms = StyleTerms {
            content: lc,
            style: ls,
            total: self.lambda_content * lc + self.lambda_style * ls,
        };
        Ok((terms, d_image))
    }
}

const PHASE1_CHUNK: usize = 4096;

fn eval_sampling(sampling: &SamplingConfig) -> SamplingConfig {
    SamplingConfig {
        stratified: false,
        ..*sampling
    }
}

fn check_image_grad(camera: &Camera, d_image: &[f32]) -> Result<()> {
    if d_image.len() != camera.num_pixels() * 3 {
        return Err(Error::Domain(format!(
            "image gradient has {} values for a {}×{} view",
            d_image.len(),
            camera.width,
            camera.height
        )));
    }
    Ok(())
}

/// Full-image loss with patchwise backpropagation.
///
/// The view is rendered once without a tape, `objective` maps the image to a
/// loss and its per-pixel gradient, then the view is re-rendered in
/// `patch_size`² tiles whose tapes consume the cached gradient. Sampling is
/// deterministic so both renders see identical samples.
pub fn deferred_backprop_step<T>(
    model: &RadianceModel,
    camera: &Camera,
    style_index: u32,
    sampling: &SamplingConfig,
    patch_size: usize,
    groups: &GroupSet,
    objective: impl FnOnce(&RgbImage) -> Result<(T, Vec<f32>)>,
) -> Result<(T, ModelGrads)> {
    if patch_size == 0 {
        return Err(Error::Domain("patch_size must be ≥ 1".into()));
    }
    camera.validate()?;
    model.check_style(style_index)?;
    let sampling = eval_sampling(sampling);
    let rays = camera_rays(camera);
    let rgb: Vec<f32> = rays
        .par_chunks(PHASE1_CHUNK)
        .map(|chunk| render_rays(model, chunk, style_index, &sampling, false, None).map(|b| b.rgb))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let image = RgbImage::new(camera.width, camera.height, rgb)?;
    let (value, d_image) = objective(&image)?;
    check_image_grad(camera, &d_image)?;

    let mut grads = ModelGrads::zeros_like(model);
    let mut covered = vec![0u8; camera.num_pixels()];
    for y0 in (0..camera.height).step_by(patch_size) {
        for x0 in (0..camera.width).step_by(patch_size) {
            let (x1, y1) = ((x0 + patch_size).min(camera.width), (y0 + patch_size).min(camera.height));
            let mut patch_rays = Vec::with_capacity((x1 - x0) * (y1 - y0));
            let mut d_rgb = Vec::with_capacity(patch_rays.capacity() * 3);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * camera.width + x;
                    covered[p] += 1;
                    patch_rays.push(rays[p]);
                    d_rgb.extend_from_slice(&d_image[p * 3..p * 3 + 3]);
                }
            }
            if d_rgb.iter().all(|g| *g == 0.0) {
                continue;
            }
            let (_, tape) = render_rays_tape(model, &patch_rays, style_index, &sampling, false, None, groups)?;
            backward_rays(model, &tape, &d_rgb, None, groups, &mut grads)?;
        }
    }
    if let Some(p) = covered.iter().position(|c| *c != 1) {
        return Err(Error::Internal(format!(
            "patch grid visited pixel {p} {} times",
            covered[p]
        )));
    }
    Ok((value, grads))
}

/// Same contract as [`deferred_backprop_step`] but with one differentiable
/// render of the whole view.
pub fn direct_backprop_step<T>(
    model: &RadianceModel,
    camera: &Camera,
    style_index: u32,
    sampling: &SamplingConfig,
    groups: &GroupSet,
    objective: impl FnOnce(&RgbImage) -> Result<(T, Vec<f32>)>,
) -> Result<(T, ModelGrads)> {
    camera.validate()?;
    model.check_style(style_index)?;
    let sampling = eval_sampling(sampling);
    let rays = camera_rays(camera);
    let (batch, tape) = render_rays_tape(model, &rays, style_index, &sampling, false, None, groups)?;
    let image = RgbImage::new(camera.width, camera.height, batch.rgb)?;
    let (value, d_image) = objective(&image)?;
    check_image_grad(camera, &d_image)?;
    let mut grads = ModelGrads::zeros_like(model);
    backward_rays(model, &tape, &d_image, None, groups, &mut grads)?;
    Ok((value, grads))
}
