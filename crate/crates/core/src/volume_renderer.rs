//! Cameras, ray sampling and transmittance-weighted compositing.
//!
//! Cameras follow the OpenGL convention: the camera looks down −z, +y is up,
//! and rays pass through pixel centres. Region logits are integrated raw and
//! the softmax is applied to the integrated vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{FieldTape, GroupSet, ModelGrads, RadianceModel};
use crate::hash_encoding::Aabb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    /// Camera-to-world rigid transform, rows of a 3×4 matrix.
    pub c2w: [[f32; 4]; 3],
    pub near: f32,
    pub far: f32,
}

fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f32; 3]) -> [f32; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("camera resolution must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Domain("focal lengths must be positive".into()));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::Domain(format!(
                "camera needs 0 ≤ near < far, got {} and {}",
                self.near, self.far
            )));
        }
        let r = |i: usize| [self.c2w[0][i], self.c2w[1][i], self.c2w[2][i]];
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r(i), r(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-5 {
                    return Err(Error::Domain("camera rotation is not orthonormal".into()));
                }
            }
        }
        if self.c2w.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("camera pose is not finite".into()));
        }
        Ok(())
    }

    /// Pinhole camera at `eye` looking at `target`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f32; 3],
        target: [f32; 3],
        up: [f32; 3],
        width: usize,
        height: usize,
        focal: f32,
        near: f32,
        far: f32,
    ) -> Self {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let c2w = [
            [right[0], true_up[0], back[0], eye[0]],
            [right[1], true_up[1], back[1], eye[1]],
            [right[2], true_up[2], back[2], eye[2]],
        ];
        Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            c2w,
            near,
            far,
        }
    }

    pub fn origin(&self) -> [f32; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Ray through the centre of pixel `(x, y)`, limited to `[near, far]`.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        let d = [
            (x as f32 + 0.5 - self.cx) / self.fx,
            -(y as f32 + 0.5 - self.cy) / self.fy,
            -1.0,
        ];
        let m = &self.c2w;
        let world = normalize([
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]);
        // near/far are measured along the optical axis
        let axial = -dot(world, [m[0][2], m[1][2], m[2][2]]);
        Ray {
            origin: self.origin(),
            direction: world,
            t_near: self.near / axial,
            t_far: self.far / axial,
        }
    }

    /// Continuous pixel coordinates (pixel centres at integers) and depth
    /// along the optical axis; `None` behind the camera.
    pub fn project(&self, p: [f32; 3]) -> Option<([f32; 2], f32)> {
        let d = sub(p, self.origin());
        let m = &self.c2w;
        let col = |i: usize| [m[0][i], m[1][i], m[2][i]];
        let xc = dot(d, col(0));
        let yc = dot(d, col(1));
        let zc = dot(d, col(2));
        if zc >= 0.0 {
            return None;
        }
        let depth = -zc;
        let u = self.fx * xc / depth + self.cx - 0.5;
        let v = self.cy - self.fy * yc / depth - 0.5;
        Some(([u, v], depth))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f32; 3],
    pub direction: [f32; 3],
    pub t_near: f32,
    pub t_far: f32,
}

impl Ray {
    pub fn new(origin: [f32; 3], direction: [f32; 3], t_near: f32, t_far: f32) -> Result<Self> {
        let r = Self {
            origin,
            direction,
            t_near,
            t_far,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if ((dot(self.direction, self.direction).sqrt()) - 1.0).abs() > 1e-6 {
            return Err(Error::Domain("ray direction must be unit length".into()));
        }
        if !(self.t_near < self.t_far) {
            return Err(Error::Domain(format!(
                "degenerate ray interval [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: f32) -> [f32; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// The part of the ray inside `bbox`, or `None` if it misses.
    pub fn clipped(&self, bbox: &Aabb) -> Option<Ray> {
        let (a, b) = bbox.intersect(self.origin, self.direction)?;
        let t_near = a.max(self.t_near);
        let t_far = b.min(self.t_far);
        (t_near < t_far).then_some(Ray {
            t_near,
            t_far,
            ..*self
        })
    }
}

/// One sample along a ray. `delta` is the length of ray the sample stands
/// for: the distance between the midpoints to its neighbours, with the ray
/// ends closing the first and last interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub t: f32,
    pub delta: f32,
    pub position: [f32; 3],
}

fn sample_with(ray: &Ray, n: usize, mut jitter: Option<&mut ChaCha8Rng>) -> Vec<RaySample> {
    let span = ray.t_far - ray.t_near;
    let bin = span / n as f32;
    let ts: Vec<f32> = (0..n)
        .map(|i| {
            let u = match jitter.as_deref_mut() {
                Some(rng) => rng.gen::<f32>(),
                None => 0.5,
            };
            ray.t_near + (i as f32 + u) * bin
        })
        .collect();
    (0..n)
        .map(|i| {
            let lo = if i == 0 { ray.t_near } else { 0.5 * (ts[i - 1] + ts[i]) };
            let hi = if i + 1 == n { ray.t_far } else { 0.5 * (ts[i] + ts[i + 1]) };
            RaySample {
                t: ts[i],
                delta: hi - lo,
                position: ray.at(ts[i]),
            }
        })
        .collect()
}

/// `n_samples` positions along the ray, one per equal bin: at the bin
/// midpoint, or jittered uniformly within the bin when `stratified`.
pub fn sample_ray(ray: &Ray, n_samples: usize, stratified: bool, rng_seed: u64) -> Result<Vec<RaySample>> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be ≥ 1".into()));
    }
    ray.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut s = sample_with(ray, n_samples, stratified.then_some(&mut rng));
    // jitter may produce equal neighbours in f32 on very short rays
    for i in 1..s.len() {
        if s[i].t <= s[i - 1].t {
            s[i].t = f32::from_bits(s[i - 1].t.to_bits() + 1);
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPixel {
    pub rgb: [f32; 3],
    pub region_probs: Vec<f32>,
    pub opacity: f32,
    /// Weight-averaged sample distance (0 where nothing was hit).
    pub depth: f32,
}

/// Input to [`integrate`]: per sample `t`, `delta`, `sigma`, rgb and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadedSample {
    pub t: f32,
    pub delta: f32,
    pub sigma: f32,
    pub rgb: [f32; 3],
    pub logits: Vec<f32>,
}

/// Compositing weights `w_i = T_i (1 − exp(−σ_i δ_i))`.
pub fn weights(sigma: &[f32], delta: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(sigma.len());
    let mut log_t = 0.0f32;
    for (s, d) in sigma.iter().zip(delta) {
        let tau = s * d;
        out.push(log_t.exp() * -(-tau).exp_m1());
        log_t -= tau;
    }
    out
}

pub fn softmax(z: &[f32]) -> Vec<f32> {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s) as f32).collect()
}

/// Composites one ray over a black background.
pub fn integrate(samples: &[ShadedSample], num_regions: usize) -> Result<RenderedPixel> {
    for w in samples.windows(2) {
        if !(w[1].t > w[0].t) {
            return Err(Error::Domain(format!("sample t values not increasing ({} then {})", w[0].t, w[1].t)));
        }
    }
    for s in samples {
        if !(s.sigma >= 0.0) {
            return Err(Error::Domain(format!("negative or NaN density {}", s.sigma)));
        }
        if !(s.delta >= 0.0) {
            return Err(Error::Domain(format!("negative interval length {}", s.delta)));
        }
        if s.logits.len() != num_regions {
            return Err(Error::Domain("logit vector length differs from region count".into()));
        }
    }
    let sigma: Vec<f32> = samples.iter().map(|s| s.sigma).collect();
    let delta: Vec<f32> = samples.iter().map(|s| s.delta).collect();
    let w = weights(&sigma, &delta);
    let mut rgb = [0.0f32; 3];
    let mut raw = vec![0.0f32; num_regions];
    let mut opacity = 0.0;
    let mut depth = 0.0;
    for (wi, s) in w.iter().zip(samples) {
        for c in 0..3 {
            rgb[c] += wi * s.rgb[c];
        }
        raw.iter_mut().zip(&s.logits).for_each(|(a, b)| *a += wi * b);
        opacity += wi;
        depth += wi * s.t;
    }
    Ok(RenderedPixel {
        rgb,
        region_probs: softmax(&raw),
        opacity: opacity.min(1.0),
        depth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub samples_per_ray: usize,
    pub stratified: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 128,
            stratified: false,
        }
    }
}

/// Batched ray outputs. `logits` holds the integrated raw region vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub rgb: Vec<f32>,
    pub logits: Vec<f32>,
    pub opacity: Vec<f32>,
    pub depth: Vec<f32>,
}

/// Everything the backward pass over a ray batch needs.
pub struct RayTape {
    field: FieldTape,
    ranges: Vec<(usize, usize)>,
    delta: Vec<f32>,
    sigma: Vec<f32>,
    rgb: Vec<f32>,
    logits: Vec<f32>,
    num_regions: usize,
}

struct Prepared {
    positions: Vec<[f32; 3]>,
    t: Vec<f32>,
    delta: Vec<f32>,
    ranges: Vec<(usize, usize)>,
}

fn prepare(rays: &[Ray], bbox: &Aabb, sampling: &SamplingConfig, seed: Option<u64>) -> Prepared {
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let n = sampling.samples_per_ray;
    let mut p = Prepared {
        positions: Vec::with_capacity(rays.len() * n),
        t: Vec::with_capacity(rays.len() * n),
        delta: Vec::with_capacity(rays.len() * n),
        ranges: Vec::with_capacity(rays.len()),
    };
    for ray in rays {
        let start = p.positions.len();
        if let Some(clipped) = ray.clipped(bbox) {
            let jitter = if sampling.stratified { rng.as_mut() } else { None };
            for s in sample_with(&clipped, n, jitter) {
                // f32 rounding can leave a point a hair outside the box
                p.positions.push(bbox.clamp(s.position));
                p.t.push(s.t);
                p.delta.push(s.delta);
            }
        }
        p.ranges.push((start, p.positions.len()));
    }
    p
}

fn composite(
    prep: &Prepared,
    sigma: &[f32],
    rgb: &[f32],
    logits: &[f32],
    c: usize,
) -> RayBatch {
    let nr = prep.ranges.len();
    let mut out = RayBatch {
        rgb: vec![0.0; nr * 3],
        logits: vec![0.0; if logits.is_empty() { 0 } else { nr * c }],
        opacity: vec![0.0; nr],
        depth: vec![0.0; nr],
    };
    for (r, &(a, b)) in prep.ranges.iter().enumerate() {
        let w = weights(&sigma[a..b], &prep.delta[a..b]);
        for (k, wi) in w.iter().enumerate() {
            let i = a + k;
            for ch in 0..3 {
                out.rgb[r * 3 + ch] += wi * rgb[i * 3 + ch];
            }
            if !logits.is_empty() {
                for q in 0..c {
                    out.logits[r * c + q] += wi * logits[i * c + q];
                }
            }
            out.opacity[r] += wi;
            out.depth[r] += wi * prep.t[i];
        }
        out.opacity[r] = out.opacity[r].min(1.0);
    }
    out
}

/// Renders a batch of rays without recording derivatives. `seed` drives the
/// stratified jitter when enabled.
pub fn render_rays(
    model: &RadianceModel,
    rays: &[Ray],
    style_index: u32,
    sampling: &SamplingConfig,
    want_logits: bool,
    seed: Option<u64>,
) -> Result<RayBatch> {
    let prep = prepare(rays, &model.bounding_box(), sampling, seed);
    let out = model.forward(&prep.positions, style_index, want_logits)?;
    Ok(composite(&prep, &out.density, &out.rgb, &out.logits, model.num_scene_regions()))
}

/// Renders a batch of rays and keeps what [`backward_rays`] needs.
pub fn render_rays_tape(
    model: &RadianceModel,
    rays: &[Ray],
    style_index: u32,
    sampling: &SamplingConfig,
    want_logits: bool,
    seed: Option<u64>,
    groups: &GroupSet,
) -> Result<(RayBatch, RayTape)> {
    let prep = prepare(rays, &model.bounding_box(), sampling, seed);
    let (out, field) = model.forward_tape(&prep.positions, style_index, want_logits, groups)?;
    let c = model.num_scene_regions();
    let batch = composite(&prep, &out.density, &out.rgb, &out.logits, c);
    let tape = RayTape {
        field,
        ranges: prep.ranges,
        delta: prep.delta,
        sigma: out.density,
        rgb: out.rgb,
        logits: out.logits,
        num_regions: c,
    };
    Ok((batch, tape))
}

/// Propagates per-ray gradients of the composited colour and of the raw
/// integrated logits back into the field parameters.
pub fn backward_rays(
    model: &RadianceModel,
    tape: &RayTape,
    d_rgb: &[f32],
    d_logits: Option<&[f32]>,
    groups: &GroupSet,
    grads: &mut ModelGrads,
) -> Result<()> {
    let c = tape.num_regions;
    let ns = tape.sigma.len();
    let has_logits = d_logits.is_some() && !tape.logits.is_empty();
    let mut d_sigma = vec![0.0f32; ns];
    let mut d_point_rgb = vec![0.0f32; ns * 3];
    let mut d_point_logits = vec![0.0f32; if has_logits { ns * c } else { 0 }];
    let mut g = vec![0.0f32; 3 + if has_logits { c } else { 0 }];
    let mut suffix = vec![0.0f32; g.len()];
    for (r, &(a, b)) in tape.ranges.iter().enumerate() {
        if a == b {
            continue;
        }
        g[..3].copy_from_slice(&d_rgb[r * 3..r * 3 + 3]);
        if has_logits {
            g[3..].copy_from_slice(&d_logits.unwrap()[r * c..(r + 1) * c]);
        }
        let w = weights(&tape.sigma[a..b], &tape.delta[a..b]);
        // transmittance after each sample
        let mut t_after = Vec::with_capacity(b - a);
        let mut log_t = 0.0f32;
        for i in a..b {
            log_t -= tape.sigma[i] * tape.delta[i];
            t_after.push(log_t.exp());
        }
        suffix.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..b - a).rev() {
            let i = a + k;
            let value = |q: usize| -> f32 {
                if q < 3 {
                    tape.rgb[i * 3 + q]
                } else {
                    tape.logits[i * c + q - 3]
                }
            };
            let mut gc = 0.0f32;
            let mut gs = 0.0f32;
            for q in 0..g.len() {
                gc += g[q] * value(q);
                gs += g[q] * suffix[q];
            }
            d_sigma[i] = tape.delta[i] * (t_after[k] * gc - gs);
            for q in 0..3 {
                d_point_rgb[i * 3 + q] = w[k] * g[q];
            }
            if has_logits {
                for q in 0..c {
                    d_point_logits[i * c + q] = w[k] * g[3 + q];
                }
            }
            for q in 0..g.len() {
                suffix[q] += w[k] * value(q);
            }
        }
    }
    model.backward(
        &tape.field,
        Some(&d_sigma),
        &d_point_rgb,
        has_logits.then_some(d_point_logits.as_slice()),
        groups,
        grads,
    )
}

/// Full-resolution render of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// `[h × w × 3]`
    pub rgb: Vec<f32>,
    /// `[h × w × C]` softmax probabilities.
    pub region_probs: Vec<f32>,
    pub num_regions: usize,
    pub opacity: Vec<f32>,
    pub depth: Vec<f32>,
}

impl RenderedView {
    pub fn argmax_labels(&self) -> Vec<i32> {
        self.region_probs
            .chunks(self.num_regions)
            .map(|p| {
                let mut best = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = i;
                    }
                }
                best as i32
            })
            .collect()
    }
}

/// Upper bound on samples evaluated at once, guarding against runaway chunks.
pub const MAX_SAMPLES_PER_CHUNK: usize = 1 << 24;

pub fn camera_rays(camera: &Camera) -> Vec<Ray> {
    (0..camera.height)
        .flat_map(|y| (0..camera.width).map(move |x| camera.ray(x, y)))
        .collect()
}

/// Renders every pixel of `camera` in chunks of `chunk_size` rays. The
/// result does not depend on the chunk size.
pub fn render_view(
    model: &RadianceModel,
    camera: &Camera,
    style_index: u32,
    chunk_size: usize,
    sampling: &SamplingConfig,
) -> Result<RenderedView> {
    camera.validate()?;
    model.check_style(style_index)?;
    if chunk_size == 0 {
        return Err(Error::Domain("chunk_size must be ≥ 1".into()));
    }
    if chunk_size.saturating_mul(sampling.samples_per_ray) > MAX_SAMPLES_PER_CHUNK {
        return Err(Error::Resource(format!(
            "chunk of {chunk_size} rays × {} samples exceeds the {MAX_SAMPLES_PER_CHUNK}-sample limit",
            sampling.samples_per_ray
        )));
    }
    let eval = SamplingConfig {
        stratified: false,
        ..*sampling
    };
    let rays = camera_rays(camera);
    let chunks: Vec<RayBatch> = rays
        .par_chunks(chunk_size)
        .map(|chunk| render_rays(model, chunk, style_index, &eval, true, None))
        .collect::<Result<_>>()?;
    let c = model.num_scene_regions();
    let mut view = RenderedView {
        width: camera.width,
        height: camera.height,
        rgb: Vec::with_capacity(rays.len() * 3),
        region_probs: Vec::with_capacity(rays.len() * c),
        num_regions: c,
        opacity: Vec::with_capacity(rays.len()),
        depth: Vec::with_capacity(rays.len()),
    };
    for b in chunks {
        view.rgb.extend_from_slice(&b.rgb);
        for z in b.logits.chunks(c) {
            view.region_probs.extend(softmax(z));
        }
        view.opacity.extend_from_slice(&b.opacity);
        view.depth.extend_from_slice(&b.depth);
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::{trainable_parameters, ModelConfig, Stage};
    use crate::hash_encoding::HashGridConfig;

    fn unit_ray() -> Ray {
        Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap()
    }

    #[test]
    fn single_midpoint_sample() {
        let s = sample_ray(&unit_ray(), 1, false, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].t, 0.5);
        assert_eq!(s[0].delta, 1.0);
    }

    #[test]
    fn stratified_samples_increase_and_repeat() {
        for seed in 0..20 {
            let a = sample_ray(&unit_ray(), 64, true, seed).unwrap();
            assert!(a.windows(2).all(|w| w[1].t > w[0].t));
            assert!(a.iter().all(|s| s.t >= 0.0 && s.t <= 1.0));
            let total: f32 = a.iter().map(|s| s.delta).sum();
            assert!((total - 1.0).abs() < 1e-5);
            assert_eq!(a, sample_ray(&unit_ray(), 64, true, seed).unwrap());
        }
        let bad = Ray {
            t_near: 1.0,
            t_far: 1.0,
            ..unit_ray()
        };
        assert!(matches!(sample_ray(&bad, 4, false, 0), Err(Error::Domain(_))));
        assert!(sample_ray(&unit_ray(), 0, false, 0).is_err());
    }

    fn shaded(t: f32, delta: f32, sigma: f32, rgb: [f32; 3]) -> ShadedSample {
        ShadedSample {
            t,
            delta,
            sigma,
            rgb,
            logits: vec![0.3, -0.2, 1.0, 0.0],
        }
    }

    #[test]
    fn zero_density_composites_to_black() {
        let s: Vec<_> = (0..8).map(|i| shaded(i as f32, 1.0, 0.0, [1.0, 0.5, 0.2])).collect();
        let p = integrate(&s, 4).unwrap();
        assert_eq!(p.rgb, [0.0; 3]);
        assert_eq!(p.opacity, 0.0);
        assert!(p.region_probs.iter().all(|v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let s = vec![shaded(0.0, 1.0, 1e6, [0.9, 0.1, 0.4]), shaded(1.0, 1.0, 3.0, [0.0, 1.0, 0.0])];
        let p = integrate(&s, 4).unwrap();
        for c in 0..3 {
            assert!((p.rgb[c] - s[0].rgb[c]).abs() < 1e-4);
        }
        assert!((p.opacity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn integrate_rejects_bad_input() {
        let s = vec![shaded(1.0, 1.0, 1.0, [0.0; 3]), shaded(1.0, 1.0, 1.0, [0.0; 3])];
        assert!(matches!(integrate(&s, 4), Err(Error::Domain(_))));
        let s = vec![shaded(0.0, 1.0, -1.0, [0.0; 3])];
        assert!(matches!(integrate(&s, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_density_insertion_is_invisible() {
        let base: Vec<_> = (0..6)
            .map(|i| shaded(i as f32, 1.0, 0.3 * i as f32, [0.1 * i as f32, 0.5, 0.9]))
            .collect();
        let p = integrate(&base, 4).unwrap();
        let mut with = base.clone();
        with.insert(3, shaded(2.5, 0.7, 0.0, [1.0, 1.0, 1.0]));
        let q = integrate(&with, 4).unwrap();
        for c in 0..3 {
            assert!((p.rgb[c] - q.rgb[c]).abs() <= 1e-6);
        }
    }

    #[test]
    fn camera_projection_inverts_rays() {
        let cam = Camera::look_at([0.3, 0.2, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 64, 48, 80.0, 0.5, 6.0);
        cam.validate().unwrap();
        for (x, y) in [(0, 0), (10, 20), (63, 47)] {
            let r = cam.ray(x, y);
            let (uv, _) = cam.project(r.at(2.0)).unwrap();
            assert!((uv[0] - x as f32).abs() < 1e-3 && (uv[1] - y as f32).abs() < 1e-3, "{uv:?}");
        }
        let centre = cam.ray(32, 24);
        assert!(centre.direction[2] < -0.9);
    }

    fn tiny_model() -> RadianceModel {
        let grid = HashGridConfig {
            num_levels: 4,
            base_resolution: 4,
            per_level_scale: 1.5,
            table_size: 1 << 10,
            ..Default::default()
        };
        let cfg = ModelConfig {
            geometry_grid: grid.clone(),
            appearance_grid: grid,
            geometry_hidden: vec![16],
            geometry_feature_dim: 2,
            appearance_hidden: vec![16],
            segmentation_hidden: vec![16],
            num_scene_regions: 3,
            density_clamp: 15.0,
        };
        let mut m = RadianceModel::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.geometry_grid.table_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m.appearance_grid.table_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m
    }

    #[test]
    fn render_is_chunk_invariant_and_normalized() {
        let model = tiny_model();
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 16, 12, 20.0, 0.5, 6.0);
        let s = SamplingConfig {
            samples_per_ray: 16,
            stratified: false,
        };
        let a = render_view(&model, &cam, 0, 7, &s).unwrap();
        let b = render_view(&model, &cam, 0, 1000, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.rgb.iter().all(|v| v.is_finite()));
        for p in a.region_probs.chunks(3) {
            assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        }
        assert!(matches!(render_view(&model, &cam, 0, 0, &s), Err(Error::Domain(_))));
        assert!(matches!(
            render_view(&model, &cam, 0, 1 << 22, &s),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn ray_backward_matches_finite_differences() {
        let model = tiny_model();
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 4, 4, 4.0, 0.5, 6.0);
        let rays = camera_rays(&cam);
        let s = SamplingConfig {
            samples_per_ray: 12,
            stratified: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gr: Vec<f32> = (0..rays.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gl: Vec<f32> = (0..rays.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |m: &RadianceModel| -> f64 {
            let b = render_rays(m, &rays, 0, &s, true, None).unwrap();
            b.rgb.iter().zip(&gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
                + b.logits.iter().zip(&gl).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        let groups = trainable_parameters(Stage::Reconstruction);
        let (_, tape) = render_rays_tape(&model, &rays, 0, &s, true, None, &groups).unwrap();
        let mut grads = ModelGrads::zeros_like(&model);
        backward_rays(&model, &tape, &gr, Some(&gl), &groups, &mut grads).unwrap();

        let mut m = model.clone();
        let h = 2e-3f32;
        let table = grads.geometry_grid.clone();
        let mut idx: Vec<usize> = (0..table.len()).collect();
        idx.sort_by(|a, b| table[*b].abs().partial_cmp(&table[*a].abs()).unwrap());
        for &k in idx.iter().take(5) {
            let orig = m.geometry_grid.table()[k];
            m.geometry_grid.table_mut()[k] = orig + h;
            let lp = objective(&m);
            m.geometry_grid.table_mut()[k] = orig - h;
            let lm = objective(&m);
            m.geometry_grid.table_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let err = (fd - table[k] as f64).abs() / fd.abs().max(1e-3);
            assert!(err < 2e-2, "geometry slot {k}: fd {fd} vs {}", table[k]);
        }
    }
}
