//! Measurements on trained models: holdout PSNR, region accuracy, cross-view
//! region agreement, density probes and hash-slot variation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field_model::RadianceModel;
use crate::hash_encoding::{hash_index, HashGridConfig};
use crate::imageio::{psnr, RgbImage};
use crate::segmentation::RegionMap;
use crate::style_losses::ColorTransform;
use crate::volume_renderer::{render_view, Camera, RenderedView, SamplingConfig};

/// Mean PSNR of renders against (optionally colour-transformed) ground truth.
pub fn mean_psnr(
    model: &RadianceModel,
    cameras: &[Camera],
    images: &[RgbImage],
    style_index: u32,
    transform: Option<&ColorTransform>,
    sampling: &SamplingConfig,
    chunk_size: usize,
) -> Result<f64> {
    if cameras.is_empty() || cameras.len() != images.len() {
        return Err(Error::Domain("need one image per camera and at least one camera".into()));
    }
    let mut sum = 0.0;
    for (cam, img) in cameras.iter().zip(images) {
        let view = render_view(model, cam, style_index, chunk_size, sampling)?;
        let target = match transform {
            Some(t) => t.apply_image(img),
            None => img.clone(),
        };
        let pred: Vec<f32> = view.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        sum += psnr(&pred, &target.data);
    }
    Ok(sum / cameras.len() as f64)
}

/// Fraction of labelled pixels whose rendered argmax region equals the
/// reference label.
pub fn region_accuracy(
    model: &RadianceModel,
    cameras: &[Camera],
    maps: &[RegionMap],
    sampling: &SamplingConfig,
    chunk_size: usize,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (cam, map) in cameras.iter().zip(maps) {
        let labels = render_view(model, cam, 0, chunk_size, sampling)?.argmax_labels();
        for (a, b) in labels.iter().zip(&map.labels) {
            if *b >= 0 {
                total += 1;
                hit += usize::from(a == b);
            }
        }
    }
    if total == 0 {
        return Err(Error::Domain("reference maps contain no labelled pixels".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Cross-view agreement of argmax region maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Consistency {
    /// Pixels of view A that are opaque, project inside view B onto an opaque
    /// pixel at matching depth.
    pub compared: usize,
    pub agreeing: usize,
}

impl Consistency {
    pub fn fraction(&self) -> f64 {
        if self.compared == 0 {
            0.0
        } else {
            self.agreeing as f64 / self.compared as f64
        }
    }
}

/// Reprojects every opaque pixel of `a` into `b` using the rendered depth and
/// compares labels where `b` sees the same surface.
pub fn view_consistency(a: (&Camera, &RenderedView), b: (&Camera, &RenderedView), opacity: f32, depth_tolerance: f32) -> Consistency {
    let (cam_a, view_a) = a;
    let (cam_b, view_b) = b;
    let la = view_a.argmax_labels();
    let lb = view_b.argmax_labels();
    let mut out = Consistency {
        compared: 0,
        agreeing: 0,
    };
    for y in 0..cam_a.height {
        for x in 0..cam_a.width {
            let i = y * cam_a.width + x;
            if view_a.opacity[i] < opacity {
                continue;
            }
            // depth is the expected ray distance; normalize by opacity
            let p = cam_a.ray(x, y).at(view_a.depth[i] / view_a.opacity[i]);
            let Some(([u, v], _)) = cam_b.project(p) else { continue };
            let (ub, vb) = (u.round(), v.round());
            if ub < 0.0 || vb < 0.0 || ub >= cam_b.width as f32 || vb >= cam_b.height as f32 {
                continue;
            }
            let j = vb as usize * cam_b.width + ub as usize;
            if view_b.opacity[j] < opacity {
                continue;
            }
            let seen = view_b.depth[j] / view_b.opacity[j];
            let dist = distance(p, cam_b.origin());
            if (seen - dist).abs() > depth_tolerance * dist {
                continue;
            }
            out.compared += 1;
            out.agreeing += usize::from(la[i] == lb[j]);
        }
    }
    out
}

fn distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Seeded uniform points inside the model's box.
pub fn probe_points(model: &RadianceModel, n: usize, seed: u64) -> Vec<[f32; 3]> {
    let b = model.bounding_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [0, 1, 2].map(|a| rng.gen_range(b.min[a]..=b.max[a])))
        .collect()
}

/// Fraction of `n` random finest-level voxels whose slot differs between
/// style 0 and style 1.
pub fn slot_variation(config: &HashGridConfig, n: usize, seed: u64) -> Result<f64> {
    if config.num_styles < 2 {
        return Err(Error::Domain("slot variation needs at least two styles".into()));
    }
    let res = config.level_resolution(config.num_levels - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut changed = 0usize;
    for _ in 0..n {
        let v = [0; 3].map(|_: u32| rng.gen_range(0..=res));
        if hash_index(v, 0, config)? != hash_index(v, 1, config)? {
            changed += 1;
        }
    }
    Ok(changed as f64 / n as f64)
}

/// Mean absolute difference between two images.
pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Domain("images differ in size".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::tests::tiny_config;

    #[test]
    fn slot_variation_needs_two_styles() {
        let mut c = HashGridConfig::default();
        assert!(slot_variation(&c, 10, 0).is_err());
        c.num_styles = 2;
        assert!(slot_variation(&c, 1000, 0).unwrap() > 0.95);
    }

    #[test]
    fn probes_stay_in_box() {
        let m = RadianceModel::new(tiny_config(1, 2), 0).unwrap();
        let b = m.bounding_box();
        assert!(probe_points(&m, 100, 3).into_iter().all(|p| b.contains(p)));
    }
}
