//! Analytic three-region scene used as a test and demo fixture.
//!
//! A textured back wall (region 0), a red sphere (region 1) and a green box
//! (region 2) inside `[-1, 1]³`, seen by a 5×4 grid of cameras at `z = 3`.
//! Images and region maps come from exact ray casting.

use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::hash_encoding::Aabb;
use crate::imageio::RgbImage;
use crate::segmentation::{Provenance, RegionMap};
use crate::volume_renderer::{Camera, Ray};

pub const WALL_Z: f32 = -0.9;
pub const SPHERE_CENTER: [f32; 3] = [-0.35, -0.15, 0.1];
pub const SPHERE_RADIUS: f32 = 0.3;
pub const BOX_CENTER: [f32; 3] = [0.35, 0.15, -0.25];
pub const BOX_HALF: f32 = 0.25;
pub const NUM_REGIONS: usize = 3;
/// Interior cameras of the grid, kept out of training.
pub const HOLDOUT_VIEWS: [usize; 3] = [6, 8, 13];

const LIGHT: [f32; 3] = [0.40824829, 0.40824829, 0.81649658];

#[derive(Clone, Debug)]
pub struct ToyScene {
    pub resolution: usize,
    pub focal: f32,
    pub near: f32,
    pub far: f32,
}

impl Default for ToyScene {
    fn default() -> Self {
        Self {
            resolution: 64,
            focal: 181.5,
            near: 2.0,
            far: 5.0,
        }
    }
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn lambert(n: [f32; 3]) -> f32 {
    0.35 + 0.65 * dot(n, LIGHT).max(0.0)
}

/// Nearest surface hit: (distance, region, colour).
pub fn cast(ray: &Ray) -> Option<(f32, usize, [f32; 3])> {
    let o = ray.origin;
    let d = ray.direction;
    let mut best: Option<(f32, usize, [f32; 3])> = None;
    let mut offer = |t: f32, region: usize, rgb: [f32; 3]| {
        if t > 1e-4 && best.map_or(true, |b| t < b.0) {
            best = Some((t, region, rgb));
        }
    };

    if d[2].abs() > 1e-8 {
        let t = (WALL_Z - o[2]) / d[2];
        let p = [o[0] + t * d[0], o[1] + t * d[1]];
        if p[0].abs() <= 1.0 && p[1].abs() <= 1.0 {
            let v = 0.08 * (3.0 * p[0]).sin() * (3.0 * p[1]).cos();
            let band = if ((p[0] + 1.0) * 2.5).floor() as i32 % 2 == 0 { 0.0 } else { 0.06 };
            offer(t, 0, [0.80 + v - band, 0.76 + v, 0.62 - v + band]);
        }
    }

    let oc = [o[0] - SPHERE_CENTER[0], o[1] - SPHERE_CENTER[1], o[2] - SPHERE_CENTER[2]];
    let b = dot(oc, d);
    let disc = b * b - (dot(oc, oc) - SPHERE_RADIUS * SPHERE_RADIUS);
    if disc >= 0.0 {
        let t = -b - disc.sqrt();
        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        let n = [
            (p[0] - SPHERE_CENTER[0]) / SPHERE_RADIUS,
            (p[1] - SPHERE_CENTER[1]) / SPHERE_RADIUS,
            (p[2] - SPHERE_CENTER[2]) / SPHERE_RADIUS,
        ];
        let s = lambert(n);
        offer(t, 1, [0.85 * s, 0.15 * s, 0.10 * s]);
    }

    // slab test
    let mut t0 = f32::NEG_INFINITY;
    let mut t1 = f32::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let lo = BOX_CENTER[a] - BOX_HALF;
        let hi = BOX_CENTER[a] + BOX_HALF;
        if d[a].abs() < 1e-9 {
            if o[a] < lo || o[a] > hi {
                t0 = f32::INFINITY;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
        }
        t1 = t1.min(tb);
    }
    if t0 <= t1 && t0.is_finite() {
        let mut n = [0.0; 3];
        n[axis] = -d[axis].signum();
        let s = lambert(n);
        offer(t0, 2, [0.15 * s, 0.65 * s, 0.20 * s]);
    }
    best
}

impl ToyScene {
    pub fn bounding_box(&self) -> Aabb {
        Aabb::new([-1.0; 3], [1.0; 3]).expect("valid box")
    }

    pub fn cameras(&self) -> Vec<Camera> {
        let mut cams = Vec::with_capacity(20);
        for j in 0..4 {
            for i in 0..5 {
                let eye = [-0.6 + 0.3 * i as f32, -0.45 + 0.3 * j as f32, 3.0];
                cams.push(Camera::look_at(
                    eye,
                    [0.0; 3],
                    [0.0, 1.0, 0.0],
                    self.resolution,
                    self.resolution,
                    self.focal,
                    self.near,
                    self.far,
                ));
            }
        }
        cams
    }

    /// Ground-truth image, region map and hit distance per pixel (infinite
    /// where nothing is hit).
    pub fn render(&self, camera: &Camera) -> (RgbImage, RegionMap, Vec<f32>) {
        let n = camera.num_pixels();
        let mut img = RgbImage::filled(camera.width, camera.height, [0.0; 3]);
        let mut labels = vec![0i32; n];
        let mut dist = vec![f32::INFINITY; n];
        for y in 0..camera.height {
            for x in 0..camera.width {
                if let Some((t, region, rgb)) = cast(&camera.ray(x, y)) {
                    img.set_pixel(x, y, rgb.map(|v| v.clamp(0.0, 1.0)));
                    labels[y * camera.width + x] = region as i32;
                    dist[y * camera.width + x] = t;
                }
            }
        }
        let map = RegionMap::new(camera.width, camera.height, labels, NUM_REGIONS, Provenance::Scene)
            .expect("labels are in range");
        (img, map, dist)
    }

    /// Writes `images/`, `regions/` and a canonical `cameras.json`.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "regions"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut frames = Vec::new();
        for (i, cam) in self.cameras().iter().enumerate() {
            let (img, map, _) = self.render(cam);
            let name = format!("view_{i:02}.png");
            img.save_png(&dir.join("images").join(&name))?;
            let mut map = map;
            map.source_image = Some(format!("images/{name}"));
            map.save(&dir.join("regions").join(&name))?;
            let m = cam.c2w;
            let transform: Vec<f32> = m.iter().flatten().copied().chain([0.0, 0.0, 0.0, 1.0]).collect();
            frames.push(json!({
                "file": format!("images/{name}"),
                "transform": transform,
                "split": if HOLDOUT_VIEWS.contains(&i) { "holdout" } else { "train" },
                "regions": format!("regions/{name}"),
            }));
        }
        let cam = &self.cameras()[0];
        let doc = json!({
            "w": cam.width, "h": cam.height, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "near": cam.near, "far": cam.far, "frames": frames,
        });
        let path = dir.join("cameras.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
    }
}

/// Two-region style image: diagonal stripes on the left, a dot lattice on the
/// right. `variant` selects the palette.
pub fn style_image(size: usize, variant: u32) -> (RgbImage, RegionMap) {
    let (stripe, dots) = match variant % 2 {
        0 => ([[0.95, 0.55, 0.10], [0.10, 0.15, 0.45]], [[0.98, 0.90, 0.20], [0.45, 0.10, 0.50]]),
        _ => ([[0.10, 0.70, 0.80], [0.95, 0.95, 0.95]], [[0.20, 0.20, 0.20], [0.90, 0.30, 0.50]]),
    };
    let half = size / 2;
    let mut img = RgbImage::filled(size, size, [0.0; 3]);
    let mut labels = vec![0i32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (rgb, l) = if x < half {
                (stripe[((x + y) / 4) % 2], 0)
            } else {
                let (cx, cy) = ((x % 8) as f32 - 3.5, (y % 8) as f32 - 3.5);
                (dots[usize::from(cx * cx + cy * cy < 6.0)], 1)
            };
            img.set_pixel(x, y, rgb);
            labels[y * size + x] = l;
        }
    }
    let map = RegionMap::new(size, size, labels, 2, Provenance::Style).expect("labels are in range");
    (img, map)
}
