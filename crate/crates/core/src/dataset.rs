//! Posed image collections and their canonical JSON form.
//!
//! Canonical camera JSON:
//! `{w, h, fx, fy, cx, cy, near, far, frames: [{file, transform, split?, regions?, near?, far?}], bounding_box?}`
//! where `transform` is the 4×4 camera-to-world matrix, row-major, with the
//! camera looking down its −z axis and y up.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash_encoding::Aabb;
use crate::imageio::RgbImage;
use crate::segmentation::RegionMap;
use crate::volume_renderer::Camera;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    CameraJson,
    LlffPoses,
}

impl FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera-json" => Ok(Self::CameraJson),
            "llff-poses" => Ok(Self::LlffPoses),
            other => Err(Error::Config(format!(
                "unknown dataset format {other:?} (expected camera-json or llff-poses)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// Path relative to the dataset root.
    pub file: PathBuf,
    pub camera: Camera,
    pub split: Split,
    pub regions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub width: usize,
    pub height: usize,
    pub views: Vec<View>,
    pub bounding_box: Aabb,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    file: PathBuf,
    transform: Vec<f32>,
    #[serde(default)]
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f32>,
}

#[derive(Serialize, Deserialize)]
struct CamerasJson {
    w: usize,
    h: usize,
    fx: f32,
    fy: f32,
    cx: f32,
    cy: f32,
    #[serde(default = "default_near")]
    near: f32,
    #[serde(default = "default_far")]
    far: f32,
    frames: Vec<FrameJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounding_box: Option<Aabb>,
}

fn default_near() -> f32 {
    0.1
}

fn default_far() -> f32 {
    10.0
}

pub fn ingest_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::Precondition(format!("dataset directory {} does not exist", path.display())));
    }
    let mut ds = match format {
        DatasetFormat::CameraJson => read_camera_json(path)?,
        DatasetFormat::LlffPoses => read_llff(path)?,
    };
    if ds.views.is_empty() {
        return Err(Error::Precondition(format!("{} contains no views", path.display())));
    }
    if ds.views.len() == 1 {
        let w = "single-view dataset: reconstruction will overfit the one view".to_string();
        log::warn!("{w}");
        ds.warnings.push(w);
    }
    for v in &ds.views {
        let p = path.join(&v.file);
        let (w, h) = image::image_dimensions(&p).map_err(|e| Error::image(&p, e))?;
        if (w as usize, h as usize) != (ds.width, ds.height) {
            return Err(Error::Domain(format!(
                "{} is {w}×{h}, but the dataset resolution is {}×{}",
                p.display(),
                ds.width,
                ds.height
            )));
        }
    }
    Ok(ds)
}

fn read_camera_json(root: &Path) -> Result<Dataset> {
    let p = root.join("cameras.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::Precondition(format!("missing poses {}: {e}", p.display())))?;
    let doc: CamerasJson =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    let mut views = Vec::with_capacity(doc.frames.len());
    for (i, f) in doc.frames.iter().enumerate() {
        if f.transform.len() != 16 {
            return Err(Error::Format(format!(
                "{} frame {i}: transform has {} values, expected 16",
                p.display(),
                f.transform.len()
            )));
        }
        let t = &f.transform;
        let bottom = [t[12], t[13], t[14], t[15]];
        if (0..4).any(|k| (bottom[k] - [0.0, 0.0, 0.0, 1.0][k]).abs() > 1e-5) {
            return Err(Error::Format(format!("{} frame {i}: last transform row must be 0 0 0 1", p.display())));
        }
        let camera = Camera {
            width: doc.w,
            height: doc.h,
            fx: doc.fx,
            fy: doc.fy,
            cx: doc.cx,
            cy: doc.cy,
            c2w: [
                [t[0], t[1], t[2], t[3]],
                [t[4], t[5], t[6], t[7]],
                [t[8], t[9], t[10], t[11]],
            ],
            near: f.near.unwrap_or(doc.near),
            far: f.far.unwrap_or(doc.far),
        };
        camera
            .validate()
            .map_err(|e| Error::Format(format!("{} frame {i}: {e}", p.display())))?;
        views.push(View {
            file: f.file.clone(),
            camera,
            split: f.split,
            regions: f.regions.clone(),
        });
    }
    let bounding_box = match doc.bounding_box {
        Some(b) => {
            b.validate()?;
            b
        }
        None => fit_bounding_box(&views)?,
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        width: doc.w,
        height: doc.h,
        views,
        bounding_box,
        warnings: Vec::new(),
    })
}

fn read_npy(path: &Path) -> Result<(Vec<f64>, Vec<u64>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::Precondition(format!("missing poses {}: {e}", path.display())))?;
    let npy = npyz::NpyFile::new(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))?;
    let shape = npy.shape().to_vec();
    let data = match npy.try_data::<f64>() {
        Ok(r) => r.collect::<std::io::Result<Vec<f64>>>(),
        Err(npy) => npy
            .data::<f32>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .map(|v| v.map(f64::from))
            .collect(),
    }
    .map_err(|e| Error::io(path, e))?;
    Ok((data, shape))
}

/// Every 8th view is held out, as is customary for forward-facing captures.
const LLFF_HOLDOUT_STRIDE: usize = 8;

fn read_llff(root: &Path) -> Result<Dataset> {
    let p = root.join("poses_bounds.npy");
    let (data, shape) = read_npy(&p)?;
    if shape.len() != 2 || shape[1] != 17 {
        return Err(Error::Format(format!("{}: expected shape [N, 17], got {shape:?}", p.display())));
    }
    let dir = root.join("images");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    let n = shape[0] as usize;
    if files.len() != n {
        return Err(Error::Precondition(format!(
            "{} has {} images but {} has {n} pose rows",
            dir.display(),
            files.len(),
            p.display()
        )));
    }
    let first = files.first().ok_or_else(|| Error::Precondition("no images".into()))?;
    let (w, h) = image::image_dimensions(first).map_err(|e| Error::image(first, e))?;
    let (w, h) = (w as usize, h as usize);
    let mut views = Vec::with_capacity(n);
    for (i, row) in data.chunks_exact(17).enumerate() {
        let bad = |why: &str| Error::Format(format!("{} row {i}: {why}", p.display()));
        if row.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        let m = |r: usize, c: usize| row[r * 5 + c] as f32;
        let (ph, pw, focal) = (row[4], row[9], row[14]);
        if !(ph > 0.0 && pw > 0.0 && focal > 0.0) {
            return Err(bad("height, width and focal must be positive"));
        }
        let focal = (focal * w as f64 / pw) as f32;
        // columns are (down, right, back); reorder to (right, up, back)
        let c2w = [0, 1, 2].map(|r| [m(r, 1), -m(r, 0), m(r, 2), m(r, 3)]);
        let (near, far) = (row[15] as f32, row[16] as f32);
        let camera = Camera {
            width: w,
            height: h,
            fx: focal,
            fy: focal,
            cx: w as f32 / 2.0,
            cy: h as f32 / 2.0,
            c2w,
            near,
            far,
        };
        camera.validate().map_err(|e| bad(&e.to_string()))?;
        views.push(View {
            file: files[i].strip_prefix(root).unwrap_or(&files[i]).to_path_buf(),
            camera,
            split: if i % LLFF_HOLDOUT_STRIDE == 0 && n > 1 {
                Split::Holdout
            } else {
                Split::Train
            },
            regions: None,
        });
    }
    let bounding_box = fit_bounding_box(&views)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        width: w,
        height: h,
        views,
        bounding_box,
        warnings: Vec::new(),
    })
}

/// Per-axis 5th–95th percentile of the near and far points of a grid of
/// rays through every view, padded by 10% of the extent on each side.
pub fn fit_bounding_box(views: &[View]) -> Result<Aabb> {
    const GRID: usize = 9;
    let mut pts: [Vec<f32>; 3] = Default::default();
    for v in views {
        let c = &v.camera;
        for gy in 0..GRID {
            for gx in 0..GRID {
                let x = gx * (c.width - 1) / (GRID - 1);
                let y = gy * (c.height - 1) / (GRID - 1);
                let r = c.ray(x, y);
                for t in [r.t_near, r.t_far] {
                    let p = r.at(t);
                    for a in 0..3 {
                        pts[a].push(p[a]);
                    }
                }
            }
        }
    }
    let mut min = [0.0f32; 3];
    let mut max = [0.0f32; 3];
    for a in 0..3 {
        let v = &mut pts[a];
        v.sort_by(f32::total_cmp);
        let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
        let (lo, hi) = (q(0.05), q(0.95));
        let pad = 0.1 * (hi - lo).max(1e-3);
        min[a] = lo - pad;
        max[a] = hi + pad;
    }
    Aabb::new(min, max)
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        self.indices(Split::Holdout)
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.views[i].file)
    }

    pub fn load_image(&self, i: usize) -> Result<RgbImage> {
        RgbImage::load(&self.image_path(i))
    }

    pub fn load_region_map(&self, i: usize) -> Result<Option<RegionMap>> {
        self.views[i]
            .regions
            .as_ref()
            .map(|r| RegionMap::load(&self.root.join(r)))
            .transpose()
    }

    /// Canonical JSON with paths relative to `root`. Intrinsics come from the
    /// first view; near/far are written per frame when they differ.
    pub fn to_canonical_json(&self) -> Result<String> {
        let c0 = &self.views.first().ok_or_else(|| Error::Precondition("empty dataset".into()))?.camera;
        let frames = self
            .views
            .iter()
            .map(|v| {
                let m = v.camera.c2w;
                FrameJson {
                    file: v.file.clone(),
                    transform: m.iter().flatten().copied().chain([0.0, 0.0, 0.0, 1.0]).collect(),
                    split: v.split,
                    regions: v.regions.clone(),
                    near: (v.camera.near != c0.near).then_some(v.camera.near),
                    far: (v.camera.far != c0.far).then_some(v.camera.far),
                }
            })
            .collect();
        let doc = CamerasJson {
            w: self.width,
            h: self.height,
            fx: c0.fx,
            fy: c0.fy,
            cx: c0.cx,
            cy: c0.cy,
            near: c0.near,
            far: c0.far,
            frames,
            bounding_box: Some(self.bounding_box),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Writes `cameras.json` into `dir`, rewriting file paths to stay valid
    /// from there.
    pub fn write_canonical(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let root = std::fs::canonicalize(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut copy = self.clone();
        for v in &mut copy.views {
            v.file = root.join(&v.file);
            v.regions = v.regions.as_ref().map(|r| root.join(r));
        }
        let p = dir.join("cameras.json");
        std::fs::write(&p, copy.to_canonical_json()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Reads a camera path file (canonical camera JSON; image files need not exist).
pub fn load_camera_path(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: CamerasJson = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    doc.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.transform.len() != 16 {
                return Err(Error::Format(format!("{} frame {i}: transform needs 16 values", path.display())));
            }
            let t = &f.transform;
            let c = Camera {
                width: doc.w,
                height: doc.h,
                fx: doc.fx,
                fy: doc.fy,
                cx: doc.cx,
                cy: doc.cy,
                c2w: [
                    [t[0], t[1], t[2], t[3]],
                    [t[4], t[5], t[6], t[7]],
                    [t[8], t[9], t[10], t[11]],
                ],
                near: f.near.unwrap_or(doc.near),
                far: f.far.unwrap_or(doc.far),
            };
            c.validate().map_err(|e| Error::Format(format!("{} frame {i}: {e}", path.display())))?;
            Ok(c)
        })
        .collect()
}
