//! Conv3-block feature extraction with a VGG-16 layout.
//!
//! The network runs conv1_1 .. conv3_3 (zero padding, 3×3 kernels, two 2×2
//! max pools) and returns relu3_1, relu3_2 and relu3_3 concatenated along
//! depth, at a quarter of the input resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::{maxpool2, maxpool2_backward, relu_backward, relu_inplace, Conv2d, Padding, Tensor};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Parameter names of the seven convolutions in torchvision's `vgg16().features`.
const TORCH_LAYERS: [usize; 7] = [0, 2, 5, 7, 10, 12, 14];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// Safetensors file with torchvision parameter names (`features.N.weight`).
    /// When `sha256` is set the file must hash to it.
    Pretrained {
        weights: PathBuf,
        #[serde(default)]
        sha256: Option<String>,
    },
    /// Same architecture with seeded He-uniform weights; `widths` are the
    /// channel counts of the three blocks.
    Random {
        seed: u64,
        #[serde(default = "default_widths")]
        widths: [usize; 3],
    },
}

fn default_widths() -> [usize; 3] {
    [64, 128, 256]
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Pretrained {
            weights: PathBuf::from("vgg16_conv3.safetensors"),
            sha256: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
    /// (width, height) of the image the features came from.
    pub source: (usize, usize),
    pub extractor: String,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::Domain(format!(
                "feature map {h}×{w}×{d} needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        if d == 0 {
            return Err(Error::Domain("feature depth must be positive".into()));
        }
        Ok(Self {
            h,
            w,
            d,
            data,
            source: (w, h),
            extractor: String::new(),
        })
    }

    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    id: String,
}

pub struct ExtractorTape {
    input: Tensor,
    acts: Vec<Tensor>,
    pooled: [Tensor; 2],
    args: [Vec<u32>; 2],
    source: (usize, usize),
}

impl FeatureExtractor {
    pub fn from_config(config: &ExtractorConfig) -> Result<Self> {
        match config {
            ExtractorConfig::Pretrained { weights, sha256 } => Self::load(weights, sha256.as_deref()),
            ExtractorConfig::Random { seed, widths } => Self::random(*seed, *widths),
        }
    }

    pub fn random(seed: u64, widths: [usize; 3]) -> Result<Self> {
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("extractor widths must be positive, got {widths:?}")));
        }
        let [a, b, c] = widths;
        let shapes = [(3, a), (a, a), (a, b), (b, b), (b, c), (c, c), (c, c)];
        let convs = shapes
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::new(cin, cout, 3, Padding::Zero, seed.wrapping_add(0x9e37 * i as u64)))
            .collect();
        Ok(Self {
            convs,
            id: format!("vgg16-conv3-random:{seed}:{a}x{b}x{c}"),
        })
    }

    pub fn load(path: &Path, pin: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::ExternalDependency(format!(
                "pretrained VGG-16 weights not readable at {} ({e}); convert torchvision's vgg16 \
                 checkpoint with scripts/export_vgg16.py or select the `random` extractor",
                path.display()
            ))
        })?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if let Some(pin) = pin {
            if !pin.eq_ignore_ascii_case(&digest) {
                return Err(Error::ExternalDependency(format!(
                    "weights at {} hash to {digest}, expected {pin}",
                    path.display()
                )));
            }
        }
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut convs = Vec::with_capacity(7);
        let mut cin_expected = 3;
        for idx in TORCH_LAYERS {
            let (w, shape) = read_f32(&st, &format!("features.{idx}.weight"), path)?;
            let (bias, bshape) = read_f32(&st, &format!("features.{idx}.bias"), path)?;
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 || shape[1] != cin_expected {
                return Err(Error::Format(format!(
                    "features.{idx}.weight has shape {shape:?}, expected [cout, {cin_expected}, 3, 3]"
                )));
            }
            let (cout, cin) = (shape[0], shape[1]);
            if bshape != [cout] {
                return Err(Error::Format(format!("features.{idx}.bias has shape {bshape:?}")));
            }
            // [cout][cin][kh][kw] -> [cout][kh][kw][cin]
            let mut weight = vec![0.0f32; w.len()];
            for o in 0..cout {
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            weight[((o * 3 + ky) * 3 + kx) * cin + i] = w[((o * cin + i) * 3 + ky) * 3 + kx];
                        }
                    }
                }
            }
            convs.push(Conv2d {
                cin,
                cout,
                k: 3,
                padding: Padding::Zero,
                weight,
                bias,
            });
            cin_expected = cout;
        }
        if convs[4].cout != convs[5].cout || convs[5].cout != convs[6].cout {
            return Err(Error::Format("conv3 block widths differ".into()));
        }
        Ok(Self {
            convs,
            id: format!("vgg16-conv3:{}", &digest[..16]),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Feature depth: three times the conv3 width.
    pub fn depth(&self) -> usize {
        3 * self.convs[6].cout
    }

    pub fn output_dims(width: usize, height: usize) -> (usize, usize) {
        (width / 2 / 2, height / 2 / 2)
    }

    pub fn extract(&self, image: &RgbImage) -> Result<FeatureMap> {
        Ok(self.forward_tape(image)?.0)
    }

    pub fn forward_tape(&self, image: &RgbImage) -> Result<(FeatureMap, ExtractorTape)> {
        if image.width < 4 || image.height < 4 {
            return Err(Error::Domain(format!(
                "feature extraction needs at least 4×4 pixels, got {}×{}",
                image.width, image.height
            )));
        }
        let mut input = image.to_tensor();
        for p in input.data.chunks_exact_mut(3) {
            for c in 0..3 {
                p[c] = (p[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        let layer = |i: usize, x: &Tensor| -> Result<Tensor> {
            let mut y = self.convs[i].forward(x)?;
            relu_inplace(&mut y);
            Ok(y)
        };
        let a0 = layer(0, &input)?;
        let a1 = layer(1, &a0)?;
        let (p1, arg1) = maxpool2(&a1);
        let a2 = layer(2, &p1)?;
        let a3 = layer(3, &a2)?;
        let (p2, arg2) = maxpool2(&a3);
        let a4 = layer(4, &p2)?;
        let a5 = layer(5, &a4)?;
        let a6 = layer(6, &a5)?;
        let c = a6.c;
        let mut data = Vec::with_capacity(a6.num_cells() * 3 * c);
        for i in 0..a6.num_cells() {
            for t in [&a4, &a5, &a6] {
                data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
            }
        }
        let fm = FeatureMap {
            h: a6.h,
            w: a6.w,
            d: 3 * c,
            data,
            source: (image.width, image.height),
            extractor: self.id.clone(),
        };
        let tape = ExtractorTape {
            input,
            acts: vec![a0, a1, a2, a3, a4, a5, a6],
            pooled: [p1, p2],
            args: [arg1, arg2],
            source: (image.width, image.height),
        };
        Ok((fm, tape))
    }

    /// Gradient of a scalar with respect to the input image (row-major RGB),
    /// given its gradient with respect to the feature map.
    pub fn backward(&self, tape: &ExtractorTape, d_features: &[f32]) -> Result<Vec<f32>> {
        let a = &tape.acts;
        let c = a[6].c;
        if d_features.len() != a[6].num_cells() * 3 * c {
            return Err(Error::Domain(format!(
                "feature gradient has {} values, expected {}",
                d_features.len(),
                a[6].num_cells() * 3 * c
            )));
        }
        let mut g = [a[4].clone(), a[5].clone(), a[6].clone()];
        for (i, cell) in d_features.chunks_exact(3 * c).enumerate() {
            for (k, gk) in g.iter_mut().enumerate() {
                gk.data[i * c..(i + 1) * c].copy_from_slice(&cell[k * c..(k + 1) * c]);
            }
        }
        let [mut g4, mut g5, mut g6] = g;
        relu_backward(&a[6], &mut g6);
        add(&mut g5, &self.convs[6].backward(&a[5], &g6, None));
        relu_backward(&a[5], &mut g5);
        add(&mut g4, &self.convs[5].backward(&a[4], &g5, None));
        relu_backward(&a[4], &mut g4);
        let dp2 = self.convs[4].backward(&tape.pooled[1], &g4, None);
        let mut g3 = maxpool2_backward((a[3].h, a[3].w, a[3].c), &tape.args[1], &dp2);
        relu_backward(&a[3], &mut g3);
        let mut g2 = self.convs[3].backward(&a[2], &g3, None);
        relu_backward(&a[2], &mut g2);
        let dp1 = self.convs[2].backward(&tape.pooled[0], &g2, None);
        let mut g1 = maxpool2_backward((a[1].h, a[1].w, a[1].c), &tape.args[0], &dp1);
        relu_backward(&a[1], &mut g1);
        let mut g0 = self.convs[1].backward(&a[0], &g1, None);
        relu_backward(&a[0], &mut g0);
        let mut gx = self.convs[0].backward(&tape.input, &g0, None);
        for p in gx.data.chunks_exact_mut(3) {
            for c in 0..3 {
                p[c] /= IMAGENET_STD[c];
            }
        }
        debug_assert_eq!((gx.w, gx.h), tape.source);
        Ok(gx.data)
    }
}

fn add(a: &mut Tensor, b: &Tensor) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

fn read_f32(st: &safetensors::SafeTensors, name: &str, path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Format(format!("{}: missing tensor {name}", path.display())))?;
    if view.dtype() != safetensors::Dtype::F32 {
        return Err(Error::Format(format!("{name}: expected f32, got {:?}", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((data, view.shape().to_vec()))
}
