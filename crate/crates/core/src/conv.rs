//! Dense image tensors and the convolutional building blocks used by the
//! feature extractor and the scene segmenter. Layout is `[h × w × c]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Domain(format!(
                "tensor {h}×{w}×{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.h, self.w, self.c) == (other.h, other.w, other.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Stride-1 "same" convolution with an odd square kernel.
/// Weights are `[cout × k × k × cin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub padding: Padding,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Rows of im2col processed at once; keeps the scratch matrix small.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, padding: Padding, seed: u64) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (cin * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            cin,
            cout,
            k,
            padding,
            weight: (0..cout * k * k * cin).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; cout],
        }
    }

    pub fn zero_grads(&self) -> ConvGrads {
        ConvGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn rows_per_block(&self, width: usize) -> usize {
        (IM2COL_BUDGET / (self.patch_len() * width).max(1)).max(1)
    }

    fn source(&self, x: &Tensor, yy: isize, xx: isize) -> Option<usize> {
        let (h, w) = (x.h as isize, x.w as isize);
        match self.padding {
            Padding::Zero => {
                (yy >= 0 && yy < h && xx >= 0 && xx < w).then(|| (yy as usize * x.w + xx as usize) * x.c)
            }
            Padding::Replicate => {
                let yc = yy.clamp(0, h - 1) as usize;
                let xc = xx.clamp(0, w - 1) as usize;
                Some((yc * x.w + xc) * x.c)
            }
        }
    }

    fn im2col(&self, x: &Tensor, y0: usize, y1: usize, cols: &mut Vec<f32>) {
        let r = (self.k / 2) as isize;
        let pl = self.patch_len();
        cols.clear();
        cols.resize((y1 - y0) * x.w * pl, 0.0);
        let mut o = 0;
        for y in y0..y1 {
            for xp in 0..x.w {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if let Some(src) = self.source(x, y as isize + dy, xp as isize + dx) {
                            cols[o..o + self.cin].copy_from_slice(&x.data[src..src + self.cin]);
                        }
                        o += self.cin;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.c != self.cin {
            return Err(Error::Domain(format!("conv expects {} channels, got {}", self.cin, x.c)));
        }
        let mut out = Tensor::zeros(x.h, x.w, self.cout);
        for p in out.data.chunks_exact_mut(self.cout) {
            p.copy_from_slice(&self.bias);
        }
        let pl = self.patch_len();
        let block = self.rows_per_block(x.w);
        let mut cols = Vec::new();
        let mut y0 = 0;
        while y0 < x.h {
            let y1 = (y0 + block).min(x.h);
            self.im2col(x, y0, y1, &mut cols);
            let m = (y1 - y0) * x.w;
            let dst = &mut out.data[y0 * x.w * self.cout..y1 * x.w * self.cout];
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    pl,
                    self.cout,
                    1.0,
                    cols.as_ptr(),
                    pl as isize,
                    1,
                    self.weight.as_ptr(),
                    1,
                    pl as isize,
                    1.0,
                    dst.as_mut_ptr(),
                    self.cout as isize,
                    1,
                );
            }
            y0 = y1;
        }
        Ok(out)
    }

    /// Returns dL/dx; accumulates parameter gradients when `grads` is given.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, mut grads: Option<&mut ConvGrads>) -> Tensor {
        let pl = self.patch_len();
        let r = (self.k / 2) as isize;
        let mut dx = Tensor::zeros(x.h, x.w, x.c);
        let block = self.rows_per_block(x.w);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut y0 = 0;
        while y0 < x.h {
            let y1 = (y0 + block).min(x.h);
            let m = (y1 - y0) * x.w;
            let dyb = &dy.data[y0 * x.w * self.cout..y1 * x.w * self.cout];
            if let Some(g) = grads.as_deref_mut() {
                self.im2col(x, y0, y1, &mut cols);
                unsafe {
                    // dW[cout × pl] += dYᵀ · cols
                    matrixmultiply::sgemm(
                        self.cout,
                        m,
                        pl,
                        1.0,
                        dyb.as_ptr(),
                        1,
                        self.cout as isize,
                        cols.as_ptr(),
                        pl as isize,
                        1,
                        1.0,
                        g.weight.as_mut_ptr(),
                        pl as isize,
                        1,
                    );
                }
                for row in dyb.chunks_exact(self.cout) {
                    g.bias.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            dcols.clear();
            dcols.resize(m * pl, 0.0);
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    self.cout,
                    pl,
                    1.0,
                    dyb.as_ptr(),
                    self.cout as isize,
                    1,
                    self.weight.as_ptr(),
                    pl as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    pl as isize,
                    1,
                );
            }
            let mut o = 0;
            for y in y0..y1 {
                for xp in 0..x.w {
                    for dyo in -r..=r {
                        for dxo in -r..=r {
                            if let Some(src) = self.source(x, y as isize + dyo, xp as isize + dxo) {
                                dx.data[src..src + self.cin]
                                    .iter_mut()
                                    .zip(&dcols[o..o + self.cin])
                                    .for_each(|(a, b)| *a += b);
                            }
                            o += self.cin;
                        }
                    }
                }
            }
            y0 = y1;
        }
        dx
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the post-activation output was not positive.
pub fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    grad.data.iter_mut().zip(&out.data).for_each(|(g, o)| {
        if *o <= 0.0 {
            *g = 0.0
        }
    });
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Also returns the flat input index of each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(h, w, x.c);
    let mut arg = vec![0u32; h * w * x.c];
    for y in 0..h {
        for xp in 0..w {
            for ch in 0..x.c {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0usize;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * x.w + 2 * xp + dx) * x.c + ch;
                    if x.data[i] > best {
                        best = x.data[i];
                        bi = i;
                    }
                }
                let o = (y * w + xp) * x.c + ch;
                out.data[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize), arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Normalization of every response vector across its channels, without
/// affine terms.
pub struct PixelNormCache {
    inv_std: Vec<f32>,
    normalized: Tensor,
}

pub const PIXEL_NORM_EPS: f32 = 1e-5;

pub fn pixel_norm(x: &Tensor) -> (Tensor, PixelNormCache) {
    let c = x.c;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.num_cells());
    for p in out.data.chunks_exact_mut(c) {
        let mean = p.iter().map(|v| *v as f64).sum::<f64>() / c as f64;
        let var = p.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let is = (1.0 / (var + PIXEL_NORM_EPS as f64).sqrt()) as f32;
        p.iter_mut().for_each(|v| *v = (*v - mean as f32) * is);
        inv_std.push(is);
    }
    let cache = PixelNormCache {
        inv_std,
        normalized: out.clone(),
    };
    (out, cache)
}

pub fn pixel_norm_backward(cache: &PixelNormCache, dy: &Tensor) -> Tensor {
    let c = dy.c;
    let mut dx = dy.clone();
    for ((d, xh), is) in dx
        .data
        .chunks_exact_mut(c)
        .zip(cache.normalized.data.chunks_exact(c))
        .zip(&cache.inv_std)
    {
        let mg = d.iter().map(|v| *v as f64).sum::<f64>() / c as f64;
        let mgx = d.iter().zip(xh).map(|(g, x)| (*g * *x) as f64).sum::<f64>() / c as f64;
        for (g, x) in d.iter_mut().zip(xh) {
            *g = is * (*g - mg as f32 - x * mgx as f32);
        }
    }
    dx
}
