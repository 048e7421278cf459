//! Multiresolution voxel hash-grid encoding.
//!
//! Every level addresses its voxel corners through the same spatial hash
//! `(h1·x ⊕ h2·y ⊕ h3·z ⊕ h4·s) mod N_H`, computed in wrapping 64-bit
//! arithmetic. The style term is dropped for single-style grids, which
//! reproduces the classic three-term hash. Coarse levels are hashed too; there
//! is no dense fallback.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

/// `h1, h2, h3` follow the Instant-NGP convention; `h4` is a prime outside
/// that triple.
pub const DEFAULT_HASH_COEFFS: [u64; 4] = [1, 2_654_435_761, 805_459_861, 2_097_152_999];

/// Axis-aligned box in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(Error::Domain(format!(
                    "bounding box axis {a} is empty or non-finite: [{}, {}]",
                    self.min[a], self.max[a]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [f32; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: [f32; 3]) -> [f32; 3] {
        [0, 1, 2].map(|a| p[a].clamp(self.min[a], self.max[a]))
    }

    /// Slab test. Returns the parametric entry/exit distances along
    /// `origin + t·direction`, or `None` when the line misses the box.
    pub fn intersect(&self, origin: [f32; 3], direction: [f32; 3]) -> Option<(f32, f32)> {
        let mut t0 = f32::NEG_INFINITY;
        let mut t1 = f32::INFINITY;
        for a in 0..3 {
            if direction[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / direction[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub num_levels: u32,
    /// Voxels per axis at level 0.
    pub base_resolution: u32,
    pub per_level_scale: f64,
    pub features_per_level: u32,
    /// `N_H`; must be a power of two.
    pub table_size: u32,
    pub hash_coeffs: [u64; 4],
    pub num_styles: u32,
    pub bounding_box: Aabb,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            num_levels: 16,
            base_resolution: 16,
            per_level_scale: 1.382,
            features_per_level: 2,
            table_size: 1 << 19,
            hash_coeffs: DEFAULT_HASH_COEFFS,
            num_styles: 1,
            bounding_box: Aabb::default(),
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 1 {
            return Err(Error::Domain("num_levels must be ≥ 1".into()));
        }
        if self.base_resolution < 2 {
            return Err(Error::Domain("base_resolution must be ≥ 2".into()));
        }
        if !(self.per_level_scale.is_finite() && self.per_level_scale > 1.0) {
            return Err(Error::Domain(format!(
                "per_level_scale must be > 1, got {}",
                self.per_level_scale
            )));
        }
        if self.features_per_level < 1 {
            return Err(Error::Domain("features_per_level must be ≥ 1".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Domain(format!(
                "table_size must be a power of two, got {}",
                self.table_size
            )));
        }
        let c = self.hash_coeffs;
        for i in 0..4 {
            for j in i + 1..4 {
                if c[i] == c[j] {
                    return Err(Error::Domain(format!(
                        "hash coefficients h{} and h{} are equal ({})",
                        i + 1,
                        j + 1,
                        c[i]
                    )));
                }
            }
        }
        if self.num_styles < 1 {
            return Err(Error::Domain("num_styles must be ≥ 1".into()));
        }
        self.bounding_box.validate()
    }

    /// `floor(base_resolution · per_level_scale^level)`.
    pub fn level_resolution(&self, level: u32) -> u32 {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as u32
    }

    pub fn output_dim(&self) -> usize {
        (self.num_levels * self.features_per_level) as usize
    }

    pub fn table_len(&self) -> usize {
        self.num_levels as usize * self.table_size as usize * self.features_per_level as usize
    }
}

/// Table slot of a voxel corner. Panics never; out-of-range styles are
/// rejected.
pub fn hash_index(voxel: [u32; 3], style_index: u32, config: &HashGridConfig) -> Result<u32> {
    if style_index >= config.num_styles {
        return Err(Error::Domain(format!(
            "style index {style_index} out of range for {} style(s)",
            config.num_styles
        )));
    }
    Ok(slot(&config.hash_coeffs, voxel, style_term(config, style_index), config.table_size) as u32)
}

#[inline]
fn style_term(config: &HashGridConfig, style_index: u32) -> u64 {
    if config.num_styles == 1 {
        0
    } else {
        config.hash_coeffs[3].wrapping_mul(style_index as u64)
    }
}

#[inline]
fn slot(coeffs: &[u64; 4], voxel: [u32; 3], style_term: u64, table_size: u32) -> usize {
    let h = coeffs[0].wrapping_mul(voxel[0] as u64)
        ^ coeffs[1].wrapping_mul(voxel[1] as u64)
        ^ coeffs[2].wrapping_mul(voxel[2] as u64)
        ^ style_term;
    (h & (table_size as u64 - 1)) as usize
}

/// Learnable feature table, laid out `[level][slot][feature]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    pub(crate) table: Vec<f32>,
}

impl HashGrid {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let table = vec![0.0; config.table_len()];
        Ok(Self { config, table })
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn random(config: HashGridConfig, seed: u64, scale: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..config.table_len())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Ok(Self { config, table })
    }

    pub fn from_table(config: HashGridConfig, table: Vec<f32>) -> Result<Self> {
        config.validate()?;
        if table.len() != config.table_len() {
            return Err(Error::Domain(format!(
                "table has {} values, config requires {}",
                table.len(),
                config.table_len()
            )));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("table contains non-finite values".into()));
        }
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f32] {
        &mut self.table
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn check_style(&self, style_index: u32) -> Result<()> {
        if style_index >= self.config.num_styles {
            return Err(Error::Domain(format!(
                "style index {style_index} out of range for {} style(s)",
                self.config.num_styles
            )));
        }
        Ok(())
    }

    fn check_point(&self, p: [f32; 3]) -> Result<()> {
        if !self.config.bounding_box.contains(p) {
            return Err(Error::Range(format!(
                "point {:?} lies outside bounding box {:?}",
                p, self.config.bounding_box
            )));
        }
        Ok(())
    }

    /// The 8 (slot, weight) pairs of one level, corner bit order x, y, z.
    #[inline]
    pub(crate) fn corners(&self, p: [f32; 3], style_term: u64, level: u32) -> [(usize, f32); 8] {
        let (voxel, frac) = self.lattice_position(p, level);
        let mut out = [(0usize, 0f32); 8];
        for (c, o) in out.iter_mut().enumerate() {
            let mut v = voxel;
            let mut w = 1.0f32;
            for a in 0..3 {
                if c >> a & 1 == 1 {
                    v[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            *o = (
                slot(&self.config.hash_coeffs, v, style_term, self.config.table_size),
                w,
            );
        }
        out
    }

    #[inline]
    fn lattice_position(&self, p: [f32; 3], level: u32) -> ([u32; 3], [f32; 3]) {
        let b = &self.config.bounding_box;
        let res = self.config.level_resolution(level) as f64;
        let mut voxel = [0u32; 3];
        let mut frac = [0f32; 3];
        for a in 0..3 {
            let t = (p[a] as f64 - b.min[a] as f64) / (b.max[a] as f64 - b.min[a] as f64);
            let pos = t.clamp(0.0, 1.0) * res;
            let f = pos.floor();
            voxel[a] = f as u32;
            frac[a] = (pos - f) as f32;
        }
        (voxel, frac)
    }

    /// Trilinearly interpolated features, concatenated across levels.
    pub fn encode(&self, point: [f32; 3], style_index: u32) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(point, style_index, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, point: [f32; 3], style_index: u32, out: &mut [f32]) -> Result<()> {
        self.check_style(style_index)?;
        self.check_point(point)?;
        if out.len() != self.output_dim() {
            return Err(Error::Domain(format!(
                "output buffer has length {}, expected {}",
                out.len(),
                self.output_dim()
            )));
        }
        self.encode_unchecked(point, style_term(&self.config, style_index), out);
        Ok(())
    }

    fn encode_unchecked(&self, point: [f32; 3], style_term: u64, out: &mut [f32]) {
        let nf = self.config.features_per_level as usize;
        let level_stride = self.config.table_size as usize * nf;
        for level in 0..self.config.num_levels {
            let base = level as usize * level_stride;
            let dst = &mut out[level as usize * nf..(level as usize + 1) * nf];
            dst.fill(0.0);
            for (s, w) in self.corners(point, style_term, level) {
                let src = &self.table[base + s * nf..base + s * nf + nf];
                for f in 0..nf {
                    dst[f] += w * src[f];
                }
            }
        }
    }

    /// Batched encode. Points must already lie in the box (renderers clamp).
    pub fn encode_batch(&self, points: &[[f32; 3]], style_index: u32) -> Result<Vec<f32>> {
        self.check_style(style_index)?;
        let dim = self.output_dim();
        let term = style_term(&self.config, style_index);
        let mut out = vec![0.0; points.len() * dim];
        for (p, dst) in points.iter().zip(out.chunks_exact_mut(dim)) {
            self.check_point(*p)?;
            self.encode_unchecked(*p, term, dst);
        }
        Ok(out)
    }

    /// Scatters `d_features` (one row of `output_dim` per point) into a
    /// gradient buffer shaped like the table. Levels are processed in
    /// parallel, points within a level in order, so the result is
    /// deterministic.
    pub fn backward_batch(
        &self,
        points: &[[f32; 3]],
        style_index: u32,
        d_features: &[f32],
        grad: &mut [f32],
    ) -> Result<()> {
        self.check_style(style_index)?;
        let dim = self.output_dim();
        if d_features.len() != points.len() * dim || grad.len() != self.table.len() {
            return Err(Error::Internal("hash grid backward: buffer shape mismatch".into()));
        }
        let nf = self.config.features_per_level as usize;
        let level_stride = self.config.table_size as usize * nf;
        let term = style_term(&self.config, style_index);
        grad.par_chunks_mut(level_stride)
            .enumerate()
            .for_each(|(level, g)| {
                for (i, p) in points.iter().enumerate() {
                    let d = &d_features[i * dim + level * nf..i * dim + (level + 1) * nf];
                    if d.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    for (s, w) in self.corners(*p, term, level as u32) {
                        for f in 0..nf {
                            g[s * nf + f] += w * d[f];
                        }
                    }
                }
            });
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        let c = &self.config;
        w.u32(c.num_levels);
        w.u32(c.base_resolution);
        w.f64(c.per_level_scale);
        w.u32(c.features_per_level);
        w.u32(c.table_size);
        for h in c.hash_coeffs {
            w.u64(h);
        }
        w.u32(c.num_styles);
        for v in c.bounding_box.min.iter().chain(c.bounding_box.max.iter()) {
            w.f32(*v);
        }
        w.f32s(&self.table);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let num_levels = r.u32()?;
        let base_resolution = r.u32()?;
        let per_level_scale = r.f64()?;
        let features_per_level = r.u32()?;
        let table_size = r.u32()?;
        let mut hash_coeffs = [0u64; 4];
        for h in hash_coeffs.iter_mut() {
            *h = r.u64()?;
        }
        let num_styles = r.u32()?;
        let mut bb = [0f32; 6];
        for v in bb.iter_mut() {
            *v = r.f32()?;
        }
        let config = HashGridConfig {
            num_levels,
            base_resolution,
            per_level_scale,
            features_per_level,
            table_size,
            hash_coeffs,
            num_styles,
            bounding_box: Aabb {
                min: [bb[0], bb[1], bb[2]],
                max: [bb[3], bb[4], bb[5]],
            },
        };
        let table = r.f32s()?;
        Self::from_table(config, table)
    }

    /// Serialized form: config block followed by the little-endian f32 table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        self.write(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let g = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after hash grid".into()));
        }
        Ok(g)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Compares the analytic derivative of `encode` along a direction in table
/// space with a central finite difference of step `step`. Returns the
/// relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn encode_gradient_check(
    grid: &HashGrid,
    point: [f32; 3],
    style_index: u32,
    probe_direction: &[f32],
    step: f32,
) -> Result<f64> {
    grid.check_style(style_index)?;
    grid.check_point(point)?;
    if probe_direction.len() != grid.table.len() {
        return Err(Error::Precondition(format!(
            "probe has {} entries, table has {}",
            probe_direction.len(),
            grid.table.len()
        )));
    }
    if probe_direction.iter().all(|&v| v == 0.0) {
        return Err(Error::Precondition("probe direction is zero".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Precondition("finite-difference step must be positive".into()));
    }
    for level in 0..grid.config.num_levels {
        let (_, frac) = grid.lattice_position(point, level);
        if frac.iter().any(|&f| f < 1e-6 || f > 1.0 - 1e-6) {
            return Err(Error::Precondition(format!(
                "point {point:?} lies on a voxel face at level {level}"
            )));
        }
    }

    let nf = grid.config.features_per_level as usize;
    let level_stride = grid.config.table_size as usize * nf;
    let term = style_term(&grid.config, style_index);
    let mut analytic = vec![0f64; grid.output_dim()];
    for level in 0..grid.config.num_levels {
        let base = level as usize * level_stride;
        for (s, w) in grid.corners(point, term, level) {
            for f in 0..nf {
                analytic[level as usize * nf + f] += w as f64 * probe_direction[base + s * nf + f] as f64;
            }
        }
    }

    let shifted = |sign: f32| {
        let mut g = grid.clone();
        for (t, v) in g.table.iter_mut().zip(probe_direction) {
            *t += sign * step * v;
        }
        g.encode(point, style_index)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    let numeric: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (*a as f64 - *b as f64) / (2.0 * step as f64))
        .collect();

    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    Ok(if denom == 0.0 { 0.0 } else { diff / denom })
}
