//! Scene-to-style region assignment.
//!
//! The cost of pairing scene region `i` with style region `j` is the cosine
//! distance between their mean features plus `β` times the distance between
//! their normalized centroids. Assignments are solved with a hand-written
//! Hungarian algorithm (shortest augmenting paths with potentials).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MATCHING_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchingError {
    #[error("{scene} scene regions exceed {style} style regions; an injective matching is impossible, use surjective mode")]
    TooManySceneRegions { scene: usize, style: usize },
    #[error("surjective mode needs at least as many scene regions as style regions ({scene} < {style})")]
    TooFewSceneRegions { scene: usize, style: usize },
    #[error("pair {{scene: {scene}, style: {style}}} is out of range for {scene_regions} scene and {style_regions} style regions")]
    IndexOutOfRange {
        scene: i64,
        style: i64,
        scene_regions: usize,
        style_regions: usize,
    },
    #[error("pair {{scene: {scene}, style: {style}}} reuses style region {style} already taken by scene region {other_scene} under injective mode")]
    DuplicateStyle {
        scene: usize,
        style: usize,
        other_scene: usize,
    },
    #[error("pair {{scene: {scene}, style: {style}}} repeats scene region {scene}")]
    DuplicateScene { scene: usize, style: usize },
    #[error("matching declares {declared} {side} regions but the run has {actual}")]
    CountMismatch {
        side: &'static str,
        declared: usize,
        actual: usize,
    },
    #[error("unsupported matching format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed matching file: {0}")]
    Malformed(String),
    #[error("cost matrix entry ({row}, {col}) = {value} is not a finite non-negative number")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("matching is frozen and cannot be modified")]
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    Injective,
    Surjective,
    Custom,
}

impl fmt::Display for MatchingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchingMode::Injective => "injective",
            MatchingMode::Surjective => "surjective",
            MatchingMode::Custom => "custom",
        })
    }
}

/// Per-region summary used to build cost matrices: summed features and
/// summed normalized pixel positions. Pixels from several images of any
/// resolution can be pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionAccumulator {
    pub feature_sum: Vec<f64>,
    pub feature_count: usize,
    pub position_sum: [f64; 2],
    pub pixel_count: usize,
}

/// Pixel coordinate normalized to [0, 1] by its image dimension.
pub fn normalize_coord(x: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.5
    } else {
        x as f64 / (extent - 1) as f64
    }
}

impl RegionAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            feature_sum: vec![0.0; dim],
            feature_count: 0,
            position_sum: [0.0; 2],
            pixel_count: 0,
        }
    }

    pub fn add_feature(&mut self, f: &[f32]) {
        debug_assert_eq!(f.len(), self.feature_sum.len());
        self.feature_sum.iter_mut().zip(f).for_each(|(a, b)| *a += *b as f64);
        self.feature_count += 1;
    }

    pub fn add_pixel(&mut self, x: usize, y: usize, width: usize, height: usize) {
        self.position_sum[0] += normalize_coord(x, width);
        self.position_sum[1] += normalize_coord(y, height);
        self.pixel_count += 1;
    }

    pub fn mean_feature(&self) -> Option<Vec<f64>> {
        (self.feature_count > 0).then(|| {
            self.feature_sum
                .iter()
                .map(|v| v / self.feature_count as f64)
                .collect()
        })
    }

    pub fn centroid(&self) -> Option<[f64; 2]> {
        (self.pixel_count > 0).then(|| {
            [
                self.position_sum[0] / self.pixel_count as f64,
                self.position_sum[1] / self.pixel_count as f64,
            ]
        })
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> std::result::Result<f64, &'static str> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err("a");
    }
    if nb == 0.0 {
        return Err("b");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

fn mean_of(set: &[Vec<f32>], which: &str) -> Result<Vec<f64>> {
    let first = set
        .first()
        .ok_or_else(|| Error::Domain(format!("feature set {which} is empty")))?;
    let mut acc = RegionAccumulator::new(first.len());
    for f in set {
        if f.len() != first.len() {
            return Err(Error::Domain(format!("feature set {which} mixes vector lengths")));
        }
        acc.add_feature(f);
    }
    Ok(acc.mean_feature().unwrap())
}

/// `1 − cos∠(mean_a, mean_b)`, in [0, 2].
pub fn feature_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let ma = mean_of(a, "a")?;
    let mb = mean_of(b, "b")?;
    if ma.len() != mb.len() {
        return Err(Error::Domain(format!(
            "feature dimensionality differs ({} vs {})",
            ma.len(),
            mb.len()
        )));
    }
    cosine_distance(&ma, &mb).map_err(|side| Error::DegenerateRegion {
        side: if side == "a" { "first" } else { "second" },
        region: 0,
        reason: "mean feature has zero norm".into(),
    })
}

/// Euclidean distance between normalized region centroids, in [0, √2].
/// Pixels are `(x, y)`, dims are `(width, height)`.
pub fn patch_distance(
    a: &[(usize, usize)],
    b: &[(usize, usize)],
    dims_a: (usize, usize),
    dims_b: (usize, usize),
) -> Result<f64> {
    let centroid = |px: &[(usize, usize)], dims: (usize, usize), which: &str| {
        if px.is_empty() {
            return Err(Error::Domain(format!("region {which} has no pixels")));
        }
        let mut acc = RegionAccumulator::new(0);
        for &(x, y) in px {
            acc.add_pixel(x, y, dims.0, dims.1);
        }
        Ok(acc.centroid().unwrap())
    };
    let ca = centroid(a, dims_a, "a")?;
    let cb = centroid(b, dims_b, "b")?;
    Ok(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt())
}

/// Row-major `[C × S]` assignment costs and the two terms they blend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub feature_dist: Vec<f64>,
    pub patch_dist: Vec<f64>,
    pub beta: f64,
}

impl CostMatrix {
    /// A matrix given directly, with no component breakdown.
    pub fn from_weights(rows: usize, cols: usize, w: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || w.len() != rows * cols {
            return Err(Error::Domain(format!(
                "cost matrix of {rows}×{cols} needs {} entries, got {}",
                rows * cols,
                w.len()
            )));
        }
        let m = Self {
            rows,
            cols,
            feature_dist: w.clone(),
            patch_dist: vec![0.0; w.len()],
            w,
            beta: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged cost matrix".into()));
        }
        Self::from_weights(rows.len(), cols, rows.concat())
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.w.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(MatchingError::InvalidCost {
                    row: k / self.cols,
                    col: k % self.cols,
                    value: *v,
                }
                .into());
            }
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.w.chunks(self.cols).map(|r| r.to_vec()).collect()
    }

    pub fn transposed(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.w.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[j * self.rows + i] = self.w[i * self.cols + j];
            }
        }
        t
    }
}

/// `W_ij = feature_distance(i, j) + β·patch_distance(i, j)` from pooled
/// region summaries. Empty or zero-norm regions are reported with their index.
pub fn build_cost_matrix(
    scene: &[RegionAccumulator],
    style: &[RegionAccumulator],
    beta: f64,
) -> Result<CostMatrix> {
    if scene.is_empty() || style.is_empty() {
        return Err(Error::Domain("cost matrix needs at least one region on each side".into()));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Domain(format!("β must be finite and ≥ 0, got {beta}")));
    }
    let summarize = |regions: &[RegionAccumulator], side: &'static str| -> Result<Vec<(Vec<f64>, [f64; 2])>> {
        regions
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let degenerate = |reason: &str| Error::DegenerateRegion {
                    side,
                    region: k,
                    reason: reason.into(),
                };
                let m = r.mean_feature().ok_or_else(|| degenerate("no feature cells"))?;
                if m.iter().all(|v| *v == 0.0) {
                    return Err(degenerate("mean feature has zero norm"));
                }
                let c = r.centroid().ok_or_else(|| degenerate("no pixels"))?;
                Ok((m, c))
            })
            .collect()
    };
    let a = summarize(scene, "scene")?;
    let b = summarize(style, "style")?;
    if let Some(k) = b.iter().position(|(m, _)| m.len() != a[0].0.len()) {
        return Err(Error::Domain(format!("style region {k} feature dimensionality differs from scene regions")));
    }
    let (rows, cols) = (a.len(), b.len());
    let mut feature_dist = Vec::with_capacity(rows * cols);
    let mut patch_dist = Vec::with_capacity(rows * cols);
    for (ma, ca) in &a {
        for (mb, cb) in &b {
            feature_dist.push(cosine_distance(ma, mb).expect("norms checked above"));
            patch_dist.push(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt());
        }
    }
    let w = feature_dist
        .iter()
        .zip(&patch_dist)
        .map(|(f, p)| f + beta * p)
        .collect();
    Ok(CostMatrix {
        rows,
        cols,
        w,
        feature_dist,
        patch_dist,
        beta,
    })
}

/// Minimum-cost assignment of every row to a distinct column, `n ≤ m`.
fn hungarian(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(n <= m);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn assignment_cost(cost: &[f64], m: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, j)| cost[i * m + j]).sum()
}

/// Optimal assignment made unique: row 0 takes the lowest column that still
/// admits an optimal completion, then row 1, and so on.
fn lexicographic_assignment(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    let first = hungarian(cost, n, m);
    let opt = assignment_cost(cost, m, &first);
    let tol = 1e-9 * opt.abs().max(1.0);
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    let mut taken = vec![false; m];
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..m {
            if taken[j] {
                continue;
            }
            let cols: Vec<usize> = (0..m).filter(|&c| !taken[c] && c != j).collect();
            let sub: Vec<f64> = rest_rows
                .iter()
                .flat_map(|&r| cols.iter().map(move |&c| cost[r * m + c]))
                .collect();
            let sub_assign = hungarian(&sub, rest_rows.len(), cols.len());
            let total = fixed_cost + cost[i * m + j] + assignment_cost(&sub, cols.len(), &sub_assign);
            if total <= opt + tol {
                chosen = Some(j);
                break;
            }
        }
        // The Hungarian optimum always admits its own column, so a choice exists.
        let j = chosen.unwrap_or(first[i]);
        taken[j] = true;
        fixed_cost += cost[i * m + j];
        fixed.push(j);
    }
    fixed
}

/// A scene→style region pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub scene_regions: usize,
    pub style_regions: usize,
    pub mode: MatchingMode,
    pairs: BTreeMap<usize, usize>,
    pub total_cost: Option<f64>,
    frozen: bool,
}

impl Matching {
    pub fn new(scene_regions: usize, style_regions: usize, mode: MatchingMode) -> Self {
        Self {
            scene_regions,
            style_regions,
            mode,
            pairs: BTreeMap::new(),
            total_cost: None,
            frozen: false,
        }
    }

    pub fn pairs(&self) -> &BTreeMap<usize, usize> {
        &self.pairs
    }

    pub fn get(&self, scene: usize) -> Option<usize> {
        self.pairs.get(&scene).copied()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_pair(&mut self, scene: usize, style: usize) -> std::result::Result<(), MatchingError> {
        if self.frozen {
            return Err(MatchingError::Frozen);
        }
        if scene >= self.scene_regions || style >= self.style_regions {
            return Err(MatchingError::IndexOutOfRange {
                scene: scene as i64,
                style: style as i64,
                scene_regions: self.scene_regions,
                style_regions: self.style_regions,
            });
        }
        self.pairs.insert(scene, style);
        self.total_cost = None;
        Ok(())
    }

    /// Every scene label in `labels` must have a partner.
    pub fn check_covers(&self, labels: impl IntoIterator<Item = usize>) -> Result<()> {
        for l in labels {
            if !self.pairs.contains_key(&l) {
                return Err(Error::Config(format!(
                    "scene region {l} has no style region in the matching"
                )));
            }
        }
        Ok(())
    }

    /// Sum of `W[i, M(i)]` in scene order.
    pub fn cost_under(&self, w: &CostMatrix) -> f64 {
        self.pairs.iter().map(|(i, j)| w.get(*i, *j)).sum()
    }

    pub fn to_file(&self) -> MatchingFile {
        MatchingFile {
            version: MATCHING_FORMAT_VERSION,
            scene_regions: self.scene_regions,
            style_regions: self.style_regions,
            mode: self.mode,
            pairs: self
                .pairs
                .iter()
                .map(|(s, t)| PairEntry {
                    scene: *s as i64,
                    style: *t as i64,
                })
                .collect(),
            cost: self.total_cost,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("matching serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub scene: i64,
    pub style: i64,
}

/// On-disk and over-the-wire matching representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingFile {
    pub version: u32,
    pub scene_regions: usize,
    pub style_regions: usize,
    pub mode: MatchingMode,
    pub pairs: Vec<PairEntry>,
    pub cost: Option<f64>,
}

fn from_assignment(w: &CostMatrix, mode: MatchingMode, assign: &[usize]) -> Matching {
    let mut m = Matching::new(w.rows, w.cols, mode);
    for (i, j) in assign.iter().enumerate() {
        m.pairs.insert(i, *j);
    }
    m.total_cost = Some(m.cost_under(w));
    m
}

/// Minimum-cost injective matching; ties go to the lowest style index for the
/// lowest scene index.
pub fn solve_injective(w: &CostMatrix) -> Result<Matching> {
    w.validate()?;
    if w.rows > w.cols {
        return Err(MatchingError::TooManySceneRegions {
            scene: w.rows,
            style: w.cols,
        }
        .into());
    }
    let assign = lexicographic_assignment(&w.w, w.rows, w.cols);
    Ok(from_assignment(w, MatchingMode::Injective, &assign))
}

/// Matching for more scene than style regions: one bijective pass gives each
/// style region a distinct scene region, then further injective passes over
/// the still unmatched scene regions (reusing the original costs) until every
/// scene region has a partner.
pub fn solve_surjective(w: &CostMatrix) -> Result<Matching> {
    w.validate()?;
    if w.rows < w.cols {
        return Err(MatchingError::TooFewSceneRegions {
            scene: w.rows,
            style: w.cols,
        }
        .into());
    }
    if w.rows == w.cols {
        let mut m = solve_injective(w)?;
        m.mode = MatchingMode::Surjective;
        return Ok(m);
    }
    let s = w.cols;
    let mut assign = vec![usize::MAX; w.rows];
    let mut remaining: Vec<usize> = (0..w.rows).collect();
    while !remaining.is_empty() {
        let r = remaining.len();
        if r <= s {
            let sub: Vec<f64> = remaining.iter().flat_map(|&i| w.row(i).iter().copied()).collect();
            let a = lexicographic_assignment(&sub, r, s);
            for (k, &i) in remaining.iter().enumerate() {
                assign[i] = a[k];
            }
            remaining.clear();
        } else {
            // styles pick distinct scene regions
            let sub: Vec<f64> = (0..s)
                .flat_map(|j| remaining.iter().map(move |&i| w.get(i, j)))
                .collect();
            let a = lexicographic_assignment(&sub, s, r);
            for (j, &k) in a.iter().enumerate() {
                assign[remaining[k]] = j;
            }
            remaining.retain(|&i| assign[i] == usize::MAX);
        }
    }
    Ok(from_assignment(w, MatchingMode::Surjective, &assign))
}

/// Injective when possible, surjective otherwise.
pub fn solve_auto(w: &CostMatrix) -> Result<Matching> {
    if w.rows <= w.cols {
        solve_injective(w)
    } else {
        solve_surjective(w)
    }
}

/// Validates a user-edited matching against the run's region counts. The
/// result always has mode `custom`; a file declaring `injective` must not
/// reuse a style region.
pub fn apply_custom_matching(
    file: &MatchingFile,
    scene_regions: usize,
    style_regions: usize,
) -> std::result::Result<Matching, MatchingError> {
    if file.version != MATCHING_FORMAT_VERSION {
        return Err(MatchingError::UnsupportedVersion(file.version));
    }
    if file.scene_regions != scene_regions {
        return Err(MatchingError::CountMismatch {
            side: "scene",
            declared: file.scene_regions,
            actual: scene_regions,
        });
    }
    if file.style_regions != style_regions {
        return Err(MatchingError::CountMismatch {
            side: "style",
            declared: file.style_regions,
            actual: style_regions,
        });
    }
    let mut m = Matching::new(scene_regions, style_regions, MatchingMode::Custom);
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &file.pairs {
        if p.scene < 0 || p.style < 0 || p.scene as usize >= scene_regions || p.style as usize >= style_regions {
            return Err(MatchingError::IndexOutOfRange {
                scene: p.scene,
                style: p.style,
                scene_regions,
                style_regions,
            });
        }
        let (sc, st) = (p.scene as usize, p.style as usize);
        if m.pairs.contains_key(&sc) {
            return Err(MatchingError::DuplicateScene { scene: sc, style: st });
        }
        if file.mode == MatchingMode::Injective {
            if let Some(&other) = owner.get(&st) {
                return Err(MatchingError::DuplicateStyle {
                    scene: sc,
                    style: st,
                    other_scene: other,
                });
            }
        }
        owner.insert(st, sc);
        m.pairs.insert(sc, st);
    }
    Ok(m)
}

pub fn parse_matching_json(text: &str) -> std::result::Result<MatchingFile, MatchingError> {
    serde_json::from_str(text).map_err(|e| MatchingError::Malformed(e.to_string()))
}
