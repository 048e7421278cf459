//! Dual-branch radiance field.
//!
//! Geometry branch: geometry hash grid → geometry MLP → density. Appearance
//! branch: appearance hash grid (style-indexed) → appearance MLP → rgb, and
//! the same appearance features → segmentation MLP → region logits. There is
//! no view-direction input and no feature flows between the branches.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::hash_encoding::{Aabb, HashGrid, HashGridConfig};
use crate::mlp::{Mlp, MlpGrads, MlpTape};
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub geometry_grid: HashGridConfig,
    pub appearance_grid: HashGridConfig,
    pub geometry_hidden: Vec<usize>,
    /// Extra geometry outputs next to the density logit.
    pub geometry_feature_dim: usize,
    pub appearance_hidden: Vec<usize>,
    pub segmentation_hidden: Vec<usize>,
    pub num_scene_regions: usize,
    /// Raw density is clamped to `[-density_clamp, density_clamp]` before `exp`.
    pub density_clamp: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry_grid: HashGridConfig::default(),
            appearance_grid: HashGridConfig::default(),
            geometry_hidden: vec![64],
            geometry_feature_dim: 15,
            appearance_hidden: vec![64, 64],
            segmentation_hidden: vec![64, 64],
            num_scene_regions: 1,
            density_clamp: 15.0,
        }
    }
}

impl ModelConfig {
    pub fn with_bounding_box(mut self, bbox: Aabb) -> Self {
        self.geometry_grid.bounding_box = bbox;
        self.appearance_grid.bounding_box = bbox;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry_grid.validate()?;
        self.appearance_grid.validate()?;
        if self.geometry_grid.num_styles != 1 {
            return Err(Error::Domain("the geometry grid carries no style term; num_styles must be 1".into()));
        }
        if self.geometry_grid.bounding_box != self.appearance_grid.bounding_box {
            return Err(Error::Domain("both branches must share one bounding box".into()));
        }
        if self.num_scene_regions < 1 {
            return Err(Error::Domain("num_scene_regions must be ≥ 1".into()));
        }
        if !(self.density_clamp > 0.0) {
            return Err(Error::Domain("density_clamp must be positive".into()));
        }
        Ok(())
    }

    pub fn num_styles(&self) -> u32 {
        self.appearance_grid.num_styles
    }
}

/// Lifecycle marker stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStage {
    Untrained,
    Reconstructed,
    Stylized,
}

impl ModelStage {
    fn code(self) -> u8 {
        match self {
            ModelStage::Untrained => 0,
            ModelStage::Reconstructed => 1,
            ModelStage::Stylized => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ModelStage::Untrained,
            1 => ModelStage::Reconstructed,
            2 => ModelStage::Stylized,
            _ => return Err(Error::Format(format!("unknown stage code {c}"))),
        })
    }
}

impl fmt::Display for ModelStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelStage::Untrained => "untrained",
            ModelStage::Reconstructed => "reconstructed",
            ModelStage::Stylized => "stylized",
        })
    }
}

/// Training stage selecting which components receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Reconstruction,
    Stylization,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Stage::Reconstruction),
            "stylization" => Ok(Stage::Stylization),
            other => Err(Error::Domain(format!("unknown training stage '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    GeometryGrid,
    GeometryMlp,
    AppearanceGrid,
    AppearanceMlp,
    SegmentationMlp,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::GeometryGrid,
        ParamGroup::GeometryMlp,
        ParamGroup::AppearanceGrid,
        ParamGroup::AppearanceMlp,
        ParamGroup::SegmentationMlp,
    ];

    pub fn is_geometry(self) -> bool {
        matches!(self, ParamGroup::GeometryGrid | ParamGroup::GeometryMlp)
    }
}

pub type GroupSet = BTreeSet<ParamGroup>;

/// Reconstruction trains everything, the segmentation head included.
/// Stylization trains exactly the appearance grid and appearance MLP.
pub fn trainable_parameters(stage: Stage) -> GroupSet {
    match stage {
        Stage::Reconstruction => ParamGroup::ALL.into_iter().collect(),
        Stage::Stylization => [ParamGroup::AppearanceGrid, ParamGroup::AppearanceMlp]
            .into_iter()
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    pub position: [f32; 3],
    pub density: f32,
    pub rgb: [f32; 3],
    pub region_logits: Vec<f32>,
}

/// SHA-256 over the serialized geometry grid and geometry MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GeometryDigest(pub [u8; 32]);

impl fmt::Display for GeometryDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceModel {
    config: ModelConfig,
    pub geometry_grid: HashGrid,
    pub geometry_mlp: Mlp,
    pub appearance_grid: HashGrid,
    pub appearance_mlp: Mlp,
    pub segmentation_mlp: Mlp,
    stage: ModelStage,
    frozen_geometry: Option<GeometryDigest>,
}

/// Batched field outputs; `logits` is empty unless requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldOutputs {
    pub density: Vec<f32>,
    pub rgb: Vec<f32>,
    pub logits: Vec<f32>,
}

pub struct FieldTape {
    positions: Vec<[f32; 3]>,
    style_index: u32,
    geometry: Option<(MlpTape, Vec<f32>)>,
    appearance: Option<MlpTape>,
    segmentation: Option<MlpTape>,
    rgb: Vec<f32>,
}

/// Gradient buffers for every component.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub geometry_grid: Vec<f32>,
    pub geometry_mlp: MlpGrads,
    pub appearance_grid: Vec<f32>,
    pub appearance_mlp: MlpGrads,
    pub segmentation_mlp: MlpGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &RadianceModel) -> Self {
        Self {
            geometry_grid: vec![0.0; model.geometry_grid.table().len()],
            geometry_mlp: MlpGrads::zeros_like(&model.geometry_mlp),
            appearance_grid: vec![0.0; model.appearance_grid.table().len()],
            appearance_mlp: MlpGrads::zeros_like(&model.appearance_mlp),
            segmentation_mlp: MlpGrads::zeros_like(&model.segmentation_mlp),
        }
    }

    pub fn tensors(&self, group: ParamGroup) -> Vec<&[f32]> {
        match group {
            ParamGroup::GeometryGrid => vec![&self.geometry_grid],
            ParamGroup::GeometryMlp => self.geometry_mlp.tensors(),
            ParamGroup::AppearanceGrid => vec![&self.appearance_grid],
            ParamGroup::AppearanceMlp => self.appearance_mlp.tensors(),
            ParamGroup::SegmentationMlp => self.segmentation_mlp.tensors(),
        }
    }

    /// All entries of the given groups, flattened in group order.
    pub fn flatten(&self, groups: &GroupSet) -> Vec<f32> {
        groups
            .iter()
            .flat_map(|g| self.tensors(*g).into_iter().flatten().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|g| self.tensors(*g).iter().all(|t| t.iter().all(|v| v.is_finite())))
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const MAGIC: &[u8; 8] = b"LSRFMDL1";

impl RadianceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_grid_scale(config, seed, 1e-4)
    }

    /// Like [`RadianceModel::new`] with grid entries drawn from
    /// `U(-grid_scale, grid_scale)`.
    pub fn with_grid_scale(config: ModelConfig, seed: u64, grid_scale: f32) -> Result<Self> {
        config.validate()?;
        let gdim = config.geometry_grid.output_dim();
        let adim = config.appearance_grid.output_dim();
        let dims = |input: usize, hidden: &[usize], out: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(out);
            d
        };
        let geometry_grid = HashGrid::random(config.geometry_grid.clone(), seed ^ 0x11, grid_scale)?;
        let appearance_grid = HashGrid::random(config.appearance_grid.clone(), seed ^ 0x22, grid_scale)?;
        let geometry_mlp = Mlp::new(
            &dims(gdim, &config.geometry_hidden, 1 + config.geometry_feature_dim),
            seed ^ 0x33,
        );
        let appearance_mlp = Mlp::new(&dims(adim, &config.appearance_hidden, 3), seed ^ 0x44);
        let segmentation_mlp = Mlp::new(
            &dims(adim, &config.segmentation_hidden, config.num_scene_regions),
            seed ^ 0x55,
        );
        Ok(Self {
            config,
            geometry_grid,
            geometry_mlp,
            appearance_grid,
            appearance_mlp,
            segmentation_mlp,
            stage: ModelStage::Untrained,
            frozen_geometry: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_scene_regions(&self) -> usize {
        self.config.num_scene_regions
    }

    pub fn num_styles(&self) -> u32 {
        self.config.num_styles()
    }

    pub fn bounding_box(&self) -> Aabb {
        self.config.geometry_grid.bounding_box
    }

    pub fn stage(&self) -> ModelStage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: ModelStage) {
        self.stage = stage;
    }

    pub fn frozen_geometry(&self) -> Option<GeometryDigest> {
        self.frozen_geometry
    }

    pub fn check_style(&self, style_index: u32) -> Result<()> {
        if style_index >= self.num_styles() {
            return Err(Error::Domain(format!(
                "style index {style_index} out of range for a model with {} style(s)",
                self.num_styles()
            )));
        }
        Ok(())
    }

    pub fn geometry_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        self.geometry_grid.write(&mut w);
        self.geometry_mlp.write(&mut w);
        w.buf
    }

    pub fn geometry_digest(&self) -> GeometryDigest {
        GeometryDigest(Sha256::digest(self.geometry_bytes()).into())
    }

    /// Excludes the geometry grid and MLP from all later updates and records
    /// their digest. Calling it again returns the same digest.
    pub fn freeze_geometry(&mut self) -> Result<GeometryDigest> {
        if self.stage < ModelStage::Reconstructed {
            return Err(Error::State(
                "geometry can only be frozen after reconstruction completes".into(),
            ));
        }
        if let Some(d) = self.frozen_geometry {
            return Ok(d);
        }
        let d = self.geometry_digest();
        self.frozen_geometry = Some(d);
        Ok(d)
    }

    /// Point queries with full validation.
    pub fn query(&self, points: &[[f32; 3]], style_index: u32) -> Result<Vec<PointSample>> {
        self.check_style(style_index)?;
        let bbox = self.bounding_box();
        if let Some(p) = points.iter().find(|p| !bbox.contains(**p)) {
            return Err(Error::Range(format!("point {p:?} lies outside bounding box {bbox:?}")));
        }
        let out = self.forward(points, style_index, true)?;
        let c = self.num_scene_regions();
        Ok(points
            .iter()
            .enumerate()
            .map(|(i, p)| PointSample {
                position: *p,
                density: out.density[i],
                rgb: [out.rgb[3 * i], out.rgb[3 * i + 1], out.rgb[3 * i + 2]],
                region_logits: out.logits[i * c..(i + 1) * c].to_vec(),
            })
            .collect())
    }

    pub fn density(&self, points: &[[f32; 3]]) -> Result<Vec<f32>> {
        let n = points.len();
        let feats = self.geometry_grid.encode_batch(points, 0)?;
        let raw = self.geometry_mlp.forward(&feats, n);
        let stride = self.geometry_mlp.out_dim();
        Ok((0..n).map(|i| self.activate_density(raw[i * stride]).0).collect())
    }

    fn activate_density(&self, raw: f32) -> (f32, bool) {
        let c = self.config.density_clamp;
        let clamped = raw.clamp(-c, c);
        (clamped.exp(), raw > -c && raw < c)
    }

    pub fn forward(&self, positions: &[[f32; 3]], style_index: u32, want_logits: bool) -> Result<FieldOutputs> {
        self.check_style(style_index)?;
        let n = positions.len();
        let density = self.density(positions)?;
        let afeats = self.appearance_grid.encode_batch(positions, style_index)?;
        let mut rgb = self.appearance_mlp.forward(&afeats, n);
        rgb.iter_mut().for_each(|v| *v = sigmoid(*v));
        let logits = if want_logits {
            self.segmentation_mlp.forward(&afeats, n)
        } else {
            Vec::new()
        };
        Ok(FieldOutputs { density, rgb, logits })
    }

    /// Forward pass that records whatever the `groups` backward will need.
    pub fn forward_tape(
        &self,
        positions: &[[f32; 3]],
        style_index: u32,
        want_logits: bool,
        groups: &GroupSet,
    ) -> Result<(FieldOutputs, FieldTape)> {
        self.check_style(style_index)?;
        let n = positions.len();
        let geometry_trainable = groups.iter().any(|g| g.is_geometry());
        let (density, geometry) = if geometry_trainable {
            let feats = self.geometry_grid.encode_batch(positions, 0)?;
            let (raw, tape) = self.geometry_mlp.forward_tape(&feats, n);
            let stride = self.geometry_mlp.out_dim();
            let raw0: Vec<f32> = (0..n).map(|i| raw[i * stride]).collect();
            let density = raw0.iter().map(|r| self.activate_density(*r).0).collect();
            (density, Some((tape, raw0)))
        } else {
            (self.density(positions)?, None)
        };

        let afeats = self.appearance_grid.encode_batch(positions, style_index)?;
        let appearance_trainable = groups.contains(&ParamGroup::AppearanceGrid)
            || groups.contains(&ParamGroup::AppearanceMlp);
        let seg_trainable = groups.contains(&ParamGroup::SegmentationMlp);
        let (mut rgb, appearance) = if appearance_trainable {
            let (r, t) = self.appearance_mlp.forward_tape(&afeats, n);
            (r, Some(t))
        } else {
            (self.appearance_mlp.forward(&afeats, n), None)
        };
        rgb.iter_mut().for_each(|v| *v = sigmoid(*v));
        let (logits, segmentation) = if want_logits && (seg_trainable || groups.contains(&ParamGroup::AppearanceGrid)) {
            let (l, t) = self.segmentation_mlp.forward_tape(&afeats, n);
            (l, Some(t))
        } else if want_logits {
            (self.segmentation_mlp.forward(&afeats, n), None)
        } else {
            (Vec::new(), None)
        };
        let tape = FieldTape {
            positions: positions.to_vec(),
            style_index,
            geometry,
            appearance,
            segmentation,
            rgb: rgb.clone(),
        };
        Ok((FieldOutputs { density, rgb, logits }, tape))
    }

    /// Backpropagates output gradients into `grads` for the given groups.
    /// `d_rgb` is with respect to the post-sigmoid colour.
    pub fn backward(
        &self,
        tape: &FieldTape,
        d_density: Option<&[f32]>,
        d_rgb: &[f32],
        d_logits: Option<&[f32]>,
        groups: &GroupSet,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let n = tape.positions.len();
        if let (Some(dd), Some((gtape, raw0))) = (d_density, tape.geometry.as_ref()) {
            if groups.iter().any(|g| g.is_geometry()) {
                let stride = self.geometry_mlp.out_dim();
                let mut d_raw = vec![0.0f32; n * stride];
                for i in 0..n {
                    let (sigma, live) = self.activate_density(raw0[i]);
                    if live {
                        d_raw[i * stride] = dd[i] * sigma;
                    }
                }
                let mlp_grads = groups
                    .contains(&ParamGroup::GeometryMlp)
                    .then_some(&mut grads.geometry_mlp);
                let d_feat = self.geometry_mlp.backward(gtape, &d_raw, mlp_grads);
                if groups.contains(&ParamGroup::GeometryGrid) {
                    self.geometry_grid
                        .backward_batch(&tape.positions, 0, &d_feat, &mut grads.geometry_grid)?;
                }
            }
        }

        let adim = self.appearance_grid.output_dim();
        let mut d_afeat = vec![0.0f32; n * adim];
        let mut any_feature_grad = false;
        if let Some(atape) = tape.appearance.as_ref() {
            let d_pre: Vec<f32> = d_rgb
                .iter()
                .zip(&tape.rgb)
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            let mlp_grads = groups
                .contains(&ParamGroup::AppearanceMlp)
                .then_some(&mut grads.appearance_mlp);
            let d = self.appearance_mlp.backward(atape, &d_pre, mlp_grads);
            d_afeat.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            any_feature_grad = true;
        }
        if let (Some(dl), Some(stape)) = (d_logits, tape.segmentation.as_ref()) {
            let mlp_grads = groups
                .contains(&ParamGroup::SegmentationMlp)
                .then_some(&mut grads.segmentation_mlp);
            let d = self.segmentation_mlp.backward(stape, dl, mlp_grads);
            d_afeat.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            any_feature_grad = true;
        }
        if any_feature_grad && groups.contains(&ParamGroup::AppearanceGrid) {
            self.appearance_grid.backward_batch(
                &tape.positions,
                tape.style_index,
                &d_afeat,
                &mut grads.appearance_grid,
            )?;
        }
        Ok(())
    }

    fn tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut [f32]> {
        match group {
            ParamGroup::GeometryGrid => vec![self.geometry_grid.table_mut()],
            ParamGroup::GeometryMlp => self.geometry_mlp.tensors_mut(),
            ParamGroup::AppearanceGrid => vec![self.appearance_grid.table_mut()],
            ParamGroup::AppearanceMlp => self.appearance_mlp.tensors_mut(),
            ParamGroup::SegmentationMlp => self.segmentation_mlp.tensors_mut(),
        }
    }

    pub fn tensors(&self, group: ParamGroup) -> Vec<&[f32]> {
        match group {
            ParamGroup::GeometryGrid => vec![self.geometry_grid.table()],
            ParamGroup::GeometryMlp => self.geometry_mlp.tensors(),
            ParamGroup::AppearanceGrid => vec![self.appearance_grid.table()],
            ParamGroup::AppearanceMlp => self.appearance_mlp.tensors(),
            ParamGroup::SegmentationMlp => self.segmentation_mlp.tensors(),
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.buf.extend_from_slice(MAGIC);
        w.bytes(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        w.u8(self.stage.code());
        match self.frozen_geometry {
            Some(d) => {
                w.u8(1);
                w.buf.extend_from_slice(&d.0);
            }
            None => w.u8(0),
        }
        self.geometry_grid.write(w);
        self.geometry_mlp.write(w);
        self.appearance_grid.write(w);
        self.appearance_mlp.write(w);
        self.segmentation_mlp.write(w);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let mut magic = [0u8; 8];
        for m in magic.iter_mut() {
            *m = r.u8()?;
        }
        if &magic != MAGIC {
            return Err(Error::Format("not a radiance model block".into()));
        }
        let config: ModelConfig = serde_json::from_slice(&r.bytes()?)?;
        config.validate()?;
        let stage = ModelStage::from_code(r.u8()?)?;
        let frozen_geometry = match r.u8()? {
            0 => None,
            1 => {
                let mut d = [0u8; 32];
                for b in d.iter_mut() {
                    *b = r.u8()?;
                }
                Some(GeometryDigest(d))
            }
            x => return Err(Error::Format(format!("bad frozen flag {x}"))),
        };
        let model = Self {
            geometry_grid: HashGrid::read(r)?,
            geometry_mlp: Mlp::read(r)?,
            appearance_grid: HashGrid::read(r)?,
            appearance_mlp: Mlp::read(r)?,
            segmentation_mlp: Mlp::read(r)?,
            config,
            stage,
            frozen_geometry,
        };
        if model.geometry_grid.config() != &model.config.geometry_grid
            || model.appearance_grid.config() != &model.config.appearance_grid
        {
            return Err(Error::Format("grid configs disagree with model config".into()));
        }
        if model.segmentation_mlp.out_dim() != model.config.num_scene_regions {
            return Err(Error::Format("segmentation head width disagrees with C".into()));
        }
        if let Some(d) = frozen_geometry {
            if d != model.geometry_digest() {
                return Err(Error::Format("frozen geometry digest does not match stored geometry".into()));
            }
        }
        Ok(model)
    }
}

/// Adam over the model's parameter groups. Refuses to touch frozen geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptimizer {
    pub config: AdamConfig,
    states: Vec<(ParamGroup, Vec<AdamState>)>,
}

impl ModelOptimizer {
    pub fn new(model: &RadianceModel, config: AdamConfig) -> Self {
        let states = ParamGroup::ALL
            .iter()
            .map(|g| (*g, model.tensors(*g).iter().map(|t| AdamState::new(t.len())).collect()))
            .collect();
        Self { config, states }
    }

    pub fn step(
        &mut self,
        model: &mut RadianceModel,
        grads: &ModelGrads,
        groups: &GroupSet,
        lr: f32,
    ) -> Result<()> {
        if model.frozen_geometry.is_some() {
            if let Some(g) = groups.iter().find(|g| g.is_geometry()) {
                return Err(Error::State(format!("{g:?} is frozen and cannot be updated")));
            }
        }
        for (group, states) in self.states.iter_mut() {
            if !groups.contains(group) {
                continue;
            }
            let params = model.tensors_mut(*group);
            let gs = grads.tensors(*group);
            for ((p, g), st) in params.into_iter().zip(gs).zip(states.iter_mut()) {
                st.update(p, g, lr, &self.config);
            }
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.f32(self.config.beta1);
        w.f32(self.config.beta2);
        w.f32(self.config.epsilon);
        w.u32(self.states.len() as u32);
        for (_, states) in &self.states {
            w.u32(states.len() as u32);
            for s in states {
                s.write(w);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader, model: &RadianceModel) -> Result<Self> {
        let config = AdamConfig {
            beta1: r.f32()?,
            beta2: r.f32()?,
            epsilon: r.f32()?,
        };
        let n = r.u32()? as usize;
        if n != ParamGroup::ALL.len() {
            return Err(Error::Format("optimizer group count mismatch".into()));
        }
        let mut states = Vec::with_capacity(n);
        for g in ParamGroup::ALL {
            let k = r.u32()? as usize;
            let shapes = model.tensors(g);
            if k != shapes.len() {
                return Err(Error::Format(format!("optimizer tensor count mismatch for {g:?}")));
            }
            let mut v = Vec::with_capacity(k);
            for t in shapes {
                let s = AdamState::read(r)?;
                if s.len() != t.len() {
                    return Err(Error::Format(format!("optimizer state shape mismatch for {g:?}")));
                }
                v.push(s);
            }
            states.push((g, v));
        }
        Ok(Self { config, states })
    }
}
