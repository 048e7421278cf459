//! Single-file training checkpoints.
//!
//! Layout: magic, a JSON header, the model block, an optional optimizer
//! block, then a SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::field_model::{ModelOptimizer, ModelStage, RadianceModel};
use crate::style_losses::ColorTransform;

const MAGIC: &[u8; 8] = b"LSRFCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: ModelStage,
    /// Iterations completed in the current stage.
    pub iteration: u64,
    /// Hex SHA-256 of the geometry grid and MLP.
    pub geometry_digest: String,
    pub num_scene_regions: usize,
    pub num_styles: u32,
    pub seed: u64,
    /// One per style index once fitted.
    #[serde(default)]
    pub color_transforms: Vec<ColorTransform>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: RadianceModel,
    pub optimizer: Option<ModelOptimizer>,
}

impl Checkpoint {
    pub fn new(
        model: RadianceModel,
        optimizer: Option<ModelOptimizer>,
        iteration: u64,
        seed: u64,
        color_transforms: Vec<ColorTransform>,
    ) -> Self {
        let header = CheckpointHeader {
            stage: model.stage(),
            iteration,
            geometry_digest: model.geometry_digest().to_string(),
            num_scene_regions: model.num_scene_regions(),
            num_styles: model.num_styles(),
            seed,
            color_transforms,
        };
        Self {
            header,
            model,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.bytes(serde_json::to_string(&self.header).expect("header serializes").as_bytes());
        self.model.write(&mut w);
        match &self.optimizer {
            Some(o) => {
                w.u8(1);
                o.write(&mut w);
            }
            None => w.u8(0),
        }
        let digest = Sha256::digest(&w.buf);
        w.buf.extend_from_slice(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader::new(&body[8..]);
        let header: CheckpointHeader = serde_json::from_slice(&r.bytes()?)?;
        let model = RadianceModel::read(&mut r)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => Some(ModelOptimizer::read(&mut r, &model)?),
            x => return Err(Error::Format(format!("bad optimizer flag {x}"))),
        };
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint body".into()));
        }
        if header.stage != model.stage()
            || header.geometry_digest != model.geometry_digest().to_string()
            || header.num_scene_regions != model.num_scene_regions()
            || header.num_styles != model.num_styles()
        {
            return Err(Error::Format("checkpoint header disagrees with stored model".into()));
        }
        Ok(Self {
            header,
            model,
            optimizer,
        })
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        std::io::Write::write_all(&mut tmp, &self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Header only, without decoding the parameter blocks.
    pub fn peek(path: &Path) -> Result<CheckpointHeader> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint file", path.display())));
        }
        let mut r = Reader::new(&bytes[8..]);
        Ok(serde_json::from_slice(&r.bytes()?)?)
    }
}
