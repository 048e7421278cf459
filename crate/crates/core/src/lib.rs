//! Locally stylized radiance fields.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod field_model;
pub mod hash_encoding;
pub mod imageio;
pub mod jobs;
pub mod mlp;
pub mod optim;
pub mod pipeline;
pub mod region_matching;
pub mod segmentation;
pub mod style_losses;
pub mod toy_scene;
pub mod volume_renderer;

pub use error::{Error, Result};
