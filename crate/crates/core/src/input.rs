//! What the mining pipeline knows about one image.

use crate::error::{Error, Result};
use crate::geometry::ImageExtent;
use crate::scalar::Scalar;
use crate::synthetic::SyntheticScene;
use crate::ImageId;

/// Per-image input handed to proposal sources, refiners, and scoring
/// backends.
///
/// Synthetic inputs carry full scene geometry; external inputs carry only
/// identity and extent, which is all file- and endpoint-backed stages
/// need.
#[derive(Debug, Clone)]
pub enum ImageInput<'a, S: Scalar = f64> {
    Scene {
        id: ImageId,
        scene: &'a SyntheticScene<S>,
    },
    External {
        id: ImageId,
        extent: ImageExtent,
    },
}

impl<'a, S: Scalar> ImageInput<'a, S> {
    pub fn id(&self) -> ImageId {
        match self {
            ImageInput::Scene { id, .. } | ImageInput::External { id, .. } => *id,
        }
    }

    pub fn extent(&self) -> ImageExtent {
        match self {
            ImageInput::Scene { scene, .. } => scene.extent,
            ImageInput::External { extent, .. } => *extent,
        }
    }

    /// Scene geometry, or an error for backends that cannot run without it.
    pub fn scene(&self) -> Result<&'a SyntheticScene<S>> {
        match self {
            ImageInput::Scene { scene, .. } => Ok(scene),
            ImageInput::External { id, .. } => Err(Error::SceneRequired { image_id: *id }),
        }
    }
}
