//! Procedural synthetic posed-RGB-D scenes: generation, on-disk format,
//! and train-time augmentation.

mod augment;
mod gen;
mod io;

pub use augment::*;
pub use gen::*;
pub use io::*;

use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, Vec3};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{path}: invariant violated: {msg}")]
    Invariant { path: PathBuf, msg: String },
    #[error("scene generation failed: {0}")]
    Generation(String),
}

/// Background semantic class; never an instance.
pub const BACKGROUND_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Ordered (class_id, name); ids dense from 0, names 1..3 words.
    pub entries: Vec<(usize, String)>,
}

impl Vocabulary {
    pub fn new(names: &[&str]) -> Self {
        Vocabulary {
            entries: names.iter().enumerate().map(|(i, n)| (i, n.to_string())).collect(),
        }
    }

    /// Class 0 is the room shell; classes 1..=4 are object classes keyed by
    /// albedo and shape.
    pub fn default_desk() -> Self {
        Vocabulary::new(&["background", "red box", "green box", "blue ball", "yellow ball"])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, class_id: usize) -> &str {
        &self.entries[class_id].1
    }

    pub fn contains(&self, class_id: usize) -> bool {
        class_id < self.entries.len()
    }

    /// Object classes exclude the background shell.
    pub fn object_classes(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&c| c != BACKGROUND_CLASS).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, (id, name)) in self.entries.iter().enumerate() {
            if *id != i {
                return Err(format!("class ids not dense: entry {} has id {}", i, id));
            }
            let words = name.split_whitespace().count();
            if words == 0 || words > 3 {
                return Err(format!("class name {:?} must be 1..3 words", name));
            }
        }
        Ok(())
    }
}

/// What the on-disk format records per instance; full shapes/albedos exist
/// only inside the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceLabel {
    pub instance_id: u16,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    /// [3, H, W], values in [0,1] quantized to 8 bits.
    pub rgb: Tensor,
    pub depth: DepthMap,
    /// H*W instance ids; 0 = background.
    pub gt_instance: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub instance_id: u16,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub labels: Vec<InstanceLabel>,
    pub gt_surface_cloud: Vec<SurfacePoint>,
    pub vocabulary: Vocabulary,
}

impl Scene {
    pub fn image_size(&self) -> (usize, usize) {
        let f = &self.frames[0];
        (f.intrinsics.height, f.intrinsics.width)
    }

    /// Labeled instance ids, ascending.
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.labels.iter().map(|l| l.instance_id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn class_of_instance(&self, instance_id: u16) -> Option<usize> {
        self.labels
            .iter()
            .find(|l| l.instance_id == instance_id)
            .map(|l| l.class_id)
    }
}
