//! Image ingestion and the checksummed dataset container.

mod build;
mod file;
mod image;
pub mod synth;

pub use self::build::{build_dataset, BuildSummary, SkippedFile};
pub use self::file::{read_dataset, write_dataset, DatasetWriter, DATASET_MAGIC, DATASET_VERSION};
pub use self::image::{decode_image, load_image, normalize, resize_bilinear, PixelGrid};

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::train::{Labeled, Sample};

/// Class folder names in label order.
pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["healthy", "glioma", "meningioma", "pituitary"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {name}: {reason}")]
    Decode { name: String, reason: String },
    #[error("unsupported bit depth in {name}: {color}")]
    UnsupportedBitDepth { name: String, color: String },
    #[error("missing class directory {0}")]
    MissingClassDir(PathBuf),
    #[error("invalid label map: {0}")]
    LabelMap(String),
    #[error("invalid dataset file: {0}")]
    Format(String),
    #[error("dataset file is truncated")]
    Truncated,
    #[error("dataset checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("unsupported dataset version {0}")]
    Version(u16),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
        let path = path.into();
        move |source| DataError::Io { path, source }
    }

    /// True for failures of the environment rather than of the content.
    pub fn is_io(&self) -> bool {
        matches!(self, DataError::Io { .. })
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Bijection between class names and contiguous ids `0..4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self {
            names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != DEFAULT_CLASS_NAMES.len() {
            return Err(DataError::LabelMap(format!(
                "expected {} classes, got {}",
                DEFAULT_CLASS_NAMES.len(),
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.len() > 255 || name.contains(['/', '\\', ',']) {
                return Err(DataError::LabelMap(format!("invalid class name `{name}`")));
            }
            if names[..i].contains(name) {
                return Err(DataError::LabelMap(format!("duplicate class name `{name}`")));
            }
        }
        Ok(Self { names })
    }

    /// Parses a comma-separated list such as `healthy,glioma,meningioma,pituitary`.
    pub fn parse(list: &str) -> Result<Self> {
        Self::new(list.split(',').map(|s| s.trim().to_string()).collect())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl fmt::Display for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names.join(","))
    }
}

/// One labelled image, `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

impl Labeled for Example {
    fn label(&self) -> usize {
        self.label
    }
}

impl Sample<f32> for Example {
    fn input(&self) -> &Tensor<f32> {
        &self.image
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_map: LabelMap,
    /// `(height, width)` of every image.
    pub image_size: (usize, usize),
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_map.len()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Checks the per-example invariants: shape, label range, pixels in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        for e in &self.examples {
            validate_example(e, self.label_map.len(), h, w)?;
        }
        Ok(())
    }
}

pub(crate) fn validate_example(e: &Example, classes: usize, h: usize, w: usize) -> Result<()> {
    if e.image.dims() != [3, h, w] {
        return Err(DataError::Validation(format!(
            "{}: image shape {:?} differs from [3, {h}, {w}]",
            e.source_id,
            e.image.dims()
        )));
    }
    if e.label >= classes {
        return Err(DataError::Validation(format!(
            "{}: label {} outside 0..{classes}",
            e.source_id, e.label
        )));
    }
    if let Some(v) = e.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DataError::Validation(format!(
            "{}: pixel value {v} outside [0, 1]",
            e.source_id
        )));
    }
    Ok(())
}
