//! Core array types: multi-contrast image volumes and per-voxel label maps.
//!
//! Arrays are stored contrast-major (channel axis first), then spatial axes
//! slowest-to-fastest, matching the on-disk layout.

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes, background included.
pub const N_CLASSES: usize = 4;

/// Segmentation classes. The numeric values are the on-disk label ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TumorClass {
    Background = 0,
    Edema = 1,
    Enhancing = 2,
    Necrosis = 3,
}

impl TumorClass {
    pub const ALL: [TumorClass; 4] =
        [TumorClass::Background, TumorClass::Edema, TumorClass::Enhancing, TumorClass::Necrosis];

    pub fn name(self) -> &'static str {
        match self {
            TumorClass::Background => "background",
            TumorClass::Edema => "edema",
            TumorClass::Enhancing => "enhancing_tumor",
            TumorClass::Necrosis => "necrosis",
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(TumorClass::Background),
            1 => Ok(TumorClass::Edema),
            2 => Ok(TumorClass::Enhancing),
            3 => Ok(TumorClass::Necrosis),
            other => Err(Error::Data(format!("label value {other} outside 0..=3"))),
        }
    }
}

/// Multi-contrast intensity array for one scan: `[n_contrasts, *spatial]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub data: ArrayD<f32>,
    pub contrast_names: Vec<String>,
}

impl ImageVolume {
    pub fn new(data: ArrayD<f32>, contrast_names: Vec<String>) -> Result<Self> {
        if data.ndim() < 2 {
            return Err(Error::shape("[contrasts, *spatial]", format!("{:?}", data.shape())));
        }
        if data.shape()[0] != contrast_names.len() {
            return Err(Error::shape(
                format!("{} contrasts", contrast_names.len()),
                format!("{} channels", data.shape()[0]),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("image volume contains non-finite values".into()));
        }
        Ok(ImageVolume { data, contrast_names })
    }

    pub fn n_contrasts(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial shape, channel axis stripped.
    pub fn spatial_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn contrast(&self, index: usize) -> ndarray::ArrayViewD<'_, f32> {
        self.data.index_axis(Axis(0), index)
    }
}

/// Per-voxel class map over the spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub data: ArrayD<u8>,
}

impl LabelMap {
    pub fn new(data: ArrayD<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|v| **v >= N_CLASSES as u8) {
            return Err(Error::Data(format!("label value {bad} outside 0..=3")));
        }
        Ok(LabelMap { data })
    }

    pub fn zeros(spatial: &[usize]) -> Self {
        LabelMap { data: ArrayD::zeros(IxDyn(spatial)) }
    }

    pub fn spatial_shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Binary mask of voxels belonging to `class`.
    pub fn class_mask(&self, class: TumorClass) -> ArrayD<bool> {
        self.data.mapv(|v| v == class as u8)
    }

    /// Voxel count for one class.
    pub fn class_count(&self, class: TumorClass) -> usize {
        self.data.iter().filter(|&&v| v == class as u8).count()
    }

    /// One-hot encoding `[N_CLASSES, *spatial]` as f64, for the network input path.
    pub fn one_hot(&self) -> ArrayD<f64> {
        let mut shape = vec![N_CLASSES];
        shape.extend_from_slice(self.data.shape());
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        let spatial_len: usize = self.data.len();
        {
            let flat_labels = self.data.as_slice().expect("label map is contiguous");
            let out_flat = out.as_slice_mut().expect("one-hot buffer is contiguous");
            for (i, &v) in flat_labels.iter().enumerate() {
                out_flat[v as usize * spatial_len + i] = 1.0;
            }
        }
        out
    }
}

/// Check that two spatial shapes agree, with a descriptive error otherwise.
pub fn check_same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what} {a:?}"), format!("{b:?}")));
    }
    Ok(())
}
