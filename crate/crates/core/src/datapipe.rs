//! From stored series to normalized, patched, augmented cases and folds.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgrowth::SubjectSeries;
use crate::volume::{ImageVolume, LabelMap, TumorClass};

/// Which (inputs -> target) wiring a case uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseMode {
    /// Past + present predict the future segmentation.
    AbToC,
    /// Present predicts its own segmentation.
    BToB,
    /// Future predicts its own segmentation (upper-bound evaluation wiring).
    CToC,
    /// Present as input, future as target (lower-bound evaluation wiring).
    BToC,
}

impl CaseMode {
    pub fn n_input_timepoints(self) -> usize {
        match self {
            CaseMode::AbToC => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseMode::AbToC => "ab_to_c",
            CaseMode::BToB => "b_to_b",
            CaseMode::CToC => "c_to_c",
            CaseMode::BToC => "b_to_c",
        }
    }
}

impl std::fmt::Display for CaseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training/evaluation unit.
#[derive(Debug, Clone)]
pub struct GrowthCase {
    pub case_id: String,
    pub subject_id: String,
    pub input_volumes: Vec<ImageVolume>,
    pub target_labels: LabelMap,
    pub mode: CaseMode,
    /// Which series timepoints the inputs were read from.
    pub input_timepoints: Vec<usize>,
    /// Which series timepoint the target was read from.
    pub target_timepoint: usize,
}

impl GrowthCase {
    pub fn spatial_shape(&self) -> &[usize] {
        self.target_labels.spatial_shape()
    }
}

/// Subject-level cross-validation split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub n_folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignment.get(subject_id).copied()
    }

    pub fn subjects_in_fold(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn training_subjects(&self, held_out_fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != held_out_fold)
            .map(|(s, _)| s.clone())
            .collect()
    }
}

/// Z-score each contrast to mean 0, standard deviation 1 (population
/// convention, 1/N). Errors on a constant contrast instead of emitting NaNs.
pub fn zscore_normalize(volume: &ImageVolume) -> Result<ImageVolume> {
    let mut out = volume.data.clone();
    for (c, name) in volume.contrast_names.iter().enumerate() {
        let mut channel = out.index_axis_mut(Axis(0), c);
        let n = channel.len() as f64;
        let mean = channel.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = channel.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-12 {
            return Err(Error::Data(format!(
                "contrast {c} ({name}) has zero intensity variance; cannot z-score"
            )));
        }
        channel.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    }
    ImageVolume::new(out, volume.contrast_names.clone())
}

/// Build cases of the given mode from one subject's series.
///
/// Sliding windows: `AbToC` yields one case per consecutive triple, `BToC` one
/// per consecutive pair, and the self-segmentation modes one per timepoint.
/// Too few timepoints yields an empty list.
pub fn build_cases(series: &SubjectSeries, mode: CaseMode) -> Vec<GrowthCase> {
    let n = series.n_timepoints();
    let needed = match mode {
        CaseMode::AbToC => 3,
        CaseMode::BToC => 2,
        _ => 1,
    };
    if n < needed {
        log::debug!(
            "subject {} has {n} timepoints, fewer than the {needed} needed for {mode}; skipping",
            series.subject_id
        );
        return Vec::new();
    }

    let make = |inputs: Vec<usize>, target: usize| -> GrowthCase {
        GrowthCase {
            case_id: format!("{}:{}:t{:02}", series.subject_id, mode, target),
            subject_id: series.subject_id.clone(),
            input_volumes: inputs
                .iter()
                .map(|&t| series.timepoints[t].image.clone())
                .collect(),
            target_labels: series.timepoints[target].labels.clone(),
            mode,
            input_timepoints: inputs,
            target_timepoint: target,
        }
    };

    match mode {
        CaseMode::AbToC => (0..n - 2).map(|t| make(vec![t, t + 1], t + 2)).collect(),
        CaseMode::BToC => (0..n - 1).map(|t| make(vec![t], t + 1)).collect(),
        CaseMode::BToB | CaseMode::CToC => (0..n).map(|t| make(vec![t], t)).collect(),
    }
}

/// Randomly split subjects into folds of near-equal size (difference <= 1).
pub fn make_folds(subject_ids: &[String], n_folds: usize, seed: u64) -> Result<FoldSplit> {
    if n_folds == 0 {
        return Err(Error::Argument("n_folds must be >= 1".into()));
    }
    if n_folds > subject_ids.len() {
        return Err(Error::Argument(format!(
            "cannot split {} subjects into {n_folds} folds",
            subject_ids.len()
        )));
    }
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    let mut rng = crate::rng::stream(crate::rng::derive_seed(seed, &[crate::rng::tag("folds")]));
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % n_folds))
        .collect();
    Ok(FoldSplit { n_folds, assignment })
}

fn crop_array_f32(data: &ArrayD<f32>, offset: &[usize], size: usize) -> ArrayD<f32> {
    let view = data.slice_each_axis(|ax| {
        if ax.axis.index() == 0 {
            ndarray::Slice::from(..)
        } else {
            let o = offset[ax.axis.index() - 1] as isize;
            ndarray::Slice::new(o, Some(o + size as isize), 1)
        }
    });
    view.as_standard_layout().to_owned()
}

fn crop_array_u8(data: &ArrayD<u8>, offset: &[usize], size: usize) -> ArrayD<u8> {
    let view = data.slice_each_axis(|ax| {
        let o = offset[ax.axis.index()] as isize;
        ndarray::Slice::new(o, Some(o + size as isize), 1)
    });
    view.as_standard_layout().to_owned()
}

/// Crop a random patch, shared across inputs and target.
///
/// With probability 1/2 the offset is drawn so the patch contains a randomly
/// chosen tumor voxel of the target (when the target has any), countering
/// class imbalance; otherwise the offset is uniform.
pub fn extract_patch(
    case: &GrowthCase,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GrowthCase> {
    let spatial = case.spatial_shape().to_vec();
    if spatial.iter().any(|&s| patch_size > s) {
        return Err(Error::Argument(format!(
            "patch size {patch_size} exceeds volume shape {spatial:?}"
        )));
    }

    let tumor_voxels: Vec<usize> = case
        .target_labels
        .data
        .as_slice()
        .expect("labels contiguous")
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != TumorClass::Background as u8)
        .map(|(i, _)| i)
        .collect();

    let biased = rng.random::<f64>() < 0.5 && !tumor_voxels.is_empty();
    let mut offset = Vec::with_capacity(spatial.len());
    if biased {
        let pick = tumor_voxels[rng.random_range(0..tumor_voxels.len())];
        let mut rem = pick;
        let mut coord = vec![0usize; spatial.len()];
        for ax in (0..spatial.len()).rev() {
            coord[ax] = rem % spatial[ax];
            rem /= spatial[ax];
        }
        for ax in 0..spatial.len() {
            let hi_limit = spatial[ax] - patch_size; // largest legal offset
            let lo = coord[ax].saturating_sub(patch_size - 1).min(hi_limit);
            let hi = coord[ax].min(hi_limit);
            offset.push(if hi > lo { rng.random_range(lo..=hi) } else { lo });
        }
    } else {
        for ax in 0..spatial.len() {
            let hi = spatial[ax] - patch_size;
            offset.push(if hi > 0 { rng.random_range(0..=hi) } else { 0 });
        }
    }

    let input_volumes = case
        .input_volumes
        .iter()
        .map(|v| {
            ImageVolume::new(
                crop_array_f32(&v.data, &offset, patch_size),
                v.contrast_names.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let target_labels = LabelMap { data: crop_array_u8(&case.target_labels.data, &offset, patch_size) };

    Ok(GrowthCase { input_volumes, target_labels, ..case.clone() })
}

/// Mirror along one spatial axis (0-based among the spatial axes).
pub fn mirror_case(case: &GrowthCase, axis: usize) -> GrowthCase {
    let mut out = case.clone();
    for v in &mut out.input_volumes {
        let mut data = v.data.clone();
        data.invert_axis(Axis(axis + 1));
        v.data = data.as_standard_layout().to_owned();
    }
    let mut lbl = out.target_labels.data.clone();
    lbl.invert_axis(Axis(axis));
    out.target_labels.data = lbl.as_standard_layout().to_owned();
    out
}

/// Rotate by `quarter_turns` * 90 degrees in the plane of the last two spatial
/// axes. Requires those axes to have equal extent.
pub fn rotate_case(case: &GrowthCase, quarter_turns: usize) -> GrowthCase {
    fn rot90_f32(data: &ArrayD<f32>, a: usize, b: usize) -> ArrayD<f32> {
        let mut r = data.clone();
        r.swap_axes(a, b);
        let mut r = r.as_standard_layout().to_owned();
        r.invert_axis(Axis(a));
        r.as_standard_layout().to_owned()
    }
    fn rot90_u8(data: &ArrayD<u8>, a: usize, b: usize) -> ArrayD<u8> {
        let mut r = data.clone();
        r.swap_axes(a, b);
        let mut r = r.as_standard_layout().to_owned();
        r.invert_axis(Axis(a));
        r.as_standard_layout().to_owned()
    }

    let mut out = case.clone();
    let rank = case.spatial_shape().len();
    let (sa, sb) = (rank - 2, rank - 1);
    for _ in 0..quarter_turns % 4 {
        for v in &mut out.input_volumes {
            v.data = rot90_f32(&v.data, sa + 1, sb + 1);
        }
        out.target_labels.data = rot90_u8(&out.target_labels.data, sa, sb);
    }
    out
}

/// Scale each contrast of every input volume by a per-contrast factor.
/// Labels are untouched.
pub fn scale_intensities(case: &GrowthCase, factors: &[f32]) -> GrowthCase {
    let mut out = case.clone();
    for v in &mut out.input_volumes {
        for (c, &f) in factors.iter().enumerate() {
            v.data.index_axis_mut(Axis(0), c).mapv_inplace(|x| x * f);
        }
    }
    out
}

/// Random augmentation: mirroring, in-plane quarter rotation, and per-contrast
/// intensity scaling in [0.9, 1.1], each applied with independent probability
/// 1/2. Spatial transforms hit inputs and target identically; labels keep
/// their exact values.
pub fn augment(case: &GrowthCase, rng: &mut ChaCha8Rng) -> GrowthCase {
    let rank = case.spatial_shape().len();
    let mut out = case.clone();
    if rng.random::<f64>() < 0.5 {
        let axis = rng.random_range(0..rank);
        out = mirror_case(&out, axis);
    }
    if rng.random::<f64>() < 0.5 {
        let k = rng.random_range(1..=3);
        out = rotate_case(&out, k);
    }
    if rng.random::<f64>() < 0.5 {
        let n_contrasts = out.input_volumes.first().map_or(0, |v| v.n_contrasts());
        let factors: Vec<f32> =
            (0..n_contrasts).map(|_| rng.random_range(0.9..1.1) as f32).collect();
        out = scale_intensities(&out, &factors);
    }
    out
}
