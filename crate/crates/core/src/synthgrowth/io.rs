//! On-disk dataset layout.
//!
//! One subdirectory per subject. Each timepoint stores the image as a raw
//! little-endian f32 array and the labels as a raw u8 array, each with a JSON
//! sidecar describing shape, axis order, names, and day offset. A top-level
//! `manifest.json` lists subjects, timepoints, shapes, day offsets, and the
//! generating parameters (including the seed), so the dataset can be
//! regenerated bit-exactly.
//!
//! All arrays are channel-major, then spatial axes slowest-to-fastest
//! (row-major / C order).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ImageVolume, LabelMap, TumorClass};

use super::{
    generate_subject, subject_seed, GrowthParams, SeriesTimepoint, SubjectSeries,
};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const AXIS_ORDER: &str = "channel-major, then spatial axes slowest-to-fastest (C order)";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArraySidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub axis_order: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast_names: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub day_offset: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimepointEntry {
    pub index: usize,
    pub day_offset: i64,
    pub image_file: String,
    pub label_file: String,
    pub spatial_shape: Vec<usize>,
    pub n_contrasts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub timepoints: Vec<TimepointEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub axis_order: String,
    pub class_names: Vec<String>,
    /// Generating parameters; `params.seed` reproduces the dataset exactly.
    pub params: GrowthParams,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_from_le_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: raw f32 file length {} not divisible by 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Persist subjects and return the manifest that was written.
pub fn write_dataset(
    params: &GrowthParams,
    subjects: &[SubjectSeries],
    dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for subject in subjects {
        let sdir = dir.join(&subject.subject_id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut tps = Vec::with_capacity(subject.timepoints.len());
        for (t, tp) in subject.timepoints.iter().enumerate() {
            let image_file = format!("tp{t:03}_image.f32");
            let label_file = format!("tp{t:03}_labels.u8");

            let img_slice = tp.image.data.as_slice().expect("image contiguous");
            write_bytes(&sdir.join(&image_file), &f32_to_le_bytes(img_slice))?;
            let img_sidecar = ArraySidecar {
                dtype: "f32-le".into(),
                shape: tp.image.data.shape().to_vec(),
                axis_order: AXIS_ORDER.into(),
                contrast_names: Some(tp.image.contrast_names.clone()),
                class_names: None,
                day_offset: tp.day_offset,
            };
            write_bytes(
                &sdir.join(format!("tp{t:03}_image.json")),
                serde_json::to_string_pretty(&img_sidecar)
                    .expect("sidecar serializes")
                    .as_bytes(),
            )?;

            write_bytes(
                &sdir.join(&label_file),
                tp.labels.data.as_slice().expect("labels contiguous"),
            )?;
            let lbl_sidecar = ArraySidecar {
                dtype: "u8".into(),
                shape: tp.labels.data.shape().to_vec(),
                axis_order: AXIS_ORDER.into(),
                contrast_names: None,
                class_names: Some(
                    TumorClass::ALL.iter().map(|c| c.name().to_string()).collect(),
                ),
                day_offset: tp.day_offset,
            };
            write_bytes(
                &sdir.join(format!("tp{t:03}_labels.json")),
                serde_json::to_string_pretty(&lbl_sidecar)
                    .expect("sidecar serializes")
                    .as_bytes(),
            )?;

            tps.push(TimepointEntry {
                index: t,
                day_offset: tp.day_offset,
                image_file: format!("{}/{image_file}", subject.subject_id),
                label_file: format!("{}/{label_file}", subject.subject_id),
                spatial_shape: tp.labels.data.shape().to_vec(),
                n_contrasts: tp.image.n_contrasts(),
            });
        }
        entries.push(SubjectEntry { subject_id: subject.subject_id.clone(), timepoints: tps });
    }

    let manifest = DatasetManifest {
        format_version: 1,
        axis_order: AXIS_ORDER.into(),
        class_names: TumorClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        params: params.clone(),
        subjects: entries,
    };
    write_bytes(
        &dir.join(MANIFEST_NAME),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
}

/// Load a dataset directory. Loaded series carry no generator state.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SubjectSeries>)> {
    let manifest = read_manifest(dir)?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let mut timepoints = Vec::with_capacity(entry.timepoints.len());
        for tp in &entry.timepoints {
            let img_path: PathBuf = dir.join(&tp.image_file);
            let raw = f32_from_le_bytes(&read_bytes(&img_path)?, &img_path)?;
            let mut shape = vec![tp.n_contrasts];
            shape.extend_from_slice(&tp.spatial_shape);
            let expected: usize = shape.iter().product();
            if raw.len() != expected {
                return Err(Error::Data(format!(
                    "{}: expected {expected} values, found {}",
                    img_path.display(),
                    raw.len()
                )));
            }
            let data = ArrayD::from_shape_vec(IxDyn(&shape), raw).expect("shape checked");
            let sidecar_path = img_path.with_extension("json");
            let sidecar: ArraySidecar =
                serde_json::from_slice(&read_bytes(&sidecar_path)?).map_err(|e| {
                    Error::Data(format!("{}: invalid sidecar: {e}", sidecar_path.display()))
                })?;
            let image = ImageVolume::new(
                data,
                sidecar
                    .contrast_names
                    .unwrap_or_else(|| super::CONTRAST_NAMES.iter().map(|s| s.to_string()).collect()),
            )?;

            let lbl_path: PathBuf = dir.join(&tp.label_file);
            let raw = read_bytes(&lbl_path)?;
            let expected: usize = tp.spatial_shape.iter().product();
            if raw.len() != expected {
                return Err(Error::Data(format!(
                    "{}: expected {expected} bytes, found {}",
                    lbl_path.display(),
                    raw.len()
                )));
            }
            let labels = LabelMap::new(
                ArrayD::from_shape_vec(IxDyn(&tp.spatial_shape), raw).expect("shape checked"),
            )?;

            timepoints.push(SeriesTimepoint { image, labels, day_offset: tp.day_offset });
        }
        subjects.push(SubjectSeries {
            subject_id: entry.subject_id.clone(),
            timepoints,
            provenance: None,
        });
    }
    Ok((manifest, subjects))
}

/// Regenerate the subjects recorded in a manifest from its seed, including
/// generator state (usable as a futures oracle). The result is bit-identical
/// to what was originally written.
pub fn regenerate_from_manifest(manifest: &DatasetManifest) -> Result<Vec<SubjectSeries>> {
    let results = crate::exec::map_indexed(manifest.subjects.len(), |i| {
        generate_subject(&manifest.params, subject_seed(manifest.params.seed, i)).map(
            |mut s| {
                s.subject_id = manifest.subjects[i].subject_id.clone();
                s
            },
        )
    });
    results.into_iter().collect()
}
