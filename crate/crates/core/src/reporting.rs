//! Qualitative figures and quantitative summary tables.
//!
//! Everything here is a pure function of (records, model, spec): repeated
//! invocations write byte-identical files. Class colors are fixed for a whole
//! run: edema purple, enhancing tumor orange, necrosis yellow.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    median, query_volume_dice, select_values, whole_tumor, wilcoxon_rank_sum, ChangeGroup,
    ChangeGroups, EvalTriple, EvaluationRecord, Metric, ModelVariant,
};
use crate::model::GrowthModel;
use crate::volume::{LabelMap, TumorClass};

/// Fixed class color legend (RGB).
pub const COLOR_EDEMA: [u8; 3] = [170, 70, 200];
pub const COLOR_ENHANCING: [u8; 3] = [240, 140, 40];
pub const COLOR_NECROSIS: [u8; 3] = [235, 220, 60];
pub const COLOR_GROUND_TRUTH: [u8; 3] = [220, 40, 40];
pub const COLOR_MEAN_PREDICTION: [u8; 3] = [170, 70, 200];
pub const COLOR_BEST_SAMPLE: [u8; 3] = [170, 70, 200];

pub fn class_color(class: TumorClass) -> Option<[u8; 3]> {
    match class {
        TumorClass::Background => None,
        TumorClass::Edema => Some(COLOR_EDEMA),
        TumorClass::Enhancing => Some(COLOR_ENHANCING),
        TumorClass::Necrosis => Some(COLOR_NECROSIS),
    }
}

/// What to draw in a contour overlay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlaySpec {
    /// Which contrast of the present scan to use as the background.
    pub background_contrast: usize,
    /// Slice along the first spatial axis; required for 3-d volumes.
    pub slice_index: Option<usize>,
    /// Integer pixel upscale factor.
    pub scale: usize,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec { background_contrast: 3, slice_index: None, scale: 4 }
    }
}

/// Boundary voxels of a 2-d mask (voxels with a 4-neighbor outside the mask).
pub fn contour_mask(mask: &ArrayD<bool>) -> ArrayD<bool> {
    let h = mask.shape()[0];
    let w = mask.shape()[1];
    let mut out = ArrayD::from_elem(ndarray::IxDyn(&[h, w]), false);
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            let boundary = i == 0
                || j == 0
                || i == h - 1
                || j == w - 1
                || !mask[[i - 1, j]]
                || !mask[[i + 1, j]]
                || !mask[[i, j - 1]]
                || !mask[[i, j + 1]];
            if boundary {
                out[[i, j]] = true;
            }
        }
    }
    out
}

fn take_slice_f32(data: &ndarray::ArrayViewD<'_, f32>, slice: Option<usize>) -> Result<ndarray::ArrayD<f32>> {
    match data.ndim() {
        2 => Ok(data.to_owned()),
        3 => {
            let idx = slice.ok_or_else(|| {
                Error::Argument("3-d volume needs a slice index for rendering".into())
            })?;
            if idx >= data.shape()[0] {
                return Err(Error::Argument(format!(
                    "slice {idx} out of range for {} slices",
                    data.shape()[0]
                )));
            }
            Ok(data.index_axis(Axis(0), idx).to_owned())
        }
        n => Err(Error::Argument(format!("cannot render rank-{n} spatial data"))),
    }
}

fn take_slice_mask(mask: &ArrayD<bool>, slice: Option<usize>) -> Result<ArrayD<bool>> {
    match mask.ndim() {
        2 => Ok(mask.clone()),
        3 => {
            let idx = slice.ok_or_else(|| {
                Error::Argument("3-d volume needs a slice index for rendering".into())
            })?;
            if idx >= mask.shape()[0] {
                return Err(Error::Argument(format!(
                    "slice {idx} out of range for {} slices",
                    mask.shape()[0]
                )));
            }
            Ok(mask.index_axis(Axis(0), idx).to_owned())
        }
        n => Err(Error::Argument(format!("cannot render rank-{n} spatial data"))),
    }
}

fn take_slice_labels(labels: &LabelMap, slice: Option<usize>) -> Result<ArrayD<u8>> {
    match labels.data.ndim() {
        2 => Ok(labels.data.clone()),
        3 => {
            let idx = slice.ok_or_else(|| {
                Error::Argument("3-d volume needs a slice index for rendering".into())
            })?;
            if idx >= labels.data.shape()[0] {
                return Err(Error::Argument(format!(
                    "slice {idx} out of range for {} slices",
                    labels.data.shape()[0]
                )));
            }
            Ok(labels.data.index_axis(Axis(0), idx).to_owned())
        }
        n => Err(Error::Argument(format!("cannot render rank-{n} spatial data"))),
    }
}

fn draw_contour(img: &mut RgbImage, contour: &ArrayD<bool>, color: [u8; 3], scale: usize, dashed: bool) {
    let h = contour.shape()[0];
    let w = contour.shape()[1];
    for i in 0..h {
        for j in 0..w {
            if !contour[[i, j]] {
                continue;
            }
            if dashed && (i + j) % 2 == 1 {
                continue;
            }
            for di in 0..scale {
                for dj in 0..scale {
                    img.put_pixel(
                        (j * scale + dj) as u32,
                        (i * scale + di) as u32,
                        Rgb(color),
                    );
                }
            }
        }
    }
}

/// Render the contour overlay for one evaluation triple: the prior-mean
/// prediction (solid), the best-volume-match grid sample (dashed), and the
/// future ground truth, over a contrast of the present scan.
pub fn render_overlay(
    model: &GrowthModel,
    triple: &EvalTriple,
    variant: ModelVariant,
    spec: &OverlaySpec,
    path: &Path,
) -> Result<()> {
    if spec.background_contrast >= triple.present.n_contrasts() {
        return Err(Error::Argument(format!(
            "background contrast {} out of range",
            spec.background_contrast
        )));
    }
    let inputs = match variant {
        ModelVariant::Ours => {
            crate::model::stack_inputs(&[triple.past.clone(), triple.present.clone()])
        }
        ModelVariant::Upper => crate::model::stack_inputs(std::slice::from_ref(&triple.future)),
        ModelVariant::Lower => crate::model::stack_inputs(std::slice::from_ref(&triple.present)),
    };
    let prior = model.prior_encode(&inputs)?;
    let trunk = model.trunk_features(&inputs)?;
    let mean_mask = whole_tumor(&model.decode_latent(&trunk, &prior.mean).argmax_labels());
    let qvd = query_volume_dice(model, &inputs, &triple.future_labels)?;
    let best_mask =
        whole_tumor(&model.decode_latent(&trunk, &qvd.chosen_latent).argmax_labels());
    let gt_mask = whole_tumor(&triple.future_labels);

    let bg = take_slice_f32(&triple.present.contrast(spec.background_contrast), spec.slice_index)?;
    let mean2 = take_slice_mask(&mean_mask, spec.slice_index)?;
    let best2 = take_slice_mask(&best_mask, spec.slice_index)?;
    let gt2 = take_slice_mask(&gt_mask, spec.slice_index)?;

    let h = bg.shape()[0];
    let w = bg.shape()[1];
    let scale = spec.scale.max(1);
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);

    let lo = bg.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = bg.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = (hi - lo).max(1e-6);
    for i in 0..h {
        for j in 0..w {
            let v = (((bg[[i, j]] - lo) / range) * 255.0).clamp(0.0, 255.0) as u8;
            for di in 0..scale {
                for dj in 0..scale {
                    img.put_pixel((j * scale + dj) as u32, (i * scale + di) as u32, Rgb([v, v, v]));
                }
            }
        }
    }

    draw_contour(&mut img, &contour_mask(&gt2), COLOR_GROUND_TRUTH, scale, false);
    draw_contour(&mut img, &contour_mask(&mean2), COLOR_MEAN_PREDICTION, scale, false);
    draw_contour(&mut img, &contour_mask(&best2), COLOR_BEST_SAMPLE, scale, true);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Paint one segmentation into an RGB cell.
pub fn segmentation_to_rgb(labels: &ArrayD<u8>) -> RgbImage {
    let h = labels.shape()[0];
    let w = labels.shape()[1];
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let color = TumorClass::from_id(labels[[i, j]])
                .ok()
                .and_then(class_color)
                .unwrap_or([15, 15, 15]);
            img.put_pixel(j as u32, i as u32, Rgb(color));
        }
    }
    img
}

const GRID_SEPARATOR: usize = 2;
const GRID_STEPS: usize = 7;

/// Render the latent traversal montage: a `7 x 7` grid over two latent axes
/// (remaining axes held at the prior mean), mean cell marked with a red
/// border, ground truth inset in the bottom-left corner.
pub fn render_latent_grid(
    model: &GrowthModel,
    triple: &EvalTriple,
    variant: ModelVariant,
    dims: (usize, usize),
    path: &Path,
) -> Result<()> {
    let n = model.config.latent_dim;
    if dims.0 == dims.1 || dims.0 >= n || dims.1 >= n {
        return Err(Error::Argument(format!(
            "latent grid axes must be distinct and < {n}, got {dims:?}"
        )));
    }
    let inputs = match variant {
        ModelVariant::Ours => {
            crate::model::stack_inputs(&[triple.past.clone(), triple.present.clone()])
        }
        ModelVariant::Upper => crate::model::stack_inputs(std::slice::from_ref(&triple.future)),
        ModelVariant::Lower => crate::model::stack_inputs(std::slice::from_ref(&triple.present)),
    };
    let prior = model.prior_encode(&inputs)?;
    let trunk = model.trunk_features(&inputs)?;
    let sigma = prior.sigma();

    let spatial = triple.future_labels.spatial_shape();
    let is_3d = spatial.len() == 3;
    let slice = if is_3d { Some(spatial[0] / 2) } else { None };
    let cell_h = if is_3d { spatial[1] } else { spatial[0] };
    let cell_w = if is_3d { spatial[2] } else { spatial[1] };

    let width = GRID_STEPS * cell_w + (GRID_STEPS + 1) * GRID_SEPARATOR;
    let height = GRID_STEPS * cell_h + (GRID_STEPS + 1) * GRID_SEPARATOR;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([40, 40, 40]));

    for row in 0..GRID_STEPS {
        for col in 0..GRID_STEPS {
            let mut z = prior.mean.clone();
            z[dims.0] += sigma[dims.0] * (row as f64 - 3.0);
            z[dims.1] += sigma[dims.1] * (col as f64 - 3.0);
            let labels = model.decode_latent(&trunk, &z).argmax_labels();
            let labels2 = take_slice_labels(&labels, slice)?;
            let cell = segmentation_to_rgb(&labels2);
            let x0 = GRID_SEPARATOR + col * (cell_w + GRID_SEPARATOR);
            let y0 = GRID_SEPARATOR + row * (cell_h + GRID_SEPARATOR);
            image::imageops::overlay(&mut img, &cell, x0 as i64, y0 as i64);
            if row == 3 && col == 3 {
                // mark the mean cell with a red border
                for x in x0.saturating_sub(1)..(x0 + cell_w + 1).min(width) {
                    for &y in &[y0.saturating_sub(1), (y0 + cell_h).min(height - 1)] {
                        img.put_pixel(x as u32, y as u32, Rgb(COLOR_GROUND_TRUTH));
                    }
                }
                for y in y0.saturating_sub(1)..(y0 + cell_h + 1).min(height) {
                    for &x in &[x0.saturating_sub(1), (x0 + cell_w).min(width - 1)] {
                        img.put_pixel(x as u32, y as u32, Rgb(COLOR_GROUND_TRUTH));
                    }
                }
            }
        }
    }

    // ground-truth inset, half scale, bottom-left corner
    let gt2 = take_slice_labels(&triple.future_labels, slice)?;
    let gt_cell = segmentation_to_rgb(&gt2);
    let inset = image::imageops::resize(
        &gt_cell,
        (cell_w / 2) as u32,
        (cell_h / 2) as u32,
        image::imageops::FilterType::Nearest,
    );
    let y0 = height - GRID_SEPARATOR - cell_h / 2;
    image::imageops::overlay(&mut img, &inset, GRID_SEPARATOR as i64, y0 as i64);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// One median cell of the summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MedianRow {
    pub group: ChangeGroup,
    pub variant: ModelVariant,
    pub metric: Metric,
    pub median: f64,
    pub n: usize,
}

/// One rank-sum comparison of the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PValueRow {
    pub group: ChangeGroup,
    pub metric: Metric,
    pub comparison: String,
    pub p_value: f64,
}

/// The full quantitative summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryReport {
    pub large_threshold: f64,
    pub mean_change: f64,
    pub n_large: usize,
    pub n_moderate: usize,
    pub n_small: usize,
    pub degenerate_stratification: bool,
    pub medians: Vec<MedianRow>,
    pub p_values: Vec<PValueRow>,
}

/// Compute per-group, per-variant medians and ours-vs-bounds rank-sum
/// p-values. Small-change cases are stratified but not part of the headline
/// comparisons.
pub fn summarize(records: &[EvaluationRecord], groups: &ChangeGroups) -> Result<SummaryReport> {
    if records.is_empty() {
        return Err(Error::Report("no evaluation records to summarize".into()));
    }
    let mut medians = Vec::new();
    for group in [ChangeGroup::Large, ChangeGroup::Moderate, ChangeGroup::Small] {
        for variant in ModelVariant::ALL {
            for metric in [Metric::QueryVolumeDice, Metric::Surprise] {
                let values = select_values(records, variant, metric, Some(group));
                if let Some(m) = median(&values) {
                    medians.push(MedianRow { group, variant, metric, median: m, n: values.len() });
                }
            }
        }
    }

    let mut p_values = Vec::new();
    for group in [ChangeGroup::Large, ChangeGroup::Moderate] {
        for metric in [Metric::QueryVolumeDice, Metric::Surprise] {
            let ours = select_values(records, ModelVariant::Ours, metric, Some(group));
            for (name, baseline) in [
                ("ours_vs_lower", ModelVariant::Lower),
                ("ours_vs_upper", ModelVariant::Upper),
            ] {
                let other = select_values(records, baseline, metric, Some(group));
                if ours.len() >= 3 && other.len() >= 3 {
                    p_values.push(PValueRow {
                        group,
                        metric,
                        comparison: name.to_string(),
                        p_value: wilcoxon_rank_sum(&ours, &other)?,
                    });
                }
            }
        }
    }

    Ok(SummaryReport {
        large_threshold: groups.large_threshold,
        mean_change: groups.mean_change,
        n_large: groups.n_large,
        n_moderate: groups.n_moderate,
        n_small: groups.n_small,
        degenerate_stratification: groups.degenerate,
        medians,
        p_values,
    })
}

/// Write the summary as JSON plus two CSV tables (medians, p-values).
pub fn write_summary(report: &SummaryReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("summary.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(report).expect("summary serializes"),
    )
    .map_err(|e| Error::io(&json_path, e))?;

    let medians_path = dir.join("medians.csv");
    let mut w = csv::Writer::from_path(&medians_path)
        .map_err(|e| Error::Report(format!("{}: {e}", medians_path.display())))?;
    for row in &report.medians {
        w.serialize(row)
            .map_err(|e| Error::Report(format!("{}: {e}", medians_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&medians_path, e))?;

    let pvals_path = dir.join("p_values.csv");
    let mut w = csv::Writer::from_path(&pvals_path)
        .map_err(|e| Error::Report(format!("{}: {e}", pvals_path.display())))?;
    for row in &report.p_values {
        w.serialize(row)
            .map_err(|e| Error::Report(format!("{}: {e}", pvals_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&pvals_path, e))?;
    Ok(())
}

/// Group medians keyed `(group, variant, metric)`, for quick lookups in checks.
pub fn median_map(report: &SummaryReport) -> BTreeMap<(String, String, String), f64> {
    report
        .medians
        .iter()
        .map(|r| {
            (
                (r.group.to_string(), r.variant.to_string(), r.metric.to_string()),
                r.median,
            )
        })
        .collect()
}
