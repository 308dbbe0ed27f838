//! Evaluation protocol: per-case metrics for the trained variant and its two
//! baselines, change-group stratification, and record emission.
//!
//! Every evaluation unit is a (past A, present B, future C) triple. The three
//! model variants see different inputs: `ours` consumes A and B, the upper
//! bound consumes C itself (it only needs to segment what it is shown), and
//! the lower bound consumes B while still being scored against C.

mod metrics;
mod stratify;
mod wilcoxon;

pub use metrics::{
    dice, query_volume_dice, scan_latent_grid, surprise, whole_tumor, whole_tumor_prediction,
    GridScan, QueryVolumeResult,
};
pub use stratify::{stratify, ChangeGroup, ChangeGroups};
pub use wilcoxon::{
    normal_cdf, wilcoxon_rank_sum, wilcoxon_rank_sum_approx, wilcoxon_rank_sum_exact,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{stack_inputs, GrowthModel};
use crate::volume::{ImageVolume, LabelMap};

/// Which trained model a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Trained on (A, B) -> C.
    Ours,
    /// Trained C -> C, evaluated with the future as input.
    Upper,
    /// Trained B -> B, evaluated on B -> C.
    Lower,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Ours, ModelVariant::Upper, ModelVariant::Lower];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Ours => "ours",
            ModelVariant::Upper => "upper",
            ModelVariant::Lower => "lower",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metric identifiers carried by evaluation records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    QueryVolumeDice,
    Surprise,
    MeanDice,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::QueryVolumeDice => "query_volume_dice",
            Metric::Surprise => "surprise",
            Metric::MeanDice => "mean_dice",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One metric value for one case under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub case_id: String,
    pub variant: ModelVariant,
    pub metric: Metric,
    pub value: f64,
    pub fold: usize,
    pub group: ChangeGroup,
}

/// One evaluation unit: normalized scans of the triple plus the label maps
/// needed for scoring and stratification.
#[derive(Debug, Clone)]
pub struct EvalTriple {
    pub case_id: String,
    pub subject_id: String,
    pub fold: usize,
    /// Index of the future timepoint in the subject's series.
    pub target_timepoint: usize,
    pub past: ImageVolume,
    pub present: ImageVolume,
    pub future: ImageVolume,
    pub present_labels: LabelMap,
    pub future_labels: LabelMap,
}

impl EvalTriple {
    /// Dice(B, C) on whole-tumor masks: the stratification variable.
    pub fn change_dice(&self) -> Result<f64> {
        dice(&whole_tumor(&self.present_labels), &whole_tumor(&self.future_labels))
    }

    fn inputs_for(&self, variant: ModelVariant) -> ndarray::ArrayD<f64> {
        match variant {
            ModelVariant::Ours => stack_inputs(&[self.past.clone(), self.present.clone()]),
            ModelVariant::Upper => stack_inputs(std::slice::from_ref(&self.future)),
            ModelVariant::Lower => stack_inputs(std::slice::from_ref(&self.present)),
        }
    }
}

/// Both metrics for one triple under one variant.
pub fn evaluate_triple(
    model: &GrowthModel,
    variant: ModelVariant,
    triple: &EvalTriple,
) -> Result<(QueryVolumeResult, f64)> {
    let inputs = triple.inputs_for(variant);
    let qvd = query_volume_dice(model, &inputs, &triple.future_labels)?;
    let s = surprise(model, &inputs, &triple.future_labels)?;
    Ok((qvd, s))
}

/// Trained checkpoints for the three variants of one fold.
pub struct VariantModels {
    pub ours: GrowthModel,
    pub upper: GrowthModel,
    pub lower: GrowthModel,
}

impl VariantModels {
    pub fn get(&self, variant: ModelVariant) -> &GrowthModel {
        match variant {
            ModelVariant::Ours => &self.ours,
            ModelVariant::Upper => &self.upper,
            ModelVariant::Lower => &self.lower,
        }
    }
}

/// Evaluate every triple of a fold under all three variants, emitting
/// query-volume-dice and surprise records tagged with their change group.
/// Evaluation runs on full-size inputs; distinct cases run in parallel.
pub fn evaluate_fold(
    models: &VariantModels,
    triples: &[EvalTriple],
    groups: &ChangeGroups,
) -> Result<Vec<EvaluationRecord>> {
    for triple in triples {
        if groups.group_of(&triple.case_id).is_none() {
            return Err(Error::Config(format!(
                "case {} missing from the change-group stratification",
                triple.case_id
            )));
        }
    }
    let per_case: Vec<Result<Vec<EvaluationRecord>>> = exec::map_indexed(triples.len(), |i| {
        let triple = &triples[i];
        let group = groups.group_of(&triple.case_id).expect("checked above");
        let mut records = Vec::with_capacity(6);
        for variant in ModelVariant::ALL {
            let (qvd, s) = evaluate_triple(models.get(variant), variant, triple)?;
            records.push(EvaluationRecord {
                case_id: triple.case_id.clone(),
                variant,
                metric: Metric::QueryVolumeDice,
                value: qvd.dice,
                fold: triple.fold,
                group,
            });
            records.push(EvaluationRecord {
                case_id: triple.case_id.clone(),
                variant,
                metric: Metric::Surprise,
                value: s,
                fold: triple.fold,
                group,
            });
        }
        Ok(records)
    });

    let mut out = Vec::with_capacity(triples.len() * 6);
    for r in per_case {
        out.extend(r?);
    }
    Ok(out)
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Pull the values of records matching a (variant, metric, group) cell.
pub fn select_values(
    records: &[EvaluationRecord],
    variant: ModelVariant,
    metric: Metric,
    group: Option<ChangeGroup>,
) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.variant == variant && r.metric == metric)
        .filter(|r| group.map_or(true, |g| r.group == g))
        .map(|r| r.value)
        .collect()
}

/// Write records as CSV (`case_id,variant,metric,value,fold,group`).
pub fn write_records_csv(path: &Path, records: &[EvaluationRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::Data(format!("{}: cannot write records: {e}", path.display()))
    })?;
    for r in records {
        writer
            .serialize(r)
            .map_err(|e| Error::Data(format!("{}: cannot serialize record: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read records back from CSV.
pub fn read_records_csv(path: &Path) -> Result<Vec<EvaluationRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        Error::Data(format!("{}: cannot read records: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(|e| {
            Error::Data(format!("{}: malformed record: {e}", path.display()))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::zscore_normalize;
    use crate::model::NetworkConfig;
    use crate::synthgrowth::{generate_subject, GrowthParams};
    use ndarray::ArrayD;

    fn triples_from_subjects(n: usize) -> Vec<EvalTriple> {
        let params = GrowthParams {
            grid_size: 32,
            timepoints_per_subject: 5,
            ..GrowthParams::default()
        };
        let mut triples = Vec::new();
        for s in 0..n {
            let series = generate_subject(&params, 1000 + s as u64).unwrap();
            for t in 0..series.n_timepoints() - 2 {
                let norm = |i: usize| zscore_normalize(&series.timepoints[i].image).unwrap();
                triples.push(EvalTriple {
                    case_id: format!("sub-{s:02}:ab_to_c:t{:02}", t + 2),
                    subject_id: format!("sub-{s:02}"),
                    fold: 0,
                    target_timepoint: t + 2,
                    past: norm(t),
                    present: norm(t + 1),
                    future: norm(t + 2),
                    present_labels: series.timepoints[t + 1].labels.clone(),
                    future_labels: series.timepoints[t + 2].labels.clone(),
                });
            }
        }
        triples
    }

    fn models_for(config_seed: u64) -> VariantModels {
        let two = NetworkConfig {
            base_channels: 4,
            depth: 2,
            n_input_timepoints: 2,
            seed: config_seed,
            ..NetworkConfig::default()
        };
        let one = NetworkConfig { n_input_timepoints: 1, ..two.clone() };
        VariantModels {
            ours: GrowthModel::new(two).unwrap(),
            upper: GrowthModel::new(one.clone()).unwrap(),
            lower: GrowthModel::new(one).unwrap(),
        }
    }

    #[test]
    fn record_count_is_cases_times_variants_times_metrics() {
        let triples = triples_from_subjects(4); // 12 triples
        let changes: Vec<(String, f64)> = triples
            .iter()
            .map(|t| (t.case_id.clone(), t.change_dice().unwrap()))
            .collect();
        let groups = stratify(&changes).unwrap();
        let models = models_for(3);
        let records = evaluate_fold(&models, &triples, &groups).unwrap();
        assert_eq!(records.len(), triples.len() * 3 * 2);
    }

    #[test]
    fn upper_and_lower_variants_never_read_the_past_scan() {
        let mut triples = triples_from_subjects(1);
        let triple = &mut triples[0];
        // poison A: if any variant that must not read it does, NaN propagates
        triple.past = ImageVolume::new(
            ArrayD::from_elem(ndarray::IxDyn(&[4, 32, 32]), 0.0f32),
            triple.past.contrast_names.clone(),
        )
        .unwrap();
        triple.past.data.fill(f32::NAN);

        let models = models_for(5);
        let (qvd_u, s_u) =
            evaluate_triple(&models.upper, ModelVariant::Upper, triple).unwrap();
        let (qvd_l, s_l) =
            evaluate_triple(&models.lower, ModelVariant::Lower, triple).unwrap();
        assert!(qvd_u.dice.is_finite() && s_u.is_finite());
        assert!(qvd_l.dice.is_finite() && s_l.is_finite());
    }

    #[test]
    fn records_round_trip_through_csv() {
        let triples = triples_from_subjects(4);
        let changes: Vec<(String, f64)> = triples
            .iter()
            .map(|t| (t.case_id.clone(), t.change_dice().unwrap()))
            .collect();
        let groups = stratify(&changes).unwrap();
        let models = models_for(7);
        let records = evaluate_fold(&models, &triples, &groups).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        write_records_csv(&path, &records).unwrap();
        let loaded = read_records_csv(&path).unwrap();
        assert_eq!(records, loaded);
    }

    #[test]
    fn median_handles_even_and_odd_sizes() {
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(&[4.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[]), None);
    }
}
