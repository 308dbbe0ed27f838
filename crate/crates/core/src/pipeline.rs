//! Config-driven orchestration of the full experiment lifecycle.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! <output_dir>/
//!   config.toml          verbatim copy of the driving configuration
//!   checkpoints/         fold{F}_{variant}.ckpt
//!   logs/                fold{F}_{variant}.csv training metrics
//!   records.csv          one row per (case, variant, metric)
//!   summary/             summary.json, medians.csv, p_values.csv
//!   figures/             qualitative overlays and latent grids
//!   samples/             outputs of the sample command
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{variant_mode, ExperimentConfig};
use crate::datapipe::{build_cases, make_folds, zscore_normalize, FoldSplit, GrowthCase};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_fold, median, scan_latent_grid, select_values, stratify, whole_tumor,
    wilcoxon_rank_sum, ChangeGroup, ChangeGroups, EvalTriple, EvaluationRecord, Metric,
    ModelVariant, VariantModels,
};
use crate::model::{load_checkpoint, GrowthModel};
use crate::reporting::{
    render_latent_grid, render_overlay, summarize, write_summary, OverlaySpec, SummaryReport,
};
use crate::synthgrowth::{generate_dataset, load_dataset, write_dataset, DatasetManifest, SubjectSeries};
use crate::training::train;
use crate::volume::LabelMap;

/// Restrict `run` to a subset of training jobs. Evaluation only happens on an
/// unrestricted run (or once every checkpoint exists).
#[derive(Debug, Clone, Copy, Default)]
pub struct JobFilter {
    pub fold: Option<usize>,
    pub variant: Option<ModelVariant>,
}

impl JobFilter {
    fn matches(&self, fold: usize, variant: ModelVariant) -> bool {
        self.fold.map_or(true, |f| f == fold) && self.variant.map_or(true, |v| v == variant)
    }

    fn is_unrestricted(&self) -> bool {
        self.fold.is_none() && self.variant.is_none()
    }
}

/// One evaluation-invariant assertion of a run.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

/// Outcome of a `run` invocation.
#[derive(Debug)]
pub struct RunReport {
    pub experiment_dir: PathBuf,
    /// Jobs that actually trained, as `fold{F}/{variant}` strings.
    pub trained: Vec<String>,
    /// Jobs skipped because their checkpoint was already complete.
    pub skipped: Vec<String>,
    /// Whether evaluation ran (it needs every checkpoint present).
    pub evaluated: bool,
    pub n_eval_cases: usize,
    pub records_path: Option<PathBuf>,
    pub summary: Option<SummaryReport>,
    pub checks: Vec<CheckResult>,
    pub all_checks_passed: bool,
}

/// Query forms of the sample command.
#[derive(Debug, Clone)]
pub enum SampleQuery {
    /// Find the grid sample whose whole-tumor volume best matches
    /// `current volume * factor`.
    VolumeFactor(f64),
    /// Decode a grid offset directly (units of prior sigma around the mean).
    Latent(Vec<f64>),
}

/// Outcome of the sample command.
#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub case_id: String,
    pub variant: ModelVariant,
    pub current_volume: usize,
    pub requested_volume: Option<usize>,
    pub achieved_volume: usize,
    pub chosen_offset: Option<Vec<isize>>,
    pub latent: Vec<f64>,
    pub segmentation_file: String,
    pub overlay_file: String,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    raw_config: String,
}

fn sanitize(case_id: &str) -> String {
    case_id.replace([':', '/'], "_")
}

impl Pipeline {
    pub fn new(config_path: &Path) -> Result<Self> {
        let (config, raw_config) = ExperimentConfig::load(config_path)?;
        Ok(Pipeline { config, raw_config })
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let raw_config = config.to_toml_string();
        Ok(Pipeline { config, raw_config })
    }

    // --- paths ------------------------------------------------------------

    pub fn experiment_dir(&self) -> PathBuf {
        self.config.experiment_dir()
    }

    pub fn checkpoint_path(&self, fold: usize, variant: ModelVariant) -> PathBuf {
        self.experiment_dir().join("checkpoints").join(format!("fold{fold}_{variant}.ckpt"))
    }

    fn metrics_path(&self, fold: usize, variant: ModelVariant) -> PathBuf {
        self.experiment_dir().join("logs").join(format!("fold{fold}_{variant}.csv"))
    }

    fn records_path(&self) -> PathBuf {
        self.experiment_dir().join("records.csv")
    }

    // --- dataset ----------------------------------------------------------

    /// Generate the synthetic dataset into `dataset_dir`.
    pub fn generate(&self, force: bool) -> Result<DatasetManifest> {
        let dir = self.config.dataset_path();
        if dir.exists() {
            let non_empty = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .next()
                .is_some();
            if non_empty {
                if !force {
                    return Err(Error::Argument(format!(
                        "dataset directory {} is not empty; pass --force to overwrite",
                        dir.display()
                    )));
                }
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        let subjects = generate_dataset(&self.config.data)?;
        write_dataset(&self.config.data, &subjects, &dir)
    }

    /// Load and z-score-normalize every subject of the dataset.
    pub fn load_normalized(&self) -> Result<(DatasetManifest, Vec<SubjectSeries>)> {
        let dir = self.config.dataset_path();
        if !dir.join("manifest.json").exists() {
            return Err(Error::Data(format!(
                "no dataset at {}; run the generate command first",
                dir.display()
            )));
        }
        let (manifest, subjects) = load_dataset(&dir)?;
        let normalized = crate::exec::map_indexed(subjects.len(), |i| -> Result<SubjectSeries> {
            let mut s = subjects[i].clone();
            for tp in &mut s.timepoints {
                tp.image = zscore_normalize(&tp.image)?;
            }
            Ok(s)
        });
        let normalized: Result<Vec<_>> = normalized.into_iter().collect();
        Ok((manifest, normalized?))
    }

    pub fn folds(&self, subjects: &[SubjectSeries]) -> Result<FoldSplit> {
        let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
        make_folds(&ids, self.config.evaluation.n_folds, self.config.fold_seed())
    }

    /// All evaluation triples, tagged with the fold their subject is held out
    /// in, ordered by subject then time.
    pub fn eval_triples(&self, subjects: &[SubjectSeries], folds: &FoldSplit) -> Vec<EvalTriple> {
        let mut triples = Vec::new();
        for s in subjects {
            let fold = folds.fold_of(&s.subject_id).expect("every subject has a fold");
            for t in 0..s.timepoints.len().saturating_sub(2) {
                triples.push(EvalTriple {
                    case_id: format!("{}:ab_to_c:t{:02}", s.subject_id, t + 2),
                    subject_id: s.subject_id.clone(),
                    fold,
                    target_timepoint: t + 2,
                    past: s.timepoints[t].image.clone(),
                    present: s.timepoints[t + 1].image.clone(),
                    future: s.timepoints[t + 2].image.clone(),
                    present_labels: s.timepoints[t + 1].labels.clone(),
                    future_labels: s.timepoints[t + 2].labels.clone(),
                });
            }
        }
        triples
    }

    pub fn stratification(&self, triples: &[EvalTriple]) -> Result<ChangeGroups> {
        let changes: Vec<(String, f64)> = triples
            .iter()
            .map(|t| t.change_dice().map(|d| (t.case_id.clone(), d)))
            .collect::<Result<Vec<_>>>()?;
        stratify(&changes)
    }

    fn training_cases(
        &self,
        subjects: &[SubjectSeries],
        folds: &FoldSplit,
        fold: usize,
        variant: ModelVariant,
    ) -> Vec<GrowthCase> {
        let mode = variant_mode(variant);
        let train_ids = folds.training_subjects(fold);
        subjects
            .iter()
            .filter(|s| train_ids.contains(&s.subject_id))
            .flat_map(|s| build_cases(s, mode))
            .collect()
    }

    pub fn load_variant_model(&self, fold: usize, variant: ModelVariant) -> Result<GrowthModel> {
        let path = self.checkpoint_path(fold, variant);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing checkpoint for fold {fold} variant {variant}: {}",
                path.display()
            )));
        }
        let ckpt = load_checkpoint(&path)?;
        let expect_mode = variant_mode(variant).as_str();
        if ckpt.meta.get("mode").and_then(|m| m.as_str()) != Some(expect_mode) {
            return Err(Error::Config(format!(
                "checkpoint {} is not a {expect_mode} model",
                path.display()
            )));
        }
        Ok(ckpt.model)
    }

    fn load_variant_models(&self, fold: usize) -> Result<VariantModels> {
        Ok(VariantModels {
            ours: self.load_variant_model(fold, ModelVariant::Ours)?,
            upper: self.load_variant_model(fold, ModelVariant::Upper)?,
            lower: self.load_variant_model(fold, ModelVariant::Lower)?,
        })
    }

    fn all_checkpoints_present(&self) -> bool {
        (0..self.config.evaluation.n_folds).all(|f| {
            ModelVariant::ALL.iter().all(|&v| self.checkpoint_path(f, v).exists())
        })
    }

    /// Copy the driving config into the experiment directory, byte for byte.
    fn capture_config(&self) -> Result<()> {
        let dir = self.experiment_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.raw_config.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    // --- run --------------------------------------------------------------

    /// Train every (fold, variant) job matching the filter, then, when all
    /// checkpoints exist and the filter is unrestricted, evaluate, summarize,
    /// render qualitative figures, and check the evaluation invariants.
    pub fn run(&self, filter: &JobFilter) -> Result<RunReport> {
        self.capture_config()?;
        let (_, subjects) = self.load_normalized()?;
        let folds = self.folds(&subjects)?;

        let mut trained = Vec::new();
        let mut skipped = Vec::new();
        for fold in 0..self.config.evaluation.n_folds {
            for variant in ModelVariant::ALL {
                if !filter.matches(fold, variant) {
                    continue;
                }
                let cases = self.training_cases(&subjects, &folds, fold, variant);
                let network = self.config.network_config(variant, fold);
                let train_config = self.config.train_config(variant, fold);
                let summary = train(
                    &network,
                    &train_config,
                    &cases,
                    fold,
                    &self.checkpoint_path(fold, variant),
                    &self.metrics_path(fold, variant),
                )?;
                let label = format!("fold{fold}/{variant}");
                if summary.skipped {
                    log::info!("{label}: checkpoint complete, skipped");
                    skipped.push(label);
                } else {
                    log::info!("{label}: trained {} steps", summary.steps_run);
                    trained.push(label);
                }
            }
        }

        if !filter.is_unrestricted() || !self.all_checkpoints_present() {
            return Ok(RunReport {
                experiment_dir: self.experiment_dir(),
                trained,
                skipped,
                evaluated: false,
                n_eval_cases: 0,
                records_path: None,
                summary: None,
                checks: Vec::new(),
                all_checks_passed: true,
            });
        }

        let (records, groups, summary) = self.evaluate_records(&subjects, &folds)?;
        self.render_qualitative(&subjects, &folds, &groups)?;
        let checks = evaluation_checks(&records, &groups);
        let all_checks_passed = checks.iter().all(|c| c.passed);
        Ok(RunReport {
            experiment_dir: self.experiment_dir(),
            trained,
            skipped,
            evaluated: true,
            n_eval_cases: records.len() / 6,
            records_path: Some(self.records_path()),
            summary: Some(summary),
            checks,
            all_checks_passed,
        })
    }

    fn evaluate_records(
        &self,
        subjects: &[SubjectSeries],
        folds: &FoldSplit,
    ) -> Result<(Vec<EvaluationRecord>, ChangeGroups, SummaryReport)> {
        let triples = self.eval_triples(subjects, folds);
        let groups = self.stratification(&triples)?;
        let mut records = Vec::new();
        for fold in 0..self.config.evaluation.n_folds {
            let fold_triples: Vec<EvalTriple> =
                triples.iter().filter(|t| t.fold == fold).cloned().collect();
            if fold_triples.is_empty() {
                continue;
            }
            let models = self.load_variant_models(fold)?;
            records.extend(evaluate_fold(&models, &fold_triples, &groups)?);
        }
        crate::evaluation::write_records_csv(&self.records_path(), &records)?;
        let summary = summarize(&records, &groups)?;
        write_summary(&summary, &self.experiment_dir().join("summary"))?;
        Ok((records, groups, summary))
    }

    fn render_qualitative(
        &self,
        subjects: &[SubjectSeries],
        folds: &FoldSplit,
        groups: &ChangeGroups,
    ) -> Result<()> {
        let triples = self.eval_triples(subjects, folds);
        let mut large: Vec<&EvalTriple> = triples
            .iter()
            .filter(|t| groups.group_of(&t.case_id) == Some(ChangeGroup::Large))
            .collect();
        large.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let figures = self.experiment_dir().join("figures");
        for triple in large.into_iter().take(self.config.evaluation.n_qualitative) {
            let model = self.load_variant_model(triple.fold, ModelVariant::Ours)?;
            let base = sanitize(&triple.case_id);
            render_overlay(
                &model,
                triple,
                ModelVariant::Ours,
                &OverlaySpec::default(),
                &figures.join(format!("{base}_overlay_ours.png")),
            )?;
            render_latent_grid(
                &model,
                triple,
                ModelVariant::Ours,
                (0, 1),
                &figures.join(format!("{base}_latent_grid_ours.png")),
            )?;
        }
        Ok(())
    }

    /// Evaluate existing checkpoints without training.
    pub fn evaluate(&self) -> Result<RunReport> {
        let (_, subjects) = self.load_normalized()?;
        let folds = self.folds(&subjects)?;
        let (records, groups, summary) = self.evaluate_records(&subjects, &folds)?;
        let checks = evaluation_checks(&records, &groups);
        let all_checks_passed = checks.iter().all(|c| c.passed);
        Ok(RunReport {
            experiment_dir: self.experiment_dir(),
            trained: Vec::new(),
            skipped: Vec::new(),
            evaluated: true,
            n_eval_cases: records.len() / 6,
            records_path: Some(self.records_path()),
            summary: Some(summary),
            checks,
            all_checks_passed,
        })
    }

    /// Regenerate summary tables and qualitative figures from records.csv.
    pub fn report(&self) -> Result<SummaryReport> {
        let records_path = self.records_path();
        if !records_path.exists() {
            return Err(Error::Data(format!(
                "no records at {}; run evaluation first",
                records_path.display()
            )));
        }
        let records = crate::evaluation::read_records_csv(&records_path)?;
        let (_, subjects) = self.load_normalized()?;
        let folds = self.folds(&subjects)?;
        let triples = self.eval_triples(&subjects, &folds);
        let groups = self.stratification(&triples)?;
        let summary = summarize(&records, &groups)?;
        write_summary(&summary, &self.experiment_dir().join("summary"))?;
        self.render_qualitative(&subjects, &folds, &groups)?;
        Ok(summary)
    }

    /// Decode a queried future for one case from a trained checkpoint.
    pub fn sample(
        &self,
        checkpoint: &Path,
        case_id: &str,
        query: &SampleQuery,
    ) -> Result<SampleReport> {
        let ckpt = load_checkpoint(checkpoint)?;
        let model = ckpt.model;
        let variant = match ckpt.meta.get("mode").and_then(|m| m.as_str()) {
            Some("ab_to_c") => ModelVariant::Ours,
            Some("c_to_c") => ModelVariant::Upper,
            Some("b_to_b") | Some("b_to_c") => ModelVariant::Lower,
            other => {
                return Err(Error::Data(format!(
                    "checkpoint {} carries no usable mode ({other:?})",
                    checkpoint.display()
                )))
            }
        };

        let (_, subjects) = self.load_normalized()?;
        let folds = self.folds(&subjects)?;
        let triples = self.eval_triples(&subjects, &folds);
        let triple = triples
            .iter()
            .find(|t| t.case_id == case_id)
            .ok_or_else(|| Error::Argument(format!("unknown case id: {case_id}")))?;

        let inputs = match variant {
            ModelVariant::Ours => {
                crate::model::stack_inputs(&[triple.past.clone(), triple.present.clone()])
            }
            ModelVariant::Upper => {
                crate::model::stack_inputs(std::slice::from_ref(&triple.future))
            }
            ModelVariant::Lower => {
                crate::model::stack_inputs(std::slice::from_ref(&triple.present))
            }
        };
        let current_volume =
            whole_tumor(&triple.present_labels).iter().filter(|&&v| v).count();

        let prior = model.prior_encode(&inputs)?;
        let sigma = prior.sigma();
        let (labels, latent, offset, requested): (LabelMap, Vec<f64>, Option<Vec<isize>>, Option<usize>) =
            match query {
                SampleQuery::VolumeFactor(factor) => {
                    if !factor.is_finite() || *factor <= 0.0 {
                        return Err(Error::Argument(format!(
                            "volume factor must be positive, got {factor}"
                        )));
                    }
                    let target = (current_volume as f64 * factor).round() as usize;
                    let scan = scan_latent_grid(&model, &inputs)?;
                    let best = scan.best_volume_match(target);
                    let trunk = model.trunk_features(&inputs)?;
                    let labels =
                        model.decode_latent(&trunk, &scan.latents[best]).argmax_labels();
                    (
                        labels,
                        scan.latents[best].clone(),
                        Some(scan.offsets[best].clone()),
                        Some(target),
                    )
                }
                SampleQuery::Latent(offsets) => {
                    if offsets.len() != model.config.latent_dim {
                        return Err(Error::Argument(format!(
                            "latent query needs {} components, got {}",
                            model.config.latent_dim,
                            offsets.len()
                        )));
                    }
                    let z: Vec<f64> = prior
                        .mean
                        .iter()
                        .zip(&sigma)
                        .zip(offsets)
                        .map(|((m, s), k)| m + s * k)
                        .collect();
                    let labels = model.backbone_forward(&inputs, &z)?.argmax_labels();
                    (labels, z, None, None)
                }
            };

        let achieved_volume = whole_tumor(&labels).iter().filter(|&&v| v).count();

        let samples_dir = self.experiment_dir().join("samples");
        std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        let base = format!("{}_sample_{variant}", sanitize(case_id));
        let seg_path = samples_dir.join(format!("{base}.u8"));
        std::fs::write(&seg_path, labels.data.as_slice().expect("labels contiguous"))
            .map_err(|e| Error::io(&seg_path, e))?;
        let overlay_path = samples_dir.join(format!("{base}_overlay.png"));
        render_overlay(&model, triple, variant, &OverlaySpec::default(), &overlay_path)?;

        let report = SampleReport {
            case_id: case_id.to_string(),
            variant,
            current_volume,
            requested_volume: requested,
            achieved_volume,
            chosen_offset: offset,
            latent,
            segmentation_file: seg_path.display().to_string(),
            overlay_file: overlay_path.display().to_string(),
        };
        let report_path = samples_dir.join(format!("{base}.json"));
        std::fs::write(
            &report_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| Error::io(&report_path, e))?;
        Ok(report)
    }
}

/// The evaluation-invariant assertions reported by `run`: the upper bound must
/// dominate, and on the large-change group the trained variant must beat the
/// lower bound on both metrics with rank-sum support on at least one.
pub fn evaluation_checks(
    records: &[EvaluationRecord],
    groups: &ChangeGroups,
) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let med = |variant, metric, group| -> Option<f64> {
        median(&select_values(records, variant, metric, group))
    };

    let ours_all = med(ModelVariant::Ours, Metric::QueryVolumeDice, None);
    let upper_all = med(ModelVariant::Upper, Metric::QueryVolumeDice, None);
    if let (Some(o), Some(u)) = (ours_all, upper_all) {
        checks.push(CheckResult {
            name: "upper_bound_dominates_query_volume_dice".into(),
            passed: u >= o - 1e-12,
            details: format!("median upper {u:.4} vs ours {o:.4} over all cases"),
        });
    }

    let large = Some(ChangeGroup::Large);
    let qvd_ours = med(ModelVariant::Ours, Metric::QueryVolumeDice, large);
    let qvd_lower = med(ModelVariant::Lower, Metric::QueryVolumeDice, large);
    let qvd_upper = med(ModelVariant::Upper, Metric::QueryVolumeDice, large);
    let sur_ours = med(ModelVariant::Ours, Metric::Surprise, large);
    let sur_lower = med(ModelVariant::Lower, Metric::Surprise, large);

    if let (Some(o), Some(l)) = (qvd_ours, qvd_lower) {
        checks.push(CheckResult {
            name: "ours_beats_lower_query_volume_dice_large".into(),
            passed: o > l,
            details: format!("large-change median ours {o:.4} vs lower {l:.4} (n={})", groups.n_large),
        });
    }
    if let (Some(o), Some(u)) = (qvd_ours, qvd_upper) {
        checks.push(CheckResult {
            name: "ours_at_most_upper_query_volume_dice_large".into(),
            passed: o <= u + 1e-12,
            details: format!("large-change median ours {o:.4} vs upper {u:.4}"),
        });
    }
    if let (Some(o), Some(l)) = (sur_ours, sur_lower) {
        checks.push(CheckResult {
            name: "ours_less_surprised_than_lower_large".into(),
            passed: o < l,
            details: format!("large-change median surprise ours {o:.4} vs lower {l:.4}"),
        });
    }

    // rank-sum significance of ours vs lower on at least one metric
    let mut p_values = Vec::new();
    for metric in [Metric::QueryVolumeDice, Metric::Surprise] {
        let ours = select_values(records, ModelVariant::Ours, metric, large);
        let lower = select_values(records, ModelVariant::Lower, metric, large);
        if ours.len() >= 3 && lower.len() >= 3 {
            if let Ok(p) = wilcoxon_rank_sum(&ours, &lower) {
                p_values.push((metric, p));
            }
        }
    }
    if !p_values.is_empty() {
        let best = p_values
            .iter()
            .cloned()
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite p"))
            .expect("non-empty");
        checks.push(CheckResult {
            name: "ours_vs_lower_significant_large".into(),
            passed: best.1 < 0.05,
            details: format!(
                "smallest large-change p ({}) = {:.5}; all: {}",
                best.0,
                best.1,
                p_values
                    .iter()
                    .map(|(m, p)| format!("{m}={p:.5}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        });
    }

    checks
}
