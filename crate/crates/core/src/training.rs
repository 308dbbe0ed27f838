//! Objective and optimization loop.
//!
//! The per-case loss is `CE + beta * KL(posterior || prior)`: mean per-voxel
//! cross entropy of the backbone prediction decoded from one reparameterized
//! posterior sample, plus the closed-form KL between the two encoder outputs.
//! Batches accumulate per-case gradient buffers in sample order, so training
//! is bit-reproducible for a fixed seed regardless of parallel scheduling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{augment, extract_patch, CaseMode, GrowthCase};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    load_checkpoint, save_checkpoint, stack_inputs, DiagonalGaussian, GrowthModel, NetworkConfig,
    SegmentationOutput,
};
use crate::nn::{softmax_cross_entropy, AdamState, GradBuffer};
use crate::rng::{derive_seed, stream, tag, StreamState};
use crate::volume::LabelMap;

/// One step's loss terms. `total = cross_entropy + beta * kl` with the beta
/// that was in effect (KL warm-up scales it early on).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean per-voxel cross entropy, nats/voxel.
    pub cross_entropy: f64,
    /// Mean KL(posterior || prior), nats.
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

/// Training configuration for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: CaseMode,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Ramp beta linearly from 0 over the first 10% of steps.
    #[serde(default)]
    pub kl_warmup: bool,
    /// Apply random mirror/rotation/intensity augmentation to training patches.
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: CaseMode::AbToC,
            beta: 1.0,
            learning_rate: 1e-4,
            steps: 5000,
            batch_size: 4,
            patch_size: 48,
            seed: 0,
            checkpoint_interval: 500,
            kl_warmup: false,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_beta(&self, step: u64) -> f64 {
        if !self.kl_warmup {
            return self.beta;
        }
        let ramp_steps = (self.steps as f64 * 0.1).ceil().max(1.0);
        self.beta * ((step as f64) / ramp_steps).min(1.0)
    }
}

/// Closed-form KL divergence between diagonal Gaussians, `KL(q || p)` with
/// `q` the posterior and `p` the prior:
/// `1/2 * sum_i [ s2q/s2p + (mp - mq)^2 / s2p - 1 + ln(s2p / s2q) ]`.
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Argument(format!(
            "KL dimensions differ: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean[i], q.log_variance[i]);
        let (mp, lp) = (p.mean[i], p.log_variance[i]);
        kl += 0.5 * ((lq - lp).exp() + (mp - mq).powi(2) * (-lp).exp() - 1.0 + (lp - lq));
    }
    Ok(kl)
}

pub(crate) struct KlGrads {
    pub dmean_q: Vec<f64>,
    pub dlogvar_q: Vec<f64>,
    pub dmean_p: Vec<f64>,
    pub dlogvar_p: Vec<f64>,
}

pub(crate) fn kl_with_grads(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<(f64, KlGrads)> {
    let kl = kl_diag_gaussians(q, p)?;
    let n = q.dim();
    let mut g = KlGrads {
        dmean_q: vec![0.0; n],
        dlogvar_q: vec![0.0; n],
        dmean_p: vec![0.0; n],
        dlogvar_p: vec![0.0; n],
    };
    for i in 0..n {
        let (mq, lq) = (q.mean[i], q.log_variance[i]);
        let (mp, lp) = (p.mean[i], p.log_variance[i]);
        let inv_s2p = (-lp).exp();
        g.dmean_q[i] = (mq - mp) * inv_s2p;
        g.dmean_p[i] = (mp - mq) * inv_s2p;
        g.dlogvar_q[i] = 0.5 * ((lq - lp).exp() - 1.0);
        g.dlogvar_p[i] = 0.5 * (1.0 - (lq - lp).exp() - (mp - mq).powi(2) * inv_s2p);
    }
    Ok((kl, g))
}

/// Mean per-voxel cross entropy of predicted class probabilities against an
/// integer label map. Finite for probabilities down to (and below) 1e-30.
pub fn multiclass_cross_entropy(output: &SegmentationOutput, target: &LabelMap) -> Result<f64> {
    let probs = &output.class_probabilities;
    let spatial = &probs.shape()[1..];
    if spatial != target.spatial_shape() {
        return Err(Error::shape(
            format!("target with spatial shape {spatial:?}"),
            format!("{:?}", target.spatial_shape()),
        ));
    }
    let k = probs.shape()[0];
    let voxels: usize = spatial.iter().product();
    let flat = probs.as_slice().expect("probabilities contiguous");
    let labels = target.data.as_slice().expect("labels contiguous");
    let mut loss = 0.0;
    for (j, &t) in labels.iter().enumerate() {
        if (t as usize) >= k {
            return Err(Error::Data(format!("label value {t} outside 0..{k}")));
        }
        let p = flat[t as usize * voxels + j].max(1e-300);
        loss -= p.ln();
    }
    Ok(loss / voxels as f64)
}

/// Everything one case contributes to a step.
struct CaseResult {
    ce: f64,
    kl: f64,
    grads: GradBuffer,
}

/// Forward and backward for one case with a fixed reparameterization noise.
/// `beta` scales the KL contribution to the gradients; `beta == 0` skips the
/// KL backward entirely so it cannot influence updates.
fn forward_backward_case(
    model: &GrowthModel,
    inputs: &ArrayD<f64>,
    target: &LabelMap,
    eps: &[f64],
    beta: f64,
) -> Result<CaseResult> {
    let xpost = model.stack_posterior_input(inputs, target)?;
    let (q, qcache) = model.posterior_forward_cached(xpost);
    let (p, pcache) = model.prior_forward_cached(inputs.clone());

    let sigma_q = q.sigma();
    let z: Vec<f64> =
        (0..q.dim()).map(|i| q.mean[i] + sigma_q[i] * eps[i]).collect();

    let (trunk, tcache) = model.trunk_forward_cached(inputs.clone());
    let (logits, hcache) = model.head_forward_cached(&trunk, &z);
    let (ce, dlogits) = softmax_cross_entropy(&logits, &target.data);
    let (kl, klg) = kl_with_grads(&q, &p)?;

    if !ce.is_finite() {
        return Err(Error::Numerical(format!("cross_entropy became non-finite ({ce})")));
    }
    if !kl.is_finite() || kl < -1e-9 {
        return Err(Error::Numerical(format!("kl invalid ({kl}); KL(q||p) must be >= 0")));
    }

    let mut grads = model.store.new_grad_buffer();
    let (dtrunk, dz) = model.head_backward(&hcache, &dlogits, &mut grads);
    model.trunk_backward(&tcache, &dtrunk, &mut grads);

    let n = q.dim();
    let mut dmean_q = vec![0.0; n];
    let mut dlogvar_q = vec![0.0; n];
    for i in 0..n {
        dmean_q[i] = dz[i];
        dlogvar_q[i] = dz[i] * eps[i] * 0.5 * sigma_q[i];
    }
    if beta > 0.0 {
        for i in 0..n {
            dmean_q[i] += beta * klg.dmean_q[i];
            dlogvar_q[i] += beta * klg.dlogvar_q[i];
        }
    }
    model.posterior_backward(&qcache, &dmean_q, &dlogvar_q, &mut grads);
    if beta > 0.0 {
        let dmean_p: Vec<f64> = klg.dmean_p.iter().map(|&g| beta * g).collect();
        let dlogvar_p: Vec<f64> = klg.dlogvar_p.iter().map(|&g| beta * g).collect();
        model.prior_backward(&pcache, &dmean_p, &dlogvar_p, &mut grads);
    }

    Ok(CaseResult { ce, kl, grads })
}

/// One optimization step over a batch of prepared cases.
///
/// All cases must share `config.mode`. Returns the averaged loss terms.
pub fn train_step(
    model: &mut GrowthModel,
    adam: &mut AdamState,
    batch: &[GrowthCase],
    config: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|c| c.mode != config.mode) {
        return Err(Error::Argument(format!(
            "case {} has mode {}, expected {}",
            bad.case_id, bad.mode, config.mode
        )));
    }
    let beta = config.effective_beta(step);
    let n_latent = model.config.latent_dim;

    // tensors and noise are materialized sequentially so the stream layout is
    // independent of how the batch executes
    let prepared: Vec<(ArrayD<f64>, LabelMap, Vec<f64>)> = batch
        .iter()
        .map(|case| {
            let inputs = stack_inputs(&case.input_volumes);
            let eps: Vec<f64> = (0..n_latent)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            (inputs, case.target_labels.clone(), eps)
        })
        .collect();

    let results = exec::map_indexed(prepared.len(), |i| {
        let (inputs, target, eps) = &prepared[i];
        forward_backward_case(model, inputs, target, eps, beta)
    });

    let mut merged: Option<GradBuffer> = None;
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    for r in results {
        let r = r?;
        ce_sum += r.ce;
        kl_sum += r.kl;
        match &mut merged {
            None => merged = Some(r.grads),
            Some(m) => m.merge(&r.grads),
        }
    }
    let mut grads = merged.expect("non-empty batch");
    grads.scale(1.0 / batch.len() as f64);
    if !grads.all_finite() {
        return Err(Error::Numerical("gradients became non-finite".into()));
    }

    adam.step(&mut model.store, &grads, step, config.learning_rate);

    let ce = ce_sum / batch.len() as f64;
    let kl = kl_sum / batch.len() as f64;
    Ok(LossBreakdown { cross_entropy: ce, kl, total: ce + beta * kl, beta })
}

/// Result of a [`train`] call.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps_run: u64,
    pub final_loss: Option<LossBreakdown>,
    /// True when an existing complete checkpoint made training unnecessary.
    pub skipped: bool,
}

/// Train one variant on the given (already normalized) cases, checkpointing
/// periodically, resuming from an existing checkpoint when present.
///
/// The metrics log at `metrics_path` gets one CSV row per step
/// (`step,cross_entropy,kl,total`).
pub fn train(
    network: &NetworkConfig,
    config: &TrainConfig,
    cases: &[GrowthCase],
    fold: usize,
    checkpoint_path: &Path,
    metrics_path: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    network.validate()?;
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "empty training set for mode {} fold {fold}",
            config.mode
        )));
    }
    if network.n_input_timepoints != config.mode.n_input_timepoints() {
        return Err(Error::Config(format!(
            "network expects {} input timepoints but mode {} provides {}",
            network.n_input_timepoints,
            config.mode,
            config.mode.n_input_timepoints()
        )));
    }

    let meta = serde_json::json!({
        "mode": config.mode.as_str(),
        "fold": fold,
        "train_config": config,
    });

    let (mut model, mut adam, mut rng, start_step) = if checkpoint_path.exists() {
        let ckpt = load_checkpoint(checkpoint_path)?;
        if ckpt.meta.get("mode") != meta.get("mode") || ckpt.meta.get("fold") != meta.get("fold")
        {
            return Err(Error::Data(format!(
                "checkpoint {} belongs to a different variant/fold; delete it to retrain",
                checkpoint_path.display()
            )));
        }
        if ckpt.step >= config.steps {
            log::info!(
                "skipping {} fold {fold}: checkpoint already at step {}",
                config.mode,
                ckpt.step
            );
            return Ok(TrainSummary {
                checkpoint: checkpoint_path.to_path_buf(),
                steps_run: 0,
                final_loss: None,
                skipped: true,
            });
        }
        let rng = ckpt.rng.restore()?;
        (ckpt.model, ckpt.adam, rng, ckpt.step + 1)
    } else {
        let model = GrowthModel::new(network.clone())?;
        let adam = AdamState::new(&model.store);
        let rng = stream(derive_seed(config.seed, &[tag("train-loop")]));
        (model, adam, rng, 1)
    };

    if let Some(parent) = metrics_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut metrics = if start_step == 1 {
        let mut f = fs::File::create(metrics_path).map_err(|e| Error::io(metrics_path, e))?;
        writeln!(f, "step,cross_entropy,kl,total").map_err(|e| Error::io(metrics_path, e))?;
        f
    } else {
        fs::OpenOptions::new()
            .append(true)
            .open(metrics_path)
            .map_err(|e| Error::io(metrics_path, e))?
    };

    let mut last_loss = None;
    for step in start_step..=config.steps {
        // assemble the batch: indices, patches, augmentations, in stream order
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let idx = rng.random_range(0..cases.len());
            let mut case = extract_patch(&cases[idx], config.patch_size, &mut rng)?;
            if config.augment {
                case = augment(&case, &mut rng);
            }
            batch.push(case);
        }
        let loss = train_step(&mut model, &mut adam, &batch, config, step, &mut rng)?;
        writeln!(
            metrics,
            "{},{},{},{}",
            step, loss.cross_entropy, loss.kl, loss.total
        )
        .map_err(|e| Error::io(metrics_path, e))?;
        last_loss = Some(loss);

        if step % config.checkpoint_interval == 0 || step == config.steps {
            let state = StreamState::capture(&rng);
            save_checkpoint(checkpoint_path, &model, &adam, step, &state, meta.clone())?;
        }
    }

    Ok(TrainSummary {
        checkpoint: checkpoint_path.to_path_buf(),
        steps_run: config.steps - start_step + 1,
        final_loss: last_loss,
        skipped: false,
    })
}

/// Total training loss for fixed reparameterization noise, computed through
/// inference-only paths. Used by the finite-difference gradient check.
pub fn total_loss_inference(
    model: &GrowthModel,
    inputs: &ArrayD<f64>,
    target: &LabelMap,
    eps: &[f64],
    beta: f64,
) -> Result<f64> {
    let q = model.posterior_encode(inputs, target)?;
    let p = model.prior_encode(inputs)?;
    let sigma = q.sigma();
    let z: Vec<f64> = (0..q.dim()).map(|i| q.mean[i] + sigma[i] * eps[i]).collect();
    let out = model.backbone_forward(inputs, &z)?;
    let ce = multiclass_cross_entropy(&out, target)?;
    let kl = kl_diag_gaussians(&q, &p)?;
    Ok(ce + beta * kl)
}

/// Report of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over posterior mean and log-variance entries.
    pub max_rel_error_posterior: f64,
    /// Worst relative error over the probed backbone parameters.
    pub max_rel_error_backbone: f64,
    pub n_backbone_checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare analytic gradients of the total loss against central finite
/// differences on a small random problem: the gradient with respect to the
/// posterior mean / log-variance, and `n_backbone` randomly chosen backbone
/// parameters.
pub fn finite_difference_check(
    network: &NetworkConfig,
    spatial_size: usize,
    n_backbone: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = GrowthModel::new(network.clone())?;
    let mut rng = stream(derive_seed(seed, &[tag("fd-check")]));

    let mut shape = vec![network.input_channels()];
    shape.extend(std::iter::repeat(spatial_size).take(network.spatial_dims));
    let inputs = ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
        rng.random::<f64>() * 2.0 - 1.0
    });
    let spatial: Vec<usize> = shape[1..].to_vec();
    let target = LabelMap {
        data: ArrayD::from_shape_fn(ndarray::IxDyn(&spatial), |_| {
            rng.random_range(0..network.n_classes as u8)
        }),
    };
    let eps: Vec<f64> = (0..network.latent_dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let beta = 0.7;

    // analytic gradients
    let case = forward_backward_case(&model, &inputs, &target, &eps, beta)?;

    // posterior mean / log-variance: differentiate the loss as a function of
    // the Gaussian parameters directly (prior and trunk held fixed)
    let q0 = model.posterior_encode(&inputs, &target)?;
    let p0 = model.prior_encode(&inputs)?;
    let trunk = model.trunk_features(&inputs)?;
    let loss_of_gaussian = |q: &DiagonalGaussian| -> Result<f64> {
        let sigma = q.sigma();
        let z: Vec<f64> = (0..q.dim()).map(|i| q.mean[i] + sigma[i] * eps[i]).collect();
        let out = model.decode_latent(&trunk, &z);
        Ok(multiclass_cross_entropy(&out, &target)? + beta * kl_diag_gaussians(q, &p0)?)
    };
    // analytic gradient with respect to the Gaussian parameters
    let (_, klg) = kl_with_grads(&q0, &p0)?;
    let sigma0 = q0.sigma();
    let (logits, hcache) = {
        let z: Vec<f64> = (0..q0.dim()).map(|i| q0.mean[i] + sigma0[i] * eps[i]).collect();
        model.head_forward_cached(&trunk, &z)
    };
    let (_, dlogits) = softmax_cross_entropy(&logits, &target.data);
    let mut probe = model.store.new_grad_buffer();
    let (_, dz) = model.head_backward(&hcache, &dlogits, &mut probe);
    let h = 1e-5;
    let mut max_rel_posterior: f64 = 0.0;
    for i in 0..q0.dim() {
        let analytic_mean = dz[i] + beta * klg.dmean_q[i];
        let analytic_logvar = dz[i] * eps[i] * 0.5 * sigma0[i] + beta * klg.dlogvar_q[i];
        let mut qp = q0.clone();
        qp.mean[i] += h;
        let mut qm = q0.clone();
        qm.mean[i] -= h;
        let fd_mean = (loss_of_gaussian(&qp)? - loss_of_gaussian(&qm)?) / (2.0 * h);
        let mut qp = q0.clone();
        qp.log_variance[i] += h;
        let mut qm = q0.clone();
        qm.log_variance[i] -= h;
        let fd_logvar = (loss_of_gaussian(&qp)? - loss_of_gaussian(&qm)?) / (2.0 * h);
        max_rel_posterior = max_rel_posterior
            .max(rel_err(fd_mean, analytic_mean))
            .max(rel_err(fd_logvar, analytic_logvar));
    }

    // random backbone parameters through the full pipeline
    let backbone_ids: Vec<_> = model
        .store
        .ids()
        .filter(|&id| {
            model.store.name(id).starts_with("backbone.") || model.store.name(id).starts_with("head.")
        })
        .collect();
    let mut max_rel_backbone: f64 = 0.0;
    let mut checked = 0;
    for k in 0..n_backbone {
        let id = backbone_ids[rng.random_range(0..backbone_ids.len())];
        let len = model.store.value(id).len();
        let j = rng.random_range(0..len);
        let analytic = case.grads.grad(id).as_slice().expect("contiguous")[j];
        let orig = model.store.value(id).as_slice().expect("contiguous")[j];

        model.store.value_mut(id).as_slice_mut().unwrap()[j] = orig + h;
        let lp = total_loss_inference(&model, &inputs, &target, &eps, beta)?;
        model.store.value_mut(id).as_slice_mut().unwrap()[j] = orig - h;
        let lm = total_loss_inference(&model, &inputs, &target, &eps, beta)?;
        model.store.value_mut(id).as_slice_mut().unwrap()[j] = orig;

        let fd = (lp - lm) / (2.0 * h);
        max_rel_backbone = max_rel_backbone.max(rel_err(fd, analytic));
        checked += 1;
        let _ = k;
    }

    Ok(GradCheckReport {
        max_rel_error_posterior: max_rel_posterior,
        max_rel_error_backbone: max_rel_backbone,
        n_backbone_checked: checked,
    })
}
