//! Overlap metrics and the latent-grid volume query.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{grid_latents, grid_offsets, GrowthModel, SegmentationOutput};
use crate::training::kl_diag_gaussians;
use crate::volume::{LabelMap, TumorClass};

/// Dice overlap of two binary masks. Two empty masks count as perfect
/// agreement (Dice 1).
pub fn dice(a: &ArrayD<bool>, b: &ArrayD<bool>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Binary whole-tumor mask of a label map (every non-background class).
pub fn whole_tumor(labels: &LabelMap) -> ArrayD<bool> {
    labels.data.mapv(|v| v != TumorClass::Background as u8)
}

/// Whole-tumor mask of a probabilistic output (argmax first; ties resolve to
/// the lowest class id).
pub fn whole_tumor_prediction(seg: &SegmentationOutput) -> ArrayD<bool> {
    whole_tumor(&seg.argmax_labels())
}

fn mask_volume(mask: &ArrayD<bool>) -> usize {
    mask.iter().filter(|&&v| v).count()
}

/// Outcome of [`query_volume_dice`].
#[derive(Debug, Clone)]
pub struct QueryVolumeResult {
    /// Whole-tumor Dice of the best-volume-matching grid sample.
    pub dice: f64,
    /// The latent vector that produced it.
    pub chosen_latent: Vec<f64>,
    /// Its grid offset `k` (in units of sigma).
    pub chosen_offset: Vec<isize>,
    /// Whole-tumor Dice of the prior-mean prediction (the `k = 0` sample).
    pub mean_dice: f64,
    /// Whole-tumor volume of the chosen sample and of the ground truth.
    pub chosen_volume: usize,
    pub target_volume: usize,
}

/// Whole-tumor masks of every latent on the `{-3..3}^N` sigma grid around the
/// prior mean, decoded against one shared trunk pass.
pub struct GridScan {
    pub latents: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<isize>>,
    pub masks: Vec<ArrayD<bool>>,
    pub volumes: Vec<usize>,
    /// Index of the all-zero offset (the prior mean).
    pub mean_index: usize,
}

/// Run the backbone trunk once, then decode all grid latents.
pub fn scan_latent_grid(model: &GrowthModel, inputs: &ArrayD<f64>) -> Result<GridScan> {
    let prior = model.prior_encode(inputs)?;
    let trunk = model.trunk_features(inputs)?;
    let latents = grid_latents(&prior);
    let offsets = grid_offsets(prior.dim());
    let masks = crate::exec::map_indexed(latents.len(), |i| {
        whole_tumor_prediction(&model.decode_latent(&trunk, &latents[i]))
    });
    let volumes: Vec<usize> = masks.iter().map(mask_volume).collect();
    let mean_index = offsets
        .iter()
        .position(|k| k.iter().all(|&d| d == 0))
        .expect("grid contains the mean");
    Ok(GridScan { latents, offsets, masks, volumes, mean_index })
}

impl GridScan {
    /// Index of the sample whose whole-tumor volume best matches
    /// `target_volume`. Ties resolve to the smaller `|k|`, then the
    /// lexicographically smaller `k`; the winner is independent of scan order.
    pub fn best_volume_match(&self, target_volume: usize) -> usize {
        let mut best: Option<(usize, u64, &Vec<isize>, usize)> = None;
        for (i, k) in self.offsets.iter().enumerate() {
            let err = self.volumes[i].abs_diff(target_volume);
            let knorm: u64 = k.iter().map(|&d| (d * d) as u64).sum();
            let candidate = (err, knorm, k, i);
            best = Some(match best {
                None => candidate,
                Some(cur) => {
                    if (candidate.0, candidate.1, candidate.2) < (cur.0, cur.1, cur.2) {
                        candidate
                    } else {
                        cur
                    }
                }
            });
        }
        best.expect("grid is non-empty").3
    }
}

/// Decode every latent on the `{-3..3}^N` sigma grid around the prior mean,
/// pick the sample whose whole-tumor volume best matches the ground truth's
/// (ties: smaller `|k|`, then lexicographically smaller `k`), and score it by
/// whole-tumor Dice against the ground truth.
pub fn query_volume_dice(
    model: &GrowthModel,
    inputs: &ArrayD<f64>,
    target: &LabelMap,
) -> Result<QueryVolumeResult> {
    let gt_mask = whole_tumor(target);
    let gt_volume = mask_volume(&gt_mask);
    let scan = scan_latent_grid(model, inputs)?;
    let best_i = scan.best_volume_match(gt_volume);

    Ok(QueryVolumeResult {
        dice: dice(&scan.masks[best_i], &gt_mask)?,
        chosen_latent: scan.latents[best_i].clone(),
        chosen_offset: scan.offsets[best_i].clone(),
        mean_dice: dice(&scan.masks[scan.mean_index], &gt_mask)?,
        chosen_volume: scan.volumes[best_i],
        target_volume: gt_volume,
    })
}

/// KL divergence the model assigns to an (inputs, future ground truth)
/// combination: `KL(posterior(inputs, target) || prior(inputs))` in nats.
/// Lower means the model finds the observed future more plausible.
pub fn surprise(model: &GrowthModel, inputs: &ArrayD<f64>, target: &LabelMap) -> Result<f64> {
    let q = model.posterior_encode(inputs, target)?;
    let p = model.prior_encode(inputs)?;
    kl_diag_gaussians(&q, &p)
}
