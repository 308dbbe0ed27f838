//! Synthetic longitudinal lesion generator.
//!
//! A lesion is a star-shaped region around a drifting center: its boundary
//! radius is `base_radius * exp(h(u))` for unit direction `u`, where `h` is a
//! smooth directional field (a linear term plus a few von-Mises-style bumps).
//! One growth step scales the base radius by a random expansion factor (or its
//! inverse, with probability `shrink_probability`) and perturbs the field, so
//! a fixed present state has a genuinely stochastic set of futures. Class
//! structure is radial and therefore nested by construction: necrosis inside
//! the enhancing core inside the whole tumor.
//!
//! Every step consumes a dedicated seed derived from the subject seed, which
//! makes the conditional future distribution exactly re-samplable: re-running
//! the step from a stored boundary state with fresh seeds draws from the same
//! distribution that produced the observed next timepoint.

mod io;

pub use io::{load_dataset, regenerate_from_manifest, write_dataset, DatasetManifest};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{derive_seed, stream, tag};
use crate::volume::{ImageVolume, LabelMap, TumorClass};

/// Contrast roles synthesized for every scan.
pub const CONTRAST_NAMES: [&str; 4] = ["t1n", "t1ce", "t2", "flair"];

/// Mean intensity per (class, contrast). Enhancing tumor is bright only in
/// t1ce, edema is bright in t2/flair, necrosis is dark in t1ce.
const CLASS_MEANS: [[f64; 4]; 4] = [
    [1.0, 1.0, 1.0, 1.0],   // background
    [0.9, 0.9, 1.8, 1.9],   // edema
    [1.0, 2.0, 1.2, 1.3],   // enhancing tumor
    [0.8, 0.35, 1.4, 1.2],  // necrosis
];

const N_BUMPS: usize = 4;
const BUMP_SHARPNESS: f64 = 6.0;
const MIN_RADIUS: f64 = 2.5;

/// Configuration of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    pub spatial_dims: usize,
    pub grid_size: usize,
    pub n_subjects: usize,
    pub timepoints_per_subject: usize,
    /// Per-step expansion factor interval, both ends >= 1.
    pub growth_rate_range: (f64, f64),
    /// Probability that a step shrinks (applies the inverse factor) instead.
    pub shrink_probability: f64,
    /// Scale of directional growth modulation and shape drift (>= 0).
    pub anisotropy_strength: f64,
    /// Standard deviation of per-voxel intensity noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GrowthParams {
    fn default() -> Self {
        GrowthParams {
            spatial_dims: 2,
            grid_size: 64,
            n_subjects: 60,
            timepoints_per_subject: 6,
            growth_rate_range: (1.05, 1.3),
            shrink_probability: 0.25,
            anisotropy_strength: 0.6,
            noise_sigma: 0.15,
            seed: 7,
        }
    }
}

impl GrowthParams {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_dims != 2 && self.spatial_dims != 3 {
            return Err(Error::Config(format!(
                "spatial_dims must be 2 or 3, got {}",
                self.spatial_dims
            )));
        }
        if self.grid_size < 32 {
            return Err(Error::Config(format!(
                "grid_size must be >= 32, got {}",
                self.grid_size
            )));
        }
        if self.n_subjects < 1 {
            return Err(Error::Config("n_subjects must be >= 1".into()));
        }
        if self.timepoints_per_subject < 3 {
            return Err(Error::Config(format!(
                "timepoints_per_subject must be >= 3, got {}",
                self.timepoints_per_subject
            )));
        }
        let (lo, hi) = self.growth_rate_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 1.0 || hi < lo {
            return Err(Error::Config(format!(
                "growth_rate_range must satisfy 1 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.shrink_probability) {
            return Err(Error::Config(format!(
                "shrink_probability must be in [0, 1], got {}",
                self.shrink_probability
            )));
        }
        if self.anisotropy_strength < 0.0 || !self.anisotropy_strength.is_finite() {
            return Err(Error::Config(format!(
                "anisotropy_strength must be >= 0, got {}",
                self.anisotropy_strength
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Latent geometry of a lesion at one timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryState {
    pub center: Vec<f64>,
    pub base_radius: f64,
    /// Linear directional term of the log-radius field.
    linear: Vec<f64>,
    /// Bump directions (unit vectors) and amplitudes.
    bump_dirs: Vec<Vec<f64>>,
    bump_amps: Vec<f64>,
    /// Persistent preferred growth direction of this subject.
    drift: Vec<f64>,
    /// Necrosis and core radius fractions (necrosis < core < 1).
    necrosis_frac: f64,
    core_frac: f64,
}

impl BoundaryState {
    /// Log-radius modulation for unit direction `u`.
    fn field(&self, u: &[f64]) -> f64 {
        let mut h: f64 = self.linear.iter().zip(u).map(|(l, x)| l * x).sum();
        for (dir, amp) in self.bump_dirs.iter().zip(&self.bump_amps) {
            let cos: f64 = dir.iter().zip(u).map(|(d, x)| d * x).sum();
            h += amp * (BUMP_SHARPNESS * (cos - 1.0)).exp();
        }
        h.clamp(-0.9, 0.9)
    }

    /// Boundary radius along unit direction `u`.
    pub fn radius(&self, u: &[f64]) -> f64 {
        self.base_radius * self.field(u).exp()
    }
}

/// One observed timepoint of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTimepoint {
    pub image: ImageVolume,
    pub labels: LabelMap,
    pub day_offset: i64,
}

/// Generator-internal state kept alongside a series so the conditional future
/// distribution can be re-sampled. Not persisted to disk; series loaded from a
/// dataset directory carry `None` and must be regenerated from the manifest
/// seed to serve as oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthProvenance {
    pub subject_seed: u64,
    pub states: Vec<BoundaryState>,
}

/// A subject's ordered longitudinal series.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub timepoints: Vec<SeriesTimepoint>,
    pub provenance: Option<GrowthProvenance>,
}

impl SubjectSeries {
    pub fn n_timepoints(&self) -> usize {
        self.timepoints.len()
    }
}

fn sample_unit_vector(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Seed that advances a subject's boundary state from timepoint `step` to
/// `step + 1` inside [`generate_subject`]. Re-using it in [`sample_futures`]
/// reproduces the observed next timepoint exactly.
pub fn step_seed(subject_seed: u64, step: usize) -> u64 {
    derive_seed(subject_seed, &[tag("growth-step"), step as u64])
}

fn initial_state(params: &GrowthParams, subject_seed: u64) -> BoundaryState {
    let mut rng = stream(derive_seed(subject_seed, &[tag("init")]));
    let d = params.spatial_dims;
    let g = params.grid_size as f64;
    let center: Vec<f64> =
        (0..d).map(|_| g * (0.5 + 0.1 * (rng.random::<f64>() * 2.0 - 1.0))).collect();
    let base_radius = g * rng.random_range(0.10..0.16);
    let drift = sample_unit_vector(&mut rng, d);
    let linear: Vec<f64> =
        (0..d).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let bump_dirs: Vec<Vec<f64>> =
        (0..N_BUMPS).map(|_| sample_unit_vector(&mut rng, d)).collect();
    let bump_amps: Vec<f64> = (0..N_BUMPS).map(|_| rng.random_range(-0.15..0.15)).collect();
    let necrosis_frac = rng.random_range(0.25..0.45);
    let core_frac = rng.random_range(0.55..0.75);
    BoundaryState {
        center,
        base_radius,
        linear,
        bump_dirs,
        bump_amps,
        drift,
        necrosis_frac,
        core_frac,
    }
}

/// Advance a boundary state by one stochastic growth step.
pub fn grow_step(state: &BoundaryState, params: &GrowthParams, seed: u64) -> BoundaryState {
    let mut rng = stream(seed);
    let d = state.center.len();
    let g = params.grid_size as f64;
    let anis = params.anisotropy_strength;

    let (lo, hi) = params.growth_rate_range;
    let gamma = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let shrinks = rng.random::<f64>() < params.shrink_probability;
    let factor = if shrinks { 1.0 / gamma } else { gamma };

    let step_dir = sample_unit_vector(&mut rng, d);
    let mut next = state.clone();
    next.base_radius = (state.base_radius * factor).clamp(MIN_RADIUS, 0.38 * g);
    for i in 0..d {
        next.linear[i] =
            0.9 * state.linear[i] + anis * 0.06 * (0.5 * state.drift[i] + 0.5 * step_dir[i]);
    }
    for amp in next.bump_amps.iter_mut() {
        let delta: f64 = rng.sample(StandardNormal);
        *amp = (0.9 * *amp + anis * 0.05 * delta).clamp(-0.35, 0.35);
    }
    let center_dir = sample_unit_vector(&mut rng, d);
    for i in 0..d {
        next.center[i] = (state.center[i]
            + anis * (0.25 * state.drift[i] + 0.25 * center_dir[i]))
            .clamp(0.3 * g, 0.7 * g);
    }
    next
}

/// Rasterize a boundary state into a class map on the `grid_size^D` grid.
pub fn rasterize(state: &BoundaryState, params: &GrowthParams) -> LabelMap {
    let d = params.spatial_dims;
    let g = params.grid_size;
    let shape: Vec<usize> = vec![g; d];
    let total: usize = shape.iter().product();
    let mut data = ArrayD::<u8>::zeros(IxDyn(&shape));
    {
        let flat = data.as_slice_mut().expect("label buffer contiguous");
        let mut coord = vec![0usize; d];
        for (idx, value) in flat.iter_mut().enumerate() {
            let mut rem = idx;
            for ax in (0..d).rev() {
                coord[ax] = rem % g;
                rem /= g;
            }
            let mut delta = [0.0f64; 3];
            let mut r2 = 0.0;
            for ax in 0..d {
                let dx = coord[ax] as f64 + 0.5 - state.center[ax];
                delta[ax] = dx;
                r2 += dx * dx;
            }
            let r = r2.sqrt();
            let class = if r < 1e-9 {
                TumorClass::Necrosis
            } else {
                let u: Vec<f64> = delta[..d].iter().map(|x| x / r).collect();
                let boundary = state.radius(&u);
                if r > boundary {
                    TumorClass::Background
                } else if r <= state.necrosis_frac * boundary {
                    TumorClass::Necrosis
                } else if r <= state.core_frac * boundary {
                    TumorClass::Enhancing
                } else {
                    TumorClass::Edema
                }
            };
            *value = class as u8;
        }
        let _ = total;
    }
    LabelMap { data }
}

/// Number of separable 1-2-1 smoothing passes applied to the class-mean image
/// before noise. This emulates partial-volume mixing: voxels near a class
/// boundary get intermediate intensities, so the exact boundary placement is
/// genuinely ambiguous from the image alone.
const PARTIAL_VOLUME_PASSES: usize = 2;

/// One separable 1-2-1 smoothing pass along every spatial axis (edge values
/// are clamped). Operates on one contrast's f64 buffer.
fn smooth_121(values: &mut Vec<f64>, spatial: &[usize]) {
    let mut scratch = vec![0.0f64; values.len()];
    let rank = spatial.len();
    // strides for row-major layout
    let mut strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * spatial[ax + 1];
    }
    for ax in 0..rank {
        let n = spatial[ax];
        let stride = strides[ax];
        for (idx, slot) in scratch.iter_mut().enumerate() {
            let pos = (idx / stride) % n;
            let center = values[idx];
            let prev = if pos > 0 { values[idx - stride] } else { center };
            let next = if pos + 1 < n { values[idx + stride] } else { center };
            *slot = 0.25 * prev + 0.5 * center + 0.25 * next;
        }
        std::mem::swap(values, &mut scratch);
    }
}

/// Synthesize the multi-contrast image for a label map: class mean intensities
/// with partial-volume smoothing at class boundaries, plus a smooth
/// low-frequency bias field, plus per-voxel Gaussian noise. A deterministic
/// function of `(labels, params, seed)`.
pub fn synthesize_image(labels: &LabelMap, params: &GrowthParams, seed: u64) -> ImageVolume {
    let mut rng = stream(seed);
    let d = params.spatial_dims;
    let g = params.grid_size as f64;
    let spatial = labels.data.shape().to_vec();
    let mut shape = vec![CONTRAST_NAMES.len()];
    shape.extend_from_slice(&spatial);

    let mut data = ArrayD::<f32>::zeros(IxDyn(&shape));
    let labels_flat = labels.data.as_slice().expect("labels contiguous");
    let voxels = labels_flat.len();

    for (c, _) in CONTRAST_NAMES.iter().enumerate() {
        // class-mean image with partial-volume smoothing
        let mut mean_image: Vec<f64> =
            labels_flat.iter().map(|&l| CLASS_MEANS[l as usize][c]).collect();
        for _ in 0..PARTIAL_VOLUME_PASSES {
            smooth_121(&mut mean_image, &spatial);
        }

        // two low-frequency cosine components per contrast
        let mut freqs = [[0.0f64; 3]; 2];
        let mut phases = [0.0f64; 2];
        for k in 0..2 {
            for ax in 0..d {
                freqs[k][ax] = rng.random_range(0.5..1.5);
            }
            phases[k] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        let out = data.as_slice_mut().expect("image buffer contiguous");
        let mut coord = vec![0usize; d];
        for idx in 0..voxels {
            let mut rem = idx;
            for ax in (0..d).rev() {
                coord[ax] = rem % spatial[ax];
                rem /= spatial[ax];
            }
            let mut bias = 0.0;
            for k in 0..2 {
                let mut phase = phases[k];
                for ax in 0..d {
                    phase += std::f64::consts::TAU * freqs[k][ax] * (coord[ax] as f64) / g;
                }
                bias += 0.05 * phase.cos();
            }
            let noise: f64 = rng.sample(StandardNormal);
            let value = mean_image[idx] + bias + params.noise_sigma * noise;
            out[c * voxels + idx] = value as f32;
        }
    }

    ImageVolume {
        data,
        contrast_names: CONTRAST_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Generate one subject's full longitudinal series. Bit-reproducible from
/// `(params, subject_seed)`.
pub fn generate_subject(params: &GrowthParams, subject_seed: u64) -> Result<SubjectSeries> {
    params.validate()?;
    let mut states = vec![initial_state(params, subject_seed)];
    for step in 0..params.timepoints_per_subject - 1 {
        let next = grow_step(states.last().unwrap(), params, step_seed(subject_seed, step));
        states.push(next);
    }

    let mut day_rng = stream(derive_seed(subject_seed, &[tag("days")]));
    let mut day = 0i64;
    let mut timepoints = Vec::with_capacity(states.len());
    for (t, state) in states.iter().enumerate() {
        if t > 0 {
            day += day_rng.random_range(30..=180i64);
        }
        let labels = rasterize(state, params);
        let image = synthesize_image(
            &labels,
            params,
            derive_seed(subject_seed, &[tag("image"), t as u64]),
        );
        timepoints.push(SeriesTimepoint { image, labels, day_offset: day });
    }

    Ok(SubjectSeries {
        subject_id: format!("s{subject_seed:016x}"),
        timepoints,
        provenance: Some(GrowthProvenance { subject_seed, states }),
    })
}

/// Seed for the `index`-th subject of a dataset.
pub fn subject_seed(dataset_seed: u64, index: usize) -> u64 {
    derive_seed(dataset_seed, &[tag("subject"), index as u64])
}

/// Generate the whole dataset (subjects are independent and run in parallel).
pub fn generate_dataset(params: &GrowthParams) -> Result<Vec<SubjectSeries>> {
    params.validate()?;
    let results = exec::map_indexed(params.n_subjects, |i| {
        generate_subject(params, subject_seed(params.seed, i)).map(|mut s| {
            s.subject_id = format!("sub-{i:04}");
            s
        })
    });
    results.into_iter().collect()
}

/// Draw `n` alternative futures for the transition out of timepoint `b_index`,
/// by re-running the growth step from the stored boundary state with `n`
/// distinct seeds. The first draw uses `seed` itself, so passing the original
/// [`step_seed`] reproduces the observed next timepoint exactly.
pub fn sample_futures(
    series: &SubjectSeries,
    b_index: usize,
    params: &GrowthParams,
    n: usize,
    seed: u64,
) -> Result<Vec<LabelMap>> {
    if n < 1 {
        return Err(Error::Argument(format!("sample_futures needs n >= 1, got {n}")));
    }
    let provenance = series.provenance.as_ref().ok_or_else(|| {
        Error::Argument(
            "series has no generator state; regenerate it from the manifest seed first".into(),
        )
    })?;
    let state = provenance.states.get(b_index).ok_or_else(|| {
        Error::Argument(format!(
            "timepoint {b_index} out of range for series with {} timepoints",
            provenance.states.len()
        ))
    })?;
    let labels = exec::map_indexed(n, |i| {
        let future_seed =
            if i == 0 { seed } else { derive_seed(seed, &[tag("future"), i as u64]) };
        rasterize(&grow_step(state, params, future_seed), params)
    });
    Ok(labels)
}

/// Whole-tumor voxel count of a label map.
pub fn whole_tumor_volume(labels: &LabelMap) -> usize {
    labels.data.iter().filter(|&&v| v != TumorClass::Background as u8).count()
}
