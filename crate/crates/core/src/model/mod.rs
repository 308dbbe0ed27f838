//! The conditional probabilistic segmentation network.
//!
//! Three towers share nothing but their input: a U-shaped backbone mapping
//! stacked scans to dense features, and two convolutional encoders mapping
//! scans (the *prior*) or scans plus the future ground truth (the *posterior*)
//! to diagonal Gaussians over a small latent space. A latent sample is
//! broadcast to constant channels, concatenated to the last decoder block's
//! activations, and pushed through two 1x1 convolutions and a per-voxel
//! softmax, which conditions the predicted segmentation on the sample.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, GradBuffer, ParamStore};
use crate::volume::{ImageVolume, LabelMap, N_CLASSES};

pub(crate) use net::{EncoderCache, GaussianEncoder, HeadCache, LatentHead, Trunk, TrunkCache};

/// Diagonal Gaussian over the latent space, parameterized by mean and
/// log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian { mean: vec![0.0; dim], log_variance: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_variance.iter().map(|&lv| (0.5 * lv).exp()).collect()
    }
}

/// Architecture and initialization configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub spatial_dims: usize,
    pub n_input_timepoints: usize,
    pub n_contrasts: usize,
    pub n_classes: usize,
    pub base_channels: usize,
    /// Number of resolution levels of the backbone and encoder towers.
    pub depth: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            spatial_dims: 2,
            n_input_timepoints: 2,
            n_contrasts: 4,
            n_classes: N_CLASSES,
            base_channels: 8,
            depth: 3,
            latent_dim: 3,
            seed: 42,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_dims != 2 && self.spatial_dims != 3 {
            return Err(Error::Config(format!(
                "spatial_dims must be 2 or 3, got {}",
                self.spatial_dims
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.n_input_timepoints < 1 {
            return Err(Error::Config("n_input_timepoints must be >= 1".into()));
        }
        if self.n_contrasts < 1 || self.n_classes < 2 || self.base_channels < 1 {
            return Err(Error::Config(
                "n_contrasts, n_classes and base_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel count of the backbone / prior-encoder input.
    pub fn input_channels(&self) -> usize {
        self.n_input_timepoints * self.n_contrasts
    }

    /// Channel count of the posterior-encoder input (adds the one-hot target).
    pub fn posterior_channels(&self) -> usize {
        self.input_channels() + self.n_classes
    }

    /// Every spatial extent must be divisible by this for pooling to work.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn check_input(&self, x: &ArrayD<f64>, channels: usize) -> Result<()> {
        let shape = x.shape();
        if shape.len() != self.spatial_dims + 1 || shape[0] != channels {
            return Err(Error::shape(
                format!("[{channels}, *spatial^{}]", self.spatial_dims),
                format!("{shape:?}"),
            ));
        }
        let div = self.spatial_divisor();
        if shape[1..].iter().any(|&s| s % div != 0 || s < div * 2) {
            return Err(Error::shape(
                format!("spatial extents divisible by {div} (and >= {})", div * 2),
                format!("{:?}", &shape[1..]),
            ));
        }
        Ok(())
    }
}

/// Per-voxel class probabilities, `[n_classes, *spatial]`.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub class_probabilities: ArrayD<f64>,
}

impl SegmentationOutput {
    /// Hard labels via per-voxel argmax; ties resolve to the lowest class id.
    pub fn argmax_labels(&self) -> LabelMap {
        let k = self.class_probabilities.shape()[0];
        let spatial = &self.class_probabilities.shape()[1..];
        let voxels: usize = spatial.iter().product();
        let probs = self.class_probabilities.as_slice().expect("contiguous");
        let mut out = vec![0u8; voxels];
        for (j, slot) in out.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_p = probs[j];
            for c in 1..k {
                let p = probs[c * voxels + j];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            *slot = best as u8;
        }
        LabelMap { data: ArrayD::from_shape_vec(IxDyn(spatial), out).expect("shape matches") }
    }
}

/// Stack input volumes contrast-major into one `[timepoints * contrasts, *s]`
/// f64 array, in timepoint order.
pub fn stack_inputs(volumes: &[ImageVolume]) -> ArrayD<f64> {
    let spatial = volumes[0].spatial_shape().to_vec();
    let per = volumes[0].n_contrasts();
    let mut shape = vec![volumes.len() * per];
    shape.extend_from_slice(&spatial);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    let voxels: usize = spatial.iter().product();
    let flat = out.as_slice_mut().expect("contiguous");
    for (t, v) in volumes.iter().enumerate() {
        let src = v.data.as_slice().expect("contiguous");
        for (i, &x) in src.iter().enumerate() {
            flat[t * per * voxels + i] = x as f64;
        }
    }
    out
}

/// Reparameterized draw: `mean + exp(log_var / 2) * eps`, returning the noise
/// so gradients can flow through mean and log-variance.
pub fn sample_gaussian_with_noise(
    g: &DiagonalGaussian,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..g.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z = g
        .mean
        .iter()
        .zip(&g.log_variance)
        .zip(&eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    (z, eps)
}

/// Reparameterized draw from a diagonal Gaussian.
pub fn sample_gaussian(g: &DiagonalGaussian, rng: &mut ChaCha8Rng) -> Vec<f64> {
    sample_gaussian_with_noise(g, rng).0
}

/// All latents `mean + sigma * k` for `k` in `{-3..=3}^N`, in lexicographic
/// order of `k`. The center of the grid (all-zero `k`) is the mean itself.
pub fn grid_latents(g: &DiagonalGaussian) -> Vec<Vec<f64>> {
    let n = g.dim();
    let sigma = g.sigma();
    let steps = 7usize;
    let total = steps.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut k = vec![0isize; n];
        let mut rem = idx;
        for d in (0..n).rev() {
            k[d] = (rem % steps) as isize - 3;
            rem /= steps;
        }
        out.push(
            (0..n).map(|d| g.mean[d] + sigma[d] * k[d] as f64).collect::<Vec<f64>>(),
        );
    }
    out
}

/// Offsets `k` in the same order [`grid_latents`] emits them.
pub fn grid_offsets(n: usize) -> Vec<Vec<isize>> {
    let steps = 7usize;
    let total = steps.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut k = vec![0isize; n];
        let mut rem = idx;
        for d in (0..n).rev() {
            k[d] = (rem % steps) as isize - 3;
            rem /= steps;
        }
        out.push(k);
    }
    out
}

/// The assembled model: backbone trunk + latent head + prior and posterior
/// encoders, with all parameters in one named store.
#[derive(Debug, Clone)]
pub struct GrowthModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub(crate) trunk: Trunk,
    pub(crate) head: LatentHead,
    pub(crate) prior: GaussianEncoder,
    pub(crate) posterior: GaussianEncoder,
}

impl GrowthModel {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(crate::rng::derive_seed(config.seed, &[crate::rng::tag("model-init")]));
        let rank = config.spatial_dims;
        let trunk = Trunk::init(
            &mut store,
            &mut rng,
            "backbone",
            config.input_channels(),
            config.base_channels,
            config.depth,
            rank,
        );
        let head = LatentHead::init(
            &mut store,
            &mut rng,
            "head",
            config.base_channels,
            config.latent_dim,
            config.n_classes,
            rank,
        );
        let prior = GaussianEncoder::init(
            &mut store,
            &mut rng,
            "prior",
            config.input_channels(),
            config.base_channels,
            config.depth,
            config.latent_dim,
            rank,
        );
        let posterior = GaussianEncoder::init(
            &mut store,
            &mut rng,
            "posterior",
            config.posterior_channels(),
            config.base_channels,
            config.depth,
            config.latent_dim,
            rank,
        );
        Ok(GrowthModel { config, store, trunk, head, prior, posterior })
    }

    /// Full forward pass: inputs + one latent sample -> per-voxel class
    /// probabilities.
    pub fn backbone_forward(
        &self,
        inputs: &ArrayD<f64>,
        latent: &[f64],
    ) -> Result<SegmentationOutput> {
        self.config.check_input(inputs, self.config.input_channels())?;
        if latent.len() != self.config.latent_dim {
            return Err(Error::shape(
                format!("latent of length {}", self.config.latent_dim),
                format!("length {}", latent.len()),
            ));
        }
        let trunk = self.trunk.infer(&self.store, inputs);
        let logits = self.head.infer(&self.store, &trunk, latent);
        Ok(SegmentationOutput { class_probabilities: softmax(&logits) })
    }

    /// Backbone features for one input, reusable across many latents.
    pub fn trunk_features(&self, inputs: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.config.check_input(inputs, self.config.input_channels())?;
        Ok(self.trunk.infer(&self.store, inputs))
    }

    /// Decode one latent against precomputed trunk features.
    pub fn decode_latent(&self, trunk: &ArrayD<f64>, latent: &[f64]) -> SegmentationOutput {
        let logits = self.head.infer(&self.store, trunk, latent);
        SegmentationOutput { class_probabilities: softmax(&logits) }
    }

    /// Prior over the latent space from input scans alone.
    pub fn prior_encode(&self, inputs: &ArrayD<f64>) -> Result<DiagonalGaussian> {
        self.config.check_input(inputs, self.config.input_channels())?;
        Ok(self.prior.infer(&self.store, inputs))
    }

    /// Posterior over the latent space given inputs and the future ground
    /// truth segmentation.
    pub fn posterior_encode(
        &self,
        inputs: &ArrayD<f64>,
        target: &LabelMap,
    ) -> Result<DiagonalGaussian> {
        self.config.check_input(inputs, self.config.input_channels())?;
        let x = self.stack_posterior_input(inputs, target)?;
        Ok(self.posterior.infer(&self.store, &x))
    }

    pub(crate) fn stack_posterior_input(
        &self,
        inputs: &ArrayD<f64>,
        target: &LabelMap,
    ) -> Result<ArrayD<f64>> {
        if target.spatial_shape() != &inputs.shape()[1..] {
            return Err(Error::shape(
                format!("target with spatial shape {:?}", &inputs.shape()[1..]),
                format!("{:?}", target.spatial_shape()),
            ));
        }
        let one_hot = target.one_hot();
        Ok(crate::nn::concat_channels(&[inputs.view(), one_hot.view()]))
    }

    pub fn parameter_count(&self) -> usize {
        self.store.n_scalars()
    }

    // --- training-facing cached passes -----------------------------------

    pub(crate) fn trunk_forward_cached(&self, x: ArrayD<f64>) -> (ArrayD<f64>, TrunkCache) {
        self.trunk.forward(&self.store, x)
    }

    pub(crate) fn trunk_backward(
        &self,
        cache: &TrunkCache,
        dtrunk: &ArrayD<f64>,
        grads: &mut GradBuffer,
    ) -> ArrayD<f64> {
        self.trunk.backward(&self.store, cache, dtrunk, grads)
    }

    pub(crate) fn head_forward_cached(
        &self,
        trunk: &ArrayD<f64>,
        z: &[f64],
    ) -> (ArrayD<f64>, HeadCache) {
        self.head.forward(&self.store, trunk, z)
    }

    pub(crate) fn head_backward(
        &self,
        cache: &HeadCache,
        dlogits: &ArrayD<f64>,
        grads: &mut GradBuffer,
    ) -> (ArrayD<f64>, Vec<f64>) {
        self.head.backward(&self.store, cache, dlogits, grads)
    }

    pub(crate) fn prior_forward_cached(&self, x: ArrayD<f64>) -> (DiagonalGaussian, EncoderCache) {
        self.prior.forward(&self.store, x)
    }

    pub(crate) fn prior_backward(
        &self,
        cache: &EncoderCache,
        dmean: &[f64],
        dlogvar: &[f64],
        grads: &mut GradBuffer,
    ) {
        self.prior.backward(&self.store, cache, dmean, dlogvar, grads);
    }

    pub(crate) fn posterior_forward_cached(
        &self,
        x: ArrayD<f64>,
    ) -> (DiagonalGaussian, EncoderCache) {
        self.posterior.forward(&self.store, x)
    }

    pub(crate) fn posterior_backward(
        &self,
        cache: &EncoderCache,
        dmean: &[f64],
        dlogvar: &[f64],
        grads: &mut GradBuffer,
    ) {
        self.posterior.backward(&self.store, cache, dmean, dlogvar, grads);
    }
}
