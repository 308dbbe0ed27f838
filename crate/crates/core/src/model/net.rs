//! Network building blocks: conv+ELU units, the U-shaped trunk, the
//! latent-injection head, and the Gaussian encoder towers.
//!
//! Forward passes return caches holding exactly what their backward needs;
//! backward passes push parameter gradients into a [`GradBuffer`] and return
//! the input gradient.

use ndarray::{Array1, ArrayD, Axis, IxDyn, Slice};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;

use crate::nn::{
    avg_pool2_backward, avg_pool2_forward, concat_channels, conv_backward, conv_forward,
    elu_backward, elu_forward, global_avg_pool, global_avg_pool_backward, linear_backward,
    linear_forward, upsample2_backward, upsample2_forward, GradBuffer, ParamId, ParamStore,
};

use super::DiagonalGaussian;

pub(crate) const LOG_VAR_CLAMP: f64 = 10.0;

fn he_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rank: usize,
) -> (ParamId, ParamId) {
    let mut shape = vec![c_out, c_in];
    shape.extend(std::iter::repeat(kernel).take(rank));
    let fan_in = c_in * kernel.pow(rank as u32);
    let std = (2.0 / fan_in as f64).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    });
    let w = store.register(format!("{name}.w"), w);
    let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
    (w, b)
}

/// Convolution followed by ELU.
#[derive(Debug, Clone)]
pub(crate) struct ConvElu {
    pub w: ParamId,
    pub b: ParamId,
}

pub(crate) struct ConvEluCache {
    x: ArrayD<f64>,
    y: ArrayD<f64>,
}

impl ConvElu {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rank: usize,
    ) -> Self {
        let (w, b) = he_conv(store, rng, name, c_in, c_out, kernel, rank);
        ConvElu { w, b }
    }

    fn forward(&self, store: &ParamStore, x: ArrayD<f64>) -> (ArrayD<f64>, ConvEluCache) {
        let b = store.value(self.b).as_slice().expect("bias contiguous");
        let y = elu_forward(&conv_forward(&x, store.value(self.w), b));
        (y.clone(), ConvEluCache { x, y })
    }

    /// Forward without keeping a cache (inference path).
    fn infer(&self, store: &ParamStore, x: &ArrayD<f64>) -> ArrayD<f64> {
        let b = store.value(self.b).as_slice().expect("bias contiguous");
        elu_forward(&conv_forward(x, store.value(self.w), b))
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvEluCache,
        dy: &ArrayD<f64>,
        grads: &mut GradBuffer,
    ) -> ArrayD<f64> {
        let da = elu_backward(&cache.y, dy);
        let (dx, dw, db) = conv_backward(&cache.x, store.value(self.w), &da);
        grads.add(self.w, &dw);
        grads.add_slice(self.b, &db);
        dx
    }
}

fn split_channels(d: &ArrayD<f64>, first: usize) -> (ArrayD<f64>, ArrayD<f64>) {
    let a = d
        .slice_axis(Axis(0), Slice::new(0, Some(first as isize), 1))
        .as_standard_layout()
        .to_owned();
    let b = d
        .slice_axis(Axis(0), Slice::new(first as isize, None, 1))
        .as_standard_layout()
        .to_owned();
    (a, b)
}

/// U-shaped trunk: per level two conv+ELU units, average-pool down, nearest
/// upsample back up with skip concatenation. Output keeps `base` channels at
/// input resolution.
#[derive(Debug, Clone)]
pub(crate) struct Trunk {
    enc: Vec<(ConvElu, ConvElu)>,
    dec: Vec<(ConvElu, ConvElu)>,
    channels: Vec<usize>,
}

pub(crate) struct TrunkCache {
    enc: Vec<(ConvEluCache, ConvEluCache)>,
    dec: Vec<(ConvEluCache, ConvEluCache)>,
    pool_shapes: Vec<Vec<usize>>,
}

impl Trunk {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        base: usize,
        depth: usize,
        rank: usize,
    ) -> Self {
        let channels: Vec<usize> = (0..depth).map(|l| base << l).collect();
        let mut enc = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { c_in } else { channels[l - 1] };
            enc.push((
                ConvElu::init(store, rng, &format!("{name}.enc{l}.c0"), cin, channels[l], 3, rank),
                ConvElu::init(
                    store,
                    rng,
                    &format!("{name}.enc{l}.c1"),
                    channels[l],
                    channels[l],
                    3,
                    rank,
                ),
            ));
        }
        let mut dec = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let cin = channels[l + 1] + channels[l];
            dec.push((
                ConvElu::init(store, rng, &format!("{name}.dec{l}.c0"), cin, channels[l], 3, rank),
                ConvElu::init(
                    store,
                    rng,
                    &format!("{name}.dec{l}.c1"),
                    channels[l],
                    channels[l],
                    3,
                    rank,
                ),
            ));
        }
        Trunk { enc, dec, channels }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayD<f64>) -> (ArrayD<f64>, TrunkCache) {
        let depth = self.enc.len();
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pool_shapes = Vec::with_capacity(depth - 1);
        let mut skips: Vec<ArrayD<f64>> = Vec::with_capacity(depth - 1);
        let mut h = x;
        for (l, (c0, c1)) in self.enc.iter().enumerate() {
            let (h1, k0) = c0.forward(store, h);
            let (h2, k1) = c1.forward(store, h1);
            enc_caches.push((k0, k1));
            if l < depth - 1 {
                pool_shapes.push(h2.shape().to_vec());
                skips.push(h2.clone());
                h = avg_pool2_forward(&h2);
            } else {
                h = h2;
            }
        }
        let mut dec_caches: Vec<Option<(ConvEluCache, ConvEluCache)>> =
            (0..depth - 1).map(|_| None).collect();
        for l in (0..depth - 1).rev() {
            let up = upsample2_forward(&h);
            let hcat = concat_channels(&[up.view(), skips[l].view()]);
            let (h1, k0) = self.dec[l].0.forward(store, hcat);
            let (h2, k1) = self.dec[l].1.forward(store, h1);
            dec_caches[l] = Some((k0, k1));
            h = h2;
        }
        let cache = TrunkCache {
            enc: enc_caches,
            dec: dec_caches.into_iter().map(|c| c.expect("decoder cache filled")).collect(),
            pool_shapes,
        };
        (h, cache)
    }

    /// Inference-only forward (no caches kept).
    pub fn infer(&self, store: &ParamStore, x: &ArrayD<f64>) -> ArrayD<f64> {
        let depth = self.enc.len();
        let mut skips: Vec<ArrayD<f64>> = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for (l, (c0, c1)) in self.enc.iter().enumerate() {
            h = c1.infer(store, &c0.infer(store, &h));
            if l < depth - 1 {
                skips.push(h.clone());
                h = avg_pool2_forward(&h);
            }
        }
        for l in (0..depth - 1).rev() {
            let up = upsample2_forward(&h);
            let hcat = concat_channels(&[up.view(), skips[l].view()]);
            h = self.dec[l].1.infer(store, &self.dec[l].0.infer(store, &hcat));
        }
        h
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TrunkCache,
        dtrunk: &ArrayD<f64>,
        grads: &mut GradBuffer,
    ) -> ArrayD<f64> {
        let depth = self.enc.len();
        let mut dh = dtrunk.clone();
        let mut dskips: Vec<Option<ArrayD<f64>>> = (0..depth - 1).map(|_| None).collect();
        for l in 0..depth - 1 {
            let (k0, k1) = &cache.dec[l];
            let d1 = self.dec[l].1.backward(store, k1, &dh, grads);
            let dcat = self.dec[l].0.backward(store, k0, &d1, grads);
            let (dup, dskip) = split_channels(&dcat, self.channels[l + 1]);
            dskips[l] = Some(dskip);
            dh = upsample2_backward(&dup);
        }
        for l in (0..depth).rev() {
            if l < depth - 1 {
                let mut unpooled = avg_pool2_backward(&dh, &cache.pool_shapes[l]);
                unpooled
                    .zip_mut_with(dskips[l].as_ref().expect("skip grad"), |a, &b| *a += b);
                dh = unpooled;
            }
            let (k0, k1) = &cache.enc[l];
            let d1 = self.enc[l].1.backward(store, k1, &dh, grads);
            dh = self.enc[l].0.backward(store, k0, &d1, grads);
        }
        dh
    }
}

/// Broadcast a latent vector to constant spatial channels.
pub(crate) fn broadcast_latent(z: &[f64], spatial: &[usize]) -> ArrayD<f64> {
    let mut shape = vec![z.len()];
    shape.extend_from_slice(spatial);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    for (mut ch, &v) in out.outer_iter_mut().zip(z.iter()) {
        ch.fill(v);
    }
    out
}

/// Latent-injection head: the latent is appended as constant channels to the
/// trunk output, then two 1x1 convolutions produce the class logits.
#[derive(Debug, Clone)]
pub(crate) struct LatentHead {
    c0: ConvElu,
    c1_w: ParamId,
    c1_b: ParamId,
    latent_dim: usize,
    trunk_channels: usize,
}

pub(crate) struct HeadCache {
    c0: ConvEluCache,
    a: ArrayD<f64>,
}

impl LatentHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        trunk_channels: usize,
        latent_dim: usize,
        n_classes: usize,
        rank: usize,
    ) -> Self {
        let c0 = ConvElu::init(
            store,
            rng,
            &format!("{name}.c0"),
            trunk_channels + latent_dim,
            trunk_channels,
            1,
            rank,
        );
        let (c1_w, c1_b) =
            he_conv(store, rng, &format!("{name}.c1"), trunk_channels, n_classes, 1, rank);
        LatentHead { c0, c1_w, c1_b, latent_dim, trunk_channels }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        trunk: &ArrayD<f64>,
        z: &[f64],
    ) -> (ArrayD<f64>, HeadCache) {
        let zmap = broadcast_latent(z, &trunk.shape()[1..]);
        let hcat = concat_channels(&[trunk.view(), zmap.view()]);
        let (a, k0) = self.c0.forward(store, hcat);
        let b = store.value(self.c1_b).as_slice().expect("bias contiguous");
        let logits = conv_forward(&a, store.value(self.c1_w), b);
        (logits, HeadCache { c0: k0, a })
    }

    /// Inference-only decode against a fixed trunk (used to scan many latents).
    pub fn infer(&self, store: &ParamStore, trunk: &ArrayD<f64>, z: &[f64]) -> ArrayD<f64> {
        let zmap = broadcast_latent(z, &trunk.shape()[1..]);
        let hcat = concat_channels(&[trunk.view(), zmap.view()]);
        let a = self.c0.infer(store, &hcat);
        let b = store.value(self.c1_b).as_slice().expect("bias contiguous");
        conv_forward(&a, store.value(self.c1_w), b)
    }

    /// Returns (d_trunk, d_latent).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &HeadCache,
        dlogits: &ArrayD<f64>,
        grads: &mut GradBuffer,
    ) -> (ArrayD<f64>, Vec<f64>) {
        let (da, dw, db) = conv_backward(&cache.a, store.value(self.c1_w), dlogits);
        grads.add(self.c1_w, &dw);
        grads.add_slice(self.c1_b, &db);
        let dcat = self.c0.backward(store, &cache.c0, &da, grads);
        let (dtrunk, dzmap) = split_channels(&dcat, self.trunk_channels);
        let dz: Vec<f64> =
            (0..self.latent_dim).map(|i| dzmap.index_axis(Axis(0), i).sum()).collect();
        (dtrunk, dz)
    }
}

/// Fully convolutional tower ending in global average pooling and a linear map
/// to (mean, log-variance) of a diagonal Gaussian.
#[derive(Debug, Clone)]
pub(crate) struct GaussianEncoder {
    convs: Vec<ConvElu>,
    fc_w: ParamId,
    fc_b: ParamId,
    latent_dim: usize,
}

pub(crate) struct EncoderCache {
    convs: Vec<ConvEluCache>,
    pool_shapes: Vec<Vec<usize>>,
    gap_in_shape: Vec<usize>,
    gap_vec: Array1<f64>,
    clamp_mask: Vec<bool>,
}

impl GaussianEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        base: usize,
        depth: usize,
        latent_dim: usize,
        rank: usize,
    ) -> Self {
        let mut convs = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { c_in } else { base << (l - 1) };
            convs.push(ConvElu::init(
                store,
                rng,
                &format!("{name}.c{l}"),
                cin,
                base << l,
                3,
                rank,
            ));
        }
        let top = base << (depth - 1);
        // small init so untrained encoders start near the standard normal
        let fc_w = store.register(
            format!("{name}.fc.w"),
            ArrayD::from_shape_fn(IxDyn(&[2 * latent_dim, top]), |_| {
                0.01 * rng.sample::<f64, _>(StandardNormal)
            }),
        );
        let fc_b = store.register(format!("{name}.fc.b"), ArrayD::zeros(IxDyn(&[2 * latent_dim])));
        GaussianEncoder { convs, fc_w, fc_b, latent_dim }
    }

    fn fc_weights<'s>(&self, store: &'s ParamStore) -> ndarray::ArrayView2<'s, f64> {
        store
            .value(self.fc_w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("fc weight is 2-d")
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayD<f64>) -> (DiagonalGaussian, EncoderCache) {
        let depth = self.convs.len();
        let mut conv_caches = Vec::with_capacity(depth);
        let mut pool_shapes = Vec::with_capacity(depth - 1);
        let mut h = x;
        for (l, conv) in self.convs.iter().enumerate() {
            let (h1, k) = conv.forward(store, h);
            conv_caches.push(k);
            if l < depth - 1 {
                pool_shapes.push(h1.shape().to_vec());
                h = avg_pool2_forward(&h1);
            } else {
                h = h1;
            }
        }
        let gap_in_shape = h.shape().to_vec();
        let gap_vec = global_avg_pool(&h);
        let fc_b = store.value(self.fc_b);
        let fc_b = Array1::from_iter(fc_b.iter().cloned());
        let out = linear_forward(&gap_vec, self.fc_weights(store), &fc_b);

        let n = self.latent_dim;
        let mean = out.as_slice().expect("contiguous")[..n].to_vec();
        let mut clamp_mask = vec![false; n];
        let log_variance: Vec<f64> = out.as_slice().expect("contiguous")[n..]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.abs() > LOG_VAR_CLAMP {
                    clamp_mask[i] = true;
                    v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
                } else {
                    v
                }
            })
            .collect();

        let cache = EncoderCache { convs: conv_caches, pool_shapes, gap_in_shape, gap_vec, clamp_mask };
        (DiagonalGaussian { mean, log_variance }, cache)
    }

    /// Inference-only forward.
    pub fn infer(&self, store: &ParamStore, x: &ArrayD<f64>) -> DiagonalGaussian {
        let depth = self.convs.len();
        let mut h = x.clone();
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.infer(store, &h);
            if l < depth - 1 {
                h = avg_pool2_forward(&h);
            }
        }
        let gap_vec = global_avg_pool(&h);
        let fc_b = store.value(self.fc_b);
        let fc_b = Array1::from_iter(fc_b.iter().cloned());
        let out = linear_forward(&gap_vec, self.fc_weights(store), &fc_b);
        let n = self.latent_dim;
        DiagonalGaussian {
            mean: out.as_slice().expect("contiguous")[..n].to_vec(),
            log_variance: out.as_slice().expect("contiguous")[n..]
                .iter()
                .map(|&v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
                .collect(),
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderCache,
        dmean: &[f64],
        dlogvar: &[f64],
        grads: &mut GradBuffer,
    ) -> ArrayD<f64> {
        let n = self.latent_dim;
        let mut dout = Array1::<f64>::zeros(2 * n);
        for i in 0..n {
            dout[i] = dmean[i];
            // clamped outputs are flat: no gradient flows
            dout[n + i] = if cache.clamp_mask[i] { 0.0 } else { dlogvar[i] };
        }
        let (dg, dfw, dfb) = linear_backward(&cache.gap_vec, self.fc_weights(store), &dout);
        grads.add(self.fc_w, &dfw.into_dyn());
        grads.add_slice(self.fc_b, dfb.as_slice().expect("contiguous"));

        let mut dh = global_avg_pool_backward(&dg, &cache.gap_in_shape);
        let depth = self.convs.len();
        for l in (0..depth).rev() {
            if l < depth - 1 {
                dh = avg_pool2_backward(&dh, &cache.pool_shapes[l]);
            }
            dh = self.convs[l].backward(store, &cache.convs[l], &dh, grads);
        }
        dh
    }
}
