//! Forward/backward array operations.

use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn, Slice};

/// Per-axis source/destination windows for a kernel offset.
///
/// With zero padding, `out[p] += w * x[p + o]` is valid for
/// `p in max(0,-o) .. n - max(0,o)`; the matching input range is shifted by `o`.
fn offset_windows(offset: &[isize], shape: &[usize]) -> (Vec<(isize, isize)>, Vec<(isize, isize)>) {
    let mut out_win = Vec::with_capacity(offset.len());
    let mut in_win = Vec::with_capacity(offset.len());
    for (&o, &n) in offset.iter().zip(shape) {
        let n = n as isize;
        out_win.push(((-o).max(0), n - o.max(0)));
        in_win.push((o.max(0), n + o.min(0)));
    }
    (out_win, in_win)
}

/// Enumerate kernel offsets in row-major kernel order, e.g. for a 3^2 kernel:
/// (-1,-1), (-1,0), (-1,1), (0,-1), ... matching the weight layout.
fn kernel_offsets(kernel: usize, rank: usize) -> Vec<Vec<isize>> {
    let pad = (kernel / 2) as isize;
    let count = kernel.pow(rank as u32);
    let mut offsets = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rem = idx;
        let mut o = vec![0isize; rank];
        for d in (0..rank).rev() {
            o[d] = (rem % kernel) as isize - pad;
            rem /= kernel;
        }
        offsets.push(o);
    }
    offsets
}

fn spatial_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Lower `x: [c_in, *s]` to a column matrix `[c_in * kernel^D, prod(s)]`.
/// Out-of-bounds taps are zero.
pub fn im2col(x: &ArrayD<f64>, kernel: usize) -> Array2<f64> {
    let c_in = x.shape()[0];
    let spatial = &x.shape()[1..];
    let p = spatial_len(spatial);
    let offsets = kernel_offsets(kernel, spatial.len());
    let k = offsets.len();

    let mut col = Array2::<f64>::zeros((c_in * k, p));
    for ci in 0..c_in {
        let xc = x.index_axis(Axis(0), ci);
        for (kidx, off) in offsets.iter().enumerate() {
            let (out_win, in_win) = offset_windows(off, spatial);
            let mut row = col.row_mut(ci * k + kidx);
            let mut row_nd = row
                .view_mut()
                .into_shape_with_order(IxDyn(spatial))
                .expect("row is contiguous");
            let mut dst = row_nd.slice_each_axis_mut(|ax| {
                let (lo, hi) = out_win[ax.axis.index()];
                Slice::new(lo, Some(hi), 1)
            });
            let src = xc.slice_each_axis(|ax| {
                let (lo, hi) = in_win[ax.axis.index()];
                Slice::new(lo, Some(hi), 1)
            });
            dst.assign(&src);
        }
    }
    col
}

/// Scatter-add a column-matrix gradient back to input layout (adjoint of [`im2col`]).
pub fn col2im(dcol: &Array2<f64>, c_in: usize, spatial: &[usize], kernel: usize) -> ArrayD<f64> {
    let offsets = kernel_offsets(kernel, spatial.len());
    let k = offsets.len();
    let mut shape = vec![c_in];
    shape.extend_from_slice(spatial);
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&shape));
    for ci in 0..c_in {
        let mut dxc = dx.index_axis_mut(Axis(0), ci);
        for (kidx, off) in offsets.iter().enumerate() {
            let (out_win, in_win) = offset_windows(off, spatial);
            let row = dcol.row(ci * k + kidx);
            let row_nd =
                row.into_shape_with_order(IxDyn(spatial)).expect("row is contiguous");
            let src = row_nd.slice_each_axis(|ax| {
                let (lo, hi) = out_win[ax.axis.index()];
                Slice::new(lo, Some(hi), 1)
            });
            let mut dst = dxc.slice_each_axis_mut(|ax| {
                let (lo, hi) = in_win[ax.axis.index()];
                Slice::new(lo, Some(hi), 1)
            });
            dst.zip_mut_with(&src, |d, &s| *d += s);
        }
    }
    dx
}

/// Convolution with odd kernel (1 or 3 per axis), stride 1, zero padding that
/// preserves spatial size. `w: [c_out, c_in, *kernel]`, `x: [c_in, *s]`.
pub fn conv_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &[f64]) -> ArrayD<f64> {
    let c_out = w.shape()[0];
    let c_in = w.shape()[1];
    debug_assert_eq!(x.shape()[0], c_in, "conv input channels");
    let kernel = if w.ndim() > 2 { w.shape()[2] } else { 1 };
    let spatial = &x.shape()[1..];
    let k = kernel.pow(spatial.len() as u32);

    let col = im2col(x, kernel);
    let w2 = w
        .view()
        .into_shape_with_order((c_out, c_in * k))
        .expect("weights are contiguous");
    let mut y2 = w2.dot(&col);
    for (mut row, &bias) in y2.rows_mut().into_iter().zip(b) {
        row.mapv_inplace(|v| v + bias);
    }
    let mut out_shape = vec![c_out];
    out_shape.extend_from_slice(spatial);
    y2.into_shape_with_order(IxDyn(&out_shape)).expect("output is contiguous")
}

/// Gradients of [`conv_forward`] with respect to input, weights, and bias.
pub fn conv_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    dy: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, Vec<f64>) {
    let c_out = w.shape()[0];
    let c_in = w.shape()[1];
    let kernel = if w.ndim() > 2 { w.shape()[2] } else { 1 };
    let spatial = &x.shape()[1..];
    let p = spatial_len(spatial);
    let k = kernel.pow(spatial.len() as u32);

    let dy2 = dy
        .view()
        .into_shape_with_order((c_out, p))
        .expect("dy is contiguous");
    let w2 = w
        .view()
        .into_shape_with_order((c_out, c_in * k))
        .expect("weights are contiguous");

    let col = im2col(x, kernel);
    let dw2 = dy2.dot(&col.t());
    let dw = dw2
        .into_shape_with_order(IxDyn(w.shape()))
        .expect("dw is contiguous");

    let db: Vec<f64> = dy2.rows().into_iter().map(|r| r.sum()).collect();

    let dcol = w2.t().dot(&dy2);
    let dx = col2im(&dcol, c_in, spatial, kernel);
    (dx, dw, db)
}

/// ELU activation (alpha = 1), applied element-wise.
pub fn elu_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| if v > 0.0 { v } else { v.exp_m1() })
}

/// ELU backward given the *output* `y` of the forward pass.
pub fn elu_backward(y: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d *= yv + 1.0;
        }
    });
    dx
}

/// Average-pool each spatial axis by 2. All spatial dims must be even.
pub fn avg_pool2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let c = x.shape()[0];
    let spatial = &x.shape()[1..];
    debug_assert!(spatial.iter().all(|s| s % 2 == 0), "pooling needs even dims");
    let rank = spatial.len();
    let mut out_shape = vec![c];
    out_shape.extend(spatial.iter().map(|s| s / 2));
    let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    let corners = kernel_offsets(2, rank); // offsets in {-1, 0}; shift to {0, 1}
    let scale = 1.0 / corners.len() as f64;
    for corner in &corners {
        let src = x.slice_each_axis(|ax| {
            if ax.axis.index() == 0 {
                Slice::from(..)
            } else {
                Slice::new(corner[ax.axis.index() - 1] + 1, None, 2)
            }
        });
        out.zip_mut_with(&src, |o, &s| *o += s * scale);
    }
    out
}

/// Backward of [`avg_pool2_forward`]: spread each gradient over its 2^D block.
pub fn avg_pool2_backward(dy: &ArrayD<f64>, in_shape: &[usize]) -> ArrayD<f64> {
    let rank = in_shape.len() - 1;
    let mut dx = ArrayD::<f64>::zeros(IxDyn(in_shape));
    let corners = kernel_offsets(2, rank);
    let scale = 1.0 / corners.len() as f64;
    for corner in &corners {
        let mut dst = dx.slice_each_axis_mut(|ax| {
            if ax.axis.index() == 0 {
                Slice::from(..)
            } else {
                Slice::new(corner[ax.axis.index() - 1] + 1, None, 2)
            }
        });
        dst.zip_mut_with(dy, |d, &g| *d += g * scale);
    }
    dx
}

/// Nearest-neighbor upsample by 2 on every spatial axis.
pub fn upsample2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let c = x.shape()[0];
    let spatial = &x.shape()[1..];
    let rank = spatial.len();
    let mut out_shape = vec![c];
    out_shape.extend(spatial.iter().map(|s| s * 2));
    let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    for corner in &kernel_offsets(2, rank) {
        let mut dst = out.slice_each_axis_mut(|ax| {
            if ax.axis.index() == 0 {
                Slice::from(..)
            } else {
                Slice::new(corner[ax.axis.index() - 1] + 1, None, 2)
            }
        });
        dst.assign(x);
    }
    out
}

/// Backward of [`upsample2_forward`]: sum gradients over each 2^D block.
pub fn upsample2_backward(dy: &ArrayD<f64>) -> ArrayD<f64> {
    let c = dy.shape()[0];
    let spatial = &dy.shape()[1..];
    let rank = spatial.len();
    let mut in_shape = vec![c];
    in_shape.extend(spatial.iter().map(|s| s / 2));
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
    for corner in &kernel_offsets(2, rank) {
        let src = dy.slice_each_axis(|ax| {
            if ax.axis.index() == 0 {
                Slice::from(..)
            } else {
                Slice::new(corner[ax.axis.index() - 1] + 1, None, 2)
            }
        });
        dx.zip_mut_with(&src, |d, &s| *d += s);
    }
    dx
}

/// Mean over all spatial positions, per channel.
pub fn global_avg_pool(x: &ArrayD<f64>) -> Array1<f64> {
    let c = x.shape()[0];
    let p = spatial_len(&x.shape()[1..]);
    let x2 = x.view().into_shape_with_order((c, p)).expect("x is contiguous");
    x2.mean_axis(Axis(1)).expect("non-empty spatial extent")
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(dy: &Array1<f64>, in_shape: &[usize]) -> ArrayD<f64> {
    let p = spatial_len(&in_shape[1..]) as f64;
    let mut dx = ArrayD::<f64>::zeros(IxDyn(in_shape));
    for (mut ch, &g) in dx.outer_iter_mut().zip(dy.iter()) {
        ch.fill(g / p);
    }
    dx
}

/// Dense layer `y = W v + b`, `W: [out, in]`.
pub fn linear_forward(v: &Array1<f64>, w: ArrayView2<'_, f64>, b: &Array1<f64>) -> Array1<f64> {
    w.dot(v) + b
}

/// Gradients of [`linear_forward`]: returns (dv, dw, db).
pub fn linear_backward(
    v: &Array1<f64>,
    w: ArrayView2<'_, f64>,
    dy: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let dv = w.t().dot(dy);
    let mut dw = Array2::<f64>::zeros(w.raw_dim());
    for (mut row, &g) in dw.rows_mut().into_iter().zip(dy.iter()) {
        row.zip_mut_with(v, |d, &vv| *d = g * vv);
    }
    (dv, dw, dy.clone())
}

/// Concatenate along the channel axis.
pub fn concat_channels(parts: &[ArrayViewD<'_, f64>]) -> ArrayD<f64> {
    concatenate(Axis(0), parts).expect("spatial shapes agree")
}

/// Per-voxel softmax over the channel axis.
pub fn softmax(logits: &ArrayD<f64>) -> ArrayD<f64> {
    let c = logits.shape()[0];
    let p = spatial_len(&logits.shape()[1..]);
    let l2 = logits.view().into_shape_with_order((c, p)).expect("contiguous");
    let mut out = Array2::<f64>::zeros((c, p));
    for j in 0..p {
        let coljv = l2.column(j);
        let m = coljv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..c {
            let e = (coljv[i] - m).exp();
            out[(i, j)] = e;
            z += e;
        }
        for i in 0..c {
            out[(i, j)] /= z;
        }
    }
    out.into_shape_with_order(IxDyn(logits.shape())).expect("contiguous")
}

/// Mean per-voxel cross entropy of `logits: [K, *s]` against integer labels,
/// plus the gradient with respect to the logits. Stable for extreme logits.
pub fn softmax_cross_entropy(logits: &ArrayD<f64>, labels: &ArrayD<u8>) -> (f64, ArrayD<f64>) {
    let c = logits.shape()[0];
    let p = spatial_len(&logits.shape()[1..]);
    debug_assert_eq!(labels.len(), p, "label/logit voxel counts");
    let l2 = logits.view().into_shape_with_order((c, p)).expect("contiguous");
    let labels_flat = labels.as_slice().expect("labels contiguous");
    let mut dlogits = Array2::<f64>::zeros((c, p));
    let inv_p = 1.0 / p as f64;
    let mut loss = 0.0;
    for j in 0..p {
        let coljv = l2.column(j);
        let m = coljv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..c {
            z += (coljv[i] - m).exp();
        }
        let log_z = m + z.ln();
        let t = labels_flat[j] as usize;
        loss += log_z - coljv[t];
        for i in 0..c {
            let soft = (coljv[i] - log_z).exp();
            dlogits[(i, j)] = (soft - if i == t { 1.0 } else { 0.0 }) * inv_p;
        }
    }
    let dl = dlogits.into_shape_with_order(IxDyn(logits.shape())).expect("contiguous");
    (loss * inv_p, dl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::stream(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct convolution oracle: nested loops over output positions,
    /// independent of the im2col path.
    fn conv_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &[f64]) -> ArrayD<f64> {
        let c_out = w.shape()[0];
        let c_in = w.shape()[1];
        let kernel = if w.ndim() > 2 { w.shape()[2] } else { 1 };
        let spatial: Vec<usize> = x.shape()[1..].to_vec();
        let rank = spatial.len();
        let offsets = kernel_offsets(kernel, rank);

        let mut out_shape = vec![c_out];
        out_shape.extend_from_slice(&spatial);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));

        let total: usize = spatial.iter().product();
        for co in 0..c_out {
            for flat in 0..total {
                // decode flat index to spatial coords
                let mut pos = vec![0usize; rank];
                let mut rem = flat;
                for d in (0..rank).rev() {
                    pos[d] = rem % spatial[d];
                    rem /= spatial[d];
                }
                let mut acc = b[co];
                for ci in 0..c_in {
                    for (kidx, off) in offsets.iter().enumerate() {
                        let mut src = Vec::with_capacity(rank + 1);
                        src.push(ci);
                        let mut ok = true;
                        for d in 0..rank {
                            let q = pos[d] as isize + off[d];
                            if q < 0 || q >= spatial[d] as isize {
                                ok = false;
                                break;
                            }
                            src.push(q as usize);
                        }
                        if !ok {
                            continue;
                        }
                        let mut widx = vec![co, ci];
                        let mut krem = kidx;
                        let mut kpos = vec![0usize; rank];
                        for d in (0..rank).rev() {
                            kpos[d] = krem % kernel;
                            krem /= kernel;
                        }
                        widx.extend(kpos);
                        acc += x[IxDyn(&src)] * w[IxDyn(&widx)];
                    }
                }
                let mut oidx = vec![co];
                oidx.extend(&pos);
                out[IxDyn(&oidx)] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_2d_and_3d() {
        for (xshape, wshape) in [
            (vec![3, 6, 5], vec![4, 3, 3, 3]),
            (vec![2, 4, 6], vec![3, 2, 1, 1]),
            (vec![2, 4, 4, 4], vec![3, 2, 3, 3, 3]),
        ] {
            let x = rand_array(&xshape, 11);
            let w = rand_array(&wshape, 12);
            let b: Vec<f64> = (0..wshape[0]).map(|i| 0.1 * i as f64 - 0.05).collect();
            let fast = conv_forward(&x, &w, &b);
            let slow = conv_naive(&x, &w, &b);
            let max_err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-12, "shape {xshape:?}: max err {max_err}");
        }
    }

    /// Scalar loss L = sum(y * t) for a fixed random t lets us check every
    /// gradient with central finite differences.
    fn fd_check_conv(xshape: &[usize], wshape: &[usize]) {
        let x = rand_array(xshape, 21);
        let w = rand_array(wshape, 22);
        let b: Vec<f64> = (0..wshape[0]).map(|i| 0.05 * i as f64).collect();
        let t = rand_array(&conv_forward(&x, &w, &b).shape().to_vec(), 23);

        let loss = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &[f64]| -> f64 {
            (&conv_forward(x, w, b) * &t).sum()
        };
        let (dx, dw, db) = conv_backward(&x, &w, &t);

        let h = 1e-6;
        let mut rng = crate::rng::stream(24);
        for _ in 0..8 {
            let i = rng.random_range(0..x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "dx: fd={fd} an={an}");
        }
        for _ in 0..8 {
            let i = rng.random_range(0..w.len());
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[i] += h;
            wm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            let an = dw.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "dw: fd={fd} an={an}");
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6 * (1.0 + db[i].abs()));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        fd_check_conv(&[2, 5, 4], &[3, 2, 3, 3]);
        fd_check_conv(&[3, 4, 4], &[2, 3, 1, 1]);
        fd_check_conv(&[2, 4, 4, 4], &[2, 2, 3, 3, 3]);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <A x, y> == <x, A^T y> for both pooling and upsampling.
        let x = rand_array(&[2, 6, 4], 31);
        let y = rand_array(&[2, 3, 2], 32);
        let ax = avg_pool2_forward(&x);
        let aty = avg_pool2_backward(&y, x.shape());
        let lhs = (&ax * &y).sum();
        let rhs = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u = rand_array(&[2, 3, 2], 33);
        let v = rand_array(&[2, 6, 4], 34);
        let au = upsample2_forward(&u);
        let atv = upsample2_backward(&v);
        assert!(((&au * &v).sum() - (&u * &atv).sum()).abs() < 1e-12);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = rand_array(&[3, 4, 6], 35);
        let round = avg_pool2_forward(&upsample2_forward(&x));
        let err = (&round - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn elu_backward_matches_finite_differences() {
        let x = rand_array(&[2, 3, 3], 41);
        let t = rand_array(&[2, 3, 3], 42);
        let y = elu_forward(&x);
        let dx = elu_backward(&y, &t);
        let h = 1e-7;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = ((&elu_forward(&xp) * &t).sum() - (&elu_forward(&xm) * &t).sum()) / (2.0 * h);
            let an = dx.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-5, "fd={fd} an={an}");
        }
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let logits = rand_array(&[4, 5, 5], 51) * 10.0;
        let probs = softmax(&logits);
        let p2 = probs.view().into_shape_with_order((4, 25)).unwrap();
        for j in 0..25 {
            let s: f64 = p2.column(j).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_analytic_values() {
        // uniform logits over 4 classes -> ln(4)
        let logits = ArrayD::<f64>::zeros(IxDyn(&[4, 3, 3]));
        let labels = ArrayD::<u8>::zeros(IxDyn(&[3, 3]));
        let (ce, _) = softmax_cross_entropy(&logits, &labels);
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);

        // strongly correct logits -> ~0
        let mut hot = ArrayD::<f64>::zeros(IxDyn(&[4, 2, 2]));
        hot.index_axis_mut(Axis(0), 0).fill(80.0);
        let labels = ArrayD::<u8>::zeros(IxDyn(&[2, 2]));
        let (ce, _) = softmax_cross_entropy(&hot, &labels);
        assert!(ce.abs() < 1e-6);
        assert!(ce.is_finite());
    }

    #[test]
    fn cross_entropy_stable_for_extreme_logits() {
        let mut logits = ArrayD::<f64>::zeros(IxDyn(&[4, 2, 2]));
        logits.index_axis_mut(Axis(0), 1).fill(70.0); // p(target) ~ e^-70 < 1e-30
        let labels = ArrayD::<u8>::zeros(IxDyn(&[2, 2]));
        let (ce, grad) = softmax_cross_entropy(&logits, &labels);
        assert!(ce.is_finite() && ce > 60.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = rand_array(&[4, 3, 2], 61);
        let mut rng = crate::rng::stream(62);
        let labels =
            ArrayD::from_shape_fn(IxDyn(&[3, 2]), |_| rng.random_range(0..4u8));
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.as_slice_mut().unwrap()[i] += h;
            lm.as_slice_mut().unwrap()[i] -= h;
            let fd = (softmax_cross_entropy(&lp, &labels).0
                - softmax_cross_entropy(&lm, &labels).0)
                / (2.0 * h);
            let an = grad.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6, "fd={fd} an={an}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let v = Array1::from_vec(vec![0.3, -0.7, 1.1]);
        let w = Array2::from_shape_fn((2, 3), |(i, j)| 0.1 * (i as f64 + 1.0) - 0.2 * j as f64);
        let b = Array1::from_vec(vec![0.05, -0.1]);
        let t = Array1::from_vec(vec![0.9, -1.3]);
        let loss = |v: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>| {
            (&linear_forward(v, w.view(), b) * &t).sum()
        };
        let (dv, dw, db) = linear_backward(&v, w.view(), &t);
        let h = 1e-7;
        for i in 0..v.len() {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += h;
            vm[i] -= h;
            let fd = (loss(&vp, &w, &b) - loss(&vm, &w, &b)) / (2.0 * h);
            assert!((fd - dv[i]).abs() < 1e-6);
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                let fd = (loss(&v, &wp, &b) - loss(&v, &wm, &b)) / (2.0 * h);
                assert!((fd - dw[(i, j)]).abs() < 1e-6);
            }
        }
        for i in 0..2 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&v, &w, &bp) - loss(&v, &w, &bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6);
        }
    }
}
