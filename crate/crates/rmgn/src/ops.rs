//! Differentiable tensor operations on the tape: convolution, resampling,
//! normalization, activations, bilinear warping, and the scalar losses.
//!
//! Layout conventions: feature maps are `[C, H, W]`, conv weights are
//! `[C_out, C_in, kh, kw]`, flows are `[2, h, w]` with channel 0 the x
//! offset and channel 1 the y offset. Scalars are 0-dim arrays.

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix3, Ix4, IxDyn};

pub(crate) fn scalar_node<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> Array3<F> {
    a.clone().into_dimensionality::<Ix3>().expect("[C,H,W] array")
}

pub(crate) fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `[C, H, W]` into `[C*kh*kw, OH*OW]` patch columns.
fn im2col<F: Scalar>(
    x: &Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut col = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds patch columns back into `[C, H, W]`,
/// accumulating overlaps.
fn col2im<F: Scalar>(
    col: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

impl<F: Scalar> Graph<F> {
    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value_owned(a) + &self.value_owned(b);
        self.push(
            v,
            Some(Box::new(move |go, grads| {
                grads.accum(a, go.clone());
                grads.accum(b, go.clone());
            })),
        )
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value_owned(a) - &self.value_owned(b);
        self.push(
            v,
            Some(Box::new(move |go, grads| {
                grads.accum(a, go.clone());
                grads.accum(b, go.mapv(|g| -g));
            })),
        )
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value_owned(a);
        let vb = self.value_owned(b);
        let v = &va * &vb;
        self.push(
            v,
            Some(Box::new(move |go, grads| {
                grads.accum(a, go * &vb);
                grads.accum(b, go * &va);
            })),
        )
    }

    /// Pointwise `k * a + c`.
    pub fn affine(&self, a: NodeId, k: F, c: F) -> NodeId {
        let v = self.value(a).mapv(|x| k * x + c);
        self.push(
            v,
            Some(Box::new(move |go, grads| {
                grads.accum(a, go.mapv(|g| g * k));
            })),
        )
    }

    pub fn scale(&self, a: NodeId, k: F) -> NodeId {
        self.affine(a, k, F::zero())
    }

    /// Adds a `[C]` bias to a `[C, H, W]` map.
    pub fn add_bias(&self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as3(&self.value(x));
        let bv = self
            .value_owned(b)
            .into_dimensionality::<Ix1>()
            .expect("[C] bias");
        let mut v = xv;
        for (ci, mut plane) in v.outer_iter_mut().enumerate() {
            plane += bv[ci];
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |go, grads| {
                grads.accum(x, go.clone());
                let g3 = as3(go);
                let (c, _, _) = g3.dim();
                let mut db = Array1::zeros(c);
                for ci in 0..c {
                    db[ci] = g3.index_axis(Axis(0), ci).iter().copied().sum();
                }
                grads.accum(b, db.into_dyn());
            })),
        )
    }

    /// Broadcast-multiplies `[C, H, W]` features by a `[1, H, W]` map.
    pub fn mul_broadcast(&self, x: NodeId, m: NodeId) -> NodeId {
        let xv = as3(&self.value(x));
        let mv = as3(&self.value(m));
        let (c, h, w) = xv.dim();
        let mut v = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    v[[ci, y, xx]] = xv[[ci, y, xx]] * mv[[0, y, xx]];
                }
            }
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let mut dx = Array3::zeros((c, h, w));
                let mut dm = Array3::zeros((1, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[[ci, y, xx]] = g3[[ci, y, xx]] * mv[[0, y, xx]];
                            dm[[0, y, xx]] += g3[[ci, y, xx]] * xv[[ci, y, xx]];
                        }
                    }
                }
                grads.accum(x, dx.into_dyn());
                grads.accum(m, dm.into_dyn());
            })),
        )
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        let y = self
            .value(a)
            .mapv(|x| F::one() / (F::one() + (-x).exp()));
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |go, grads| {
                let d = go * &yc.mapv(|v| v * (F::one() - v));
                grads.accum(a, d);
            })),
        )
    }

    pub fn tanh_act(&self, a: NodeId) -> NodeId {
        let y = self.value(a).mapv(|x| x.tanh());
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |go, grads| {
                let d = go * &yc.mapv(|v| F::one() - v * v);
                grads.accum(a, d);
            })),
        )
    }

    pub fn leaky_relu(&self, a: NodeId, slope: F) -> NodeId {
        let xv = self.value_owned(a);
        let y = xv.mapv(|x| if x >= F::zero() { x } else { slope * x });
        self.push(
            y,
            Some(Box::new(move |go, grads| {
                let mut d = go.clone();
                d.zip_mut_with(&xv, |g, &x| {
                    if x < F::zero() {
                        *g *= slope;
                    }
                });
                grads.accum(a, d);
            })),
        )
    }

    /// Concatenates `[C_i, H, W]` maps along the channel axis.
    pub fn concat_c(&self, parts: &[NodeId]) -> NodeId {
        let views: Vec<Array3<F>> = parts.iter().map(|&p| as3(&self.value(p))).collect();
        let (_, h, w) = views[0].dim();
        let channels: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
        let total: usize = channels.iter().sum();
        let mut v = Array3::zeros((total, h, w));
        let mut off = 0;
        for part in &views {
            let c = part.dim().0;
            v.slice_mut(ndarray::s![off..off + c, .., ..]).assign(part);
            off += c;
        }
        let parts: Vec<NodeId> = parts.to_vec();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let mut off = 0;
                for (idx, &c) in channels.iter().enumerate() {
                    let slice = g3.slice(ndarray::s![off..off + c, .., ..]).to_owned();
                    grads.accum(parts[idx], slice.into_dyn());
                    off += c;
                }
            })),
        )
    }

    /// 2-D convolution with zero padding, via im2col and a single matmul.
    pub fn conv2d(&self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as3(&self.value(x));
        let wv = self
            .value_owned(w)
            .into_dimensionality::<Ix4>()
            .expect("[Co,Ci,kh,kw] weights");
        let bv = self
            .value_owned(b)
            .into_dimensionality::<Ix1>()
            .expect("[Co] bias");
        let (co, ci, kh, kw) = wv.dim();
        let (cin, h, win) = xv.dim();
        assert_eq!(ci, cin, "conv2d channel mismatch");
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(win, kw, stride, pad);
        let col = im2col(&xv, kh, kw, stride, pad);
        let w_mat = wv
            .to_shape((co, ci * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let mut out_mat = Array2::zeros((co, oh * ow));
        general_mat_mul(F::one(), &w_mat, &col, F::zero(), &mut out_mat);
        for (r, mut row) in out_mat.outer_iter_mut().enumerate() {
            row += bv[r];
        }
        let out = out_mat
            .into_shape_with_order((co, oh, ow))
            .expect("conv output reshape");
        self.push(
            out.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let go_mat = g3
                    .to_shape((co, oh * ow))
                    .expect("grad reshape")
                    .to_owned();
                // bias gradient
                let mut db = Array1::zeros(co);
                for r in 0..co {
                    db[r] = go_mat.row(r).iter().copied().sum();
                }
                grads.accum(b, db.into_dyn());
                // weight gradient
                let mut dw_mat = Array2::zeros((co, ci * kh * kw));
                general_mat_mul(F::one(), &go_mat, &col.t().to_owned(), F::zero(), &mut dw_mat);
                let dw = dw_mat
                    .into_shape_with_order((co, ci, kh, kw))
                    .expect("dw reshape");
                grads.accum(w, dw.into_dyn());
                // input gradient
                let mut dcol = Array2::zeros((ci * kh * kw, oh * ow));
                general_mat_mul(
                    F::one(),
                    &w_mat.t().to_owned(),
                    &go_mat,
                    F::zero(),
                    &mut dcol,
                );
                let dx = col2im(&dcol, ci, h, win, kh, kw, stride, pad);
                grads.accum(x, dx.into_dyn());
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&self, x: NodeId) -> NodeId {
        let xv = as3(&self.value(x));
        let (c, h, w) = xv.dim();
        let mut v = Array3::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    v[[ci, y, xx]] = xv[[ci, y / 2, xx / 2]];
                }
            }
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let mut dx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h * 2 {
                        for xx in 0..w * 2 {
                            dx[[ci, y / 2, xx / 2]] += g3[[ci, y, xx]];
                        }
                    }
                }
                grads.accum(x, dx.into_dyn());
            })),
        )
    }

    /// Crops a `[C, H, W]` map to its top-left `[C, th, tw]` corner;
    /// gradients zero-pad back. Used to realign decoder features with skip
    /// connections when a dimension is odd.
    pub fn crop(&self, x: NodeId, th: usize, tw: usize) -> NodeId {
        let xv = as3(&self.value(x));
        let (c, h, w) = xv.dim();
        assert!(th <= h && tw <= w, "crop target {th}x{tw} exceeds {h}x{w}");
        let v = xv.slice(ndarray::s![.., ..th, ..tw]).to_owned();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let mut dx = Array3::zeros((c, h, w));
                dx.slice_mut(ndarray::s![.., ..th, ..tw]).assign(&g3);
                grads.accum(x, dx.into_dyn());
            })),
        )
    }

    /// Per-channel instance normalization over spatial dims, no learned
    /// affine: `(x - mu_c) / sqrt(var_c + eps)`.
    pub fn instance_norm(&self, x: NodeId, eps: F) -> NodeId {
        let xv = as3(&self.value(x));
        let (c, h, w) = xv.dim();
        let n = F::from_usize_(h * w);
        let mut y = Array3::zeros((c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let plane = xv.index_axis(Axis(0), ci);
            let mean: F = plane.iter().copied().sum::<F>() / n;
            let var: F = plane
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[ci] = is;
            for yy in 0..h {
                for xx in 0..w {
                    y[[ci, yy, xx]] = (xv[[ci, yy, xx]] - mean) * is;
                }
            }
        }
        let yc = y.clone();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let mut dx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    let gp = g3.index_axis(Axis(0), ci);
                    let yp = yc.index_axis(Axis(0), ci);
                    let mean_g: F = gp.iter().copied().sum::<F>() / n;
                    let mean_gy: F = gp
                        .iter()
                        .zip(yp.iter())
                        .map(|(&g, &yv)| g * yv)
                        .sum::<F>()
                        / n;
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[[ci, yy, xx]] = inv_std[ci]
                                * (g3[[ci, yy, xx]] - mean_g - yc[[ci, yy, xx]] * mean_gy);
                        }
                    }
                }
                grads.accum(x, dx.into_dyn());
            })),
        )
    }

    /// Bilinear warp of `[C, H, W]` cloth by a `[2, H, W]` flow; samples at
    /// `(x + u, y + v)`. Out-of-bounds taps contribute zero and reduce the
    /// returned validity map. Differentiable in both cloth and flow.
    pub fn warp_bilinear(&self, cloth: NodeId, flow: NodeId) -> (NodeId, Array2<F>) {
        let cv = as3(&self.value(cloth));
        let fv = as3(&self.value(flow));
        let (c, h, w) = cv.dim();
        let (fc, fh, fw) = fv.dim();
        assert_eq!((fc, fh, fw), (2, h, w), "warp flow shape mismatch");
        let mut out = Array3::zeros((c, h, w));
        let mut validity = Array2::zeros((h, w));
        let inb = |y: isize, x: isize| y >= 0 && y < h as isize && x >= 0 && x < w as isize;
        for y in 0..h {
            for x in 0..w {
                let sx = F::from_usize_(x) + fv[[0, y, x]];
                let sy = F::from_usize_(y) + fv[[1, y, x]];
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (x0, y0) = (x0.to_f64_() as isize, y0.to_f64_() as isize);
                let taps = [
                    (y0, x0, (F::one() - fx) * (F::one() - fy)),
                    (y0, x0 + 1, fx * (F::one() - fy)),
                    (y0 + 1, x0, (F::one() - fx) * fy),
                    (y0 + 1, x0 + 1, fx * fy),
                ];
                let mut vsum = F::zero();
                for &(ty, tx, wgt) in &taps {
                    if inb(ty, tx) {
                        vsum += wgt;
                        for ci in 0..c {
                            out[[ci, y, x]] += wgt * cv[[ci, ty as usize, tx as usize]];
                        }
                    }
                }
                validity[[y, x]] = vsum;
            }
        }
        let id = self.push(
            out.into_dyn(),
            Some(Box::new(move |go, grads| {
                let g3 = as3(go);
                let mut dcloth = Array3::zeros((c, h, w));
                let mut dflow = Array3::zeros((2, h, w));
                let inb =
                    |y: isize, x: isize| y >= 0 && y < h as isize && x >= 0 && x < w as isize;
                for y in 0..h {
                    for x in 0..w {
                        let sx = F::from_usize_(x) + fv[[0, y, x]];
                        let sy = F::from_usize_(y) + fv[[1, y, x]];
                        let x0f = sx.floor();
                        let y0f = sy.floor();
                        let fx = sx - x0f;
                        let fy = sy - y0f;
                        let (x0, y0) = (x0f.to_f64_() as isize, y0f.to_f64_() as isize);
                        // weight, d(weight)/dfx, d(weight)/dfy per tap
                        let taps = [
                            (
                                y0,
                                x0,
                                (F::one() - fx) * (F::one() - fy),
                                -(F::one() - fy),
                                -(F::one() - fx),
                            ),
                            (y0, x0 + 1, fx * (F::one() - fy), F::one() - fy, -fx),
                            (y0 + 1, x0, (F::one() - fx) * fy, -fy, F::one() - fx),
                            (y0 + 1, x0 + 1, fx * fy, fy, fx),
                        ];
                        for &(ty, tx, wgt, dwdx, dwdy) in &taps {
                            if !inb(ty, tx) {
                                continue;
                            }
                            for ci in 0..c {
                                let g = g3[[ci, y, x]];
                                let cval = cv[[ci, ty as usize, tx as usize]];
                                dcloth[[ci, ty as usize, tx as usize]] += g * wgt;
                                dflow[[0, y, x]] += g * dwdx * cval;
                                dflow[[1, y, x]] += g * dwdy * cval;
                            }
                        }
                    }
                }
                grads.accum(cloth, dcloth.into_dyn());
                grads.accum(flow, dflow.into_dyn());
            })),
        );
        (id, validity)
    }

    /// Mean absolute difference reduced to a scalar.
    pub fn mean_abs_diff(&self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_owned(a);
        let bv = self.value_owned(b);
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff shape mismatch");
        let n = F::from_usize_(av.len());
        let mut acc = F::zero();
        for (&x, &y) in av.iter().zip(bv.iter()) {
            acc += (x - y).abs();
        }
        let v = scalar_node(acc / n);
        self.push(
            v,
            Some(Box::new(move |go, grads| {
                let g = *go.iter().next().unwrap() / n;
                let mut da = ArrayD::zeros(av.raw_dim());
                for ((d, &x), &y) in da.iter_mut().zip(av.iter()).zip(bv.iter()) {
                    *d = if x > y {
                        g
                    } else if x < y {
                        -g
                    } else {
                        F::zero()
                    };
                }
                let db = da.mapv(|v| -v);
                grads.accum(a, da);
                grads.accum(b, db);
            })),
        )
    }

    /// Sum of all entries reduced to a scalar. Used by gradient probes.
    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let av = self.value_owned(a);
        let total: F = av.iter().copied().sum();
        let shape = av.raw_dim();
        self.push(
            scalar_node(total),
            Some(Box::new(move |go, grads| {
                let g = *go.iter().next().unwrap();
                grads.accum(a, ArrayD::from_elem(shape.clone(), g));
            })),
        )
    }

    pub fn sum_scalars(&self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Second-order smoothness penalty on one `[2, h, w]` flow field:
    /// the generalized Charbonnier of every discrete second difference over
    /// horizontal, vertical, and both diagonal directions.
    ///
    /// Summation order (relied on by the brute-force oracle): flow channel,
    /// then direction in the order `(0,1), (1,0), (1,1), (1,-1)`, then rows,
    /// then columns. Points lacking either neighbor are skipped.
    pub fn second_order_charbonnier(&self, flow: NodeId, eps: F, alpha: F) -> NodeId {
        let fv = as3(&self.value(flow));
        let (c, h, w) = fv.dim();
        assert_eq!(c, 2, "flow must be [2, h, w]");
        let dirs: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
        let e2 = eps * eps;
        let mut acc = F::zero();
        for ci in 0..c {
            for &(dy, dx) in &dirs {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (ym, xm) = (y - dy, x - dx);
                        let (yp, xp) = (y + dy, x + dx);
                        if ym < 0 || xm < 0 || xm >= w as isize || yp >= h as isize || xp < 0
                            || xp >= w as isize
                        {
                            continue;
                        }
                        let d = fv[[ci, ym as usize, xm as usize]]
                            + fv[[ci, yp as usize, xp as usize]]
                            - (fv[[ci, y as usize, x as usize]] + fv[[ci, y as usize, x as usize]]);
                        acc += (d * d + e2).powf(alpha);
                    }
                }
            }
        }
        self.push(
            scalar_node(acc),
            Some(Box::new(move |go, grads| {
                let g = *go.iter().next().unwrap();
                let two = F::cast(2.0);
                let mut df = Array3::zeros((2, h, w));
                for ci in 0..c {
                    for &(dy, dx) in &dirs {
                        for y in 0..h as isize {
                            for x in 0..w as isize {
                                let (ym, xm) = (y - dy, x - dx);
                                let (yp, xp) = (y + dy, x + dx);
                                if ym < 0
                                    || xm < 0
                                    || xm >= w as isize
                                    || yp >= h as isize
                                    || xp < 0
                                    || xp >= w as isize
                                {
                                    continue;
                                }
                                let d = fv[[ci, ym as usize, xm as usize]]
                                    + fv[[ci, yp as usize, xp as usize]]
                                    - two * fv[[ci, y as usize, x as usize]];
                                // dP/dd = 2*alpha*d*(d^2+eps^2)^(alpha-1)
                                let dp = two * alpha * d * (d * d + e2).powf(alpha - F::one());
                                df[[ci, ym as usize, xm as usize]] += g * dp;
                                df[[ci, yp as usize, xp as usize]] += g * dp;
                                df[[ci, y as usize, x as usize]] -= two * g * dp;
                            }
                        }
                    }
                }
                grads.accum(flow, df.into_dyn());
            })),
        )
    }
}

/// Number of second-difference terms [`Graph::second_order_charbonnier`] sums
/// for an `h x w` flow field (both channels, all four directions).
pub fn second_order_term_count(h: usize, w: usize) -> usize {
    let horiz = h * w.saturating_sub(2);
    let vert = h.saturating_sub(2) * w;
    let diag = h.saturating_sub(2) * w.saturating_sub(2);
    2 * (horiz + vert + 2 * diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite-difference gradient of a scalar-valued graph builder
    /// with respect to one leaf.
    fn fd_check(
        build: impl Fn(&Graph<f64>, &ArrayD<f64>) -> f64,
        x0: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        tol: f64,
    ) {
        let hstep = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += hstep;
            xm.as_slice_mut().unwrap()[i] -= hstep;
            let g = Graph::new();
            let fp = build(&g, &xp);
            let g = Graph::new();
            let fm = build(&g, &xm);
            let fd = (fp - fm) / (2.0 * hstep);
            let an = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < tol,
                "index {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr3(&mut rng, 2, 5, 4);
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let g = Graph::new();
        let xi = g.leaf(x.clone().into_dyn());
        let wi = g.leaf(w.clone().into_dyn());
        let bi = g.leaf(b.clone().into_dyn());
        let out = g.conv2d(xi, wi, bi, 1, 1);
        let ov = g.value_owned(out);

        for co in 0..3 {
            for oy in 0..5usize {
                for ox in 0..4usize {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let iy = oy as isize + ky - 1;
                                let ix = ox as isize + kx - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    acc += x[[ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ky as usize, kx as usize]];
                                }
                            }
                        }
                    }
                    let got = ov[[co, oy, ox]];
                    assert!((got - acc).abs() < 1e-12, "({co},{oy},{ox})");
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr3(&mut rng, 2, 4, 4).into_dyn();
        let w = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-0.5..0.5)).into_dyn();
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-0.5..0.5)).into_dyn();

        let g = Graph::new();
        let xi = g.leaf(x.clone());
        let wi = g.leaf(w.clone());
        let bi = g.leaf(b.clone());
        let out = g.conv2d(xi, wi, bi, 2, 1);
        let dim = g.value(out).raw_dim();
                let probe = g.leaf(ArrayD::zeros(dim));
        let loss = g.mean_abs_diff(out, probe);
        let grads = g.backward(loss);

        let wc = w.clone();
        let bc = b.clone();
        fd_check(
            |g, xt| {
                let xi = g.leaf(xt.clone());
                let wi = g.leaf(wc.clone());
                let bi = g.leaf(bc.clone());
                let out = g.conv2d(xi, wi, bi, 2, 1);
                let dim = g.value(out).raw_dim();
                let probe = g.leaf(ArrayD::zeros(dim));
                g.scalar(g.mean_abs_diff(out, probe))
            },
            &x,
            grads.get(xi).unwrap(),
            1e-4,
        );
        let xc = x.clone();
        let bc = b.clone();
        fd_check(
            |g, wt| {
                let xi = g.leaf(xc.clone());
                let wi = g.leaf(wt.clone());
                let bi = g.leaf(bc.clone());
                let out = g.conv2d(xi, wi, bi, 2, 1);
                let dim = g.value(out).raw_dim();
                let probe = g.leaf(ArrayD::zeros(dim));
                g.scalar(g.mean_abs_diff(out, probe))
            },
            &w,
            grads.get(wi).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn instance_norm_statistics_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr3(&mut rng, 3, 4, 5).into_dyn();
        let g = Graph::new();
        let xi = g.leaf(x.clone());
        let y = g.instance_norm(xi, 1e-5);
        let yv = g.value_owned(y).into_dimensionality::<Ix3>().unwrap();
        for c in 0..3 {
            let plane = yv.index_axis(Axis(0), c);
            let n = plane.len() as f64;
            let mean: f64 = plane.iter().sum::<f64>() / n;
            let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }

        let tgt = rand_arr3(&mut rng, 3, 4, 5).into_dyn();
        let g = Graph::new();
        let xi = g.leaf(x.clone());
        let y = g.instance_norm(xi, 1e-5);
        let ti = g.constant(tgt.clone());
        let loss = g.mean_abs_diff(y, ti);
        let grads = g.backward(loss);
        fd_check(
            |g, xt| {
                let xi = g.leaf(xt.clone());
                let y = g.instance_norm(xi, 1e-5);
                let ti = g.constant(tgt.clone());
                g.scalar(g.mean_abs_diff(y, ti))
            },
            &x,
            grads.get(xi).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn instance_norm_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr3(&mut rng, 2, 6, 6).into_dyn();
        let g = Graph::new();
        let xi = g.leaf(x);
        let y1 = g.instance_norm(xi, 1e-9);
        let y2 = g.instance_norm(y1, 1e-9);
        let a = g.value_owned(y1);
        let b = g.value_owned(y2);
        let max = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6, "max {max}");
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Array3::<f64>::from_elem((1, 3, 3), 0.7).into_dyn();
        let g = Graph::new();
        let xi = g.leaf(x);
        let y = g.instance_norm(xi, 1e-5);
        assert!(g.value(y).iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn warp_identity_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloth = rand_arr3(&mut rng, 3, 6, 5);
        let flow = Array3::<f64>::zeros((2, 6, 5));
        let g = Graph::new();
        let ci = g.leaf(cloth.clone().into_dyn());
        let fi = g.leaf(flow.into_dyn());
        let (out, validity) = g.warp_bilinear(ci, fi);
        let ov = g.value_owned(out).into_dimensionality::<Ix3>().unwrap();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..5 {
                    assert!((ov[[c, y, x]] - cloth[[c, y, x]]).abs() < 1e-12);
                }
            }
        }
        assert!(validity.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn warp_integer_shift_matches_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloth = rand_arr3(&mut rng, 1, 5, 7);
        let mut flow = Array3::<f64>::zeros((2, 5, 7));
        flow.index_axis_mut(Axis(0), 0).fill(1.0); // +1 in x
        let g = Graph::new();
        let ci = g.leaf(cloth.clone().into_dyn());
        let fi = g.leaf(flow.into_dyn());
        let (out, validity) = g.warp_bilinear(ci, fi);
        let ov = g.value_owned(out).into_dimensionality::<Ix3>().unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert!((ov[[0, y, x]] - cloth[[0, y, x + 1]]).abs() < 1e-12);
            }
            assert_eq!(ov[[0, y, 6]], 0.0);
            assert_eq!(validity[[y, 6]], 0.0);
        }
    }

    #[test]
    fn warp_half_pixel_flow_interpolates() {
        // linear ramp in x: value = x
        let cloth = Array3::from_shape_fn((1, 3, 8), |(_, _, x)| x as f64 / 8.0);
        // keep in [-1,1] range semantics irrelevant here; raw arrays allowed
        let mut flow = Array3::<f64>::zeros((2, 3, 8));
        flow.index_axis_mut(Axis(0), 0).fill(0.5);
        let g = Graph::new();
        let ci = g.leaf(cloth.into_dyn());
        let fi = g.leaf(flow.into_dyn());
        let (out, _) = g.warp_bilinear(ci, fi);
        let ov = g.value_owned(out).into_dimensionality::<Ix3>().unwrap();
        for y in 0..3 {
            for x in 0..7 {
                let expected = (x as f64 + 0.5) / 8.0;
                assert!((ov[[0, y, x]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloth = rand_arr3(&mut rng, 2, 5, 5).into_dyn();
        // keep flows away from integer boundaries so the FD step stays on
        // one linear piece
        let flow = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-0.4..0.4) + 0.2)
            .into_dyn();
        let tgt = rand_arr3(&mut rng, 2, 5, 5).into_dyn();

        let g = Graph::new();
        let ci = g.leaf(cloth.clone());
        let fi = g.leaf(flow.clone());
        let (out, _) = g.warp_bilinear(ci, fi);
        let ti = g.constant(tgt.clone());
        let loss = g.mean_abs_diff(out, ti);
        let grads = g.backward(loss);

        let fc = flow.clone();
        let tc = tgt.clone();
        fd_check(
            |g, xt| {
                let ci = g.leaf(xt.clone());
                let fi = g.leaf(fc.clone());
                let (out, _) = g.warp_bilinear(ci, fi);
                let ti = g.constant(tc.clone());
                g.scalar(g.mean_abs_diff(out, ti))
            },
            &cloth,
            grads.get(ci).unwrap(),
            1e-3,
        );
        let cc = cloth.clone();
        fd_check(
            |g, ft| {
                let ci = g.leaf(cc.clone());
                let fi = g.leaf(ft.clone());
                let (out, _) = g.warp_bilinear(ci, fi);
                let ti = g.constant(tgt.clone());
                g.scalar(g.mean_abs_diff(out, ti))
            },
            &flow,
            grads.get(fi).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flow = rand_arr3(&mut rng, 2, 4, 4).into_dyn();
        let g = Graph::new();
        let fi = g.leaf(flow.clone());
        let loss = g.second_order_charbonnier(fi, 1e-3, 0.45);
        let grads = g.backward(loss);
        fd_check(
            |g, ft| {
                let fi = g.leaf(ft.clone());
                g.scalar(g.second_order_charbonnier(fi, 1e-3, 0.45))
            },
            &flow,
            grads.get(fi).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn upsample_and_activations_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr3(&mut rng, 2, 3, 3).into_dyn();
        let tgt = rand_arr3(&mut rng, 2, 6, 6).into_dyn();
        let g = Graph::new();
        let xi = g.leaf(x.clone());
        let u = g.upsample2(xi);
        let s = g.sigmoid(u);
        let t = g.tanh_act(s);
        let l = g.leaky_relu(t, 0.1);
        let ti = g.constant(tgt.clone());
        let loss = g.mean_abs_diff(l, ti);
        let grads = g.backward(loss);
        fd_check(
            |g, xt| {
                let xi = g.leaf(xt.clone());
                let u = g.upsample2(xi);
                let s = g.sigmoid(u);
                let t = g.tanh_act(s);
                let l = g.leaky_relu(t, 0.1);
                let ti = g.constant(tgt.clone());
                g.scalar(g.mean_abs_diff(l, ti))
            },
            &x,
            grads.get(xi).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn term_count_formula_matches_enumeration() {
        for h in 1..6 {
            for w in 1..6 {
                let mut count = 0usize;
                let dirs: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
                for _c in 0..2 {
                    for &(dy, dx) in &dirs {
                        for y in 0..h as isize {
                            for x in 0..w as isize {
                                let (ym, xm) = (y - dy, x - dx);
                                let (yp, xp) = (y + dy, x + dx);
                                if ym >= 0
                                    && xm >= 0
                                    && xm < w as isize
                                    && yp < h as isize
                                    && xp >= 0
                                    && xp < w as isize
                                {
                                    count += 1;
                                }
                            }
                        }
                    }
                }
                assert_eq!(count, second_order_term_count(h, w), "{h}x{w}");
            }
        }
    }
}
