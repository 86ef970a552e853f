//! Neural-net ops on the tape: convolution, norms, attention primitives.

use std::sync::Arc;

use super::gemm::{gemm_nn, transpose};
use super::tape::{GradSink, Tape, TensorId};
use super::{arg_err, numel, shape_err, Elem, TensorError};

/// cols[q, s] for q = (ci*kh + ky)*kw + kx and s = oy*ow + ox.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let s_len = oh * ow;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let q = (ci * kh + ky) * kw + kx;
                let crow = &mut cols[q * s_len..(q + 1) * s_len];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut crow[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_acc<E: Elem>(
    cols: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [E],
) {
    let s_len = oh * ow;
    for ci in 0..cin {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let q = (ci * kh + ky) * kw + kx;
                let crow = &cols[q * s_len..(q + 1) * s_len];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in crow[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    per_sample: bool,
}

impl<E: Elem> Tape<E> {
    /// 2-D cross-correlation. `kernel` is `[cout, cin, k, k]`, or
    /// `[batch, cout, cin, k, k]` for per-sample kernels as produced by
    /// [`Tape::mix_kernels`]. Differentiable in both input and kernel.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 4 {
            return Err(shape_err("conv2d", format!("input {ishape:?} is not 4-d")));
        }
        let (batch, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let per_sample = match kshape.len() {
            4 => false,
            5 => true,
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kshape:?} is not 4-d or 5-d"),
                ))
            }
        };
        let koff = usize::from(per_sample);
        if per_sample && kshape[0] != batch {
            return Err(shape_err(
                "conv2d",
                format!("kernel batch {} vs input batch {}", kshape[0], batch),
            ));
        }
        let (cout, kcin, kh, kw) = (
            kshape[koff],
            kshape[koff + 1],
            kshape[koff + 2],
            kshape[koff + 3],
        );
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("kernel cin {kcin} vs input cin {cin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(arg_err("conv2d", format!("kernel {kh}x{kw} must be odd square")));
        }
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(arg_err(
                "conv2d",
                format!("{h}x{w} too small for kernel {kh} with pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh,
            ow,
            per_sample,
        };

        let q = cin * kh * kw;
        let s_len = oh * ow;
        let xd = self.data(input);
        let kd = self.data(kernel);
        let mut out = vec![E::zero(); batch * cout * s_len];
        let mut cols = vec![E::zero(); q * s_len];
        for b in 0..batch {
            im2col(
                &xd[b * cin * h * w..],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut cols,
            );
            let kmat = if per_sample {
                &kd[b * cout * q..(b + 1) * cout * q]
            } else {
                &kd[..cout * q]
            };
            gemm_nn(
                cout,
                q,
                s_len,
                kmat,
                &cols,
                &mut out[b * cout * s_len..(b + 1) * cout * s_len],
            );
        }

        let needs = self.any_needs(&[input, kernel]);
        let (need_x, need_k) = (self.needs_grad(input), self.needs_grad(kernel));
        let x_arc = self.arc(input);
        let k_arc = self.arc(kernel);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                conv2d_backward(
                    g, &x_arc, &k_arc, &dims, need_x, need_k, input, kernel, sink,
                );
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![batch, cout, oh, ow], out, needs, back))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("avg_pool2", format!("{shape:?} is not 4-d")));
        }
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(arg_err("avg_pool2", format!("{h}x{w} not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(input);
        let quarter = E::from_f64(0.25);
        let mut out = vec![E::zero(); batch * c * oh * ow];
        for bc in 0..batch * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs_grad(input);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(input, |dx| {
                    for bc in 0..batch * c {
                        let gsl = &g[bc * oh * ow..(bc + 1) * oh * ow];
                        let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gsl[oy * ow + ox] * quarter;
                                let base = 2 * oy * w + 2 * ox;
                                dsl[base] += gv;
                                dsl[base + 1] += gv;
                                dsl[base + w] += gv;
                                dsl[base + w + 1] += gv;
                            }
                        }
                    }
                });
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![batch, c, oh, ow], out, needs, back))
    }

    /// Global average over the spatial axes: `[b, c, h, w] -> [b, c]`.
    pub fn spatial_mean(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("spatial_mean", format!("{shape:?} is not 4-d")));
        }
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let inv = E::from_f64(1.0 / hw as f64);
        let xd = self.data(input);
        let mut out = vec![E::zero(); batch * c];
        for (bc, o) in out.iter_mut().enumerate() {
            let mut s = E::zero();
            for &v in &xd[bc * hw..(bc + 1) * hw] {
                s += v;
            }
            *o = s * inv;
        }
        let needs = self.needs_grad(input);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(input, |dx| {
                    for bc in 0..batch * c {
                        let gv = g[bc] * inv;
                        for v in &mut dx[bc * hw..(bc + 1) * hw] {
                            *v += gv;
                        }
                    }
                });
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![batch, c], out, needs, back))
    }

    /// `[b, c, h, w] -> [b, h*w, c]` token layout.
    pub fn chw_to_tokens(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("chw_to_tokens", format!("{shape:?} is not 4-d")));
        }
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let xd = self.data(input);
        let mut out = vec![E::zero(); batch * hw * c];
        for b in 0..batch {
            for ci in 0..c {
                let src = &xd[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                for (s, &v) in src.iter().enumerate() {
                    out[(b * hw + s) * c + ci] = v;
                }
            }
        }
        let needs = self.needs_grad(input);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(input, |dx| {
                    for b in 0..batch {
                        for ci in 0..c {
                            let dst = &mut dx[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                            for (s, v) in dst.iter_mut().enumerate() {
                                *v += g[(b * hw + s) * c + ci];
                            }
                        }
                    }
                });
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![batch, hw, c], out, needs, back))
    }

    /// Softmax along `axis`; rows are shifted by their max before
    /// exponentiation so uniform shifts cancel exactly.
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(arg_err("softmax", format!("axis {axis} out of rank")));
        }
        let alen = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(input);
        let mut out = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = xd[base];
                for j in 1..alen {
                    let v = xd[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = E::zero();
                for j in 0..alen {
                    let e = (xd[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..alen {
                    out[base + j * inner] /= denom;
                }
            }
        }
        let needs = self.needs_grad(input);
        let y_arc = Arc::new(out);
        let y_for_back = Arc::clone(&y_arc);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(input, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut dot = E::zero();
                            for j in 0..alen {
                                let ix = base + j * inner;
                                dot += g[ix] * y_for_back[ix];
                            }
                            for j in 0..alen {
                                let ix = base + j * inner;
                                dx[ix] += y_for_back[ix] * (g[ix] - dot);
                            }
                        }
                    }
                });
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push_shared(shape, y_arc, needs, back))
    }

    /// Layer norm over the trailing axis with per-feature affine.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs feature dim {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = numel(&shape) / c;
        self.norm_groups(input, gamma, beta, eps, rows, c, NormLayout::Trailing)
    }

    /// Norm over the spatial positions of each `(sample, channel)` plane of a
    /// `[b, c, h, w]` map, with per-channel affine. Keeps training free of
    /// batch statistics.
    pub fn channel_norm2d(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("channel_norm2d", format!("{shape:?} is not 4-d")));
        }
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "channel_norm2d",
                format!("affine params must be [{c}]"),
            ));
        }
        self.norm_groups(
            input,
            gamma,
            beta,
            eps,
            batch * c,
            h * w,
            NormLayout::ChannelPlanes { c },
        )
    }

    fn norm_groups(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        groups: usize,
        n: usize,
        layout: NormLayout,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        let xd = self.data(input);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let inv_n = E::from_f64(1.0 / n as f64);
        let epse = E::from_f64(eps);
        let mut out = vec![E::zero(); xd.len()];
        let mut stats = Vec::with_capacity(groups);
        for gi in 0..groups {
            let row = &xd[gi * n..(gi + 1) * n];
            let mut mu = E::zero();
            for &v in row {
                mu += v;
            }
            mu *= inv_n;
            let mut var = E::zero();
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = E::one() / (var + epse).sqrt();
            stats.push((mu, inv_std));
            let orow = &mut out[gi * n..(gi + 1) * n];
            for (j, (&v, ov)) in row.iter().zip(orow.iter_mut()).enumerate() {
                let (gc, bc) = layout.affine(gi, j, gd, bd);
                *ov = gc * (v - mu) * inv_std + bc;
            }
        }
        let needs = self.any_needs(&[input, gamma, beta]);
        let (nx, ng, nb) = (
            self.needs_grad(input),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let x_arc = self.arc(input);
        let g_arc = self.arc(gamma);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if nb {
                    sink.add(beta, |db| {
                        for gi in 0..groups {
                            for j in 0..n {
                                db[layout.param_index(gi, j)] += g[gi * n + j];
                            }
                        }
                    });
                }
                if ng {
                    sink.add(gamma, |dg| {
                        for gi in 0..groups {
                            let (mu, inv_std) = stats[gi];
                            for j in 0..n {
                                let xhat = (x_arc[gi * n + j] - mu) * inv_std;
                                dg[layout.param_index(gi, j)] += g[gi * n + j] * xhat;
                            }
                        }
                    });
                }
                if nx {
                    sink.add(input, |dx| {
                        for gi in 0..groups {
                            let (mu, inv_std) = stats[gi];
                            let mut sum_h = E::zero();
                            let mut sum_hx = E::zero();
                            for j in 0..n {
                                let ix = gi * n + j;
                                let gc = g_arc[layout.param_index(gi, j)];
                                let h = g[ix] * gc;
                                let xhat = (x_arc[ix] - mu) * inv_std;
                                sum_h += h;
                                sum_hx += h * xhat;
                            }
                            let mean_h = sum_h * inv_n;
                            let mean_hx = sum_hx * inv_n;
                            for j in 0..n {
                                let ix = gi * n + j;
                                let gc = g_arc[layout.param_index(gi, j)];
                                let h = g[ix] * gc;
                                let xhat = (x_arc[ix] - mu) * inv_std;
                                dx[ix] += inv_std * (h - mean_h - xhat * mean_hx);
                            }
                        }
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(shape, out, needs, back))
    }

    /// `x[..., din] * w[dout, din]^T (+ bias)`, flattening leading axes.
    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if wshape.len() != 2 {
            return Err(shape_err("linear", format!("weight {wshape:?} is not 2-d")));
        }
        let (dout, din) = (wshape[0], wshape[1]);
        let last = *ishape.last().ok_or_else(|| shape_err("linear", "rank 0"))?;
        if last != din {
            return Err(shape_err(
                "linear",
                format!("input dim {last} vs weight din {din}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs dout {dout}", self.shape(b)),
                ));
            }
        }
        let m = numel(&ishape) / din;
        let xd = self.data(input);
        let wd = self.data(weight);
        let mut wt = vec![E::zero(); din * dout];
        transpose(dout, din, wd, &mut wt);
        let mut out = vec![E::zero(); m * dout];
        gemm_nn(m, din, dout, xd, &wt, &mut out);
        if let Some(b) = bias {
            let bdata = self.data(b);
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(bdata) {
                    *v += bv;
                }
            }
        }
        let mut out_shape = ishape.clone();
        *out_shape.last_mut().unwrap() = dout;

        let mut watch = vec![input, weight];
        if let Some(b) = bias {
            watch.push(b);
        }
        let needs = self.any_needs(&watch);
        let (nx, nw) = (self.needs_grad(input), self.needs_grad(weight));
        let nb = bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        let x_arc = self.arc(input);
        let w_arc = self.arc(weight);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if nx {
                    sink.add(input, |dx| {
                        gemm_nn(m, dout, din, g, &w_arc, dx);
                    });
                }
                if nw {
                    sink.add(weight, |dw| {
                        let mut gt = vec![E::zero(); m * dout];
                        transpose(m, dout, g, &mut gt);
                        gemm_nn(dout, m, din, &gt, &x_arc, dw);
                    });
                }
                if nb {
                    sink.add(bias.unwrap(), |db| {
                        for row in g.chunks(dout) {
                            for (bv, &gv) in db.iter_mut().zip(row) {
                                *bv += gv;
                            }
                        }
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(out_shape, out, needs, back))
    }

    /// Plain 2-D matrix product `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(shape_err("matmul", format!("{ashape:?} x {bshape:?}")));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![E::zero(); m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let needs = self.any_needs(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let a_arc = self.arc(a);
        let b_arc = self.arc(b);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |da| {
                        let mut bt = vec![E::zero(); k * n];
                        transpose(k, n, &b_arc, &mut bt);
                        gemm_nn(m, n, k, g, &bt, da);
                    });
                }
                if nb {
                    sink.add(b, |db| {
                        let mut at = vec![E::zero(); m * k];
                        transpose(m, k, &a_arc, &mut at);
                        gemm_nn(k, m, n, &at, g, db);
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![m, n], out, needs, back))
    }

    /// Broadcast-add of a `[t, c]` table over the batch axis of `[b, t, c]`.
    pub fn add_pos(&mut self, input: TensorId, pos: TensorId) -> Result<TensorId, TensorError> {
        let ishape = self.shape(input).to_vec();
        let pshape = self.shape(pos).to_vec();
        if ishape.len() != 3 || pshape.len() != 2 || ishape[1..] != pshape[..] {
            return Err(shape_err("add_pos", format!("{ishape:?} + {pshape:?}")));
        }
        let batch = ishape[0];
        let n = pshape[0] * pshape[1];
        let pd = self.data(pos);
        let xd = self.data(input);
        let mut out = vec![E::zero(); batch * n];
        for b in 0..batch {
            let src = &xd[b * n..(b + 1) * n];
            let dst = &mut out[b * n..(b + 1) * n];
            for ((o, &x), &p) in dst.iter_mut().zip(src).zip(pd.iter()) {
                *o = x + p;
            }
        }
        let needs = self.any_needs(&[input, pos]);
        let (nx, np) = (self.needs_grad(input), self.needs_grad(pos));
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if nx {
                    sink.add(input, |dx| {
                        for (v, &gv) in dx.iter_mut().zip(g) {
                            *v += gv;
                        }
                    });
                }
                if np {
                    sink.add(pos, |dp| {
                        for b in 0..batch {
                            let gsl = &g[b * n..(b + 1) * n];
                            for (v, &gv) in dp.iter_mut().zip(gsl) {
                                *v += gv;
                            }
                        }
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(ishape, out, needs, back))
    }

    /// Scaled dot-product attention logits split into heads:
    /// `q[b,t,d], k[b,s,d] -> [b, heads, t, s]`, scaled by `1/sqrt(d/heads)`.
    pub fn attn_scores(
        &mut self,
        q: TensorId,
        k: TensorId,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attn_scores", format!("{qs:?} vs {ks:?}")));
        }
        let (batch, t, d) = (qs[0], qs[1], qs[2]);
        let s = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(arg_err(
                "attn_scores",
                format!("dim {d} not divisible by heads {heads}"),
            ));
        }
        let dh = d / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.data(q);
        let kd = self.data(k);
        let mut out = vec![E::zero(); batch * heads * t * s];
        for b in 0..batch {
            for h in 0..heads {
                for ti in 0..t {
                    let qrow = &qd[(b * t + ti) * d + h * dh..(b * t + ti) * d + (h + 1) * dh];
                    let obase = ((b * heads + h) * t + ti) * s;
                    for si in 0..s {
                        let krow =
                            &kd[(b * s + si) * d + h * dh..(b * s + si) * d + (h + 1) * dh];
                        let mut acc = E::zero();
                        for (&qv, &kv) in qrow.iter().zip(krow) {
                            acc += qv * kv;
                        }
                        out[obase + si] = acc * scale;
                    }
                }
            }
        }
        let needs = self.any_needs(&[q, k]);
        let (nq, nk) = (self.needs_grad(q), self.needs_grad(k));
        let q_arc = self.arc(q);
        let k_arc = self.arc(k);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if nq {
                    sink.add(q, |dq| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for ti in 0..t {
                                    let gbase = ((b * heads + h) * t + ti) * s;
                                    let drow = &mut dq
                                        [(b * t + ti) * d + h * dh..(b * t + ti) * d + (h + 1) * dh];
                                    for si in 0..s {
                                        let gv = g[gbase + si] * scale;
                                        let krow = &k_arc
                                            [(b * s + si) * d + h * dh..(b * s + si) * d + (h + 1) * dh];
                                        for (dv, &kv) in drow.iter_mut().zip(krow) {
                                            *dv += gv * kv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if nk {
                    sink.add(k, |dk| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for ti in 0..t {
                                    let gbase = ((b * heads + h) * t + ti) * s;
                                    let qrow = &q_arc
                                        [(b * t + ti) * d + h * dh..(b * t + ti) * d + (h + 1) * dh];
                                    for si in 0..s {
                                        let gv = g[gbase + si] * scale;
                                        let drow = &mut dk
                                            [(b * s + si) * d + h * dh..(b * s + si) * d + (h + 1) * dh];
                                        for (dv, &qv) in drow.iter_mut().zip(qrow) {
                                            *dv += gv * qv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![batch, heads, t, s], out, needs, back))
    }

    /// Applies attention weights to per-head values:
    /// `a[b,heads,t,s], v[b,s,d] -> [b,t,d]`.
    pub fn attn_mix(&mut self, a: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let ashape = self.shape(a).to_vec();
        let vshape = self.shape(v).to_vec();
        if ashape.len() != 4 || vshape.len() != 3 {
            return Err(shape_err("attn_mix", format!("{ashape:?} x {vshape:?}")));
        }
        let (batch, heads, t, s) = (ashape[0], ashape[1], ashape[2], ashape[3]);
        let d = vshape[2];
        if vshape[0] != batch || vshape[1] != s || d % heads != 0 {
            return Err(shape_err("attn_mix", format!("{ashape:?} x {vshape:?}")));
        }
        let dh = d / heads;
        let ad = self.data(a);
        let vd = self.data(v);
        let mut out = vec![E::zero(); batch * t * d];
        for b in 0..batch {
            for h in 0..heads {
                for ti in 0..t {
                    let abase = ((b * heads + h) * t + ti) * s;
                    let orow = {
                        let base = (b * t + ti) * d + h * dh;
                        base..base + dh
                    };
                    for si in 0..s {
                        let av = ad[abase + si];
                        if av == E::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * s + si) * d + h * dh..(b * s + si) * d + (h + 1) * dh];
                        let osl = &mut out[orow.clone()];
                        for (ov, &vv) in osl.iter_mut().zip(vrow) {
                            *ov += av * vv;
                        }
                    }
                }
            }
        }
        let needs = self.any_needs(&[a, v]);
        let (na, nv) = (self.needs_grad(a), self.needs_grad(v));
        let a_arc = self.arc(a);
        let v_arc = self.arc(v);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |da| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for ti in 0..t {
                                    let abase = ((b * heads + h) * t + ti) * s;
                                    let grow =
                                        &g[(b * t + ti) * d + h * dh..(b * t + ti) * d + (h + 1) * dh];
                                    for si in 0..s {
                                        let vrow = &v_arc
                                            [(b * s + si) * d + h * dh..(b * s + si) * d + (h + 1) * dh];
                                        let mut acc = E::zero();
                                        for (&gv, &vv) in grow.iter().zip(vrow) {
                                            acc += gv * vv;
                                        }
                                        da[abase + si] += acc;
                                    }
                                }
                            }
                        }
                    });
                }
                if nv {
                    sink.add(v, |dv| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for ti in 0..t {
                                    let abase = ((b * heads + h) * t + ti) * s;
                                    let grow =
                                        &g[(b * t + ti) * d + h * dh..(b * t + ti) * d + (h + 1) * dh];
                                    for si in 0..s {
                                        let av = a_arc[abase + si];
                                        if av == E::zero() {
                                            continue;
                                        }
                                        let drow = &mut dv
                                            [(b * s + si) * d + h * dh..(b * s + si) * d + (h + 1) * dh];
                                        for (dv_, &gv) in drow.iter_mut().zip(grow) {
                                            *dv_ += av * gv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(vec![batch, t, d], out, needs, back))
    }

    /// Convex mix of candidate kernels per sample:
    /// `alpha[b, k]` with candidates each `[shape...]` gives `[b, shape...]`.
    ///
    /// Exactly-zero weights are skipped, so a one-hot alpha reproduces the
    /// selected candidate bitwise and routes zero gradient to the others.
    pub fn mix_kernels(
        &mut self,
        alpha: TensorId,
        candidates: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        let ashape = self.shape(alpha).to_vec();
        if ashape.len() != 2 {
            return Err(shape_err("mix_kernels", format!("alpha {ashape:?} is not 2-d")));
        }
        let (batch, k) = (ashape[0], ashape[1]);
        if candidates.len() != k {
            return Err(shape_err(
                "mix_kernels",
                format!("{} candidates vs alpha k {k}", candidates.len()),
            ));
        }
        let cshape = self.shape(candidates[0]).to_vec();
        for &c in candidates {
            if self.shape(c) != cshape {
                return Err(shape_err("mix_kernels", "candidate shapes differ"));
            }
        }
        let n = numel(&cshape);
        let ad = self.data(alpha).to_vec();
        let cand_data: Vec<Arc<Vec<E>>> = candidates.iter().map(|&c| self.arc(c)).collect();
        let mut out = vec![E::zero(); batch * n];
        for b in 0..batch {
            let arow = &ad[b * k..(b + 1) * k];
            let dst = &mut out[b * n..(b + 1) * n];
            if let Some(hot) = one_hot_index(arow) {
                dst.copy_from_slice(&cand_data[hot]);
                continue;
            }
            for (i, &av) in arow.iter().enumerate() {
                if av == E::zero() {
                    continue;
                }
                for (dv, &cv) in dst.iter_mut().zip(cand_data[i].iter()) {
                    *dv += av * cv;
                }
            }
        }
        let mut out_shape = Vec::with_capacity(cshape.len() + 1);
        out_shape.push(batch);
        out_shape.extend_from_slice(&cshape);

        let mut watch = vec![alpha];
        watch.extend_from_slice(candidates);
        let needs = self.any_needs(&watch);
        let na = self.needs_grad(alpha);
        let cand_needs: Vec<bool> = candidates.iter().map(|&c| self.needs_grad(c)).collect();
        let cand_ids: Vec<TensorId> = candidates.to_vec();
        let a_arc = self.arc(alpha);
        let back = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(alpha, |da| {
                        for b in 0..batch {
                            let grow = &g[b * n..(b + 1) * n];
                            for (i, cd) in cand_data.iter().enumerate() {
                                let mut acc = E::zero();
                                for (&gv, &cv) in grow.iter().zip(cd.iter()) {
                                    acc += gv * cv;
                                }
                                da[b * k + i] += acc;
                            }
                        }
                    });
                }
                for (i, (&cid, &cn)) in cand_ids.iter().zip(&cand_needs).enumerate() {
                    if !cn {
                        continue;
                    }
                    let mut any = false;
                    for b in 0..batch {
                        if a_arc[b * k + i] != E::zero() {
                            any = true;
                            break;
                        }
                    }
                    if !any {
                        continue;
                    }
                    sink.add(cid, |dc| {
                        for b in 0..batch {
                            let av = a_arc[b * k + i];
                            if av == E::zero() {
                                continue;
                            }
                            let grow = &g[b * n..(b + 1) * n];
                            for (dv, &gv) in dc.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    });
                }
            }) as Box<dyn Fn(&[E], &mut GradSink<E>)>
        });
        Ok(self.push(out_shape, out, needs, back))
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        data: Arc<Vec<E>>,
        needs_grad: bool,
        back: Option<Box<dyn Fn(&[E], &mut GradSink<E>)>>,
    ) -> TensorId {
        self.push_arc(shape, data, needs_grad, back)
    }
}

fn one_hot_index<E: Elem>(row: &[E]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == E::zero() {
            continue;
        }
        if v == E::one() && hot.is_none() {
            hot = Some(i);
        } else {
            return None;
        }
    }
    hot
}

enum NormLayout {
    /// Groups are rows of the trailing feature axis; affine indexed by `j`.
    Trailing,
    /// Groups are `(sample, channel)` planes; affine indexed by channel.
    ChannelPlanes { c: usize },
}

impl NormLayout {
    fn param_index(&self, group: usize, j: usize) -> usize {
        match self {
            NormLayout::Trailing => j,
            NormLayout::ChannelPlanes { c } => group % c,
        }
    }

    fn affine<E: Elem>(&self, group: usize, j: usize, gamma: &[E], beta: &[E]) -> (E, E) {
        let ix = self.param_index(group, j);
        (gamma[ix], beta[ix])
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<E: Elem>(
    g: &[E],
    x: &[E],
    kd: &[E],
    dims: &ConvDims,
    need_x: bool,
    need_k: bool,
    input: TensorId,
    kernel: TensorId,
    sink: &mut GradSink<E>,
) {
    let &ConvDims {
        batch,
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad,
        oh,
        ow,
        per_sample,
    } = dims;
    let q = cin * k * k;
    let s_len = oh * ow;
    if need_k {
        sink.add(kernel, |dk| {
            let mut cols = vec![E::zero(); q * s_len];
            let mut cols_t = vec![E::zero(); s_len * q];
            for b in 0..batch {
                im2col(
                    &x[b * cin * h * w..],
                    cin,
                    h,
                    w,
                    k,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut cols,
                );
                transpose(q, s_len, &cols, &mut cols_t);
                let dk_slice = if per_sample {
                    &mut dk[b * cout * q..(b + 1) * cout * q]
                } else {
                    &mut dk[..cout * q]
                };
                gemm_nn(
                    cout,
                    s_len,
                    q,
                    &g[b * cout * s_len..(b + 1) * cout * s_len],
                    &cols_t,
                    dk_slice,
                );
            }
        });
    }
    if need_x {
        sink.add(input, |dx| {
            let mut kt = vec![E::zero(); q * cout];
            if !per_sample {
                transpose(cout, q, &kd[..cout * q], &mut kt);
            }
            let mut dcols = vec![E::zero(); q * s_len];
            for b in 0..batch {
                if per_sample {
                    transpose(cout, q, &kd[b * cout * q..(b + 1) * cout * q], &mut kt);
                }
                for v in dcols.iter_mut() {
                    *v = E::zero();
                }
                gemm_nn(
                    q,
                    cout,
                    s_len,
                    &kt,
                    &g[b * cout * s_len..(b + 1) * cout * s_len],
                    &mut dcols,
                );
                col2im_acc(
                    &dcols,
                    cin,
                    h,
                    w,
                    k,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx[b * cin * h * w..(b + 1) * cin * h * w],
                );
            }
        });
    }
}
