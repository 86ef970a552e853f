//! Define-by-run autodiff tape.
//!
//! Each forward pass records nodes into a fresh [`Tape`]; `backward` walks the
//! records in reverse execution order exactly once. Nodes whose inputs all
//! have `needs_grad == false` record no backward closure, so constants (input
//! images, masks, positional tables) cost nothing during the backward sweep
//! and evaluation-only passes skip closure allocation entirely.

use std::sync::Arc;

use super::{arg_err, numel, shape_err, Elem, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&[E], &mut GradSink<E>)>;

pub(crate) struct Node<E: Elem> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
    pub needs_grad: bool,
    pub back: Option<BackFn<E>>,
}

/// Accumulates gradient contributions into per-node buffers during backward.
pub struct GradSink<'a, E: Elem> {
    grads: &'a mut Vec<Option<Vec<E>>>,
    numels: &'a [usize],
}

impl<E: Elem> GradSink<'_, E> {
    /// Applies `f` to the gradient buffer of `id`, allocating zeros on first
    /// touch. `f` must add its contribution, never overwrite.
    pub fn add<F: FnOnce(&mut [E])>(&mut self, id: TensorId, f: F) {
        let buf = self.grads[id.0].get_or_insert_with(|| vec![E::zero(); self.numels[id.0]]);
        f(buf);
    }
}

/// Gradients keyed by tape node. Nodes the loss never reached report `None`;
/// callers treat that as exactly zero.
pub struct Gradients<E> {
    by_node: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Gradients<E> {
    pub fn get(&self, id: TensorId) -> Option<&[E]> {
        self.by_node[id.0].as_deref()
    }
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor<E> {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec())
    }

    pub(crate) fn arc(&self, id: TensorId) -> Arc<Vec<E>> {
        Arc::clone(&self.nodes[id.0].data)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<E>,
        needs_grad: bool,
        back: Option<BackFn<E>>,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            needs_grad,
            back,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn push_arc(
        &mut self,
        shape: Vec<usize>,
        data: Arc<Vec<E>>,
        needs_grad: bool,
        back: Option<BackFn<E>>,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            back,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn any_needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn leaf(&mut self, t: &Tensor<E>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.arc(),
            needs_grad,
            back: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> TensorId {
        self.push(shape, data, false, None)
    }

    pub fn constant_scalar(&mut self, v: E) -> TensorId {
        self.constant(vec![1], vec![v])
    }

    /// Reverse sweep from a scalar loss. Does not consume the tape, so node
    /// values stay readable afterwards.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<E>, TensorError> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let numels: Vec<usize> = self.nodes.iter().map(|n| n.data.len()).collect();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = grads[i].take().unwrap();
                {
                    let mut sink = GradSink {
                        grads: &mut grads,
                        numels: &numels,
                    };
                    back(&g, &mut sink);
                }
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    // ---- elementwise ----

    fn check_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |buf| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv += gv;
                        }
                    });
                }
                if nb {
                    sink.add(b, |buf| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv += gv;
                        }
                    });
                }
            }) as BackFn<E>
        });
        Ok(self.push(self.shape(a).to_vec(), data, needs, back))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |buf| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv += gv;
                        }
                    });
                }
                if nb {
                    sink.add(b, |buf| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv -= gv;
                        }
                    });
                }
            }) as BackFn<E>
        });
        Ok(self.push(self.shape(a).to_vec(), data, needs, back))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (da, db) = (self.arc(a), self.arc(b));
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * db[i];
                        }
                    });
                }
                if nb {
                    sink.add(b, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * da[i];
                        }
                    });
                }
            }) as BackFn<E>
        });
        Ok(self.push(self.shape(a).to_vec(), data, needs, back))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("div", a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x / y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (da, db) = (self.arc(a), self.arc(b));
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] / db[i];
                        }
                    });
                }
                if nb {
                    sink.add(b, |buf| {
                        for i in 0..g.len() {
                            buf[i] -= g[i] * da[i] / (db[i] * db[i]);
                        }
                    });
                }
            }) as BackFn<E>
        });
        Ok(self.push(self.shape(a).to_vec(), data, needs, back))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_el(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.minmax(a, b, true)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_el(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.minmax(a, b, false)
    }

    fn minmax(&mut self, a: TensorId, b: TensorId, min: bool) -> Result<TensorId, TensorError> {
        self.check_same_shape(if min { "min" } else { "max" }, a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| {
                let pick_a = if min { x <= y } else { x >= y };
                if pick_a {
                    x
                } else {
                    y
                }
            })
            .collect();
        let needs = self.any_needs(&[a, b]);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (da, db) = (self.arc(a), self.arc(b));
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                if na {
                    sink.add(a, |buf| {
                        for i in 0..g.len() {
                            let pick_a = if min { da[i] <= db[i] } else { da[i] >= db[i] };
                            if pick_a {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
                if nb {
                    sink.add(b, |buf| {
                        for i in 0..g.len() {
                            let pick_a = if min { da[i] <= db[i] } else { da[i] >= db[i] };
                            if !pick_a {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }) as BackFn<E>
        });
        Ok(self.push(self.shape(a).to_vec(), data, needs, back))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: E) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| x + c).collect();
        let needs = self.needs_grad(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += gv;
                    }
                });
            }) as BackFn<E>
        });
        self.push(self.shape(a).to_vec(), data, needs, back)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: E) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| x * c).collect();
        let needs = self.needs_grad(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += c * gv;
                    }
                });
            }) as BackFn<E>
        });
        self.push(self.shape(a).to_vec(), data, needs, back)
    }

    /// Elementwise max against a constant; at ties the gradient passes.
    pub fn max_scalar(&mut self, a: TensorId, c: E) -> TensorId {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| if x >= c { x } else { c })
            .collect();
        let needs = self.needs_grad(a);
        let da = self.arc(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for i in 0..g.len() {
                        if da[i] >= c {
                            buf[i] += g[i];
                        }
                    }
                });
            }) as BackFn<E>
        });
        self.push(self.shape(a).to_vec(), data, needs, back)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        let needs = self.needs_grad(a);
        let da = self.arc(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for i in 0..g.len() {
                        if da[i] > E::zero() {
                            buf[i] += g[i];
                        }
                    }
                });
            }) as BackFn<E>
        });
        self.push(self.shape(a).to_vec(), data, needs, back)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| E::one() / (E::one() + (-x).exp()))
            .collect();
        let needs = self.needs_grad(a);
        let out = Arc::new(data);
        let out_for_back = Arc::clone(&out);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for i in 0..g.len() {
                        let s = out_for_back[i];
                        buf[i] += g[i] * s * (E::one() - s);
                    }
                });
            }) as BackFn<E>
        });
        let shape = self.shape(a).to_vec();
        self.nodes.push(Node {
            shape,
            data: out,
            needs_grad: needs,
            back,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// |x|; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| x.abs()).collect();
        let needs = self.needs_grad(a);
        let da = self.arc(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for i in 0..g.len() {
                        if da[i] > E::zero() {
                            buf[i] += g[i];
                        } else if da[i] < E::zero() {
                            buf[i] -= g[i];
                        }
                    }
                });
            }) as BackFn<E>
        });
        self.push(self.shape(a).to_vec(), data, needs, back)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut s = E::zero();
        for &v in self.data(a) {
            s += v;
        }
        let needs = self.needs_grad(a);
        let n = self.data(a).len();
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                let gv = g[0];
                sink.add(a, |buf| {
                    for bv in buf.iter_mut().take(n) {
                        *bv += gv;
                    }
                });
            }) as BackFn<E>
        });
        self.push(vec![1], vec![s], needs, back)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, E::from_f64(1.0 / n as f64))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if numel(&shape) != self.data(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let needs = self.needs_grad(a);
        let data = self.arc(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += gv;
                    }
                });
            }) as BackFn<E>
        });
        self.nodes.push(Node {
            shape,
            data,
            needs_grad: needs,
            back,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Concatenates along `axis`. All parts must agree on the other axes.
    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(arg_err("concat", "no parts"));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(arg_err("concat", format!("axis {axis} out of rank {rank}")));
        }
        let mut out_shape = self.shape(parts[0]).to_vec();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank {
                return Err(shape_err("concat", format!("rank {} vs {}", s.len(), rank)));
            }
            for (d, (&a_d, &b_d)) in out_shape.iter().zip(s).enumerate() {
                if d != axis && a_d != b_d {
                    return Err(shape_err(
                        "concat",
                        format!("dim {d}: {a_d} vs {b_d} off the concat axis"),
                    ));
                }
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![E::zero(); numel(&out_shape)];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0usize;
        for &p in parts {
            offsets.push(off);
            let alen = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst_base = (o * axis_total + off) * inner;
                let src_base = o * alen * inner;
                data[dst_base..dst_base + alen * inner]
                    .copy_from_slice(&src[src_base..src_base + alen * inner]);
            }
            off += alen;
        }

        let needs = self.any_needs(parts);
        let parts_info: Vec<(TensorId, usize, usize, bool)> = parts
            .iter()
            .zip(&offsets)
            .map(|(&p, &o)| (p, o, self.shape(p)[axis], self.needs_grad(p)))
            .collect();
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                for &(p, off, alen, pn) in &parts_info {
                    if !pn {
                        continue;
                    }
                    sink.add(p, |buf| {
                        for o in 0..outer {
                            let src_base = (o * axis_total + off) * inner;
                            let dst_base = o * alen * inner;
                            for i in 0..alen * inner {
                                buf[dst_base + i] += g[src_base + i];
                            }
                        }
                    });
                }
            }) as BackFn<E>
        });
        Ok(self.push(out_shape, data, needs, back))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice_axis(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(arg_err("slice", format!("axis {axis} out of rank")));
        }
        if start + len > shape[axis] {
            return Err(arg_err(
                "slice",
                format!("{start}..{} out of {}", start + len, shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.data(a);
        let mut data = vec![E::zero(); numel(&out_shape)];
        for o in 0..outer {
            let src_base = (o * alen + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let needs = self.needs_grad(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for o in 0..outer {
                        let dst_base = (o * alen + start) * inner;
                        let src_base = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst_base + i] += g[src_base + i];
                        }
                    }
                });
            }) as BackFn<E>
        });
        Ok(self.push(out_shape, data, needs, back))
    }

    /// Column `j` of a 2-D tensor as a vector.
    pub fn column(&mut self, a: TensorId, j: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("column", format!("{shape:?} is not 2-d")));
        }
        let (m, n) = (shape[0], shape[1]);
        if j >= n {
            return Err(arg_err("column", format!("column {j} out of {n}")));
        }
        let src = self.data(a);
        let data: Vec<E> = (0..m).map(|i| src[i * n + j]).collect();
        let needs = self.needs_grad(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for i in 0..m {
                        buf[i * n + j] += g[i];
                    }
                });
            }) as BackFn<E>
        });
        Ok(self.push(vec![m], data, needs, back))
    }

    /// Repeats a tensor along a new leading axis of length `b`.
    pub fn broadcast0(&mut self, a: TensorId, b: usize) -> TensorId {
        let base = self.shape(a).to_vec();
        let n = self.data(a).len();
        let mut shape = Vec::with_capacity(base.len() + 1);
        shape.push(b);
        shape.extend_from_slice(&base);
        let src = self.data(a);
        let mut data = Vec::with_capacity(b * n);
        for _ in 0..b {
            data.extend_from_slice(src);
        }
        let needs = self.needs_grad(a);
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(a, |buf| {
                    for rep in 0..b {
                        let base_off = rep * n;
                        for i in 0..n {
                            buf[i] += g[base_off + i];
                        }
                    }
                });
            }) as BackFn<E>
        });
        self.push(shape, data, needs, back)
    }

    /// Embedding-style row gather; gradients scatter-add into the gathered
    /// rows, so rows never gathered keep exactly zero gradient.
    pub fn gather_rows(
        &mut self,
        table: TensorId,
        indices: &[usize],
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("gather_rows", format!("{shape:?} is not 2-d")));
        }
        let (v, c) = (shape[0], shape[1]);
        for &ix in indices {
            if ix >= v {
                return Err(arg_err("gather_rows", format!("row {ix} out of {v}")));
            }
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            data.extend_from_slice(&src[ix * c..(ix + 1) * c]);
        }
        let needs = self.needs_grad(table);
        let idx: Vec<usize> = indices.to_vec();
        let back: Option<BackFn<E>> = needs.then(|| {
            Box::new(move |g: &[E], sink: &mut GradSink<E>| {
                sink.add(table, |buf| {
                    for (r, &ix) in idx.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let brow = &mut buf[ix * c..(ix + 1) * c];
                        for (bv, &gv) in brow.iter_mut().zip(grow) {
                            *bv += gv;
                        }
                    }
                });
            }) as BackFn<E>
        });
        Ok(self.push(vec![indices.len(), c], data, needs, back))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, data: &[f64]) -> TensorId {
        let t = Tensor::new(shape, data.to_vec());
        tape.leaf(&t, true)
    }

    #[test]
    fn elementwise_values() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![3], vec![1.0, -2.0, 3.0]);
        let b = t.constant(vec![3], vec![4.0, 5.0, -6.0]);
        let add = t.add(a, b).unwrap();
        assert_eq!(t.data(add), &[5.0, 3.0, -3.0]);
        let sub = t.sub(a, b).unwrap();
        assert_eq!(t.data(sub), &[-3.0, -7.0, 9.0]);
        let mul = t.mul(a, b).unwrap();
        assert_eq!(t.data(mul), &[4.0, -10.0, -18.0]);
        let div = t.div(a, b).unwrap();
        assert_eq!(t.data(div), &[0.25, -0.4, -0.5]);
        let mn = t.min_el(a, b).unwrap();
        assert_eq!(t.data(mn), &[1.0, -2.0, -6.0]);
        let mx = t.max_el(a, b).unwrap();
        assert_eq!(t.data(mx), &[4.0, 5.0, 3.0]);
        let r = t.relu(a);
        assert_eq!(t.data(r), &[1.0, 0.0, 3.0]);
        let ab = t.abs(a);
        assert_eq!(t.data(ab), &[1.0, 2.0, 3.0]);
        let fl = t.max_scalar(a, 0.5);
        assert_eq!(t.data(fl), &[1.0, 0.5, 3.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2], vec![1.0, 2.0]);
        let b = t.constant(vec![3], vec![1.0, 2.0, 3.0]);
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            t.backward(a),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let a = leaf64(&mut t, vec![1], &[2.0]);
        let unused = leaf64(&mut t, vec![1], &[7.0]);
        let loss = t.mul(a, a).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[4.0]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn constants_record_no_backward_closure() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2], vec![1.0, 2.0]);
        let b = t.constant(vec![2], vec![3.0, 4.0]);
        let c = t.mul(a, b).unwrap();
        let s = t.sum_all(c);
        assert!(!t.needs_grad(s));
        assert!(t.backward(s).unwrap().get(a).is_none());
    }

    #[test]
    fn reshape_shares_buffer() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.reshape(a, vec![3, 2]).unwrap();
        assert!(Arc::ptr_eq(&t.arc(a), &t.arc(b)));
        assert!(t.reshape(a, vec![4, 2]).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t.constant(vec![2, 1], vec![5.0, 6.0]);
        let c = t.concat(1, &[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice_axis(c, 1, 2, 1).unwrap();
        assert_eq!(t.data(s), &[5.0, 6.0]);
        let col = t.column(c, 1).unwrap();
        assert_eq!(t.data(col), &[2.0, 4.0]);
    }

    #[test]
    fn gather_rows_accumulates_and_skips() {
        let mut t: Tape<f64> = Tape::new();
        let table = leaf64(&mut t, vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = t.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.data(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.sum_all(g);
        let grads = t.backward(s).unwrap();
        // Row 1 never gathered: exactly zero. Row 2 gathered twice.
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast0_sums_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let a = leaf64(&mut t, vec![2], &[1.0, 2.0]);
        let b = t.broadcast0(a, 3);
        assert_eq!(t.shape(b), &[3, 2]);
        let s = t.sum_all(b);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // Values stay clear of relu/abs/min/max kinks at the chosen step.
        let p0 = vec![0.7, -1.3, 2.1, 0.4];
        let p1 = vec![1.9, 0.6, -0.8, -2.2];
        let report = grad_check(&[p0, p1], 1e-4, |t, params| {
            let a = leaf64(t, vec![4], &params[0]);
            let b = leaf64(t, vec![4], &params[1]);
            let prod = t.mul(a, b)?;
            let quot = t.div(a, b)?;
            let lo = t.min_el(prod, quot)?;
            let hi = t.max_el(prod, quot)?;
            let sig = t.sigmoid(lo);
            let act = t.relu(hi);
            let mixed = t.add(sig, act)?;
            let shifted = t.add_scalar(mixed, 0.25);
            let scaled = t.mul_scalar(shifted, 1.5);
            let floored = t.max_scalar(scaled, 0.1);
            let ab = t.abs(floored);
            Ok((t.mean_all(ab), vec![a, b]))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn shape_op_gradients_match_finite_differences() {
        let p0 = vec![0.5, -0.9, 1.4, 2.3, -0.2, 0.8];
        let report = grad_check(&[p0], 1e-4, |t, params| {
            let a = leaf64(t, vec![2, 3], &params[0]);
            let left = t.slice_axis(a, 1, 0, 2)?;
            let right = t.slice_axis(a, 1, 2, 1)?;
            let back = t.concat(1, &[right, left])?;
            let flat = t.reshape(back, vec![6])?;
            let rep = t.broadcast0(flat, 2);
            let col = t.column(rep, 3)?;
            let s1 = t.sum_all(rep);
            let s2 = t.sum_all(col);
            let s2w = t.mul_scalar(s2, 0.5);
            Ok((t.add(s1, s2w)?, vec![a]))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn sigmoid_and_reductions() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![2], vec![0.0, f64::ln(3.0)]);
        let s = t.sigmoid(a);
        let got = t.data(s);
        assert!((got[0] - 0.5).abs() < 1e-15);
        assert!((got[1] - 0.75).abs() < 1e-15);
        let m = t.mean_all(s);
        assert!((t.data(m)[0] - 0.625).abs() < 1e-15);
    }
}
