//! Named parameter storage and per-forward graph binding.
//!
//! Parameters live in creation order, so initialization draws, optimizer
//! sweeps, and checkpoint layout are all deterministic for a given config and
//! seed. A [`Graph`] wraps one fresh tape per forward pass and binds each
//! parameter as a leaf at most once.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VgqcError};
use crate::tensor::{Elem, Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore<E: Elem> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<E>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<E>) {
        debug_assert_eq!(self.entries[id.0].1.shape(), t.shape());
        self.entries[id.0].1 = t;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// One forward pass: a tape plus lazy parameter leaves.
pub struct Graph<'a, E: Elem> {
    pub tape: Tape<E>,
    store: &'a ParamStore<E>,
    bound: Vec<Option<TensorId>>,
    train: bool,
}

impl<'a, E: Elem> Graph<'a, E> {
    /// `train` controls whether parameters request gradients.
    pub fn new(store: &'a ParamStore<E>, train: bool) -> Self {
        Graph {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
            train,
        }
    }

    /// Tape leaf for a parameter, bound on first use.
    pub fn p(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = self.tape.leaf(self.store.get(id), self.train);
        self.bound[id.0] = Some(t);
        t
    }

    /// Gradient buffer lookup key for a parameter, if it was used.
    pub fn bound_id(&self, id: ParamId) -> Option<TensorId> {
        self.bound[id.0]
    }
}

/// Uniform init in ±1/sqrt(fan_in); the default for linear and conv weights.
pub fn fan_in_uniform<E: Elem>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

pub fn normal_init<E: Elem>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data)
}

pub fn zeros<E: Elem>(shape: Vec<usize>) -> Tensor<E> {
    Tensor::zeros(shape)
}

pub fn ones<E: Elem>(shape: Vec<usize>) -> Tensor<E> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![E::one(); n])
}

/// Linear layer parameters.
#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearP {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(rng, vec![dout, din], din));
        let b = bias.then(|| store.add(format!("{name}.b"), zeros(vec![dout])));
        LinearP { w, b }
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: TensorId,
    ) -> std::result::Result<TensorId, crate::tensor::TensorError> {
        let w = g.p(self.w);
        let b = self.b.map(|b| g.p(b));
        g.tape.linear(x, w, b)
    }
}

/// Affine norm parameters (layer norm or channel norm).
#[derive(Clone, Copy, Debug)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormP {
    pub fn init<E: Elem>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        NormP {
            gamma: store.add(format!("{name}.gamma"), ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), zeros(vec![dim])),
        }
    }
}

/// Rebuilds a parameter store of a different element type, preserving names,
/// shapes, and creation order. Bridges f32 training stores into f64 ones for
/// gradient checking.
pub fn convert_store<A: Elem, B: Elem>(src: &ParamStore<A>) -> ParamStore<B> {
    let mut out = ParamStore::new();
    for (name, t) in src.iter() {
        let data: Vec<B> = t.data().iter().map(|&v| B::from_f64(v.as_f64())).collect();
        out.add(name, Tensor::new(t.shape().to_vec(), data));
    }
    out
}

/// Replaces every tensor in `dst` with same-named data from `src`.
pub fn load_values<E: Elem>(
    dst: &mut ParamStore<E>,
    src: &[(String, Vec<usize>, Vec<E>)],
) -> Result<()> {
    if src.len() != dst.len() {
        return Err(VgqcError::checkpoint(format!(
            "parameter count mismatch: store {} vs payload {}",
            dst.len(),
            src.len()
        )));
    }
    for (id, (name, shape, data)) in dst.ids().collect::<Vec<_>>().into_iter().zip(src) {
        if dst.name(id) != name {
            return Err(VgqcError::checkpoint(format!(
                "parameter order mismatch: store has {}, payload has {}",
                dst.name(id),
                name
            )));
        }
        if dst.get(id).shape() != &shape[..] {
            return Err(VgqcError::checkpoint(format!(
                "{name}: shape {:?} vs payload {:?}",
                dst.get(id).shape(),
                shape
            )));
        }
        dst.set(id, Tensor::new(shape.clone(), data.clone()));
    }
    Ok(())
}
