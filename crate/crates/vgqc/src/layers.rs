//! Transformer encoder layer shared by the text, visual, and fusion stacks.
//!
//! Pre-norm residual wiring: x = x + attn(norm(x)); x = x + ffn(norm(x)).
//! Stacks that consume the output apply their own final norm.
//! Key padding is handled by adding a large negative constant to the scores of
//! masked keys before the softmax, which drives their weights to exactly zero.

use rand_chacha::ChaCha8Rng;

use crate::params::{Graph, LinearP, NormP, ParamStore};
use crate::tensor::{Elem, TensorError, TensorId};

/// Additive score for masked keys. Large enough that exp underflows to zero.
const MASK_NEG: f64 = -1e30;

/// Init scale for the attention and feed-forward output projections.
const RESIDUAL_DAMP: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
    pub norm1: NormP,
    pub norm2: NormP,
    pub ffn1: LinearP,
    pub ffn2: LinearP,
    pub heads: usize,
}

impl EncoderLayerP {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        ffn: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "model width must divide into heads");
        let q = LinearP::init(store, rng, &format!("{name}.attn.q"), dim, dim, true);
        let k = LinearP::init(store, rng, &format!("{name}.attn.k"), dim, dim, true);
        let v = LinearP::init(store, rng, &format!("{name}.attn.v"), dim, dim, true);
        let o = LinearP::init(store, rng, &format!("{name}.attn.o"), dim, dim, true);
        let norm1 = NormP::init(store, &format!("{name}.norm1"), dim);
        let ffn1 = LinearP::init(store, rng, &format!("{name}.ffn.fc1"), dim, ffn, true);
        let ffn2 = LinearP::init(store, rng, &format!("{name}.ffn.fc2"), ffn, dim, true);
        let norm2 = NormP::init(store, &format!("{name}.norm2"), dim);
        // Residual branches start damped so a fresh stack is close to the
        // identity map.
        for w in [o.w, ffn2.w] {
            for v in store.get_mut(w).data_mut() {
                *v *= E::from_f64(RESIDUAL_DAMP);
            }
        }
        EncoderLayerP {
            q,
            k,
            v,
            o,
            norm1,
            norm2,
            ffn1,
            ffn2,
            heads,
        }
    }

    /// Self-attention over `x` of shape [b, t, c].
    ///
    /// `key_mask`, when present, holds one bool per (batch, position); `false`
    /// keys receive zero attention from every query. Returns the layer output
    /// and the post-softmax attention tensor of shape [b, heads, t, t].
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: TensorId,
        key_mask: Option<&[bool]>,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let shape = g.tape.shape(x).to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let flat = g.tape.reshape(x, vec![b * t, c])?;

        let g1 = g.p(self.norm1.gamma);
        let b1 = g.p(self.norm1.beta);
        let h1 = g.tape.layer_norm(flat, g1, b1, 1e-5)?;

        let q = self.q.forward(g, h1)?;
        let k = self.k.forward(g, h1)?;
        let v = self.v.forward(g, h1)?;
        let q = g.tape.reshape(q, vec![b, t, c])?;
        let k = g.tape.reshape(k, vec![b, t, c])?;
        let v = g.tape.reshape(v, vec![b, t, c])?;

        let mut scores = g.tape.attn_scores(q, k, self.heads)?;
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), b * t, "key mask must cover every position");
            let m = self.mask_tensor(g, b, t, mask);
            scores = g.tape.add(scores, m)?;
        }
        let attn = g.tape.softmax(scores, 3)?;
        let ctx = g.tape.attn_mix(attn, v)?;

        let ctx_flat = g.tape.reshape(ctx, vec![b * t, c])?;
        let proj = self.o.forward(g, ctx_flat)?;
        let resid = g.tape.add(flat, proj)?;

        let g2p = g.p(self.norm2.gamma);
        let b2 = g.p(self.norm2.beta);
        let h2 = g.tape.layer_norm(resid, g2p, b2, 1e-5)?;
        let h = self.ffn1.forward(g, h2)?;
        let h = g.tape.relu(h);
        let h = self.ffn2.forward(g, h)?;
        let out = g.tape.add(resid, h)?;
        let out = g.tape.reshape(out, vec![b, t, c])?;
        Ok((out, attn))
    }

    fn mask_tensor<E: Elem>(&self, g: &mut Graph<E>, b: usize, t: usize, mask: &[bool]) -> TensorId {
        let neg = E::from_f64(MASK_NEG);
        let mut data = vec![E::zero(); b * self.heads * t * t];
        for bi in 0..b {
            for s in 0..t {
                if mask[bi * t + s] {
                    continue;
                }
                for h in 0..self.heads {
                    let row = ((bi * self.heads + h) * t) * t;
                    for ti in 0..t {
                        data[row + ti * t + s] = neg;
                    }
                }
            }
        }
        g.tape.constant(vec![b, self.heads, t, t], data)
    }
}

/// Mean attention over heads: [b, heads, t, s] data reduced to [b, t, s].
pub fn mean_heads<E: Elem>(data: &[E], b: usize, heads: usize, t: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * t * s];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                for si in 0..s {
                    out[(bi * t + ti) * s + si] +=
                        data[(((bi * heads + h) * t) + ti) * s + si].as_f64() / heads as f64;
                }
            }
        }
    }
    out
}
