//! Cross-modal fusion stack and box regression head.
//!
//! Visual and text features are projected into a shared width, concatenated
//! behind a learned summary token, given learned position embeddings, and run
//! through a small encoder stack. Only word tokens are attendable on the text
//! side. The summary token's output feeds the head.

use rand_chacha::ChaCha8Rng;

use crate::layers::EncoderLayerP;
use crate::params::{normal_init, Graph, LinearP, NormP, ParamId, ParamStore};
use crate::tensor::{Elem, TensorError, TensorId};

pub struct FusionP {
    proj_v: LinearP,
    proj_t: LinearP,
    reg: ParamId,
    pos: ParamId,
    pub layers: Vec<EncoderLayerP>,
    norm_out: NormP,
    c_r: usize,
    n_visual: usize,
    n_text: usize,
}

pub struct FusionOut {
    /// Summary token output, [b, c_r].
    pub reg_out: TensorId,
    /// Post-softmax attention per layer, [b, heads, t, t] with the summary
    /// token at position zero and visual tokens right after it.
    pub attn: Vec<TensorId>,
}

impl FusionP {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_v: usize,
        c_q: usize,
        c_r: usize,
        ffn: usize,
        heads: usize,
        n_layers: usize,
        n_visual: usize,
        n_text: usize,
    ) -> Self {
        let proj_v = LinearP::init(store, rng, &format!("{name}.projv"), c_v, c_r, true);
        let proj_t = LinearP::init(store, rng, &format!("{name}.projt"), c_q, c_r, true);
        let reg = store.add(format!("{name}.reg"), normal_init(rng, vec![c_r], 0.02));
        let seq = 1 + n_visual + n_text;
        let pos = store.add(format!("{name}.pos"), normal_init(rng, vec![seq, c_r], 0.02));
        let layers = (0..n_layers)
            .map(|i| EncoderLayerP::init(store, rng, &format!("{name}.layer{i}"), c_r, ffn, heads))
            .collect();
        let norm_out = NormP::init(store, &format!("{name}.norm"), c_r);
        FusionP {
            proj_v,
            proj_t,
            reg,
            pos,
            layers,
            norm_out,
            c_r,
            n_visual,
            n_text,
        }
    }

    pub fn sequence_len(&self) -> usize {
        1 + self.n_visual + self.n_text
    }

    /// `text_word_mask` flags, per batch row and text slot, whether the slot
    /// holds a vocabulary word; everything else on the text side is masked.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        visual_tokens: TensorId,
        text_slots: TensorId,
        text_word_mask: &[bool],
    ) -> Result<FusionOut, TensorError> {
        let vshape = g.tape.shape(visual_tokens).to_vec();
        let (b, nv, cv) = (vshape[0], vshape[1], vshape[2]);
        assert_eq!(nv, self.n_visual, "visual token count fixed by config");
        let tshape = g.tape.shape(text_slots).to_vec();
        let (nt, ct) = (tshape[1], tshape[2]);
        assert_eq!(nt, self.n_text, "text slot count fixed by config");
        assert_eq!(text_word_mask.len(), b * nt);

        let vflat = g.tape.reshape(visual_tokens, vec![b * nv, cv])?;
        let v = self.proj_v.forward(g, vflat)?;
        let v = g.tape.reshape(v, vec![b, nv, self.c_r])?;

        let tflat = g.tape.reshape(text_slots, vec![b * nt, ct])?;
        let t = self.proj_t.forward(g, tflat)?;
        let t = g.tape.reshape(t, vec![b, nt, self.c_r])?;

        let r = g.p(self.reg);
        let r = g.tape.reshape(r, vec![1, 1, self.c_r])?;
        let rows = vec![r; b];
        let reg_batch = g.tape.concat(0, &rows)?;

        let seq = g.tape.concat(1, &[reg_batch, v, t])?;
        let pos = g.p(self.pos);
        let mut x = g.tape.add_pos(seq, pos)?;

        let total = self.sequence_len();
        let mut key_mask = vec![true; b * total];
        for bi in 0..b {
            for s in 0..nt {
                key_mask[bi * total + 1 + nv + s] = text_word_mask[bi * nt + s];
            }
        }

        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(g, x, Some(&key_mask))?;
            x = y;
            attn.push(a);
        }

        let flat = g.tape.reshape(x, vec![b * total, self.c_r])?;
        let gn = g.p(self.norm_out.gamma);
        let bn = g.p(self.norm_out.beta);
        let flat = g.tape.layer_norm(flat, gn, bn, 1e-5)?;
        x = g.tape.reshape(flat, vec![b, total, self.c_r])?;

        let head = g.tape.slice_axis(x, 1, 0, 1)?;
        let reg_out = g.tape.reshape(head, vec![b, self.c_r])?;
        Ok(FusionOut { reg_out, attn })
    }
}

/// Two-layer box head; the sigmoid keeps outputs in the unit square.
pub struct HeadP {
    fc1: LinearP,
    fc2: LinearP,
}

/// Initial width/height logit; sigmoid of this is a typical object footprint,
/// so the head starts near the output distribution instead of at half-image
/// boxes.
const SIZE_LOGIT: f64 = -1.45;

impl HeadP {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        let head = HeadP {
            fc1: LinearP::init(store, rng, &format!("{name}.fc1"), c, c, true),
            fc2: LinearP::init(store, rng, &format!("{name}.fc2"), c, 4, true),
        };
        let b = head.fc2.b.expect("box head always carries a bias");
        let data = store.get_mut(b).data_mut();
        data[2] = E::from_f64(SIZE_LOGIT);
        data[3] = E::from_f64(SIZE_LOGIT);
        head
    }

    /// [b, c] features to [b, 4] boxes in cx, cy, w, h order.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.relu(h);
        let out = self.fc2.forward(g, h)?;
        Ok(g.tape.sigmoid(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn build(n_layers: usize) -> (ParamStore<f64>, FusionP) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = FusionP::init(&mut store, &mut rng, "fusion", 6, 5, 8, 16, 2, n_layers, 4, 3);
        (store, f)
    }

    fn inputs(g: &mut Graph<f64>) -> (TensorId, TensorId) {
        let v = g.tape.leaf(
            &Tensor::new(vec![2, 4, 6], (0..48).map(|i| (i as f64 * 0.7).sin()).collect()),
            false,
        );
        let t = g.tape.leaf(
            &Tensor::new(vec![2, 3, 5], (0..30).map(|i| (i as f64 * 0.3).cos()).collect()),
            false,
        );
        (v, t)
    }

    #[test]
    fn summary_output_has_model_width() {
        let (store, f) = build(2);
        let mut g = Graph::new(&store, false);
        let (v, t) = inputs(&mut g);
        let mask = [true, true, false, true, false, false];
        let out = f.forward(&mut g, v, t, &mask).unwrap();
        assert_eq!(g.tape.shape(out.reg_out), &[2, 8]);
        assert_eq!(out.attn.len(), 2);
        assert_eq!(g.tape.shape(out.attn[0]), &[2, 2, 8, 8]);
    }

    #[test]
    fn summary_attention_rows_are_stochastic_and_skip_masked_text() {
        let (store, f) = build(2);
        let mut g = Graph::new(&store, false);
        let (v, t) = inputs(&mut g);
        let mask = [true, false, false, false, true, true];
        let out = f.forward(&mut g, v, t, &mask).unwrap();
        for a in &out.attn {
            let data = g.tape.data(*a);
            // Row 0 of each head is the summary token's distribution.
            for bi in 0..2 {
                for h in 0..2 {
                    let row = &data[((bi * 2 + h) * 8) * 8..((bi * 2 + h) * 8) * 8 + 8];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                    for (s, &w) in row.iter().enumerate().skip(5) {
                        let word = mask[bi * 3 + (s - 5)];
                        if !word {
                            assert_eq!(w, 0.0, "masked text slot {s} got weight");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn masked_text_slots_cannot_influence_the_box() {
        let (store, f) = build(2);
        let mask = [true, true, false, true, true, false];
        let run = |pad_fill: f64| {
            let mut g = Graph::new(&store, false);
            let v = g.tape.leaf(
                &Tensor::new(vec![2, 4, 6], (0..48).map(|i| (i as f64 * 0.7).sin()).collect()),
                false,
            );
            let mut tdata: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).cos()).collect();
            // Slot 2 of row 0 and slot 2 of row 1 are masked; poison them.
            for c in 0..5 {
                tdata[2 * 5 + c] = pad_fill;
                tdata[15 + 2 * 5 + c] = pad_fill;
            }
            let t = g.tape.leaf(&Tensor::new(vec![2, 3, 5], tdata), false);
            let out = f.forward(&mut g, v, t, &mask).unwrap();
            g.tape.data(out.reg_out).to_vec()
        };
        assert_eq!(run(0.0), run(1e6));
    }

    #[test]
    fn zeroed_head_predicts_the_center_box() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let head = HeadP::init(&mut store, &mut rng, "head", 6);
        for name in ["head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"] {
            let id = store.by_name(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape));
        }
        let mut g = Graph::new(&store, false);
        let x = g.tape.leaf(&Tensor::new(vec![3, 6], vec![0.9; 18]), false);
        let out = head.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.data(out), &[0.5; 12]);
    }

    #[test]
    fn head_outputs_stay_in_the_unit_square() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let head = HeadP::init(&mut store, &mut rng, "head", 6);
        let mut g = Graph::new(&store, false);
        let x = g.tape.leaf(
            &Tensor::new(vec![4, 6], (0..24).map(|i| i as f64 * 3.0 - 30.0).collect()),
            false,
        );
        let out = head.forward(&mut g, x).unwrap();
        assert!(g.tape.data(out).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
