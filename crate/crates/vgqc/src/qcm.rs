//! Query-conditioned convolution block.
//!
//! Holds K candidate kernels. Each forward mixes them into one kernel per
//! sample, W = sum_i alpha_i w_i, and convolves with the per-sample kernel.
//! The mixing weights come from the query summary, from free logits, or from
//! the incoming feature map; a forced index swaps in an exact one-hot.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{fan_in_uniform, normal_init, Graph, LinearP, ParamId, ParamStore};
use crate::tensor::{Elem, Tensor, TensorError, TensorId};

/// Where the kernel mixing weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSource {
    /// softmax of a two-layer MLP on the query summary.
    Query,
    /// softmax of free logits; ignores both query and image.
    Learnable,
    /// softmax of a linear map of the spatially pooled input features.
    Featmap,
}

pub struct QcmBlockP {
    pub candidates: Vec<ParamId>,
    phi1: Option<LinearP>,
    phi2: Option<LinearP>,
    logits: Option<ParamId>,
    feat_proj: Option<LinearP>,
    pub source: AttentionSource,
    pub stride: usize,
    pub pad: usize,
}

impl QcmBlockP {
    /// Candidate kernels start as one shared draw plus independent
    /// perturbations of standard deviation `sigma`, so they begin nearly
    /// interchangeable and differentiate during training.
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        kcount: usize,
        source: AttentionSource,
        c_q: usize,
        sigma: f64,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(kcount >= 1, "need at least one candidate kernel");
        let fan_in = cin * k * k;
        let base: Tensor<E> = fan_in_uniform(rng, vec![cout, cin, k, k], fan_in);
        let candidates = (0..kcount)
            .map(|i| {
                let noise: Tensor<E> = normal_init(rng, vec![cout, cin, k, k], sigma);
                let data: Vec<E> = base
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&b, &n)| b + n)
                    .collect();
                store.add(
                    format!("{name}.cand{i}"),
                    Tensor::new(vec![cout, cin, k, k], data),
                )
            })
            .collect();

        let (mut phi1, mut phi2, mut logits, mut feat_proj) = (None, None, None, None);
        match source {
            AttentionSource::Query => {
                let hidden = (c_q / 2).max(kcount);
                phi1 = Some(LinearP::init(store, rng, &format!("{name}.phi1"), c_q, hidden, true));
                phi2 = Some(LinearP::init(store, rng, &format!("{name}.phi2"), hidden, kcount, true));
            }
            AttentionSource::Learnable => {
                logits = Some(store.add(format!("{name}.logits"), Tensor::zeros(vec![kcount])));
            }
            AttentionSource::Featmap => {
                feat_proj = Some(LinearP::init(
                    store,
                    rng,
                    &format!("{name}.featproj"),
                    cin,
                    kcount,
                    true,
                ));
            }
        }
        QcmBlockP {
            candidates,
            phi1,
            phi2,
            logits,
            feat_proj,
            source,
            stride,
            pad,
        }
    }

    pub fn kcount(&self) -> usize {
        self.candidates.len()
    }

    /// Mixing weights, [b, k]. `forced` bypasses the attention path with an
    /// exact one-hot constant.
    pub fn alpha<E: Elem>(
        &self,
        g: &mut Graph<E>,
        f_query: Option<TensorId>,
        feat: TensorId,
        b: usize,
        forced: Option<usize>,
    ) -> Result<TensorId, TensorError> {
        let k = self.kcount();
        if let Some(i) = forced {
            assert!(i < k, "forced kernel index out of range");
            let mut data = vec![E::zero(); b * k];
            for row in 0..b {
                data[row * k + i] = E::one();
            }
            return Ok(g.tape.constant(vec![b, k], data));
        }
        match self.source {
            AttentionSource::Query => {
                let fq = f_query.expect("query source needs the query summary");
                let h = self.phi1.unwrap().forward(g, fq)?;
                let h = g.tape.relu(h);
                let scores = self.phi2.unwrap().forward(g, h)?;
                g.tape.softmax(scores, 1)
            }
            AttentionSource::Learnable => {
                let l = g.p(self.logits.unwrap());
                let row = g.tape.reshape(l, vec![1, k])?;
                let sm = g.tape.softmax(row, 1)?;
                let rows = vec![sm; b];
                g.tape.concat(0, &rows)
            }
            AttentionSource::Featmap => {
                let pooled = g.tape.spatial_mean(feat)?;
                let scores = self.feat_proj.unwrap().forward(g, pooled)?;
                g.tape.softmax(scores, 1)
            }
        }
    }

    /// Convolves `feat` with the per-sample mixed kernel. Returns the output
    /// map and the mixing weights used.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        feat: TensorId,
        f_query: Option<TensorId>,
        forced: Option<usize>,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let b = g.tape.shape(feat)[0];
        let alpha = self.alpha(g, f_query, feat, b, forced)?;
        let cands: Vec<TensorId> = self.candidates.iter().map(|&c| g.p(c)).collect();
        let mixed = g.tape.mix_kernels(alpha, &cands)?;
        let out = g.tape.conv2d(feat, mixed, self.stride, self.pad)?;
        Ok((out, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn block(
        seed: u64,
        source: AttentionSource,
        sigma: f64,
        kcount: usize,
    ) -> (ParamStore<f64>, QcmBlockP) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = QcmBlockP::init(
            &mut store, &mut rng, "qcm", 3, 4, 3, kcount, source, 8, sigma, 1, 1,
        );
        (store, b)
    }

    fn feat_input(g: &mut Graph<f64>, b: usize) -> TensorId {
        let n = b * 3 * 6 * 6;
        let data: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64 * 0.1 - 0.8).collect();
        g.tape.leaf(&Tensor::new(vec![b, 3, 6, 6], data), false)
    }

    #[test]
    fn zero_sigma_makes_candidates_identical() {
        let (store, blk) = block(9, AttentionSource::Learnable, 0.0, 4);
        let first = store.get(blk.candidates[0]).data().to_vec();
        for &c in &blk.candidates[1..] {
            assert_eq!(store.get(c).data(), &first[..]);
        }
    }

    #[test]
    fn perturbation_variance_matches_sigma() {
        // Same seed with sigma zero isolates the shared base; differences are
        // then exactly the noise draws. 32*32*9 entries over 12 candidates
        // gives over 1e5 samples.
        let sigma = 1e-3;
        let mut s0 = ParamStore::<f64>::new();
        let mut r0 = ChaCha8Rng::seed_from_u64(40);
        let b0 = QcmBlockP::init(
            &mut s0, &mut r0, "q", 32, 32, 3, 12, AttentionSource::Learnable, 8, 0.0, 1, 1,
        );
        let mut s1 = ParamStore::<f64>::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(40);
        let b1 = QcmBlockP::init(
            &mut s1, &mut r1, "q", 32, 32, 3, 12, AttentionSource::Learnable, 8, sigma, 1, 1,
        );
        let mut diffs = Vec::new();
        for (c0, c1) in b0.candidates.iter().zip(&b1.candidates) {
            for (a, b) in s0.get(*c0).data().iter().zip(s1.get(*c1).data()) {
                diffs.push(b - a);
            }
        }
        assert!(diffs.len() >= 100_000, "need enough samples, got {}", diffs.len());
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var: f64 =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
        let target = sigma * sigma;
        assert!(
            (var - target).abs() <= 0.2 * target,
            "sample variance {var:.3e} vs target {target:.3e}"
        );
    }

    #[test]
    fn forced_alpha_is_exact_one_hot() {
        let (store, blk) = block(3, AttentionSource::Query, 1e-3, 5);
        let mut g = Graph::new(&store, false);
        let feat = feat_input(&mut g, 2);
        let fq = g.tape.constant(vec![2, 8], vec![0.3; 16]);
        let a = blk.alpha(&mut g, Some(fq), feat, 2, Some(3)).unwrap();
        assert_eq!(
            g.tape.data(a),
            &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn zeroed_mlp_gives_uniform_mixing() {
        let (mut store, blk) = block(3, AttentionSource::Query, 1e-3, 5);
        for name in ["qcm.phi1.w", "qcm.phi1.b", "qcm.phi2.w", "qcm.phi2.b"] {
            let id = store.by_name(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape));
        }
        let mut g = Graph::new(&store, false);
        let feat = feat_input(&mut g, 1);
        let fq = g.tape.constant(vec![1, 8], vec![0.7; 8]);
        let a = blk.alpha(&mut g, Some(fq), feat, 1, None).unwrap();
        for &v in g.tape.data(a) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forced_mix_matches_static_conv_bitwise() {
        // One-hot mixing must reproduce a plain convolution with the chosen
        // candidate. 100 random configurations.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..100 {
            let cin = rng.gen_range(1..=4);
            let cout = rng.gen_range(1..=5);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let stride = rng.gen_range(1..=2);
            let pad = if rng.gen_bool(0.5) { k / 2 } else { 0 };
            let hw = rng.gen_range(k.max(4)..=10);
            let b = rng.gen_range(1..=3);
            let kcount = rng.gen_range(1..=6);
            let forced = rng.gen_range(0..kcount);

            let mut store = ParamStore::<f64>::new();
            let mut prng = ChaCha8Rng::seed_from_u64(1000 + case);
            let blk = QcmBlockP::init(
                &mut store,
                &mut prng,
                "q",
                cin,
                cout,
                k,
                kcount,
                AttentionSource::Query,
                8,
                1e-2,
                stride,
                pad,
            );
            let data: Vec<f64> = (0..b * cin * hw * hw)
                .map(|_| prng.gen_range(-1.0..1.0))
                .collect();

            let mut g = Graph::new(&store, false);
            let feat = g.tape.leaf(&Tensor::new(vec![b, cin, hw, hw], data.clone()), false);
            let fq = g.tape.constant(vec![b, 8], vec![0.1; b * 8]);
            let (out, _) = blk.forward(&mut g, feat, Some(fq), Some(forced)).unwrap();
            let qcm_out = g.tape.data(out).to_vec();

            let mut g2 = Graph::new(&store, false);
            let feat2 = g2.tape.leaf(&Tensor::new(vec![b, cin, hw, hw], data), false);
            let kid = g2.p(blk.candidates[forced]);
            let static_out = g2.tape.conv2d(feat2, kid, stride, pad).unwrap();
            assert_eq!(qcm_out, g2.tape.data(static_out), "case {case}");
        }
    }

    #[test]
    fn softmax_mixing_reaches_all_candidates_and_phi() {
        let (store, blk) = block(21, AttentionSource::Query, 1e-3, 3);
        let mut g = Graph::new(&store, true);
        let feat = feat_input(&mut g, 2);
        let fq = g.tape.leaf(
            &Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.05).collect()),
            true,
        );
        let (out, alpha) = blk.forward(&mut g, feat, Some(fq), None).unwrap();
        assert!(g.tape.data(alpha).iter().all(|&a| a > 0.0));
        let loss = g.tape.mean_all(out);
        let grads = g.tape.backward(loss).unwrap();
        for &c in &blk.candidates {
            let id = g.bound_id(c).unwrap();
            assert!(grads.get(id).is_some(), "candidate missing gradient");
        }
        assert!(grads.get(fq).is_some(), "query summary missing gradient");
    }

    #[test]
    fn forced_selection_leaves_other_candidates_untouched() {
        let (store, blk) = block(22, AttentionSource::Query, 1e-3, 4);
        let mut g = Graph::new(&store, true);
        let feat = feat_input(&mut g, 1);
        let fq = g.tape.constant(vec![1, 8], vec![0.2; 8]);
        let (out, _) = blk.forward(&mut g, feat, Some(fq), Some(1)).unwrap();
        let loss = g.tape.mean_all(out);
        let grads = g.tape.backward(loss).unwrap();
        for (i, &c) in blk.candidates.iter().enumerate() {
            let id = g.bound_id(c).unwrap();
            if i == 1 {
                assert!(grads.get(id).is_some());
            } else {
                assert!(grads.get(id).is_none(), "candidate {i} should have no gradient");
            }
        }
    }

    #[test]
    fn learnable_mixing_ignores_the_query() {
        let (store, blk) = block(30, AttentionSource::Learnable, 1e-3, 4);
        let run = |fill: f64| {
            let mut g = Graph::new(&store, false);
            let feat = feat_input(&mut g, 2);
            let fq = g.tape.constant(vec![2, 8], vec![fill; 16]);
            let (out, alpha) = blk.forward(&mut g, feat, Some(fq), None).unwrap();
            (g.tape.data(out).to_vec(), g.tape.data(alpha).to_vec())
        };
        let (o1, a1) = run(0.0);
        let (o2, a2) = run(123.0);
        assert_eq!(o1, o2);
        assert_eq!(a1, a2);
        // Zero logits start uniform.
        for &v in &a1 {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn featmap_mixing_tracks_the_image_not_the_query() {
        let (store, blk) = block(31, AttentionSource::Featmap, 1e-3, 4);
        let mut g = Graph::new(&store, false);
        let feat = feat_input(&mut g, 1);
        let a1 = blk.alpha(&mut g, None, feat, 1, None).unwrap();
        let a1 = g.tape.data(a1).to_vec();

        let mut g2 = Graph::new(&store, false);
        let other = g2.tape.leaf(&Tensor::new(vec![1, 3, 6, 6], vec![0.9; 108]), false);
        let a2 = blk.alpha(&mut g2, None, other, 1, None).unwrap();
        let a2 = g2.tape.data(a2).to_vec();
        assert_ne!(a1, a2, "different images should mix differently");
    }

    #[test]
    fn mixing_weights_are_differentiable_for_learnable_source() {
        let (store, blk) = block(33, AttentionSource::Learnable, 1e-3, 3);
        let mut g = Graph::new(&store, true);
        let feat = feat_input(&mut g, 2);
        let (out, _) = blk.forward(&mut g, feat, None, None).unwrap();
        let loss = g.tape.mean_all(out);
        let grads = g.tape.backward(loss).unwrap();
        let logits_id = store.by_name("qcm.logits").unwrap();
        let bound = g.bound_id(logits_id).unwrap();
        let gl = grads.get(bound).expect("logits must receive gradient");
        // Softmax gradient rows sum to zero.
        let s: f64 = gl.iter().sum();
        assert!(s.abs() < 1e-12, "logit gradient sum {s}");
    }
}
