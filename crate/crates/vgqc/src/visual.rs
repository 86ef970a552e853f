//! Image backbone and visual transformer encoder.
//!
//! The backbone is a stride-2 stem (conv, norm, relu, 2x2 mean pool) followed
//! by four two-conv stages. The first conv of any stage can be a
//! query-conditioned block; the rest are static. Channel norms keep the
//! forward pass free of batch statistics.
//!
//! After a 1x1 projection, a fixed sine position code is added once, the map
//! is flattened to tokens, and a small encoder stack runs over them. An
//! optional learned summary token is prepended without a position term.

use rand_chacha::ChaCha8Rng;

use crate::layers::EncoderLayerP;
use crate::params::{fan_in_uniform, normal_init, Graph, NormP, ParamId, ParamStore};
use crate::qcm::{AttentionSource, QcmBlockP};
use crate::tensor::{Elem, TensorError, TensorId};

/// First conv of a stage: static kernel or query-conditioned block.
enum StageConv1 {
    Static(ParamId),
    Qcm(QcmBlockP),
}

pub struct StageP {
    conv1: StageConv1,
    norm1: NormP,
    conv2: ParamId,
    norm2: NormP,
    stride: usize,
}

pub struct BackboneP {
    stem_conv: ParamId,
    stem_norm: NormP,
    stages: Vec<StageP>,
}

/// Backbone configuration independent of the surrounding model.
pub struct BackboneSpec<'a> {
    pub stage_channels: &'a [usize],
    pub stage_strides: &'a [usize],
    /// 1-based stage numbers whose first conv is query-conditioned.
    pub qcm_stages: &'a [usize],
    pub kcount: usize,
    pub source: AttentionSource,
    pub c_q: usize,
    pub sigma: f64,
}

impl BackboneP {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: &BackboneSpec,
    ) -> Self {
        assert_eq!(spec.stage_channels.len(), 4, "backbone has four stages");
        assert_eq!(spec.stage_strides.len(), 4, "one stride per stage");
        let c1 = spec.stage_channels[0];
        let stem_conv = store.add(
            format!("{name}.stem.conv"),
            fan_in_uniform(rng, vec![c1, 3, 3, 3], 3 * 9),
        );
        let stem_norm = NormP::init(store, &format!("{name}.stem.norm"), c1);
        let mut stages = Vec::with_capacity(4);
        let mut cin = c1;
        for (i, (&cout, &stride)) in spec
            .stage_channels
            .iter()
            .zip(spec.stage_strides)
            .enumerate()
        {
            let sname = format!("{name}.stage{}", i + 1);
            let conv1 = if spec.qcm_stages.contains(&(i + 1)) {
                StageConv1::Qcm(QcmBlockP::init(
                    store,
                    rng,
                    &format!("{sname}.conv1"),
                    cin,
                    cout,
                    3,
                    spec.kcount,
                    spec.source,
                    spec.c_q,
                    spec.sigma,
                    stride,
                    1,
                ))
            } else {
                StageConv1::Static(store.add(
                    format!("{sname}.conv1"),
                    fan_in_uniform(rng, vec![cout, cin, 3, 3], cin * 9),
                ))
            };
            let norm1 = NormP::init(store, &format!("{sname}.norm1"), cout);
            let conv2 = store.add(
                format!("{sname}.conv2"),
                fan_in_uniform(rng, vec![cout, cout, 3, 3], cout * 9),
            );
            let norm2 = NormP::init(store, &format!("{sname}.norm2"), cout);
            stages.push(StageP {
                conv1,
                norm1,
                conv2,
                norm2,
                stride,
            });
            cin = cout;
        }
        BackboneP {
            stem_conv,
            stem_norm,
            stages,
        }
    }

    /// Spatial reduction factor from image to final map.
    pub fn downsample(&self) -> usize {
        4 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Stage numbers (1-based) that hold query-conditioned blocks.
    pub fn qcm_stage_ids(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.conv1, StageConv1::Qcm(_)))
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn qcm_block(&self, stage_id: usize) -> Option<&QcmBlockP> {
        match &self.stages.get(stage_id.checked_sub(1)?)?.conv1 {
            StageConv1::Qcm(b) => Some(b),
            StageConv1::Static(_) => None,
        }
    }

    /// Runs the backbone. `forced` pins one candidate at one stage.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        images: TensorId,
        f_query: Option<TensorId>,
        forced: Option<(usize, usize)>,
    ) -> Result<BackboneOut, TensorError> {
        let sc = g.p(self.stem_conv);
        let mut x = g.tape.conv2d(images, sc, 2, 1)?;
        x = self.affine_norm(g, x, self.stem_norm)?;
        x = g.tape.relu(x);
        x = g.tape.avg_pool2(x)?;

        let mut alphas = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let stage_id = i + 1;
            x = match &stage.conv1 {
                StageConv1::Static(k) => {
                    let kid = g.p(*k);
                    g.tape.conv2d(x, kid, stage.stride, 1)?
                }
                StageConv1::Qcm(blk) => {
                    let force_here = forced.and_then(|(s, c)| (s == stage_id).then_some(c));
                    let (out, alpha) = blk.forward(g, x, f_query, force_here)?;
                    alphas.push((stage_id, alpha));
                    out
                }
            };
            x = self.affine_norm(g, x, stage.norm1)?;
            x = g.tape.relu(x);
            let k2 = g.p(stage.conv2);
            x = g.tape.conv2d(x, k2, 1, 1)?;
            x = self.affine_norm(g, x, stage.norm2)?;
            x = g.tape.relu(x);
        }
        Ok(BackboneOut { map: x, alphas })
    }

    fn affine_norm<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: TensorId,
        norm: NormP,
    ) -> Result<TensorId, TensorError> {
        let gamma = g.p(norm.gamma);
        let beta = g.p(norm.beta);
        g.tape.channel_norm2d(x, gamma, beta, 1e-5)
    }
}

pub struct BackboneOut {
    /// Final feature map, [b, c4, h, w].
    pub map: TensorId,
    /// Mixing weights per query-conditioned stage, (stage id, [b, k]).
    pub alphas: Vec<(usize, TensorId)>,
}

/// Fixed sine position code for an h-by-w grid, laid out [h*w, c].
///
/// The first half of the channels encodes the row index, the second half the
/// column index. Within a half, channel pair t holds sin and cos of
/// pos / 10000^(2t / (c/2)). Row-major position order matches token order.
pub fn sine_position_code(h: usize, w: usize, c: usize) -> Vec<f64> {
    assert!(c % 4 == 0, "channel count must split into sin/cos pairs per axis");
    let half = c / 2;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * c;
            for (offset, pos) in [(0, y as f64), (half, x as f64)] {
                for t in 0..half / 2 {
                    let omega = 10000f64.powf(2.0 * t as f64 / half as f64);
                    out[row + offset + 2 * t] = (pos / omega).sin();
                    out[row + offset + 2 * t + 1] = (pos / omega).cos();
                }
            }
        }
    }
    out
}

pub struct VisualEncoderP {
    pub proj: ParamId,
    pub reg: Option<ParamId>,
    pub layers: Vec<EncoderLayerP>,
    pub norm_out: NormP,
    pub c_v: usize,
}

pub struct VisualOut {
    /// Token features, [b, n(+1), c_v]; summary token first when present.
    pub tokens: TensorId,
    /// Summary token feature [b, c_v] when a summary token is configured.
    pub reg_out: Option<TensorId>,
    /// Post-softmax attention per layer.
    pub attn: Vec<TensorId>,
}

impl VisualEncoderP {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_backbone: usize,
        c_v: usize,
        ffn: usize,
        heads: usize,
        n_layers: usize,
        with_reg: bool,
    ) -> Self {
        let proj = store.add(
            format!("{name}.proj"),
            fan_in_uniform(rng, vec![c_v, c_backbone, 1, 1], c_backbone),
        );
        let reg = with_reg.then(|| store.add(format!("{name}.reg"), normal_init(rng, vec![c_v], 0.02)));
        let layers = (0..n_layers)
            .map(|i| EncoderLayerP::init(store, rng, &format!("{name}.layer{i}"), c_v, ffn, heads))
            .collect();
        let norm_out = NormP::init(store, &format!("{name}.norm"), c_v);
        VisualEncoderP {
            proj,
            reg,
            layers,
            norm_out,
            c_v,
        }
    }

    /// Projects the backbone map, adds the position code, and runs the stack.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        map: TensorId,
    ) -> Result<VisualOut, TensorError> {
        let shape = g.tape.shape(map).to_vec();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let p = g.p(self.proj);
        let proj = g.tape.conv2d(map, p, 1, 0)?;
        let tokens = g.tape.chw_to_tokens(proj)?;
        let code: Vec<E> = sine_position_code(h, w, self.c_v)
            .into_iter()
            .map(E::from_f64)
            .collect();
        let pos = g.tape.constant(vec![h * w, self.c_v], code);
        let mut x = g.tape.add_pos(tokens, pos)?;

        if let Some(reg) = self.reg {
            let r = g.p(reg);
            let r = g.tape.reshape(r, vec![1, 1, self.c_v])?;
            let rows = vec![r; b];
            let reg_batch = g.tape.concat(0, &rows)?;
            x = g.tape.concat(1, &[reg_batch, x])?;
        }

        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(g, x, None)?;
            x = y;
            attn.push(a);
        }

        let t = g.tape.shape(x)[1];
        let flat = g.tape.reshape(x, vec![b * t, self.c_v])?;
        let gn = g.p(self.norm_out.gamma);
        let bn = g.p(self.norm_out.beta);
        let flat = g.tape.layer_norm(flat, gn, bn, 1e-5)?;
        x = g.tape.reshape(flat, vec![b, t, self.c_v])?;

        let reg_out = if self.reg.is_some() {
            let head = g.tape.slice_axis(x, 1, 0, 1)?;
            Some(g.tape.reshape(head, vec![b, self.c_v])?)
        } else {
            None
        };
        Ok(VisualOut {
            tokens: x,
            reg_out,
            attn,
        })
    }
}
