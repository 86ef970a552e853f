//! Model configuration and end-to-end assembly.
//!
//! Two pipeline variants share every component except the last hop into the
//! head: with fusion, a cross-modal stack produces the summary feature; without
//! it, the visual encoder carries its own summary token straight to the head.
//! A third shape, the static baseline, is the fusion variant with no
//! query-conditioned stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VgqcError};
use crate::fusion::{FusionP, HeadP};
use crate::params::{Graph, ParamStore};
use crate::qcm::AttentionSource;
use crate::tensor::{Elem, Tensor, TensorError, TensorId};
use crate::text::{TextEncoderP, Vocab};
use crate::visual::{BackboneP, BackboneSpec, VisualEncoderP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Fusion,
    NoFusion,
}

/// Everything needed to rebuild a model: stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    /// 1-based stages whose first conv is query-conditioned; empty = static
    /// baseline.
    pub qcm_stages: Vec<usize>,
    pub kcount: usize,
    pub attention_source: AttentionSource,
    /// Candidate kernel perturbation scale at init.
    pub sigma: f64,
    pub c_q: usize,
    pub c_v: usize,
    pub c_r: usize,
    pub text_layers: usize,
    pub enc_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub pipeline: Pipeline,
    /// Vocabulary words (specials excluded), id order.
    pub vocab_words: Vec<String>,
}

impl ModelConfig {
    /// Desk-scale defaults; trains on one CPU core in minutes.
    pub fn toy(vocab_words: Vec<String>) -> Self {
        ModelConfig {
            image_size: 128,
            stage_channels: [8, 16, 32, 64],
            stage_strides: [1, 2, 2, 2],
            qcm_stages: vec![1, 2, 3, 4],
            kcount: 5,
            attention_source: AttentionSource::Query,
            sigma: 1e-3,
            c_q: 64,
            c_v: 64,
            c_r: 64,
            text_layers: 2,
            enc_layers: 2,
            fusion_layers: 2,
            heads: 4,
            ffn_mult: 2,
            max_len: 12,
            pipeline: Pipeline::Fusion,
            vocab_words,
        }
    }

    /// Published-scale hyperparameters, kept for provenance; far too large to
    /// train here.
    pub fn paper(vocab_words: Vec<String>) -> Self {
        ModelConfig {
            image_size: 640,
            stage_channels: [64, 128, 256, 512],
            stage_strides: [1, 2, 2, 2],
            qcm_stages: vec![1, 2, 3, 4],
            kcount: 5,
            attention_source: AttentionSource::Query,
            sigma: 1e-3,
            c_q: 768,
            c_v: 256,
            c_r: 256,
            text_layers: 2,
            enc_layers: 6,
            fusion_layers: 6,
            heads: 8,
            ffn_mult: 8,
            max_len: 12,
            pipeline: Pipeline::Fusion,
            vocab_words,
        }
    }

    pub fn downsample(&self) -> usize {
        4 * self.stage_strides.iter().product::<usize>()
    }

    /// Visual token count after the backbone.
    pub fn n_visual(&self) -> usize {
        let side = self.image_size / self.downsample();
        side * side
    }

    /// Text slots entering fusion: everything between [CLS] and the frame end.
    pub fn n_text_slots(&self) -> usize {
        self.max_len - 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(VgqcError::validation(msg));
        let ds = self.downsample();
        if self.image_size == 0 || self.image_size % ds != 0 {
            return fail(format!(
                "image size {} must be a positive multiple of the downsample factor {ds}",
                self.image_size
            ));
        }
        if self.n_visual() < 4 {
            return fail(format!(
                "final feature map {}x{} is too small; need at least 2x2",
                self.image_size / ds,
                self.image_size / ds
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stage_strides.iter().any(|&s| s == 0)
        {
            return fail("stage channels and strides must be positive".into());
        }
        let mut sorted = self.qcm_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.qcm_stages.len() || self.qcm_stages != sorted {
            return fail("qcm stages must be sorted and unique".into());
        }
        if self.qcm_stages.iter().any(|&s| !(1..=4).contains(&s)) {
            return fail("qcm stages must lie in 1..=4".into());
        }
        if self.kcount == 0 {
            return fail("need at least one candidate kernel".into());
        }
        if self.c_v % 4 != 0 {
            return fail(format!("c_v {} must be divisible by 4", self.c_v));
        }
        for (name, c) in [("c_q", self.c_q), ("c_v", self.c_v), ("c_r", self.c_r)] {
            if c == 0 || c % self.heads != 0 {
                return fail(format!("{name} {c} must be a positive multiple of heads {}", self.heads));
            }
        }
        if self.max_len < 3 {
            return fail("max_len must fit [CLS], one word, and [SEP]".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        if self.pipeline == Pipeline::Fusion && self.fusion_layers == 0 {
            return fail("fusion pipeline needs at least one fusion layer; use the nofusion pipeline instead".into());
        }
        if self.vocab_words.is_empty() {
            return fail("vocabulary has no words".into());
        }
        Ok(())
    }
}

pub struct Model<E: Elem> {
    pub store: ParamStore<E>,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub text: TextEncoderP,
    pub backbone: BackboneP,
    pub venc: VisualEncoderP,
    pub fusion: Option<FusionP>,
    pub head: HeadP,
}

/// Builds all parameters from the seed, in a fixed creation order.
pub fn build_model<E: Elem>(config: &ModelConfig, seed: u64) -> Result<Model<E>> {
    config.validate()?;
    let vocab = Vocab::new(&config.vocab_words);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let text = TextEncoderP::init(
        &mut store,
        &mut rng,
        "text",
        vocab.len(),
        config.max_len,
        config.c_q,
        config.c_q * config.ffn_mult,
        config.heads,
        config.text_layers,
    );
    let backbone = BackboneP::init(
        &mut store,
        &mut rng,
        "backbone",
        &BackboneSpec {
            stage_channels: &config.stage_channels,
            stage_strides: &config.stage_strides,
            qcm_stages: &config.qcm_stages,
            kcount: config.kcount,
            source: config.attention_source,
            c_q: config.c_q,
            sigma: config.sigma,
        },
    );
    let venc = VisualEncoderP::init(
        &mut store,
        &mut rng,
        "venc",
        config.stage_channels[3],
        config.c_v,
        config.c_v * config.ffn_mult,
        config.heads,
        config.enc_layers,
        config.pipeline == Pipeline::NoFusion,
    );
    let fusion = (config.pipeline == Pipeline::Fusion).then(|| {
        FusionP::init(
            &mut store,
            &mut rng,
            "fusion",
            config.c_v,
            config.c_q,
            config.c_r,
            config.c_r * config.ffn_mult,
            config.heads,
            config.fusion_layers,
            config.n_visual(),
            config.n_text_slots(),
        )
    });
    let head_width = match config.pipeline {
        Pipeline::Fusion => config.c_r,
        Pipeline::NoFusion => config.c_v,
    };
    let head = HeadP::init(&mut store, &mut rng, "head", head_width);

    Ok(Model {
        store,
        config: config.clone(),
        vocab,
        text,
        backbone,
        venc,
        fusion,
        head,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    /// Return intermediate tensors for analysis. Never changes the numbers.
    pub collect: bool,
    /// Pin one candidate at one stage: (stage id, candidate index).
    pub forced: Option<(usize, usize)>,
}

pub struct Intermediates {
    /// Mixing weights per query-conditioned stage, (stage id, [b, k]).
    pub alphas: Vec<(usize, TensorId)>,
    /// Final backbone feature map, [b, c4, h, w].
    pub feat_map: TensorId,
    /// Query summary, [b, c_q].
    pub f_query: TensorId,
    pub text_attn: Vec<TensorId>,
    pub visual_attn: Vec<TensorId>,
    pub fusion_attn: Vec<TensorId>,
}

pub struct ForwardOut {
    /// Predicted boxes, [b, 4], cx cy w h in [0, 1].
    pub pred: TensorId,
    pub inter: Option<Intermediates>,
}

/// Runs one batch end to end. `token_ids` is `b` sequences of `max_len` ids.
pub fn forward_batch<E: Elem>(
    model: &Model<E>,
    g: &mut Graph<E>,
    images: &Tensor<E>,
    token_ids: &[usize],
    opts: &ForwardOpts,
) -> Result<ForwardOut> {
    let cfg = &model.config;
    let s = cfg.image_size;
    let ishape = images.shape();
    if ishape.len() != 4 || ishape[1] != 3 || ishape[2] != s || ishape[3] != s {
        return Err(VgqcError::validation(format!(
            "images must be [b, 3, {s}, {s}], got {ishape:?}"
        )));
    }
    let b = ishape[0];
    if token_ids.len() != b * cfg.max_len {
        return Err(VgqcError::validation(format!(
            "token ids: expected {} x {}, got {}",
            b,
            cfg.max_len,
            token_ids.len()
        )));
    }
    if let Some((stage, cand)) = opts.forced {
        let block = model
            .backbone
            .qcm_block(stage)
            .ok_or_else(|| VgqcError::validation(format!("stage {stage} has no conditioned block")))?;
        if cand >= block.kcount() {
            return Err(VgqcError::validation(format!(
                "candidate {cand} out of range; stage {stage} has {}",
                block.kcount()
            )));
        }
    }

    let out: std::result::Result<ForwardOut, TensorError> = (|| {
        let img = g.tape.leaf(images, false);
        let text_out = model.text.forward(g, token_ids)?;
        let bb = model
            .backbone
            .forward(g, img, Some(text_out.f_query), opts.forced)?;
        let vis = model.venc.forward(g, bb.map)?;

        let (reg_feat, fusion_attn) = match &model.fusion {
            Some(fusion) => {
                let slots = g
                    .tape
                    .slice_axis(text_out.tokens, 1, 1, cfg.n_text_slots())?;
                let mut slot_mask = Vec::with_capacity(b * cfg.n_text_slots());
                for bi in 0..b {
                    let row = &text_out.word_mask[bi * cfg.max_len..(bi + 1) * cfg.max_len];
                    slot_mask.extend_from_slice(&row[1..cfg.max_len - 1]);
                }
                let fo = fusion.forward(g, vis.tokens, slots, &slot_mask)?;
                (fo.reg_out, fo.attn)
            }
            None => (
                vis.reg_out.expect("nofusion pipeline builds a summary token"),
                Vec::new(),
            ),
        };
        let pred = model.head.forward(g, reg_feat)?;

        let inter = opts.collect.then_some(Intermediates {
            alphas: bb.alphas,
            feat_map: bb.map,
            f_query: text_out.f_query,
            text_attn: text_out.attn,
            visual_attn: vis.attn,
            fusion_attn,
        });
        Ok(ForwardOut { pred, inter })
    })();
    out.map_err(VgqcError::from)
}
