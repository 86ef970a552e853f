//! Query tokenizer and text encoder.
//!
//! Token ids are dense: four fixed specials first, then the vocabulary words
//! in sorted order. Every query is framed as `[CLS] words [SEP]` and padded to
//! a fixed length; padding is masked out of attention, so the features at real
//! positions are independent of the pad count.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VgqcError};
use crate::layers::EncoderLayerP;
use crate::params::{Graph, NormP, ParamId, ParamStore, normal_init};
use crate::tensor::{Elem, TensorError, TensorId};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Fixed word-id table. Ids are dense in `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Builds from a word list; sorts and deduplicates so the id assignment
    /// is independent of input order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        words.sort_unstable();
        words.dedup();
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a word; unknown words map to [UNK].
    pub fn id(&self, word: &str) -> usize {
        match self.words.binary_search_by(|w| w.as_str().cmp(word)) {
            Ok(i) => SPECIALS.len() + i,
            Err(_) => UNK,
        }
    }

    pub fn is_known(&self, word: &str) -> bool {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).is_ok()
    }

    pub fn token_text(&self, id: usize) -> &str {
        if id < SPECIALS.len() {
            SPECIALS[id]
        } else {
            &self.words[id - SPECIALS.len()]
        }
    }

    /// Words carried by this vocabulary, in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token-to-id map, specials included; the manifest's `vocab` field.
    pub fn to_id_map(&self) -> std::collections::BTreeMap<String, usize> {
        let mut map = std::collections::BTreeMap::new();
        for (i, s) in SPECIALS.iter().enumerate() {
            map.insert(s.to_string(), i);
        }
        for (i, w) in self.words.iter().enumerate() {
            map.insert(w.clone(), SPECIALS.len() + i);
        }
        map
    }

    /// Rebuilds from a token-to-id map, checking the fixed special ids and
    /// that word ids are dense and sorted.
    pub fn from_id_map(map: &std::collections::BTreeMap<String, usize>) -> Result<Self> {
        let mut by_id: Vec<Option<&str>> = vec![None; map.len()];
        for (tok, &id) in map {
            if id >= map.len() {
                return Err(VgqcError::validation(format!(
                    "vocab id {id} out of range for {} tokens",
                    map.len()
                )));
            }
            if by_id[id].replace(tok).is_some() {
                return Err(VgqcError::validation(format!("duplicate vocab id {id}")));
            }
        }
        let tokens: Vec<&str> = by_id
            .into_iter()
            .map(|t| t.ok_or_else(|| VgqcError::validation("vocab ids are not dense")))
            .collect::<Result<_>>()?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(VgqcError::validation(
                "vocab must start with [CLS], [SEP], [PAD], [UNK]",
            ));
        }
        let words: Vec<String> = tokens[SPECIALS.len()..].iter().map(|s| s.to_string()).collect();
        if !words.windows(2).all(|w| w[0] < w[1]) {
            return Err(VgqcError::validation("vocab words must be sorted and unique"));
        }
        Ok(Vocab { words })
    }

    /// `[CLS] words [SEP]` padded to `max_len` with [PAD].
    pub fn tokenize(&self, query: &str, max_len: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = query.split_whitespace().collect();
        if words.is_empty() {
            return Err(VgqcError::validation("query has no words"));
        }
        if words.len() + 2 > max_len {
            return Err(VgqcError::validation(format!(
                "query has {} words; at most {} fit in {} positions",
                words.len(),
                max_len - 2,
                max_len
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(words.iter().map(|w| self.id(w)));
        ids.push(SEP);
        ids.resize(max_len, PAD);
        Ok(ids)
    }
}

/// Encoder outputs for one batch of token sequences.
pub struct TextOut {
    /// All token features, [b, max_len, c].
    pub tokens: TensorId,
    /// [CLS] feature, [b, c]; the query summary that conditions kernels.
    pub f_query: TensorId,
    /// Post-softmax attention per layer, [b, heads, t, t].
    pub attn: Vec<TensorId>,
    /// Per-position flags: true where the token is a vocabulary word.
    pub word_mask: Vec<bool>,
}

pub struct TextEncoderP {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayerP>,
    pub norm_out: NormP,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoderP {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        ffn: usize,
        heads: usize,
        n_layers: usize,
    ) -> Self {
        let embed = store.add(
            format!("{name}.embed"),
            normal_init(rng, vec![vocab_size, dim], 0.02),
        );
        let pos = store.add(
            format!("{name}.pos"),
            normal_init(rng, vec![max_len, dim], 0.02),
        );
        let layers = (0..n_layers)
            .map(|i| EncoderLayerP::init(store, rng, &format!("{name}.layer{i}"), dim, ffn, heads))
            .collect();
        let norm_out = NormP::init(store, &format!("{name}.norm"), dim);
        TextEncoderP {
            embed,
            pos,
            layers,
            norm_out,
            max_len,
            vocab_size,
        }
    }

    /// Encodes `b` sequences given as a flat `[b * max_len]` id slice.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        ids: &[usize],
    ) -> std::result::Result<TextOut, TensorError> {
        assert!(ids.len() % self.max_len == 0, "ids must be b * max_len");
        let b = ids.len() / self.max_len;
        assert!(ids.iter().all(|&i| i < self.vocab_size), "id out of range");

        let table = g.p(self.embed);
        let emb = g.tape.gather_rows(table, ids)?;
        let emb = g.tape.reshape(emb, vec![b, self.max_len, g.tape.shape(table)[1]])?;
        let pos = g.p(self.pos);
        let mut x = g.tape.add_pos(emb, pos)?;

        let key_mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(g, x, Some(&key_mask))?;
            x = y;
            attn.push(a);
        }

        let c = g.tape.shape(x)[2];
        let flat = g.tape.reshape(x, vec![b * self.max_len, c])?;
        let gn = g.p(self.norm_out.gamma);
        let bn = g.p(self.norm_out.beta);
        let flat = g.tape.layer_norm(flat, gn, bn, 1e-5)?;
        x = g.tape.reshape(flat, vec![b, self.max_len, c])?;

        let cls = g.tape.slice_axis(x, 1, 0, 1)?;
        let c = g.tape.shape(cls)[2];
        let f_query = g.tape.reshape(cls, vec![b, c])?;
        let word_mask = ids.iter().map(|&i| i >= SPECIALS.len()).collect();
        Ok(TextOut {
            tokens: x,
            f_query,
            attn,
            word_mask,
        })
    }
}
