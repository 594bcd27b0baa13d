//! Open-ended task decoder.
//!
//! A small causal transformer over the extended vocabulary. The context is
//! the embedded instruction with the M image tokens spliced in at the
//! `<image>` placeholder (each as a projected embedding plus a positional
//! encoding of its location). Perception outputs decode in parallel: every
//! anchor image token gets one group of per-slot query embeddings
//! (class, x1, y1, …), a single forward pass yields per-slot logits, and
//! slot masks confine class slots to the instruction's category set plus a
//! no-object entry and coordinate slots to the location-token block.
//! Coordinates are offsets relative to the anchor token's location. Text
//! outputs decode greedily token by token. Attention projections carry
//! optional low-rank adapters so the base weights can stay frozen.
//!
//! Slot groups attend to the context and to themselves, never to other
//! groups, which makes the decoded set independent of group order.

use ndarray::Array2;
use rand::Rng;

use crate::coord::{dequantize, Anchor};
use crate::error::{Error, Result};
use crate::instruction::{CategorySet, OutputFormatSpec, SlotKind};
use crate::nn::{
    causal_mask, sinusoidal_posenc_1d, sinusoidal_posenc_2d, Bound, LayerNorm, Linear,
    ParamId, ParamStore, Tape, TransformerLayer, Var,
};
use crate::scalar::Scalar;
use crate::tokenizer::ImageToken;
use crate::vocab::Vocab;

/// Largest per-object point count the slot-query table supports.
pub const MAX_POINTS: usize = 24;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Low-rank adapter rank for the attention projections.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_seq_len: usize,
    /// Slot groups decoded per perception call; at most the image-token
    /// count M.
    pub object_slots: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 4,
            heads: 4,
            width: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            max_seq_len: 512,
            object_slots: 100,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Model("decoder needs at least one layer".into()));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::Model(format!(
                "decoder width {} must be a positive multiple of 4",
                self.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Model(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.width {
            return Err(Error::Model(format!(
                "adapter rank {} outside 1..={}",
                self.lora_rank, self.width
            )));
        }
        if self.max_seq_len == 0 || self.object_slots == 0 {
            return Err(Error::Model(
                "sequence length and object slots must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Image-token inputs for one context: the tokenizer's embedding rows (so
/// gradients reach it) plus the materialized token values.
pub struct ImageSplice<'a> {
    /// M×D_tok embedding rows on the same tape.
    pub embed: Var,
    pub tokens: &'a [ImageToken],
}

/// One assembled and encoded context. Only meaningful together with the
/// `Bound` that produced it.
#[derive(Debug)]
pub struct DecoderContext {
    /// Assembled input rows, length×width.
    pub rows: Var,
    /// Per-layer normalized hidden states; keys/values for later extension.
    pub normed: Vec<Var>,
    /// Final-norm hidden states.
    pub hidden: Var,
    pub len: usize,
    /// Projected image-token rows (M×width), present when tokens were spliced.
    pub image_rows: Option<Var>,
    /// Image-token locations l_i, one per spliced token.
    pub anchors: Vec<(f64, f64)>,
    pub objectness: Vec<f64>,
    /// The encoded instruction ids, placeholder included.
    pub ids: Vec<usize>,
}

/// One decoded perception tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTuple {
    /// Index of the image token anchoring this tuple.
    pub token_index: usize,
    /// Distribution over the category set plus trailing no-object entry.
    pub class_probs: Vec<f64>,
    /// Per point, the (x, y) distributions over the location-token block.
    pub point_probs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Arg-max class: an index into the category set, or `class_probs.len()
    /// − 1` for no-object.
    pub class_index: usize,
    /// Dequantized points in pixels.
    pub points: Vec<(f64, f64)>,
    /// Arg-max class probability times the anchor's objectness.
    pub confidence: f64,
}

/// Raw result of a parallel perception decode.
pub struct PerceptionDecode {
    /// (groups·arity)×vocab masked logits; blocked entries are −∞.
    pub logits: Var,
    pub groups: usize,
    pub format: OutputFormatSpec,
    pub anchors: Vec<(f64, f64)>,
    pub objectness: Vec<f64>,
    /// Vocabulary ids admissible in class slots; the last entry is the
    /// per-call no-object class.
    pub class_ids: Vec<usize>,
    pub loc_start: usize,
    pub range: i64,
}

impl PerceptionDecode {
    pub fn arity(&self) -> usize {
        self.format.arity()
    }

    /// Index of the no-object entry within a tuple's `class_probs`.
    pub fn no_object_index(&self) -> usize {
        self.class_ids.len() - 1
    }

    /// Logits row of `slot` within group `g`.
    pub fn row(&self, g: usize, slot: usize) -> usize {
        g * self.arity() + slot
    }

    /// Materializes the prediction tuples from the logits.
    pub fn tuples<F: Scalar>(
        &self,
        tape: &Tape<F>,
        image_size: (usize, usize),
    ) -> Result<Vec<PredictionTuple>> {
        let v = tape.value(self.logits);
        let a = self.arity();
        let n = self.format.point_count;
        let loc_ids: Vec<usize> =
            (self.loc_start..self.loc_start + 2 * self.range as usize + 1).collect();
        let mut out = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let mut class_probs = Vec::new();
            let mut xrow = vec![usize::MAX; n];
            let mut yrow = vec![usize::MAX; n];
            for (si, slot) in self.format.slots.iter().enumerate() {
                match *slot {
                    SlotKind::Class => {
                        class_probs = softmax_support(&v, g * a + si, &self.class_ids);
                    }
                    SlotKind::X(i) => xrow[i] = g * a + si,
                    SlotKind::Y(i) => yrow[i] = g * a + si,
                    SlotKind::Bos => {
                        return Err(Error::Model("text slot in perception format".into()))
                    }
                }
            }
            let (class_index, class_p) = argmax(&class_probs);
            let anchor = Anchor::new(self.anchors[g].0, self.anchors[g].1)?;
            let mut points = Vec::with_capacity(n);
            let mut point_probs = Vec::with_capacity(n);
            for i in 0..n {
                let xp = softmax_support(&v, xrow[i], &loc_ids);
                let yp = softmax_support(&v, yrow[i], &loc_ids);
                let (xi, _) = argmax(&xp);
                let (yi, _) = argmax(&yp);
                let off = (xi as i64 - self.range, yi as i64 - self.range);
                let p = dequantize::<f64>(off, anchor, image_size, self.range)?;
                points.push(p);
                point_probs.push((xp, yp));
            }
            out.push(PredictionTuple {
                token_index: g,
                class_probs,
                point_probs,
                class_index,
                points,
                confidence: class_p * self.objectness[g],
            });
        }
        Ok(out)
    }
}

/// Stable softmax of `row` restricted to `ids`, in f64.
fn softmax_support<F: Scalar>(values: &Array2<F>, row: usize, ids: &[usize]) -> Vec<f64> {
    let logits: Vec<f64> = ids.iter().map(|&id| values[(row, id)].as_f64()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// First maximizing index and its value.
fn argmax(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs[best])
}

/// The decoder's layers; weights live under the `dec.` prefix. The
/// vocabulary embedding doubles as the output head (tied weights) and is
/// split into a base part (specials + lexicon) and an extension part
/// (location + class tokens) so the two can be frozen independently.
#[derive(Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    embed_base: ParamId,
    embed_ext: ParamId,
    img_proj: Linear,
    slots: ParamId,
    layers: Vec<TransformerLayer>,
    ln: LayerNorm,
    vocab_len: usize,
    num_class_tokens: usize,
    class_start: usize,
    loc_start: usize,
    range: i64,
    bos_id: usize,
    eos_id: usize,
    image_id: usize,
    token_dim: usize,
}

impl Decoder {
    /// `token_dim` is the width of the image-token embeddings to project.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        config: &DecoderConfig,
        vocab: &Vocab,
        token_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let base_rows = vocab.location_block().start;
        let ext_rows = vocab.len() - base_rows;
        let embed_base = store.param(
            "dec.embed.base",
            crate::nn::layers::normal_init(rng, base_rows, d, 0.02),
        );
        let embed_ext = store.param(
            "dec.embed.ext",
            crate::nn::layers::normal_init(rng, ext_rows, d, 0.02),
        );
        let img_proj = Linear::new(store, rng, "dec.img_proj", token_dim, d, true);
        let slots = store.param(
            "dec.slots",
            crate::nn::layers::normal_init(rng, 1 + 2 * MAX_POINTS, d, 0.02),
        );
        let layers = (0..config.layers)
            .map(|i| TransformerLayer::new(store, rng, &format!("dec.layer{i}"), d, config.heads))
            .collect();
        let ln = LayerNorm::new(store, "dec.ln", d);
        Ok(Decoder {
            config: config.clone(),
            embed_base,
            embed_ext,
            img_proj,
            slots,
            layers,
            ln,
            vocab_len: vocab.len(),
            num_class_tokens: vocab.num_class_tokens(),
            class_start: vocab.class_block().start,
            loc_start: vocab.location_block().start,
            range: vocab.range(),
            bos_id: vocab.bos_id(),
            eos_id: vocab.eos_id(),
            image_id: vocab.image_id(),
            token_dim,
        })
    }

    /// Attaches low-rank adapters to every attention projection.
    pub fn add_lora<F: Scalar, R: Rng>(&mut self, store: &mut ParamStore<F>, rng: &mut R) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.attn.add_lora(
                store,
                rng,
                &format!("dec.layer{i}.attn"),
                self.config.lora_rank,
                self.config.lora_alpha,
            );
        }
    }

    /// Freezes the language core: everything under `dec.` except adapters,
    /// the extended-vocabulary embedding rows, the slot queries, and the
    /// image projection. Returns the number of parameters left trainable.
    pub fn freeze_base<F: Scalar>(&self, store: &mut ParamStore<F>) -> usize {
        store.set_trainable_prefix("dec.", false);
        let mut n = 0;
        n += store.set_trainable_containing(".lora_", true);
        n += store.set_trainable_prefix("dec.embed.ext", true);
        n += store.set_trainable_prefix("dec.slots", true);
        n += store.set_trainable_prefix("dec.img_proj", true);
        n
    }

    /// The full tied vocabulary table as one tape node.
    fn vocab_table<F: Scalar>(&self, bound: &mut Bound<F>) -> Var {
        let base = bound.var(self.embed_base);
        let ext = bound.var(self.embed_ext);
        bound.tape.concat_rows(&[base, ext])
    }

    /// Embeds the instruction, splices image tokens at `<image>`, and runs
    /// the causal layers once, caching per-layer keys for later extension.
    pub fn build_context<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        vocab: &Vocab,
        text: &str,
        image: Option<ImageSplice<'_>>,
    ) -> Result<DecoderContext> {
        let ids = vocab.encode(text);
        let placeholders = ids.iter().filter(|&&id| id == self.image_id).count();
        match (&image, placeholders) {
            (Some(_), 1) | (None, 0) => {}
            (None, _) => {
                return Err(Error::Model(
                    "instruction has an <image> placeholder but no image tokens were given".into(),
                ))
            }
            (Some(_), 0) => {
                return Err(Error::Model(
                    "image tokens given but the instruction has no <image> placeholder".into(),
                ))
            }
            (Some(_), n) => {
                return Err(Error::Model(format!(
                    "instruction has {n} <image> placeholders, expected one"
                )))
            }
        }

        let d = self.config.width;
        let table = self.vocab_table(bound);
        let m = image.as_ref().map_or(0, |s| s.tokens.len());
        let text_len = ids.len() - usize::from(image.is_some());
        let total = text_len + m;
        if total == 0 {
            return Err(Error::Model("empty context".into()));
        }
        if total > self.config.max_seq_len {
            return Err(Error::Model(format!(
                "context length {total} exceeds the maximum {}",
                self.config.max_seq_len
            )));
        }

        let pe_all = sinusoidal_posenc_1d::<F>(total, d);
        let mut parts: Vec<Var> = Vec::new();
        let push_text =
            |bound: &mut Bound<F>, parts: &mut Vec<Var>, seg: &[usize], at: usize| {
                if seg.is_empty() {
                    return;
                }
                let emb = bound.tape.gather_rows(table, seg);
                let pe = bound
                    .tape
                    .leaf(pe_all.slice(ndarray::s![at..at + seg.len(), ..]).to_owned());
                parts.push(bound.tape.add(emb, pe));
            };

        let mut image_rows = None;
        let mut anchors = Vec::new();
        let mut objectness = Vec::new();
        match image {
            None => push_text(bound, &mut parts, &ids, 0),
            Some(splice) => {
                if m == 0 {
                    return Err(Error::Model("empty image-token list".into()));
                }
                if bound.tape.value(splice.embed).dim() != (m, self.token_dim) {
                    return Err(Error::Model(format!(
                        "image embedding shape {:?} does not match {m} tokens of width {}",
                        bound.tape.value(splice.embed).dim(),
                        self.token_dim
                    )));
                }
                let at = ids.iter().position(|&id| id == self.image_id).unwrap();
                push_text(bound, &mut parts, &ids[..at], 0);
                let proj = self.img_proj.apply(bound, splice.embed);
                anchors = splice.tokens.iter().map(|t| t.location).collect();
                objectness = splice.tokens.iter().map(|t| t.objectness).collect();
                // The location encoding enters as a constant: position
                // signals flow to the decoder, not gradients back into the
                // location head.
                let pe2 = bound.tape.leaf(sinusoidal_posenc_2d(&anchors, d));
                let rows = bound.tape.add(proj, pe2);
                parts.push(rows);
                image_rows = Some(rows);
                push_text(bound, &mut parts, &ids[at + 1..], at + m);
            }
        }
        let rows = if parts.len() == 1 {
            parts[0]
        } else {
            bound.tape.concat_rows(&parts)
        };

        let mask = causal_mask::<F>(total);
        let mut x = rows;
        let mut normed = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = layer.ln1.apply(bound, x);
            normed.push(n);
            let a = layer.attn.apply(bound, n, n, Some(&mask));
            x = bound.tape.add(x, a);
            let n2 = layer.ln2.apply(bound, x);
            let f = layer.ff.apply(bound, n2);
            x = bound.tape.add(x, f);
        }
        let hidden = self.ln.apply(bound, x);
        Ok(DecoderContext {
            rows,
            normed,
            hidden,
            len: total,
            image_rows,
            anchors,
            objectness,
            ids,
        })
    }

    /// Runs `t` fresh rows through the layers against the cached context.
    /// `causal` restricts row i to context + extension rows ≤ i; otherwise
    /// the extension attends to context plus all of itself.
    fn extend<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        ctx: &DecoderContext,
        x0: Var,
        t: usize,
        causal: bool,
    ) -> Var {
        let l = ctx.len;
        let mask = causal.then(|| {
            Array2::from_shape_fn((t, l + t), |(i, j)| {
                if j < l || j - l <= i {
                    F::zero()
                } else {
                    F::neg_infinity()
                }
            })
        });
        let mut x = x0;
        for (li, layer) in self.layers.iter().enumerate() {
            let qn = layer.ln1.apply(bound, x);
            let kv = bound.tape.concat_rows(&[ctx.normed[li], qn]);
            let a = layer.attn.apply(bound, qn, kv, mask.as_ref());
            x = bound.tape.add(x, a);
            let n2 = layer.ln2.apply(bound, x);
            let f = layer.ff.apply(bound, n2);
            x = bound.tape.add(x, f);
        }
        self.ln.apply(bound, x)
    }

    /// Parallel set decoding: one slot group per anchor image token, shared
    /// slot-query embeddings, one forward pass, masked per-slot logits.
    pub fn decode_perception<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        ctx: &DecoderContext,
        category_set: &CategorySet,
        format: &OutputFormatSpec,
        object_slots: usize,
    ) -> Result<PerceptionDecode> {
        if !format.is_perception() {
            return Err(Error::Model("not a perception output format".into()));
        }
        let n = format.point_count;
        if n > MAX_POINTS {
            return Err(Error::Model(format!(
                "point count {n} exceeds the supported {MAX_POINTS}"
            )));
        }
        let image_rows = ctx
            .image_rows
            .ok_or_else(|| Error::Model("perception decoding needs image tokens".into()))?;
        if object_slots == 0 || object_slots > ctx.anchors.len() {
            return Err(Error::Model(format!(
                "object slots {object_slots} outside 1..={} image tokens",
                ctx.anchors.len()
            )));
        }
        let k = category_set.len();
        if k + 1 > self.num_class_tokens {
            return Err(Error::Model(format!(
                "category set of {k} entries plus no-object needs {} class tokens, vocabulary has {}",
                k + 1,
                self.num_class_tokens
            )));
        }

        let slot_idx: Vec<usize> = format
            .slots
            .iter()
            .map(|s| match *s {
                SlotKind::Class => Ok(0),
                SlotKind::X(i) => Ok(1 + i),
                SlotKind::Y(i) => Ok(1 + MAX_POINTS + i),
                SlotKind::Bos => Err(Error::Model("text slot in perception format".into())),
            })
            .collect::<Result<_>>()?;
        let a = slot_idx.len();
        let slots_var = bound.var(self.slots);
        let table = self.vocab_table(bound);
        let head = bound.tape.transpose(table);

        let mut group_logits = Vec::with_capacity(object_slots);
        for g in 0..object_slots {
            let anchor_row = bound.tape.slice_rows(image_rows, g, 1);
            let base = bound.tape.gather_rows(slots_var, &slot_idx);
            let x0 = bound.tape.add_row(base, anchor_row);
            let h = self.extend(bound, ctx, x0, a, false);
            group_logits.push(bound.tape.matmul(h, head));
        }
        let raw = bound.tape.concat_rows(&group_logits);

        let class_ids: Vec<usize> = (0..=k).map(|i| self.class_start + i).collect();
        let mut mask = Array2::from_elem((object_slots * a, self.vocab_len), F::neg_infinity());
        for g in 0..object_slots {
            for (si, slot) in format.slots.iter().enumerate() {
                let r = g * a + si;
                match *slot {
                    SlotKind::Class => {
                        for &id in &class_ids {
                            mask[(r, id)] = F::zero();
                        }
                    }
                    SlotKind::X(_) | SlotKind::Y(_) => {
                        for id in self.loc_start..self.loc_start + 2 * self.range as usize + 1 {
                            mask[(r, id)] = F::zero();
                        }
                    }
                    SlotKind::Bos => unreachable!("rejected above"),
                }
            }
        }
        let mask_var = bound.tape.leaf(mask);
        let logits = bound.tape.add(raw, mask_var);
        Ok(PerceptionDecode {
            logits,
            groups: object_slots,
            format: format.clone(),
            anchors: ctx.anchors[..object_slots].to_vec(),
            objectness: ctx.objectness[..object_slots].to_vec(),
            class_ids,
            loc_start: self.loc_start,
            range: self.range,
        })
    }

    /// Logits for one teacher-forced text continuation: row `t` predicts
    /// `targets[t]` given the context, BOS, and `targets[..t]`.
    pub fn text_logits<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        ctx: &DecoderContext,
        targets: &[usize],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Model("empty text target".into()));
        }
        let mut input = Vec::with_capacity(targets.len());
        input.push(self.bos_id);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        self.text_forward(bound, ctx, &input)
    }

    fn text_forward<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        ctx: &DecoderContext,
        input_ids: &[usize],
    ) -> Result<Var> {
        let t = input_ids.len();
        if ctx.len + t > self.config.max_seq_len {
            return Err(Error::Model(format!(
                "context length {} exceeds the maximum {}",
                ctx.len + t,
                self.config.max_seq_len
            )));
        }
        let table = self.vocab_table(bound);
        let emb = bound.tape.gather_rows(table, input_ids);
        let pe_all = sinusoidal_posenc_1d::<F>(ctx.len + t, self.config.width);
        let pe = bound
            .tape
            .leaf(pe_all.slice(ndarray::s![ctx.len.., ..]).to_owned());
        let x0 = bound.tape.add(emb, pe);
        let h = self.extend(bound, ctx, x0, t, true);
        let head = bound.tape.transpose(table);
        Ok(bound.tape.matmul(h, head))
    }

    /// Greedy decoding from BOS until EOS, `max_len` tokens, or the length
    /// limit; returns the emitted ids without BOS/EOS.
    pub fn decode_text<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        ctx: &DecoderContext,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Model("text decoding needs max_len >= 1".into()));
        }
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..max_len {
            let mut input = Vec::with_capacity(out.len() + 1);
            input.push(self.bos_id);
            input.extend_from_slice(&out);
            if ctx.len + input.len() > self.config.max_seq_len {
                break;
            }
            let logits = self.text_forward(bound, ctx, &input)?;
            let v = bound.tape.value(logits);
            let last = v.nrows() - 1;
            let mut best = 0;
            for c in 1..v.ncols() {
                if v[(last, c)] > v[(last, best)] {
                    best = c;
                }
            }
            if best == self.eos_id {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }
}
