//! Language-guided image tokenizer.
//!
//! A small convolutional pyramid produces visual features at four scales
//! (1/8 … 1/64 of the input); a bidirectional text encoder embeds the
//! instruction; per-scale cross-attention injects the text into the visual
//! features (visual rows are the attention queries); finally M learned
//! queries attend over the concatenated multi-scale map to produce M image
//! tokens, each an embedding, a location in [0,1]², and an objectness score.
//! Token count is independent of input resolution.
//!
//! Training uses a category-agnostic detection-style loss: Hungarian matching
//! between tokens and ground-truth object centers under a focal + L1 cost,
//! then focal classification over all tokens and L1 regression on matched
//! locations.
//!
//! An alternative extraction mode replaces the learned queries with a fixed
//! grid average-pool over the finest scale, for the tokenization ablation.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::hungarian;
use crate::nn::{
    sinusoidal_posenc_1d, sinusoidal_posenc_2d, Bound, Conv2d, Embedding, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamStore, Tape, TransformerLayer, Var,
};
use crate::scalar::Scalar;

/// Focal-loss weighting for the positive (object) class.
pub const FOCAL_ALPHA: f64 = 0.25;
/// Focal-loss focusing exponent.
pub const FOCAL_GAMMA: i32 = 2;
/// Weight of the L1 center-regression term in both cost and loss.
pub const LAMBDA_PT: f64 = 5.0;

/// How image tokens are extracted from the fused features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// M learned queries cross-attend over the multi-scale feature map.
    Query,
    /// Fixed-grid average pooling over the finest scale (ablation baseline).
    AveragePool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Number of image tokens M.
    pub m: usize,
    /// Embedding width D (multiple of 4 for positional encodings).
    pub d: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub query_layers: usize,
    pub mode: TokenizerMode,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            m: 100,
            d: 64,
            heads: 4,
            text_layers: 2,
            query_layers: 2,
            mode: TokenizerMode::Query,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Model("tokenizer needs at least one query".into()));
        }
        if self.d % 4 != 0 || self.d == 0 {
            return Err(Error::Model(format!(
                "embedding width {} must be a positive multiple of 4",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Model(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.text_layers == 0 || self.query_layers == 0 {
            return Err(Error::Model("encoder depths must be at least 1".into()));
        }
        Ok(())
    }
}

/// One extracted image token (values only; gradients flow through the
/// corresponding [`TokenizerOutput`] vars).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageToken {
    pub embedding: Vec<f64>,
    /// (x, y) normalized to [0, 1]².
    pub location: (f64, f64),
    /// Category-agnostic object probability in [0, 1].
    pub objectness: f64,
}

/// Tape handles for one tokenizer forward pass.
pub struct TokenizerOutput {
    /// M×D token embeddings.
    pub embed: Var,
    /// M×2 locations after the sigmoid head.
    pub loc: Var,
    /// M×1 raw objectness logits.
    pub obj_logit: Var,
    /// Number of tokens (= config M).
    pub m: usize,
}

impl TokenizerOutput {
    /// Materializes the tokens from the tape values.
    pub fn tokens<F: Scalar>(&self, tape: &Tape<F>) -> Vec<ImageToken> {
        let e = tape.value(self.embed);
        let l = tape.value(self.loc);
        let z = tape.value(self.obj_logit);
        (0..self.m)
            .map(|i| ImageToken {
                embedding: e.row(i).iter().map(|v| v.as_f64()).collect(),
                location: (l[(i, 0)].as_f64(), l[(i, 1)].as_f64()),
                objectness: sigmoid(z[(i, 0)].as_f64()),
            })
            .collect()
    }
}

#[derive(Debug)]
struct QueryLayer {
    ln_q: LayerNorm,
    cross: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: crate::nn::FeedForward,
}

/// The tokenizer's layers; weights live in the shared [`ParamStore`] under
/// the `tok.` prefix (`tok.backbone.`, `tok.text.`, `tok.neck.`, `tok.query.`).
#[derive(Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    stem: Vec<Conv2d>,
    down: Vec<Conv2d>,
    scale_embed: ParamId,
    text_embed: Embedding,
    text_encoder: Vec<TransformerLayer>,
    text_ln: LayerNorm,
    fusion: Vec<MultiHeadAttention>,
    queries: ParamId,
    query_layers: Vec<QueryLayer>,
    out_ln: LayerNorm,
    loc_head: Linear,
    obj_head: Linear,
}

impl Tokenizer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        config: &TokenizerConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let stem = vec![
            Conv2d::new(store, rng, "tok.backbone.stem1", 3, d, 3, 2, 1),
            Conv2d::new(store, rng, "tok.backbone.stem2", d, d, 3, 2, 1),
            Conv2d::new(store, rng, "tok.backbone.stem3", d, d, 3, 2, 1),
        ];
        let down = (0..3)
            .map(|i| Conv2d::new(store, rng, &format!("tok.backbone.down{i}"), d, d, 3, 2, 1))
            .collect();
        let scale_embed = store.param(
            "tok.neck.scale_embed",
            crate::nn::layers::normal_init(rng, 4, d, 0.02),
        );
        let text_embed = Embedding::new(store, rng, "tok.text.embed", vocab_size, d);
        let text_encoder = (0..config.text_layers)
            .map(|i| TransformerLayer::new(store, rng, &format!("tok.text.layer{i}"), d, config.heads))
            .collect();
        let text_ln = LayerNorm::new(store, "tok.text.ln", d);
        let fusion = (0..4)
            .map(|s| MultiHeadAttention::new(store, rng, &format!("tok.neck.fusion{s}"), d, config.heads))
            .collect();
        let queries = store.param(
            "tok.query.queries",
            crate::nn::layers::normal_init(rng, config.m, d, 0.02),
        );
        let query_layers = (0..config.query_layers)
            .map(|i| QueryLayer {
                ln_q: LayerNorm::new(store, &format!("tok.query.layer{i}.ln_q"), d),
                cross: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("tok.query.layer{i}.cross"),
                    d,
                    config.heads,
                ),
                ln_ff: LayerNorm::new(store, &format!("tok.query.layer{i}.ln_ff"), d),
                ff: crate::nn::FeedForward::new(
                    store,
                    rng,
                    &format!("tok.query.layer{i}.ff"),
                    d,
                    d * 4,
                ),
            })
            .collect();
        let out_ln = LayerNorm::new(store, "tok.query.out_ln", d);
        let loc_head = Linear::new(store, rng, "tok.query.loc_head", d, 2, true);
        let obj_head = Linear::new(store, rng, "tok.query.obj_head", d, 1, true);
        Ok(Tokenizer {
            config: config.clone(),
            stem,
            down,
            scale_embed,
            text_embed,
            text_encoder,
            text_ln,
            fusion,
            queries,
            query_layers,
            out_ln,
            loc_head,
            obj_head,
        })
    }

    /// Text features: one row per token id, after the bidirectional encoder.
    /// Empty input yields `None` (fusion then degrades to the identity).
    pub fn encode_text<F: Scalar>(&self, bound: &mut Bound<F>, ids: &[usize]) -> Option<Var> {
        if ids.is_empty() {
            return None;
        }
        let emb = self.text_embed.apply(bound, ids);
        let pe = bound
            .tape
            .leaf(sinusoidal_posenc_1d(ids.len(), self.config.d));
        let mut x = bound.tape.add(emb, pe);
        for layer in &self.text_encoder {
            x = layer.apply(bound, x, None);
        }
        Some(self.text_ln.apply(bound, x))
    }

    /// Injects text into one scale's features via cross-attention with a
    /// residual; with no text this is exactly the identity.
    pub fn fuse<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        scale: usize,
        features: Var,
        text: Option<Var>,
    ) -> Var {
        match text {
            None => features,
            Some(t) => {
                let a = self.fusion[scale].apply(bound, features, t, None);
                bound.tape.add(features, a)
            }
        }
    }

    /// Full forward pass over an (h·w)×3 image in [0,1] plus instruction
    /// token ids. Produces exactly M tokens regardless of resolution.
    pub fn forward<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        image: &Array2<F>,
        h: usize,
        w: usize,
        text_ids: &[usize],
    ) -> Result<TokenizerOutput> {
        if image.dim() != (h * w, 3) {
            return Err(Error::Model(format!(
                "image shape {:?} does not match {h}x{w}",
                image.dim()
            )));
        }
        if h < 64 || w < 64 {
            return Err(Error::Model(format!(
                "image {h}x{w} too small for a 4-scale pyramid"
            )));
        }
        let text = self.encode_text(bound, text_ids);

        // Backbone pyramid: 1/8, 1/16, 1/32, 1/64.
        let mut x = bound.tape.leaf(image.clone());
        let (mut ch, mut cw) = (h, w);
        for conv in &self.stem {
            let (y, nh, nw) = conv.apply(bound, x, ch, cw);
            x = bound.tape.relu(y);
            ch = nh;
            cw = nw;
        }
        let mut scales = vec![(x, ch, cw)];
        for conv in &self.down {
            let prev = *scales.last().unwrap();
            let (y, nh, nw) = conv.apply(bound, prev.0, prev.1, prev.2);
            let y = bound.tape.relu(y);
            scales.push((y, nh, nw));
        }

        // Fuse text per scale, then flatten with positional and scale
        // embeddings into one feature sequence.
        let se = bound.var(self.scale_embed);
        let mut parts = Vec::with_capacity(4);
        for (s, &(feat, sh, sw)) in scales.iter().enumerate() {
            let fused = self.fuse(bound, s, feat, text);
            let locs: Vec<(f64, f64)> = (0..sh * sw)
                .map(|i| {
                    let (y, x) = (i / sw, i % sw);
                    ((x as f64 + 0.5) / sw as f64, (y as f64 + 0.5) / sh as f64)
                })
                .collect();
            let pe = bound.tape.leaf(sinusoidal_posenc_2d(&locs, self.config.d));
            let with_pe = bound.tape.add(fused, pe);
            let row = bound.tape.slice_rows(se, s, 1);
            parts.push(bound.tape.add_row(with_pe, row));
        }
        let q = match self.config.mode {
            TokenizerMode::Query => {
                let memory = bound.tape.concat_rows(&parts);
                let mut q = bound.var(self.queries);
                for layer in &self.query_layers {
                    let qn = layer.ln_q.apply(bound, q);
                    let a = layer.cross.apply(bound, qn, memory, None);
                    q = bound.tape.add(q, a);
                    let qn = layer.ln_ff.apply(bound, q);
                    let f = layer.ff.apply(bound, qn);
                    q = bound.tape.add(q, f);
                }
                q
            }
            TokenizerMode::AveragePool => {
                let (_, sh, sw) = scales[0];
                let pool = pooling_matrix::<F>(self.config.m, sh, sw)?;
                let p = bound.tape.leaf(pool);
                bound.tape.matmul(p, parts[0])
            }
        };
        let q = self.out_ln.apply(bound, q);
        let loc_raw = self.loc_head.apply(bound, q);
        let loc = bound.tape.sigmoid(loc_raw);
        let obj_logit = self.obj_head.apply(bound, q);
        Ok(TokenizerOutput {
            embed: q,
            loc,
            obj_logit,
            m: self.config.m,
        })
    }
}

/// M×(sh·sw) row-stochastic matrix averaging a grid cell per token.
fn pooling_matrix<F: Scalar>(m: usize, sh: usize, sw: usize) -> Result<Array2<F>> {
    if m > sh * sw {
        return Err(Error::Model(format!(
            "cannot pool {m} tokens from a {sh}x{sw} map"
        )));
    }
    let gh = (m as f64).sqrt().ceil() as usize;
    let gw = m.div_ceil(gh);
    let mut p = Array2::zeros((m, sh * sw));
    for t in 0..m {
        let (gr, gc) = (t / gw, t % gw);
        let y0 = gr * sh / gh;
        let y1 = ((gr + 1) * sh / gh).max(y0 + 1).min(sh);
        let x0 = gc * sw / gw;
        let x1 = ((gc + 1) * sw / gw).max(x0 + 1).min(sw);
        let count = F::of(((y1 - y0) * (x1 - x0)) as f64);
        for y in y0..y1 {
            for x in x0..x1 {
                p[(t, y * sw + x)] = F::one() / count;
            }
        }
    }
    Ok(p)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matched focal + L1 tokenizer loss against ground-truth object centers in
/// normalized coordinates. Matching minimizes focal classification cost plus
/// λ_pt·L1; the loss applies focal terms to every token (matched = positive)
/// and L1 only to matched tokens, both normalized by max(1, #objects).
/// Returns the loss node and the matched (token, object) pairs.
pub fn tokenizer_loss<F: Scalar>(
    bound: &mut Bound<F>,
    out: &TokenizerOutput,
    gt_centers: &[(f64, f64)],
) -> Result<(Var, Vec<(usize, usize)>)> {
    let m = out.m;
    let g = gt_centers.len();
    let norm = 1.0 / g.max(1) as f64;

    // Matching on values, always in f64 so the assignment is identical
    // across scalar types.
    let pairs = if g > 0 {
        let logit = bound.tape.value(out.obj_logit);
        let loc = bound.tape.value(out.loc);
        let mut cost = Array2::<f64>::zeros((m, g));
        for i in 0..m {
            let p = sigmoid(logit[(i, 0)].as_f64()).clamp(1e-6, 1.0 - 1e-6);
            let cls = FOCAL_ALPHA * (1.0 - p).powi(FOCAL_GAMMA) * (-p.ln());
            for (j, &(gx, gy)) in gt_centers.iter().enumerate() {
                let l1 = (loc[(i, 0)].as_f64() - gx).abs() + (loc[(i, 1)].as_f64() - gy).abs();
                cost[(i, j)] = cls + LAMBDA_PT * l1;
            }
        }
        hungarian(cost.view())?.pairs
    } else {
        Vec::new()
    };

    // Focal classification over all tokens.
    let mut pos_mask = Array2::<F>::zeros((m, 1));
    for &(i, _) in &pairs {
        pos_mask[(i, 0)] = F::one();
    }
    let neg_mask = pos_mask.mapv(|v| F::one() - v);
    let z = out.obj_logit;
    let p = bound.tape.sigmoid(z);
    let ones = bound.tape.leaf(Array2::ones((m, 1)));
    let neg_p = bound.tape.scale(p, -1.0);
    let one_minus_p = bound.tape.add(ones, neg_p);
    let neg_z = bound.tape.scale(z, -1.0);
    let nlog_p = bound.tape.softplus(neg_z);
    let nlog_1mp = bound.tape.softplus(z);
    let q2 = bound.tape.mul(one_minus_p, one_minus_p);
    let pos_core = bound.tape.mul(q2, nlog_p);
    let pos_term = bound.tape.scale(pos_core, FOCAL_ALPHA);
    let p2 = bound.tape.mul(p, p);
    let neg_core = bound.tape.mul(p2, nlog_1mp);
    let neg_term = bound.tape.scale(neg_core, 1.0 - FOCAL_ALPHA);
    let pos_mask_v = bound.tape.leaf(pos_mask);
    let neg_mask_v = bound.tape.leaf(neg_mask);
    let pos_sel = bound.tape.mul(pos_term, pos_mask_v);
    let neg_sel = bound.tape.mul(neg_term, neg_mask_v);
    let focal_all = bound.tape.add(pos_sel, neg_sel);
    let focal_sum = bound.tape.sum_all(focal_all);
    let focal = bound.tape.scale(focal_sum, norm);

    // L1 on matched locations only.
    let mut target = Array2::<F>::zeros((m, 2));
    let mut weights = Array2::<F>::zeros((m, 2));
    for &(i, j) in &pairs {
        let (gx, gy) = gt_centers[j];
        target[(i, 0)] = F::of(gx);
        target[(i, 1)] = F::of(gy);
        let wv = F::of(LAMBDA_PT * norm);
        weights[(i, 0)] = wv;
        weights[(i, 1)] = wv;
    }
    let l1 = bound.tape.l1_sum(out.loc, target, weights);
    Ok((bound.tape.add(focal, l1), pairs))
}
