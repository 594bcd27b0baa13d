//! Neural layers over the tape: linear maps with optional low-rank adapters,
//! layer norm, embeddings, multi-head attention, feed-forward blocks,
//! transformer layers, strided convolution, and sinusoidal positional
//! encodings.
//!
//! Layer structs hold [`ParamId`]s only; applying a layer binds its weights
//! onto the current [`Bound`] tape. All random initialization draws in f64
//! and converts, so parameter streams are identical across scalar types for
//! a fixed seed.

use ndarray::Array2;
use rand::Rng;

use crate::scalar::Scalar;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Var, PAD_ROW};

/// Uniform Glorot/Xavier initialization.
pub fn xavier_init<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| F::of(rng.gen_range(-bound..bound)))
}

/// Gaussian initialization with the given standard deviation (Box–Muller).
pub fn normal_init<F: Scalar, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        F::of((-2.0 * u1.ln()).sqrt() * u2.cos() * std)
    })
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = store.param(&format!("{name}.w"), xavier_init(rng, din, dout));
        let b = bias.then(|| store.param(&format!("{name}.b"), Array2::zeros((1, dout))));
        Linear { w, b }
    }

    pub fn apply<F: Scalar>(&self, bound: &mut Bound<F>, x: Var) -> Var {
        let w = bound.var(self.w);
        let y = bound.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = bound.var(b);
                bound.tape.add_row(y, bv)
            }
            None => y,
        }
    }
}

/// Linear map with an optional low-rank adapter: `x·W + b + (α/r)·(x·A)·B`.
///
/// `B` starts at zero, so a freshly added adapter leaves the layer's output
/// exactly equal to the base map.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LoraLinear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        LoraLinear {
            base: Linear::new(store, rng, name, din, dout, bias),
            adapter: None,
        }
    }

    /// Attaches a rank-`r` adapter under `<name>.lora_a` / `<name>.lora_b`.
    pub fn add_lora<F: Scalar, R: Rng>(
        &mut self,
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        rank: usize,
        alpha: f64,
    ) {
        assert!(self.adapter.is_none(), "adapter already attached to {name}");
        let din = store.get(self.base.w).nrows();
        let dout = store.get(self.base.w).ncols();
        assert!(rank >= 1 && rank <= din.min(dout), "invalid LoRA rank {rank}");
        let a = store.param(&format!("{name}.lora_a"), normal_init(rng, din, rank, 0.02));
        let b = store.param(&format!("{name}.lora_b"), Array2::zeros((rank, dout)));
        self.adapter = Some(LoraAdapter {
            a,
            b,
            scale: alpha / rank as f64,
        });
    }

    pub fn apply<F: Scalar>(&self, bound: &mut Bound<F>, x: Var) -> Var {
        let y = self.base.apply(bound, x);
        match &self.adapter {
            None => y,
            Some(ad) => {
                let a = bound.var(ad.a);
                let b = bound.var(ad.b);
                let xa = bound.tape.matmul(x, a);
                let xab = bound.tape.matmul(xa, b);
                let scaled = bound.tape.scale(xab, ad.scale);
                bound.tape.add(y, scaled)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.param(&format!("{name}.gamma"), Array2::ones((1, d))),
            beta: store.param(&format!("{name}.beta"), Array2::zeros((1, d))),
        }
    }

    pub fn apply<F: Scalar>(&self, bound: &mut Bound<F>, x: Var) -> Var {
        let g = bound.var(self.gamma);
        let b = bound.var(self.beta);
        bound.tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Token-id → row lookup table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        vocab: usize,
        d: usize,
    ) -> Self {
        Embedding {
            table: store.param(&format!("{name}.table"), normal_init(rng, vocab, d, 0.02)),
        }
    }

    pub fn apply<F: Scalar>(&self, bound: &mut Bound<F>, ids: &[usize]) -> Var {
        let t = bound.var(self.table);
        bound.tape.gather_rows(t, ids)
    }
}

/// Multi-head attention with LoRA-capable q/k/v/o projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: LoraLinear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: LoraLinear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: LoraLinear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            o: LoraLinear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// Attaches rank-`rank` adapters to all four projections.
    pub fn add_lora<F: Scalar, R: Rng>(
        &mut self,
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        rank: usize,
        alpha: f64,
    ) {
        self.q.add_lora(store, rng, &format!("{name}.q"), rank, alpha);
        self.k.add_lora(store, rng, &format!("{name}.k"), rank, alpha);
        self.v.add_lora(store, rng, &format!("{name}.v"), rank, alpha);
        self.o.add_lora(store, rng, &format!("{name}.o"), rank, alpha);
    }

    /// Attention from `q_in` rows to `kv_in` rows. The optional additive mask
    /// is S_q×S_kv with 0 = allowed, −∞ = blocked, shared across heads.
    pub fn apply<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Array2<F>>,
    ) -> Var {
        let q = self.q.apply(bound, q_in);
        let k = self.k.apply(bound, kv_in);
        let v = self.v.apply(bound, kv_in);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = bound.tape.slice_cols(q, h * dh, dh);
            let kh = bound.tape.slice_cols(k, h * dh, dh);
            let vh = bound.tape.slice_cols(v, h * dh, dh);
            let kt = bound.tape.transpose(kh);
            let scores = bound.tape.matmul(qh, kt);
            let scores = bound.tape.scale(scores, scale);
            let probs = bound.tape.softmax_rows(scores, mask);
            heads_out.push(bound.tape.matmul(probs, vh));
        }
        let merged = bound.tape.concat_cols(&heads_out);
        self.o.apply(bound, merged)
    }
}

/// Two-layer ReLU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), dim, hidden, true),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), hidden, dim, true),
        }
    }

    pub fn apply<F: Scalar>(&self, bound: &mut Bound<F>, x: Var) -> Var {
        let h = self.lin1.apply(bound, x);
        let h = bound.tape.relu(h);
        self.lin2.apply(bound, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))` then `x + ff(ln2(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, dim * 4),
        }
    }

    /// Self-attention over `x` under the optional mask.
    pub fn apply<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        x: Var,
        mask: Option<&Array2<F>>,
    ) -> Var {
        let n = self.ln1.apply(bound, x);
        let a = self.attn.apply(bound, n, n, mask);
        let x = bound.tape.add(x, a);
        let n = self.ln2.apply(bound, x);
        let f = self.ff.apply(bound, n);
        bound.tape.add(x, f)
    }
}

/// Strided 2-D convolution (cross-correlation) over a row-major (H·W)×C map.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        Conv2d {
            w: store.param(&format!("{name}.w"), xavier_init(rng, fan_in, cout)),
            b: store.param(&format!("{name}.b"), Array2::zeros((1, cout))),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Applies the convolution; `x` must be (h·w)×cin. Returns the output
    /// map and its spatial size.
    pub fn apply<F: Scalar>(
        &self,
        bound: &mut Bound<F>,
        x: Var,
        h: usize,
        w: usize,
    ) -> (Var, usize, usize) {
        assert_eq!(bound.tape.value(x).dim(), (h * w, self.cin), "conv input shape");
        let (oh, ow) = self.out_size(h, w);
        // One gathered shift per kernel offset, concatenated feature-wise in
        // (ky, kx) order to match the weight layout.
        let mut shifts = Vec::with_capacity(self.kernel * self.kernel);
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                let mut idx = Vec::with_capacity(oh * ow);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            idx.push(PAD_ROW);
                        } else {
                            idx.push(iy as usize * w + ix as usize);
                        }
                    }
                }
                shifts.push(bound.tape.gather_rows(x, &idx));
            }
        }
        let cols = bound.tape.concat_cols(&shifts);
        let wv = bound.var(self.w);
        let y = bound.tape.matmul(cols, wv);
        let bv = bound.var(self.b);
        (bound.tape.add_row(y, bv), oh, ow)
    }
}

/// Sinusoidal encoding of integer positions (standard transformer recipe).
pub fn sinusoidal_posenc_1d<F: Scalar>(len: usize, d: usize) -> Array2<F> {
    assert!(d % 2 == 0, "encoding width must be even");
    Array2::from_shape_fn((len, d), |(p, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = p as f64 * freq;
        F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Sinusoidal encoding of normalized 2-D locations: the first half of the
/// width encodes x, the second half y.
pub fn sinusoidal_posenc_2d<F: Scalar>(locations: &[(f64, f64)], d: usize) -> Array2<F> {
    assert!(d % 4 == 0, "encoding width must be a multiple of 4");
    let half = d / 2;
    Array2::from_shape_fn((locations.len(), d), |(r, i)| {
        let (x, y) = locations[r];
        let (pos, j) = if i < half { (x, i) } else { (y, i - half) };
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
        let angle = pos * std::f64::consts::TAU * freq;
        F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// S×S additive causal mask: position i may attend to j ≤ i.
pub fn causal_mask<F: Scalar>(s: usize) -> Array2<F> {
    Array2::from_shape_fn((s, s), |(i, j)| {
        if j <= i {
            F::zero()
        } else {
            F::neg_infinity()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, &mut r, "l", 2, 3, true);
        *store.get_mut(lin.w) = array![[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]];
        *store.get_mut(lin.b.unwrap()) = array![[0.5, -0.5, 0.0]];
        let mut b = Bound::new(&store);
        let x = b.tape.leaf(array![[1.0, 2.0]]);
        let y = lin.apply(&mut b, x);
        assert_eq!(b.tape.value(y), &array![[1.5, 1.5, 4.0]]);
    }

    #[test]
    fn fresh_lora_adapter_is_an_exact_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let mut lin = LoraLinear::new(&mut store, &mut r, "l", 8, 8, true);
        let x = normal_init::<f64, _>(&mut r, 3, 8, 1.0);

        let mut b = Bound::new(&store);
        let xv = b.tape.leaf(x.clone());
        let base = lin.apply(&mut b, xv);
        let base_out = b.tape.value(base).clone();

        lin.add_lora(&mut store, &mut r, "l", 4, 16.0);
        let mut b2 = Bound::new(&store);
        let xv2 = b2.tape.leaf(x);
        let adapted = lin.apply(&mut b2, xv2);
        assert_eq!(b2.tape.value(adapted), &base_out, "zero-init B is exact");
    }

    #[test]
    fn trained_lora_adapter_changes_the_output() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let mut lin = LoraLinear::new(&mut store, &mut r, "l", 4, 4, false);
        lin.add_lora(&mut store, &mut r, "l", 2, 16.0);
        let bid = lin.adapter.as_ref().unwrap().b;
        store.get_mut(bid)[(0, 0)] = 0.3;
        let mut b = Bound::new(&store);
        let x = b.tape.leaf(Array2::ones((1, 4)));
        let y = lin.apply(&mut b, x);
        let mut b2 = Bound::new(&store);
        let x2 = b2.tape.leaf(Array2::ones((1, 4)));
        let base_only = lin.base.apply(&mut b2, x2);
        assert_ne!(b.tape.value(y), b2.tape.value(base_only));
    }

    #[test]
    fn lora_rank_bounds_are_enforced() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let mut lin = LoraLinear::new(&mut store, &mut r, "l", 4, 4, false);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            lin.add_lora(&mut store, &mut r, "l", 5, 16.0)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn causal_attention_output_ignores_future_positions() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut store, &mut r, "a", 8, 2);
        let mask = causal_mask::<f32>(4);
        let x = normal_init::<f32, _>(&mut r, 4, 8, 1.0);
        let mut changed = x.clone();
        changed[(3, 2)] = 9.0;

        let run = |input: Array2<f32>| {
            let mut b = Bound::new(&store);
            let xv = b.tape.leaf(input);
            let y = attn.apply(&mut b, xv, xv, Some(&mask));
            b.tape.value(y).clone()
        };
        let ya = run(x);
        let yb = run(changed);
        for i in 0..3 {
            assert_eq!(ya.row(i), yb.row(i), "prefix row {i} must be untouched");
        }
        assert_ne!(ya.row(3), yb.row(3));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut store, &mut r, "a", 4, 2);
        let x = normal_init::<f64, _>(&mut r, 3, 4, 1.0);
        let mask = causal_mask::<f64>(3);

        let loss_of = |store: &ParamStore<f64>, x: &Array2<f64>| -> f64 {
            let mut b = Bound::new(store);
            let xv = b.tape.leaf(x.clone());
            let y = attn.apply(&mut b, xv, xv, Some(&mask));
            let l = b.tape.mean_all(y);
            b.tape.value(l)[(0, 0)]
        };

        let mut b = Bound::new(&store);
        let xv = b.tape.leaf(x.clone());
        let y = attn.apply(&mut b, xv, xv, Some(&mask));
        let l = b.tape.mean_all(y);
        let grads = b.tape.backward(l);
        let analytic = b.grads(&grads);

        let h = 1e-5;
        for (id, g) in &analytic {
            let dims = store.get(*id).dim();
            for row in 0..dims.0 {
                for col in 0..dims.1 {
                    let mut plus = ParamStoreClone::clone_store(&store);
                    plus.get_mut(*id)[(row, col)] += h;
                    let mut minus = ParamStoreClone::clone_store(&store);
                    minus.get_mut(*id)[(row, col)] -= h;
                    let numeric = (loss_of(&plus, &x) - loss_of(&minus, &x)) / (2.0 * h);
                    let a = g[(row, col)];
                    let denom = a.abs().max(numeric.abs()).max(1e-4);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{} ({row},{col}): {a} vs {numeric}",
                        store.name(*id)
                    );
                }
            }
        }
    }

    /// Test-only deep copy of a store (stores are deliberately not Clone in
    /// the public API; training owns exactly one).
    struct ParamStoreClone;
    impl ParamStoreClone {
        fn clone_store(store: &ParamStore<f64>) -> ParamStore<f64> {
            let mut out = ParamStore::new();
            for (_, name, value, trainable) in store.iter() {
                let id = out.param(name, value.clone());
                if !trainable {
                    out.set_trainable_prefix(name, false);
                    let _ = id;
                }
            }
            out
        }
    }

    #[test]
    fn conv_matches_a_hand_computed_correlation() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let conv = Conv2d::new(&mut store, &mut r, "c", 1, 1, 3, 1, 1);
        // Identity-ish kernel: picks the center pixel.
        let mut w = Array2::zeros((9, 1));
        w[(4, 0)] = 1.0;
        *store.get_mut(conv.w) = w;
        let img = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0], [8.0], [9.0]];
        let mut b = Bound::new(&store);
        let x = b.tape.leaf(img.clone());
        let (y, oh, ow) = conv.apply(&mut b, x, 3, 3);
        assert_eq!((oh, ow), (3, 3));
        assert_eq!(b.tape.value(y), &img, "center-tap kernel is the identity");
    }

    #[test]
    fn strided_conv_downsamples_spatially() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let conv = Conv2d::new(&mut store, &mut r, "c", 2, 5, 3, 2, 1);
        let mut b = Bound::new(&store);
        let x = b.tape.leaf(normal_init::<f64, _>(&mut r, 64, 2, 1.0));
        let (y, oh, ow) = conv.apply(&mut b, x, 8, 8);
        assert_eq!((oh, ow), (4, 4));
        assert_eq!(b.tape.value(y).dim(), (16, 5));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let conv = Conv2d::new(&mut store, &mut r, "c", 2, 3, 3, 2, 1);
        let x = normal_init::<f64, _>(&mut r, 16, 2, 1.0);

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut b = Bound::new(store);
            let xv = b.tape.leaf(x.clone());
            let (y, _, _) = conv.apply(&mut b, xv, 4, 4);
            let sq = b.tape.mul(y, y);
            let l = b.tape.mean_all(sq);
            b.tape.value(l)[(0, 0)]
        };

        let mut b = Bound::new(&store);
        let xv = b.tape.leaf(x.clone());
        let (y, _, _) = conv.apply(&mut b, xv, 4, 4);
        let sq = b.tape.mul(y, y);
        let l = b.tape.mean_all(sq);
        let grads = b.tape.backward(l);
        let analytic = b.grads(&grads);

        let h = 1e-5;
        for (id, g) in &analytic {
            let dims = store.get(*id).dim();
            for idx in 0..dims.0 * dims.1 {
                let rc = (idx / dims.1, idx % dims.1);
                let orig = store.get(*id)[rc];
                let mut s2 = ParamStoreClone::clone_store(&store);
                s2.get_mut(*id)[rc] = orig + h;
                let fp = loss_of(&s2);
                s2.get_mut(*id)[rc] = orig - h;
                let fm = loss_of(&s2);
                let numeric = (fp - fm) / (2.0 * h);
                let a = g[rc];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "{} {rc:?}: {a} vs {numeric}",
                    store.name(*id)
                );
            }
        }
    }

    #[test]
    fn transformer_layer_preserves_shape_and_trains() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let layer = TransformerLayer::new(&mut store, &mut r, "t", 8, 2);
        let mut b = Bound::new(&store);
        let x = b.tape.leaf(normal_init::<f64, _>(&mut r, 5, 8, 1.0));
        let y = layer.apply(&mut b, x, None);
        assert_eq!(b.tape.value(y).dim(), (5, 8));
        let l = b.tape.mean_all(y);
        let grads = b.tape.backward(l);
        let collected = b.grads(&grads);
        // Every parameter of the block participates.
        assert_eq!(collected.len(), store.len());
        assert!(collected.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn positional_encodings_are_bounded_and_distinct() {
        let pe = sinusoidal_posenc_1d::<f64>(10, 16);
        assert_eq!(pe.dim(), (10, 16));
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        let locs = [(0.1, 0.2), (0.1, 0.9), (0.8, 0.2)];
        let pe2 = sinusoidal_posenc_2d::<f64>(&locs, 16);
        assert_eq!(pe2.dim(), (3, 16));
        assert_ne!(pe2.row(0), pe2.row(1));
        assert_ne!(pe2.row(0), pe2.row(2));
        // x halves agree when x agrees.
        assert_eq!(
            pe2.slice(ndarray::s![0, ..8]),
            pe2.slice(ndarray::s![1, ..8])
        );
    }

    #[test]
    fn causal_mask_blocks_strictly_above_the_diagonal() {
        let m = causal_mask::<f32>(3);
        for i in 0..3 {
            for j in 0..3 {
                if j <= i {
                    assert_eq!(m[(i, j)], 0.0);
                } else {
                    assert_eq!(m[(i, j)], f32::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn init_streams_are_identical_across_scalar_types() {
        let a: Array2<f32> = xavier_init(&mut rng(), 3, 4);
        let b: Array2<f64> = xavier_init(&mut rng(), 3, 4);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
