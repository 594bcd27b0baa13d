//! Reverse-mode automatic differentiation over `Array2` values.
//!
//! A [`Tape`] is an append-only list of nodes; every operation pushes its
//! result along with a closure that routes the output gradient to the
//! operation's inputs. Calling [`Tape::backward`] on a 1×1 loss node walks the
//! nodes in reverse creation order (a valid topological order, since inputs
//! always precede outputs) and accumulates gradients for every node,
//! including leaves.
//!
//! Shapes are validated eagerly with panics, matching `ndarray`'s own
//! convention for programmer errors.

use ndarray::{s, Array2, Axis};

use crate::scalar::Scalar;

/// Sentinel row index for [`Tape::gather_rows`]: produces a zero row and
/// receives no gradient. Used for sequence padding and convolution borders.
pub const PAD_ROW: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&[Array2<F>], &Array2<F>, &mut [Option<Array2<F>>])>;

/// Gradient accumulation helper shared by all backward closures.
fn accum<F: Scalar>(grads: &mut [Option<Array2<F>>], idx: usize, delta: Array2<F>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Recorded computation graph.
pub struct Tape<F: Scalar> {
    values: Vec<Array2<F>>,
    backs: Vec<Option<BackFn<F>>>,
}

/// Result of a backward pass; gradients share node indices with the tape.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.values[v.0]
    }

    /// Inserts an input node (parameter or constant); gradients are collected
    /// for every leaf, and callers decide which ones they care about.
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.values.push(value);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, value: Array2<F>, back: BackFn<F>) -> Var {
        self.values.push(value);
        self.backs.push(Some(back));
        Var(self.values.len() - 1)
    }

    /// Accumulates gradients of a 1×1 `root` w.r.t. every node.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.values[root.0].dim(),
            (1, 1),
            "backward root must be a 1x1 scalar node"
        );
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                back(&self.values, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
        let out = va + vb;
        self.push(
            out,
            Box::new(move |_, g, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.clone());
            }),
        )
    }

    /// Adds a 1×D row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = &self.values[a.0];
        let vr = &self.values[row.0];
        assert_eq!(vr.nrows(), 1, "add_row expects a 1xD row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        let out = va + vr;
        self.push(
            out,
            Box::new(move |_, g, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, row.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
        let out = va * vb;
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                accum(grads, a.0, g * &vals[b.0]);
                accum(grads, b.0, g * &vals[a.0]);
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        let out = self.values[a.0].mapv(|x| x * cf);
        self.push(
            out,
            Box::new(move |_, g, grads| {
                accum(grads, a.0, g.mapv(|x| x * cf));
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension mismatch");
        let out = va.dot(vb);
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                accum(grads, a.0, g.dot(&vals[b.0].t()));
                accum(grads, b.0, vals[a.0].t().dot(g));
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.values[a.0].t().to_owned();
        self.push(
            out,
            Box::new(move |_, g, grads| {
                accum(grads, a.0, g.t().to_owned());
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let mask = vals[a.0].mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
                accum(grads, a.0, g * &mask);
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(sigmoid_stable);
        let out_idx = self.values.len();
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let s = &vals[out_idx];
                accum(grads, a.0, g * &s.mapv(|p| p * (F::one() - p)));
            }),
        )
    }

    /// ln(1 + eˣ), computed stably; its derivative is the sigmoid.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| {
            let x = x.as_f64();
            F::of(x.max(0.0) + (-x.abs()).exp().ln_1p())
        });
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                accum(grads, a.0, g * &vals[a.0].mapv(sigmoid_stable));
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.exp());
        let out_idx = self.values.len();
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                accum(grads, a.0, g * &vals[out_idx]);
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.abs());
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let sign = vals[a.0].mapv(|x| {
                    if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                accum(grads, a.0, g * &sign);
            }),
        )
    }

    /// Row-wise softmax of `a + mask`; the optional additive mask uses 0 for
    /// allowed entries and −∞ for blocked ones, so blocked probabilities are
    /// exactly zero. Each row must keep at least one allowed entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Array2<F>>) -> Var {
        let va = &self.values[a.0];
        if let Some(m) = mask {
            assert_eq!(va.dim(), m.dim(), "softmax mask shape mismatch");
            for mrow in m.rows() {
                assert!(
                    mrow.iter().any(|x| x.is_finite()),
                    "softmax mask blocks an entire row"
                );
            }
        }
        let mut out = match mask {
            Some(m) => va + m,
            None => va.clone(),
        };
        for mut row in out.rows_mut() {
            // Divergence (NaN or a whole row overflowed to −∞) must surface
            // as NaN probabilities the trainer can detect, not a panic; the
            // fully-blocked-row logic bug is asserted on the mask above.
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if row.iter().any(|x| x.as_f64().is_nan()) || !(max > F::neg_infinity()) {
                row.fill(F::nan());
                continue;
            }
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let out_idx = self.values.len();
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let s = &vals[out_idx];
                let mut ga = g * s;
                for (mut grow, srow) in ga.rows_mut().into_iter().zip(s.rows()) {
                    let dot = grow.sum();
                    grow.zip_mut_with(&srow, |gi, &si| *gi -= dot * si);
                }
                accum(grads, a.0, ga);
            }),
        )
    }

    /// Per-row layer normalization with learned 1×D scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = &self.values[x.0];
        let d = vx.ncols();
        assert_eq!(self.values[gamma.0].dim(), (1, d), "gamma must be 1xD");
        assert_eq!(self.values[beta.0].dim(), (1, d), "beta must be 1xD");
        let epsf = F::of(eps);
        let df = F::of(d as f64);
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / df;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) / df;
            let istd = F::one() / (var + epsf).sqrt();
            row.mapv_inplace(|v| v * istd);
            inv_std.push(istd);
        }
        let out = &xhat * &self.values[gamma.0] + &self.values[beta.0];
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let gamma_v = &vals[gamma.0];
                accum(grads, beta.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                accum(
                    grads,
                    gamma.0,
                    (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                let mut gx = g * gamma_v; // d loss / d xhat
                for ((mut grow, xrow), &istd) in
                    gx.rows_mut().into_iter().zip(xhat.rows()).zip(&inv_std)
                {
                    let mean_g = grow.sum() / df;
                    let mean_gx = grow
                        .iter()
                        .zip(xrow.iter())
                        .map(|(&a, &b)| a * b)
                        .fold(F::zero(), |a, b| a + b)
                        / df;
                    grow.zip_mut_with(&xrow, |gi, &xi| {
                        *gi = (*gi - mean_g - xi * mean_gx) * istd;
                    });
                }
                accum(grads, x.0, gx);
            }),
        )
    }

    /// Selects rows of `table` by index; [`PAD_ROW`] yields a zero row and
    /// routes no gradient.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let vt = &self.values[table.0];
        let d = vt.ncols();
        let n = vt.nrows();
        let mut out = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            if i != PAD_ROW {
                assert!(i < n, "gather index {i} out of range ({n} rows)");
                out.row_mut(r).assign(&vt.row(i));
            }
        }
        let indices = indices.to_vec();
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let mut gt = Array2::zeros(vals[table.0].dim());
                for (r, &i) in indices.iter().enumerate() {
                    if i != PAD_ROW {
                        let mut dst = gt.row_mut(i);
                        dst += &g.row(r);
                    }
                }
                accum(grads, table.0, gt);
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = self.values[parts[0].0].ncols();
        let rows: Vec<usize> = parts.iter().map(|p| self.values[p.0].nrows()).collect();
        let total: usize = rows.iter().sum();
        let mut out = Array2::zeros((total, d));
        let mut at = 0;
        for (p, &r) in parts.iter().zip(&rows) {
            assert_eq!(self.values[p.0].ncols(), d, "concat_rows width mismatch");
            out.slice_mut(s![at..at + r, ..]).assign(&self.values[p.0]);
            at += r;
        }
        let parts = parts.to_vec();
        self.push(
            out,
            Box::new(move |_, g, grads| {
                let mut at = 0;
                for (p, &r) in parts.iter().zip(&rows) {
                    accum(grads, p.0, g.slice(s![at..at + r, ..]).to_owned());
                    at += r;
                }
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.values[a.0];
        assert!(start + len <= va.nrows(), "slice_rows out of range");
        let out = va.slice(s![start..start + len, ..]).to_owned();
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let mut ga = Array2::zeros(vals[a.0].dim());
                ga.slice_mut(s![start..start + len, ..]).assign(g);
                accum(grads, a.0, ga);
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.values[parts[0].0].nrows();
        let cols: Vec<usize> = parts.iter().map(|p| self.values[p.0].ncols()).collect();
        let total: usize = cols.iter().sum();
        let mut out = Array2::zeros((n, total));
        let mut at = 0;
        for (p, &c) in parts.iter().zip(&cols) {
            assert_eq!(self.values[p.0].nrows(), n, "concat_cols height mismatch");
            out.slice_mut(s![.., at..at + c]).assign(&self.values[p.0]);
            at += c;
        }
        let parts = parts.to_vec();
        self.push(
            out,
            Box::new(move |_, g, grads| {
                let mut at = 0;
                for (p, &c) in parts.iter().zip(&cols) {
                    accum(grads, p.0, g.slice(s![.., at..at + c]).to_owned());
                    at += c;
                }
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.values[a.0];
        assert!(start + len <= va.ncols(), "slice_cols out of range");
        let out = va.slice(s![.., start..start + len]).to_owned();
        self.push(
            out,
            Box::new(move |vals, g, grads| {
                let mut ga = Array2::zeros(vals[a.0].dim());
                ga.slice_mut(s![.., start..start + len]).assign(g);
                accum(grads, a.0, ga);
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.values[a.0].sum();
        self.push(
            Array2::from_elem((1, 1), total),
            Box::new(move |vals, g, grads| {
                let s = g[(0, 0)];
                accum(grads, a.0, Array2::from_elem(vals[a.0].dim(), s));
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of per-row cross-entropies: Σ_r w_r · (logsumexp(row_r) −
    /// row_r[target_r]). Rows with zero weight are skipped entirely, and −∞
    /// logits (masked-out entries) are handled exactly.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let vl = &self.values[logits.0];
        assert_eq!(vl.nrows(), targets.len(), "one target per row");
        assert_eq!(vl.nrows(), weights.len(), "one weight per row");
        let mut total = 0.0;
        for ((row, &t), &w) in vl.rows().into_iter().zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            assert!(t < row.len(), "target {t} out of range");
            // Divergence (NaN or +inf from an upstream overflow) must surface
            // as a NaN loss the trainer can detect, not a panic; the asserts
            // below guard logic bugs on clean rows only.
            if row.iter().any(|x| x.as_f64().is_nan()) {
                total += f64::NAN;
                continue;
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            assert!(max > F::neg_infinity(), "cross-entropy row fully masked");
            let lse = max.as_f64()
                + row
                    .iter()
                    .map(|&x| (x - max).as_f64().exp())
                    .sum::<f64>()
                    .ln();
            let lt = row[t].as_f64();
            assert!(lt != f64::NEG_INFINITY, "cross-entropy target is masked out");
            total += w * (lse - lt);
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.push(
            Array2::from_elem((1, 1), F::of(total)),
            Box::new(move |vals, g, grads| {
                let vl = &vals[logits.0];
                let gs = g[(0, 0)];
                let mut gl = Array2::zeros(vl.dim());
                for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = vl.row(r);
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut p: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
                    let sum: F = p.iter().copied().fold(F::zero(), |a, b| a + b);
                    for v in &mut p {
                        *v = *v / sum;
                    }
                    let wf = F::of(w);
                    let mut grow = gl.row_mut(r);
                    for (c, &pc) in p.iter().enumerate() {
                        let delta = if c == t { pc - F::one() } else { pc };
                        grow[c] = gs * wf * delta;
                    }
                }
                accum(grads, logits.0, gl);
            }),
        )
    }

    /// Σ w ⊙ |a − target| with constant target and weights.
    pub fn l1_sum(&mut self, a: Var, target: Array2<F>, weights: Array2<F>) -> Var {
        let va = &self.values[a.0];
        assert_eq!(va.dim(), target.dim(), "l1 target shape mismatch");
        assert_eq!(va.dim(), weights.dim(), "l1 weight shape mismatch");
        let total = va
            .iter()
            .zip(target.iter())
            .zip(weights.iter())
            .map(|((&x, &t), &w)| (w * (x - t).abs()).as_f64())
            .sum::<f64>();
        self.push(
            Array2::from_elem((1, 1), F::of(total)),
            Box::new(move |vals, g, grads| {
                let gs = g[(0, 0)];
                let va = &vals[a.0];
                let mut ga = Array2::zeros(va.dim());
                ndarray::Zip::from(&mut ga)
                    .and(va)
                    .and(&target)
                    .and(&weights)
                    .for_each(|gi, &x, &t, &w| {
                        let sign = if x > t {
                            F::one()
                        } else if x < t {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *gi = gs * w * sign;
                    });
                accum(grads, a.0, ga);
            }),
        )
    }
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    let x = x.as_f64();
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    F::of(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0))
    }

    /// Central-difference gradient check for a scalar-valued builder. The
    /// builder is re-run from scratch for every probe, so it must be a pure
    /// function of its inputs.
    fn check_grads(inputs: &[Array2<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let eval = |probe: &[Array2<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = probe.iter().map(|x| t.leaf(x.clone())).collect();
            let r = build(&mut t, &vs);
            t.value(r)[(0, 0)]
        };
        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.to_vec();
                plus[i][(r, c)] += h;
                let mut minus = inputs.to_vec();
                minus[i][(r, c)] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[(r, c)];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "input {i} entry ({r},{c}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_values_match_ndarray() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(array![[5.0, 6.0], [7.0, 8.0]]);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &array![[19.0, 22.0], [43.0, 50.0]]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&mut rng, 3, 4);
        let b = rand_arr(&mut rng, 4, 2);
        check_grads(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.sum_all(m)
        });
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_arr(&mut rng, 2, 3);
        let b = rand_arr(&mut rng, 2, 3);
        check_grads(&[a.clone(), b], |t, v| {
            let m = t.mul(v[0], v[1]);
            let s = t.scale(m, 0.7);
            let r = t.relu(s);
            t.sum_all(r)
        });
        check_grads(&[a.clone()], |t, v| {
            let s = t.sigmoid(v[0]);
            t.sum_all(s)
        });
        check_grads(&[a.clone()], |t, v| {
            let s = t.softplus(v[0]);
            t.sum_all(s)
        });
        check_grads(&[a.clone()], |t, v| {
            let e = t.exp(v[0]);
            t.sum_all(e)
        });
        check_grads(&[a], |t, v| {
            let e = t.abs(v[0]);
            t.sum_all(e)
        });
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // f(a) = sum(a·a) + sum(3a) → df/da = 2a + 3.
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(array![[2.0, -1.0]]);
        let sq = t.mul(a, a);
        let s1 = t.sum_all(sq);
        let tr = t.scale(a, 3.0);
        let s2 = t.sum_all(tr);
        let f = t.add(s1, s2);
        let g = t.backward(f);
        assert_eq!(g.get(a).unwrap(), &array![[7.0, 1.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_are_exactly_zero() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let mask = array![
            [0.0, f64::NEG_INFINITY, 0.0],
            [f64::NEG_INFINITY, 0.0, 0.0]
        ];
        let s = t.softmax_rows(a, Some(&mask));
        let v = t.value(s);
        assert_eq!(v[(0, 1)], 0.0);
        assert_eq!(v[(1, 0)], 0.0);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr(&mut rng, 3, 4);
        let w = rand_arr(&mut rng, 3, 4);
        let mut mask = Array2::zeros((3, 4));
        mask[(0, 2)] = f64::NEG_INFINITY;
        mask[(2, 0)] = f64::NEG_INFINITY;
        check_grads(&[a, w], |t, v| {
            let s = t.softmax_rows(v[0], Some(&mask));
            let m = t.mul(s, v[1]);
            t.sum_all(m)
        });
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0, 10.0], [-5.0, 0.0, 5.0, 0.0]]);
        let gamma = t.leaf(Array2::ones((1, 4)));
        let beta = t.leaf(Array2::zeros((1, 4)));
        let y = t.layer_norm(x, gamma, beta, 1e-9);
        for row in t.value(y).rows() {
            assert!(row.sum().abs() < 1e-6);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr(&mut rng, 3, 5);
        let gamma = rand_arr(&mut rng, 1, 5);
        let beta = rand_arr(&mut rng, 1, 5);
        let w = rand_arr(&mut rng, 3, 5);
        check_grads(&[x, gamma, beta, w], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
            let m = t.mul(y, v[3]);
            t.sum_all(m)
        });
    }

    #[test]
    fn gather_pads_with_zero_rows_and_skips_their_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let table = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let g = t.gather_rows(table, &[1, PAD_ROW, 1]);
        assert_eq!(t.value(g), &array![[3.0, 4.0], [0.0, 0.0], [3.0, 4.0]]);
        let s = t.sum_all(g);
        let grads = t.backward(s);
        assert_eq!(grads.get(table).unwrap(), &array![[0.0, 0.0], [2.0, 2.0]]);
    }

    #[test]
    fn concat_and_slice_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_arr(&mut rng, 2, 3);
        let b = rand_arr(&mut rng, 1, 3);
        let c = rand_arr(&mut rng, 3, 2);
        check_grads(&[a, b, c], |t, v| {
            let rows = t.concat_rows(&[v[0], v[1]]);
            let wide = t.concat_cols(&[rows, v[2]]);
            let sl = t.slice_rows(wide, 1, 2);
            let sc = t.slice_cols(sl, 1, 3);
            let e = t.exp(sc);
            t.sum_all(e)
        });
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.leaf(array![[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]);
        let ce = t.cross_entropy_sum(logits, &[1, 2], &[1.0, 2.0]);
        let row0: f64 = {
            let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|x| x.exp()).sum();
            z.ln() - 2.0
        };
        let row1 = (3.0f64).ln();
        let want = row0 + 2.0 * row1;
        assert!((t.value(ce)[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_arr(&mut rng, 4, 5);
        check_grads(&[logits], |t, v| {
            t.cross_entropy_sum(v[0], &[0, 3, 2, 1], &[1.0, 0.5, 0.0, 2.0])
        });
    }

    #[test]
    fn cross_entropy_respects_masked_logits() {
        let mut t: Tape<f64> = Tape::new();
        let inf = f64::NEG_INFINITY;
        let logits = t.leaf(array![[1.0, inf, 0.0]]);
        let ce = t.cross_entropy_sum(logits, &[0], &[1.0]);
        let want = (1.0f64.exp() + 1.0).ln() - 1.0;
        assert!((t.value(ce)[(0, 0)] - want).abs() < 1e-12);
        let grads = t.backward(ce);
        let g = grads.get(logits).unwrap();
        assert_eq!(g[(0, 1)], 0.0, "masked entry gets zero gradient");
    }

    #[test]
    fn cross_entropy_turns_overflowed_rows_into_nan_not_panics() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.leaf(array![[1.0, f64::NAN, 0.0], [0.0, 1.0, 2.0]]);
        let ce = t.cross_entropy_sum(logits, &[0, 1], &[1.0, 1.0]);
        assert!(t.value(ce)[(0, 0)].is_nan());

        let mut t2: Tape<f64> = Tape::new();
        let logits = t2.leaf(array![[1.0, f64::INFINITY, 0.0]]);
        let ce = t2.cross_entropy_sum(logits, &[0], &[1.0]);
        assert!(t2.value(ce)[(0, 0)].is_nan());
    }

    #[test]
    fn l1_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_arr(&mut rng, 3, 4);
        let target = rand_arr(&mut rng, 3, 4);
        let weights = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..2.0));
        check_grads(&[a], |t, v| {
            t.l1_sum(v[0], target.clone(), weights.clone())
        });
    }

    #[test]
    fn composite_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_arr(&mut rng, 4, 3);
        let w1 = rand_arr(&mut rng, 3, 6);
        let b1 = rand_arr(&mut rng, 1, 6);
        let w2 = rand_arr(&mut rng, 6, 5);
        let gamma = rand_arr(&mut rng, 1, 6);
        let beta = rand_arr(&mut rng, 1, 6);
        check_grads(&[x, w1, b1, w2, gamma, beta], |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.layer_norm(h, v[4], v[5], 1e-6);
            let h = t.relu(h);
            let logits = t.matmul(h, v[3]);
            t.cross_entropy_sum(logits, &[0, 1, 2, 3], &[1.0, 1.0, 1.0, 1.0])
        });
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| t.backward(a)));
        assert!(result.is_err());
    }

    #[test]
    fn f32_and_f64_forward_agree_closely() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x64 = rand_arr(&mut rng, 3, 3);
        let x32 = x64.mapv(|v| v as f32);
        let mut t64: Tape<f64> = Tape::new();
        let a = t64.leaf(x64);
        let s = t64.softmax_rows(a, None);
        let m = t64.mean_all(s);
        let mut t32: Tape<f32> = Tape::new();
        let b = t32.leaf(x32);
        let s2 = t32.softmax_rows(b, None);
        let m2 = t32.mean_all(s2);
        let d = (t64.value(m)[(0, 0)] - t32.value(m2)[(0, 0)] as f64).abs();
        assert!(d < 1e-6);
    }
}
