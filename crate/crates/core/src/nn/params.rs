//! Named persistent parameters and their per-forward binding onto a tape.
//!
//! A [`ParamStore`] owns every weight of a model as a named `Array2` with a
//! trainable flag; freezing is expressed by name prefix. Each forward pass
//! creates a fresh [`Bound`], which lazily copies the parameters it actually
//! touches onto the tape and afterwards maps tape gradients back to parameter
//! ids for the optimizer.

use std::collections::HashMap;

use ndarray::Array2;

use crate::scalar::Scalar;

use super::tape::{Gradients, Tape, Var};

/// Stable handle to one named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry<F: Scalar> {
    name: String,
    value: Array2<F>,
    trainable: bool,
}

/// Owns all weights of a model.
pub struct ParamStore<F: Scalar> {
    entries: Vec<Entry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a new trainable parameter; names must be unique.
    pub fn param(&mut self, name: &str, value: Array2<F>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0].value
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>, bool)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value, e.trainable))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    /// Sets the flag on every parameter whose name starts with `prefix`;
    /// returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Sets the flag on every parameter whose name contains `needle`;
    /// returns how many matched. Useful for adapter weights, whose names
    /// share a marker segment rather than a prefix.
    pub fn set_trainable_containing(&mut self, needle: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.contains(needle) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Total scalar count, and the trainable subset.
    pub fn num_scalars(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        for e in &self.entries {
            total += e.value.len();
            if e.trainable {
                trainable += e.value.len();
            }
        }
        (total, trainable)
    }
}

/// One forward pass: a tape plus the parameters bound onto it so far.
pub struct Bound<'a, F: Scalar> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    vars: Vec<Option<Var>>,
}

impl<'a, F: Scalar> Bound<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Bound {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
        }
    }

    /// The tape node for a parameter, binding it on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Collects gradients for every bound trainable parameter that the loss
    /// actually reached.
    pub fn grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Array2<F>)> {
        let mut out = Vec::new();
        for (i, slot) in self.vars.iter().enumerate() {
            let id = ParamId(i);
            if !self.store.trainable(id) {
                continue;
            }
            if let Some(var) = slot {
                if let Some(g) = grads.get(*var) {
                    out.push((id, g.clone()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn params_register_and_look_up_by_name() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.param("enc.w", array![[1.0, 2.0]]);
        assert_eq!(store.id("enc.w"), Some(w));
        assert_eq!(store.id("enc.b"), None);
        assert_eq!(store.name(w), "enc.w");
        assert_eq!(store.num_scalars(), (2, 2));
    }

    #[test]
    fn prefix_freezing_flags_matching_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.param("tok.backbone.w", Array2::zeros((2, 2)));
        let b = store.param("tok.text.w", Array2::zeros((2, 2)));
        let c = store.param("dec.w", Array2::zeros((2, 2)));
        assert_eq!(store.set_trainable_prefix("tok.backbone.", false), 1);
        assert!(!store.trainable(a));
        assert!(store.trainable(b) && store.trainable(c));
        assert_eq!(store.num_scalars(), (12, 8));
    }

    #[test]
    fn substring_freezing_flags_matching_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.param("dec.layer0.attn.q.lora_a", Array2::zeros((2, 2)));
        let b = store.param("dec.layer1.attn.v.lora_b", Array2::zeros((2, 2)));
        let c = store.param("dec.layer0.attn.q.w", Array2::zeros((2, 2)));
        store.set_trainable_all(false);
        assert_eq!(store.set_trainable_containing(".lora_", true), 2);
        assert!(store.trainable(a) && store.trainable(b));
        assert!(!store.trainable(c));
    }

    #[test]
    fn bound_caches_vars_and_reports_only_trainable_grads() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.param("w", array![[2.0]]);
        let frozen = store.param("frozen", array![[3.0]]);
        store.set_trainable_prefix("frozen", false);

        let mut b = Bound::new(&store);
        let wv = b.var(w);
        assert_eq!(b.var(w), wv, "second bind returns the cached var");
        let fv = b.var(frozen);
        let prod = b.tape.mul(wv, fv);
        let loss = b.tape.sum_all(prod);
        let grads = b.tape.backward(loss);
        let collected = b.grads(&grads);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, w);
        assert_eq!(collected[0].1, array![[3.0]]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.param("w", Array2::zeros((1, 1)));
        store.param("w", Array2::zeros((1, 1)));
    }
}
