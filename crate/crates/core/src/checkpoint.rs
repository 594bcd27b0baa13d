//! Named-parameter checkpoints.
//!
//! A checkpoint is a versioned JSON archive: metadata (model configuration,
//! training stage and step, whether adapters are attached) plus every
//! parameter by name with its values and trainable flag. Values travel as
//! `f64`, which carries `f32` training weights exactly; restoring rebuilds
//! the model from the embedded configuration and overwrites its parameters,
//! so a round trip reproduces forward passes bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskModel};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything about a checkpoint except the weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Training stage that produced this checkpoint (0 = untrained).
    pub stage: u8,
    /// Optimizer steps taken.
    pub step: u64,
    /// Whether the decoder carries LoRA adapters (restored before apply).
    pub lora: bool,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ParamRecord {
    rows: usize,
    cols: usize,
    trainable: bool,
    data: Vec<f64>,
}

/// A parameter archive; build with [`Checkpoint::capture`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    /// Snapshots every parameter in the store.
    pub fn capture<F: Scalar>(
        store: &ParamStore<F>,
        model: &ModelConfig,
        stage: u8,
        step: u64,
        lora: bool,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        for (_, name, value, trainable) in store.iter() {
            params.insert(
                name.to_string(),
                ParamRecord {
                    rows: value.nrows(),
                    cols: value.ncols(),
                    trainable,
                    data: value.iter().map(|v| v.as_f64()).collect(),
                },
            );
        }
        Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                stage,
                step,
                lora,
                model: model.clone(),
            },
            params,
        }
    }

    /// Writes values and trainable flags into an existing store. The name
    /// sets must match exactly in both directions.
    pub fn apply<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<usize> {
        let mut missing = Vec::new();
        for (_, name, _, _) in store.iter() {
            if !self.params.contains_key(name) {
                missing.push(name.to_string());
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "store parameters absent from checkpoint: {missing:?}"
            )));
        }
        for (name, rec) in &self.params {
            let id = store.id(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter {name:?} not in store"))
            })?;
            let target = store.get(id);
            if target.dim() != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
                return Err(Error::Checkpoint(format!(
                    "{name:?} is {:?} in the store but {}x{} ({} values) in the checkpoint",
                    target.dim(),
                    rec.rows,
                    rec.cols,
                    rec.data.len()
                )));
            }
            let value =
                Array2::from_shape_vec((rec.rows, rec.cols), rec.data.clone()).expect("shape");
            *store.get_mut(id) = value.mapv(F::of);
            store.set_trainable(id, rec.trainable);
        }
        Ok(self.params.len())
    }

    /// Rebuilds the model this checkpoint was captured from: fresh store,
    /// model from the embedded config, adapters if present, then [`apply`].
    ///
    /// [`apply`]: Checkpoint::apply
    pub fn restore<F: Scalar>(&self) -> Result<(ParamStore<F>, TaskModel)> {
        if self.meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.meta.version
            )));
        }
        let mut store = ParamStore::new();
        // The initializer RNG is irrelevant: apply overwrites every value.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TaskModel::new(&mut store, &mut rng, &self.meta.model)?;
        if self.meta.lora {
            model.decoder.add_lora(&mut store, &mut rng);
        }
        self.apply(&mut store)?;
        Ok((store, model))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        fs::write(path, json).map_err(|e| Error::Checkpoint(format!("write {path:?}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("read {path:?}: {e}")))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("parse {path:?}: {e}")))?;
        if ckpt.meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.meta.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GenConfig};
    use crate::decoder::DecoderConfig;
    use crate::instruction::{render, CategorySet, RenderArgs, TaskKind, TemplateBank};
    use crate::nn::Bound;
    use crate::tokenizer::{TokenizerConfig, TokenizerMode};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            range: 16,
            num_class_tokens: 8,
            max_text_len: 12,
            tokenizer: TokenizerConfig {
                m: 6,
                d: 16,
                heads: 4,
                text_layers: 1,
                query_layers: 1,
                mode: TokenizerMode::Query,
            },
            decoder: DecoderConfig {
                layers: 1,
                heads: 4,
                width: 16,
                lora_rank: 2,
                lora_alpha: 4.0,
                max_seq_len: 192,
                object_slots: 4,
            },
        }
    }

    fn build_with_lora(seed: u64) -> (ParamStore<f32>, TaskModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = TaskModel::new(&mut store, &mut rng, &tiny_config()).unwrap();
        model.decoder.add_lora(&mut store, &mut rng);
        (store, model)
    }

    #[test]
    fn round_trip_preserves_every_bit_and_flag() {
        let (mut store, model) = build_with_lora(3);
        model.decoder.freeze_base(&mut store);
        let ckpt = Checkpoint::capture(&store, &model.config, 1, 250, true);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);

        let (store2, _model2) = loaded.restore::<f32>().unwrap();
        assert_eq!(store.len(), store2.len());
        for (_, name, value, trainable) in store.iter() {
            let id2 = store2.id(name).expect(name);
            let v2 = store2.get(id2);
            assert_eq!(value, v2, "{name}");
            assert!(
                value
                    .iter()
                    .zip(v2.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} differs in bits"
            );
            assert_eq!(trainable, store2.trainable(id2), "{name} flag");
        }
    }

    #[test]
    fn restored_model_reproduces_forward_outputs_exactly() {
        let (store, model) = build_with_lora(9);
        let sample = generate_scene(&GenConfig::default(), 5).unwrap();
        let set = CategorySet::new(vec!["circle".into(), "square".into()]).unwrap();
        let instr = render(
            TemplateBank::standard().canonical(TaskKind::Detection),
            &RenderArgs {
                category_set: Some(&set),
                range: model.config.range,
                ..Default::default()
            },
        )
        .unwrap();
        let mut b = Bound::new(&store);
        let loss = model.sample_loss(&mut b, &sample, &instr).unwrap();
        let before = b.tape.value(loss.total)[(0, 0)];

        let ckpt = Checkpoint::capture(&store, &model.config, 1, 1, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let (store2, model2) = Checkpoint::load(&path).unwrap().restore::<f32>().unwrap();
        let mut b2 = Bound::new(&store2);
        let loss2 = model2.sample_loss(&mut b2, &sample, &instr).unwrap();
        let after = b2.tape.value(loss2.total)[(0, 0)];
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn apply_rejects_mismatched_parameter_sets() {
        let (store_lora, model) = build_with_lora(1);
        let ckpt = Checkpoint::capture(&store_lora, &model.config, 1, 1, true);

        // A store without adapters is missing the lora_* parameters.
        let mut plain_store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _plain = TaskModel::new(&mut plain_store, &mut rng, &tiny_config()).unwrap();
        let err = ckpt.apply(&mut plain_store).unwrap_err();
        assert!(err.to_string().contains("lora"), "{err}");

        // And the reverse direction: checkpoint without adapters, store with.
        let plain_ckpt = Checkpoint::capture(&plain_store, &model.config, 0, 0, false);
        let (mut store_lora2, _) = build_with_lora(2);
        let err = plain_ckpt.apply(&mut store_lora2).unwrap_err();
        assert!(err.to_string().contains("absent"), "{err}");
    }

    #[test]
    fn shape_tampering_and_bad_versions_are_rejected() {
        let (store, model) = build_with_lora(4);
        let ckpt = Checkpoint::capture(&store, &model.config, 1, 1, true);
        let dir = tempfile::tempdir().unwrap();

        let mut tampered = ckpt.clone();
        let key = tampered.params.keys().next().unwrap().clone();
        tampered.params.get_mut(&key).unwrap().rows += 1;
        let (mut store2, _) = build_with_lora(4);
        assert!(tampered.apply(&mut store2).is_err());

        let mut wrong_version = ckpt.clone();
        wrong_version.meta.version = 99;
        let path = dir.path().join("v99.json");
        wrong_version.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        assert!(wrong_version.restore::<f32>().is_err());

        let garbled = dir.path().join("garbled.json");
        std::fs::write(&garbled, "{not json").unwrap();
        assert!(Checkpoint::load(&garbled).is_err());
    }

    #[test]
    fn f64_stores_round_trip_too() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = TaskModel::new(&mut store, &mut rng, &tiny_config()).unwrap();
        let ckpt = Checkpoint::capture(&store, &model.config, 0, 0, false);
        let (store2, _) = ckpt.restore::<f64>().unwrap();
        for (_, name, value, _) in store.iter() {
            let v2 = store2.get(store2.id(name).unwrap());
            assert!(
                value
                    .iter()
                    .zip(v2.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name}"
            );
        }
    }
}
