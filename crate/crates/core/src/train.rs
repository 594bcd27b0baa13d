//! Two-stage training orchestration.
//!
//! Stage 1 trains detection only: the tokenizer end to end, the decoder
//! through LoRA adapters and the new-token embeddings. Stage 2 resumes from a
//! stage-1 checkpoint, freezes the visual backbone and mixes all five tasks
//! uniformly per step, with instruction randomness (template, category
//! subset, segmentation point count) injected by flags. Runs are deterministic
//! given a seed: AdamW with cosine-annealed learning rate and global-norm
//! clipping, batch losses averaged over per-sample instruction draws.
//!
//! A non-finite loss or gradient aborts the run and returns the last good
//! parameter state instead of applying the update.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::io::Dataset;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::instruction::{
    sample_instruction, InstructionSpec, RandomnessFlags, SampleContext, TaskKind, TemplateBank,
};
use crate::model::{present_classes, ModelConfig, TaskModel};
use crate::nn::{clip_global_norm, cosine_lr, AdamW, Bound, ParamStore};
use crate::scalar::Scalar;

/// Which parameter groups stay fixed during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FreezeFlags {
    /// The tokenizer's convolutional backbone (`tok.backbone.`).
    pub visual_backbone: bool,
    /// The tokenizer's text encoder (`tok.text.`).
    pub text_encoder: bool,
    /// Everything in the decoder except adapters, extension embeddings,
    /// slot queries and the image projection.
    pub decoder_base: bool,
}

impl Default for FreezeFlags {
    fn default() -> Self {
        FreezeFlags {
            visual_backbone: false,
            text_encoder: false,
            decoder_base: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// 1 or 2.
    pub stage: u8,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps (wins over epochs when smaller).
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// Peak learning rate; cosine-annealed to zero over the run.
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Attach LoRA adapters to the decoder's attention projections.
    pub lora: bool,
    pub randomness: RandomnessFlags,
    pub freeze: FreezeFlags,
    /// Restrict training to the first k samples (cycled) — overfit mode.
    pub overfit: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            epochs: 20,
            max_steps: None,
            batch_size: 8,
            lr: 2e-4,
            weight_decay: 0.01,
            clip_norm: 0.1,
            lora: true,
            randomness: RandomnessFlags::all_on(),
            freeze: FreezeFlags::default(),
            overfit: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Config(format!("stage {} not in {{1, 2}}", self.stage)));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs 0 without max_steps".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.overfit == Some(0) {
            return Err(Error::Config("overfit needs at least 1 sample".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One metrics line, serialized per step into `metrics.jsonl`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    /// Task trained this step (batch draws are per sample; this is the last).
    pub task: String,
    pub lr: f64,
    pub loss: f64,
    pub tokenizer_loss: f64,
    pub decoder_loss: f64,
    pub grad_norm: f64,
}

/// Everything a finished (or aborted) run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Optimizer steps actually applied.
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `Some(reason)` when divergence stopped the run early; the checkpoint
    /// then holds the last good parameters.
    pub aborted: Option<String>,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Executed tasks per step, indexed like [`TaskKind::ALL`].
    pub task_counts: [u64; 5],
    pub run_dir: Option<PathBuf>,
}

/// Uniform per-step task draw for stage 2.
pub fn draw_task(rng: &mut impl Rng) -> TaskKind {
    TaskKind::ALL[rng.gen_range(0..TaskKind::ALL.len())]
}

/// Stage 1: fresh model, detection-only instruction stream.
pub fn train_stage1<F: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != 1 {
        return Err(Error::Config(format!(
            "train_stage1 called with stage {}",
            config.stage
        )));
    }
    let mut store: ParamStore<F> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TaskModel::new(&mut store, &mut rng, model_config)?;
    if config.lora {
        model.decoder.add_lora(&mut store, &mut rng);
    }
    run(store, model, config.clone(), dataset, out_dir)
}

/// Stage 2: resumes a stage-1 checkpoint, freezes the visual backbone, and
/// mixes all five tasks uniformly.
pub fn train_stage2<F: Scalar>(
    config: &TrainConfig,
    stage1: &Checkpoint,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != 2 {
        return Err(Error::Config(format!(
            "train_stage2 called with stage {}",
            config.stage
        )));
    }
    if stage1.meta.stage != 1 {
        return Err(Error::Config(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            stage1.meta.stage
        )));
    }
    let (store, model) = stage1.restore::<F>()?;
    let mut config = config.clone();
    config.lora = stage1.meta.lora;
    config.freeze.visual_backbone = true;
    run(store, model, config, dataset, out_dir)
}

fn apply_freezes<F: Scalar>(model: &TaskModel, store: &mut ParamStore<F>, flags: FreezeFlags) {
    store.set_trainable_all(true);
    if flags.decoder_base {
        model.decoder.freeze_base(store);
    }
    if flags.visual_backbone {
        store.set_trainable_prefix("tok.backbone.", false);
    }
    if flags.text_encoder {
        store.set_trainable_prefix("tok.text.", false);
    }
}

/// Draws the instruction for one sample. Stage 1 always trains detection;
/// stage 2 samples the task uniformly, falling back to captioning when a
/// drawn task needs an annotation this scene lacks (sparse scenes may carry
/// no unique expression or no question).
fn draw_instruction(
    stage: u8,
    bank: &TemplateBank,
    rng: &mut ChaCha8Rng,
    flags: RandomnessFlags,
    sample: &SceneSample,
    master: &[String],
    range: i64,
) -> Result<(TaskKind, InstructionSpec)> {
    let drawn = if stage == 1 {
        TaskKind::Detection
    } else {
        draw_task(rng)
    };
    let kind = match drawn {
        TaskKind::Grounding if sample.groundings.is_empty() => TaskKind::Captioning,
        TaskKind::Vqa if sample.qa.is_empty() => TaskKind::Captioning,
        k => k,
    };
    let expression = (kind == TaskKind::Grounding)
        .then(|| sample.groundings[rng.gen_range(0..sample.groundings.len())].expression.clone());
    let question = (kind == TaskKind::Vqa)
        .then(|| sample.qa[rng.gen_range(0..sample.qa.len())].question.clone());
    let present = present_classes(sample);
    let ctx = SampleContext {
        master_classes: master,
        must_include: &present,
        range,
        expression: expression.as_deref(),
        question: question.as_deref(),
    };
    let instr = sample_instruction(bank, kind, rng, flags, &ctx)?;
    Ok((kind, instr))
}

fn run<F: Scalar>(
    mut store: ParamStore<F>,
    model: TaskModel,
    config: TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    apply_freezes(&model, &mut store, config.freeze);

    let n = config.overfit.unwrap_or(dataset.len()).min(dataset.len());
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let mut total = steps_per_epoch * config.epochs as u64;
    if let Some(cap) = config.max_steps {
        total = if total == 0 { cap } else { total.min(cap) };
    }
    if total == 0 {
        return Err(Error::Config("schedule has zero steps".into()));
    }

    // Small working sets stay resident; large ones stream from disk.
    let cache: Option<Vec<SceneSample>> = if n <= 256 {
        Some((0..n).map(|i| dataset.get(i)).collect::<Result<_>>()?)
    } else {
        None
    };
    let fetch = |i: usize| -> Result<SceneSample> {
        match &cache {
            Some(c) => Ok(c[i].clone()),
            None => dataset.get(i),
        }
    };

    let bank = TemplateBank::standard();
    let master = dataset.manifest.config.class_names();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut instr_rng = ChaCha8Rng::seed_from_u64(config.seed);
    instr_rng.set_stream(2);
    let mut opt: AdamW<F> = AdamW::new(config.weight_decay);

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let snapshot = serde_json::json!({
                "train": &config,
                "model": &model.config,
            });
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
            Some(std::io::BufWriter::new(fs::File::create(
                dir.join("metrics.jsonl"),
            )?))
        }
        None => None,
    };

    let mut losses = Vec::new();
    let mut lrs = Vec::new();
    let mut task_counts = [0u64; 5];
    let mut step = 0u64;
    let mut aborted = None;

    'outer: for epoch in 0.. {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut order_rng);
        for chunk in idx.chunks(config.batch_size) {
            if step >= total {
                break 'outer;
            }
            let lr = cosine_lr(config.lr, step, total);

            // The bound forward pass borrows the store; gradients are pulled
            // out before the optimizer mutates it.
            let mut batch_tasks: Vec<TaskKind> = Vec::new();
            let outcome = {
                let mut b = Bound::new(&store);
                let mut acc = None;
                let mut tok_sum = 0.0;
                let mut dec_sum = 0.0;
                let mut fail = None;
                for &i in chunk {
                    let sample = fetch(i)?;
                    let (kind, instr) = draw_instruction(
                        config.stage,
                        &bank,
                        &mut instr_rng,
                        config.randomness,
                        &sample,
                        &master,
                        model.config.range,
                    )?;
                    batch_tasks.push(kind);
                    match model.sample_loss(&mut b, &sample, &instr) {
                        Ok(sl) => {
                            tok_sum += b.tape.value(sl.tokenizer)[(0, 0)].as_f64();
                            dec_sum += b.tape.value(sl.decoder.total)[(0, 0)].as_f64();
                            acc = Some(match acc {
                                None => sl.total,
                                Some(a) => b.tape.add(a, sl.total),
                            });
                        }
                        Err(e) => {
                            // Forward failures past step 0 mean numerically
                            // degenerate outputs (e.g. NaN anchors); abort
                            // with the last good parameters.
                            fail = Some(format!("forward error: {e}"));
                            break;
                        }
                    }
                }
                match fail {
                    Some(reason) => Err(reason),
                    None => {
                        let scale = 1.0 / chunk.len() as f64;
                        let batch_loss = b.tape.scale(acc.expect("non-empty batch"), scale);
                        let loss_val = b.tape.value(batch_loss)[(0, 0)].as_f64();
                        if !loss_val.is_finite() {
                            Err(format!("non-finite loss {loss_val} at step {step}"))
                        } else {
                            let grads_all = b.tape.backward(batch_loss);
                            let mut grads = b.grads(&grads_all);
                            let norm = clip_global_norm(&mut grads, config.clip_norm);
                            if !norm.is_finite() {
                                Err(format!("non-finite gradient norm at step {step}"))
                            } else {
                                Ok((grads, loss_val, tok_sum * scale, dec_sum * scale, norm))
                            }
                        }
                    }
                }
            };

            let (grads, loss_val, tok_val, dec_val, norm) = match outcome {
                Ok(v) => v,
                Err(reason) => {
                    aborted = Some(reason);
                    break 'outer;
                }
            };
            opt.step(&mut store, &grads, lr);
            for kind in &batch_tasks {
                let pos = TaskKind::ALL.iter().position(|k| k == kind).unwrap();
                task_counts[pos] += 1;
            }
            losses.push(loss_val);
            lrs.push(lr);
            if let Some(w) = &mut metrics {
                let record = StepRecord {
                    step,
                    epoch,
                    task: batch_tasks
                        .last()
                        .map(|k| k.name().to_string())
                        .unwrap_or_default(),
                    lr,
                    loss: loss_val,
                    tokenizer_loss: tok_val,
                    decoder_loss: dec_val,
                    grad_norm: norm,
                };
                writeln!(w, "{}", serde_json::to_string(&record)?)?;
            }
            step += 1;
        }
    }
    if let Some(w) = &mut metrics {
        w.flush()?;
    }

    let checkpoint = Checkpoint::capture(&store, &model.config, config.stage, step, config.lora);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("checkpoint.json"))?;
        if let Some(reason) = &aborted {
            fs::write(dir.join("ABORTED"), reason)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        steps: step,
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        aborted,
        losses,
        lrs,
        task_counts,
        run_dir: out_dir.map(Path::to_path_buf),
    })
}
