//! The assembled model: one vocabulary, a language-guided image tokenizer and
//! an open task decoder behind per-task entry points.
//!
//! An [`InstructionSpec`] fully determines a forward pass: its text guides the
//! tokenizer and becomes the decoder context (image tokens spliced at
//! `<image>`), its category set binds class tokens, and its output format
//! decides between parallel perception decoding and autoregressive text. The
//! training loss is the tokenizer loss plus the matched decoder loss.

use ndarray::Array2;

use crate::data::SceneSample;
use crate::decoder::{Decoder, DecoderConfig, DecoderContext, ImageSplice, PerceptionDecode};
use crate::error::{Error, Result};
use crate::geometry::{polygon_from_mask, BBox, PolygonMask};
use crate::instruction::{InstructionSpec, TaskKind};
use crate::matching::{decoder_loss, DecoderLossBreakdown, GtObject};
use crate::nn::{Bound, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tokenizer::{tokenizer_loss, Tokenizer, TokenizerConfig, TokenizerOutput};
use crate::vocab::{standard_vocab, Vocab};

/// Everything needed to build a [`TaskModel`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Coordinate range R; location tokens cover −R..=R.
    pub range: i64,
    /// Class-token inventory size K (bounds category-set size to K−1).
    pub num_class_tokens: usize,
    /// Greedy text decoding cap.
    pub max_text_len: usize,
    pub tokenizer: TokenizerConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            range: 64,
            num_class_tokens: 8,
            max_text_len: 32,
            tokenizer: TokenizerConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A reduced preset sized for CPU training runs and tests.
    pub fn small() -> ModelConfig {
        ModelConfig {
            range: 64,
            num_class_tokens: 8,
            max_text_len: 32,
            tokenizer: TokenizerConfig {
                m: 25,
                d: 32,
                heads: 4,
                text_layers: 1,
                query_layers: 2,
                mode: crate::tokenizer::TokenizerMode::Query,
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 4,
                width: 32,
                lora_rank: 4,
                lora_alpha: 8.0,
                max_seq_len: 256,
                object_slots: 25,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.decoder.validate()?;
        if self.range < 1 {
            return Err(Error::Model(format!("range {} must be >= 1", self.range)));
        }
        if self.num_class_tokens < 2 {
            return Err(Error::Model(
                "need at least 2 class tokens (one class plus no-object)".into(),
            ));
        }
        if self.decoder.object_slots > self.tokenizer.m {
            return Err(Error::Model(format!(
                "{} object slots exceed the {} image tokens that anchor them",
                self.decoder.object_slots, self.tokenizer.m
            )));
        }
        if self.max_text_len == 0 {
            return Err(Error::Model("max_text_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Class names present in a scene, first-appearance order, deduplicated —
/// the `must_include` list for category-subset sampling.
pub fn present_classes(sample: &SceneSample) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for o in &sample.objects {
        let n = o.class_name().to_string();
        if !names.contains(&n) {
            names.push(n);
        }
    }
    names
}

/// Image pixels as the `(h·w)×3` row-major array the tokenizer consumes.
pub fn image_rows<F: Scalar>(sample: &SceneSample) -> Array2<F> {
    let c = sample.canvas;
    Array2::from_shape_fn((c * c, 3), |(i, ch)| {
        F::of(sample.pixels[i * 3 + ch] as f64 / 255.0)
    })
}

/// One decoded detection in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Index into the instruction's category set.
    pub class_index: usize,
    pub bbox: BBox<f64>,
    pub confidence: f64,
}

/// One decoded instance mask as a polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    pub class_index: usize,
    pub polygon: PolygonMask<f64>,
    pub confidence: f64,
}

/// The per-sample training loss and its parts.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    /// Tokenizer loss plus decoder loss.
    pub total: Var,
    pub tokenizer: Var,
    pub decoder: DecoderLossBreakdown,
}

/// The full instruction-driven model.
#[derive(Debug)]
pub struct TaskModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tokenizer: Tokenizer,
    pub decoder: Decoder,
}

impl TaskModel {
    pub fn new<F: Scalar, R: rand::Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        config: &ModelConfig,
    ) -> Result<TaskModel> {
        config.validate()?;
        let vocab = standard_vocab(config.range, config.num_class_tokens)?;
        let tokenizer = Tokenizer::new(store, rng, &config.tokenizer, vocab.len())?;
        let decoder = Decoder::new(store, rng, &config.decoder, &vocab, config.tokenizer.d)?;
        Ok(TaskModel {
            config: config.clone(),
            vocab,
            tokenizer,
            decoder,
        })
    }

    /// Fraction of ids that encode to `<unk>` — a corpus/lexicon diagnostic.
    pub fn unk_fraction(&self, text: &str) -> f64 {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return 0.0;
        }
        let unk = ids.iter().filter(|&&id| id == self.vocab.unk_id()).count();
        unk as f64 / ids.len() as f64
    }

    /// Tokenizer pass plus decoder context for one (image, instruction) pair.
    pub fn encode_scene<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        image: &Array2<F>,
        h: usize,
        w: usize,
        instr: &InstructionSpec,
    ) -> Result<(TokenizerOutput, DecoderContext)> {
        // The guidance text is the instruction minus the splice placeholder.
        let guide: Vec<usize> = self
            .vocab
            .encode(&instr.text)
            .into_iter()
            .filter(|&id| id != self.vocab.image_id())
            .collect();
        let out = self.tokenizer.forward(bound, image, h, w, &guide)?;
        let tokens = out.tokens(&bound.tape);
        let ctx = self.decoder.build_context(
            bound,
            &self.vocab,
            &instr.text,
            Some(ImageSplice {
                embed: out.embed,
                tokens: &tokens,
            }),
        )?;
        Ok((out, ctx))
    }

    /// Parallel perception decode under the instruction's category set and
    /// output format, over the configured number of object slots.
    pub fn perceive<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        ctx: &DecoderContext,
        instr: &InstructionSpec,
    ) -> Result<PerceptionDecode> {
        let set = instr
            .category_set
            .as_ref()
            .ok_or_else(|| Error::Model("instruction has no category set".into()))?;
        self.decoder.decode_perception(
            bound,
            ctx,
            set,
            &instr.format,
            self.config.decoder.object_slots,
        )
    }

    /// Training loss for one sample under one instruction: tokenizer loss on
    /// all object centers plus the task-appropriate decoder loss.
    pub fn sample_loss<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        sample: &SceneSample,
        instr: &InstructionSpec,
    ) -> Result<SampleLoss> {
        let image = image_rows::<F>(sample);
        let (out, ctx) = self.encode_scene(bound, &image, sample.canvas, sample.canvas, instr)?;
        let (tok_loss, _) = tokenizer_loss(bound, &out, &sample.normalized_centers())?;
        let size = (sample.canvas, sample.canvas);

        let breakdown = if instr.task_kind.is_perception() {
            let decode = self.perceive(bound, &ctx, instr)?;
            let gts = self.gt_objects(sample, instr)?;
            decoder_loss(bound, Some((&decode, &gts, size)), None)?
        } else {
            let targets = self.text_targets(sample, instr)?;
            let logits = self.decoder.text_logits(bound, &ctx, &targets)?;
            decoder_loss(bound, None, Some((logits, &targets)))?
        };
        let total = bound.tape.add(tok_loss, breakdown.total);
        Ok(SampleLoss {
            total,
            tokenizer: tok_loss,
            decoder: breakdown,
        })
    }

    /// Ground-truth objects for a perception instruction. Objects whose class
    /// is not in the category set are background under that instruction and
    /// yield no target.
    fn gt_objects(&self, sample: &SceneSample, instr: &InstructionSpec) -> Result<Vec<GtObject>> {
        let set = instr
            .category_set
            .as_ref()
            .ok_or_else(|| Error::Model("instruction has no category set".into()))?;
        match instr.task_kind {
            TaskKind::Detection => Ok(sample
                .objects
                .iter()
                .filter_map(|o| {
                    set.index_of(o.class_name()).map(|k| GtObject {
                        class_index: k,
                        points: vec![(o.bbox.x1, o.bbox.y1), (o.bbox.x2, o.bbox.y2)],
                    })
                })
                .collect()),
            TaskKind::Segmentation => {
                let n = instr.format.point_count;
                let mut gts = Vec::new();
                for o in &sample.objects {
                    let Some(k) = set.index_of(o.class_name()) else {
                        continue;
                    };
                    let (poly, _) = polygon_from_mask(&o.mask, n)?;
                    gts.push(GtObject {
                        class_index: k,
                        points: poly.vertices(),
                    });
                }
                Ok(gts)
            }
            TaskKind::Grounding => {
                let expr = instr
                    .expression
                    .as_deref()
                    .ok_or_else(|| Error::Model("grounding instruction lacks expression".into()))?;
                let g = sample
                    .groundings
                    .iter()
                    .find(|g| g.expression == expr)
                    .ok_or_else(|| {
                        Error::Model(format!("expression {expr:?} not annotated on this sample"))
                    })?;
                let o = &sample.objects[g.object_index];
                Ok(vec![GtObject {
                    class_index: 0,
                    points: vec![(o.bbox.x1, o.bbox.y1), (o.bbox.x2, o.bbox.y2)],
                }])
            }
            _ => Err(Error::Model("text task has no ground-truth objects".into())),
        }
    }

    /// Target ids for a text instruction: the reference string plus `<eos>`.
    fn text_targets(&self, sample: &SceneSample, instr: &InstructionSpec) -> Result<Vec<usize>> {
        let reference = match instr.task_kind {
            TaskKind::Captioning => sample.caption.clone(),
            TaskKind::Vqa => {
                let q = instr
                    .question
                    .as_deref()
                    .ok_or_else(|| Error::Model("vqa instruction lacks question".into()))?;
                sample
                    .qa
                    .iter()
                    .find(|p| p.question == q)
                    .ok_or_else(|| {
                        Error::Model(format!("question {q:?} not annotated on this sample"))
                    })?
                    .answer
                    .clone()
            }
            _ => return Err(Error::Model("perception task has no text target".into())),
        };
        let mut ids = self.vocab.encode(&reference);
        ids.push(self.vocab.eos_id());
        Ok(ids)
    }

    /// Decoded detections: no-object tuples dropped, corners ordered and
    /// clamped to the canvas.
    pub fn predict_detections<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        sample: &SceneSample,
        instr: &InstructionSpec,
    ) -> Result<Vec<Detection>> {
        let decode = self.run_perception(bound, sample, instr)?;
        let set_len = decode.class_ids.len() - 1;
        let size = (sample.canvas, sample.canvas);
        let mut dets = Vec::new();
        for t in decode.tuples(&bound.tape, size)? {
            if t.class_index >= set_len {
                continue;
            }
            dets.push(Detection {
                class_index: t.class_index,
                bbox: corner_bbox(t.points[0], t.points[1], sample.canvas),
                confidence: t.confidence,
            });
        }
        Ok(dets)
    }

    /// Decoded instance polygons for a segmentation instruction.
    pub fn predict_segmentations<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        sample: &SceneSample,
        instr: &InstructionSpec,
    ) -> Result<Vec<SegPrediction>> {
        let decode = self.run_perception(bound, sample, instr)?;
        let set_len = decode.class_ids.len() - 1;
        let size = (sample.canvas, sample.canvas);
        let mut segs = Vec::new();
        for t in decode.tuples(&bound.tape, size)? {
            if t.class_index >= set_len {
                continue;
            }
            let n = t.points.len() as f64;
            let cx = t.points.iter().map(|p| p.0).sum::<f64>() / n;
            let cy = t.points.iter().map(|p| p.1).sum::<f64>() / n;
            segs.push(SegPrediction {
                class_index: t.class_index,
                polygon: PolygonMask {
                    center: (cx, cy),
                    points: t.points.iter().map(|p| (p.0 - cx, p.1 - cy)).collect(),
                },
                confidence: t.confidence,
            });
        }
        Ok(segs)
    }

    /// The grounding answer: the highest-confidence real-class box, if any.
    pub fn predict_grounding<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        sample: &SceneSample,
        instr: &InstructionSpec,
    ) -> Result<Option<Detection>> {
        let dets = self.predict_detections(bound, sample, instr)?;
        Ok(dets
            .into_iter()
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence)))
    }

    /// Greedy text generation, decoded back through the vocabulary.
    pub fn generate<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        sample: &SceneSample,
        instr: &InstructionSpec,
    ) -> Result<String> {
        let image = image_rows::<F>(sample);
        let (_, ctx) = self.encode_scene(bound, &image, sample.canvas, sample.canvas, instr)?;
        let ids = self
            .decoder
            .decode_text(bound, &ctx, self.config.max_text_len)?;
        Ok(self.vocab.decode(&ids))
    }

    fn run_perception<F: Scalar>(
        &self,
        bound: &mut Bound<'_, F>,
        sample: &SceneSample,
        instr: &InstructionSpec,
    ) -> Result<PerceptionDecode> {
        let image = image_rows::<F>(sample);
        let (_, ctx) = self.encode_scene(bound, &image, sample.canvas, sample.canvas, instr)?;
        self.perceive(bound, &ctx, instr)
    }
}

/// Two decoded corner points to an ordered bbox clamped to the canvas.
fn corner_bbox(p1: (f64, f64), p2: (f64, f64), canvas: usize) -> BBox<f64> {
    let c = canvas as f64;
    let x1 = p1.0.min(p2.0).clamp(0.0, c);
    let x2 = p1.0.max(p2.0).clamp(0.0, c);
    let y1 = p1.1.min(p2.1).clamp(0.0, c);
    let y2 = p1.1.max(p2.1).clamp(0.0, c);
    BBox { x1, y1, x2, y2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GenConfig};
    use crate::instruction::{
        render, sample_instruction, CategorySet, RandomnessFlags, RenderArgs, SampleContext,
        TemplateBank,
    };
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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
                mode: crate::tokenizer::TokenizerMode::Query,
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

    fn build(seed: u64) -> (ParamStore<f32>, TaskModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TaskModel::new(&mut store, &mut rng, &tiny_config()).unwrap();
        (store, model)
    }

    fn scene(seed: u64) -> crate::data::SceneSample {
        generate_scene(&GenConfig::default(), seed).unwrap()
    }

    fn detection_instr(model: &TaskModel, classes: &[&str]) -> InstructionSpec {
        let set = CategorySet::new(classes.iter().map(|s| s.to_string()).collect()).unwrap();
        render(
            TemplateBank::standard().canonical(TaskKind::Detection),
            &RenderArgs {
                category_set: Some(&set),
                range: model.config.range,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_more_object_slots_than_image_tokens() {
        let mut config = tiny_config();
        config.decoder.object_slots = config.tokenizer.m + 1;
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TaskModel::new(&mut store, &mut rng, &config).is_err());
    }

    #[test]
    fn detection_loss_is_finite_and_sums_tokenizer_and_decoder_parts() {
        let (store, model) = build(0);
        let sample = scene(7);
        let instr = detection_instr(&model, &["circle", "square", "triangle", "ellipse", "star"]);
        let mut b = Bound::new(&store);
        let loss = model.sample_loss(&mut b, &sample, &instr).unwrap();
        let total = b.tape.value(loss.total)[(0, 0)];
        let tok = b.tape.value(loss.tokenizer)[(0, 0)];
        let dec = b.tape.value(loss.decoder.total)[(0, 0)];
        assert!(total.is_finite() && total > 0.0);
        assert_eq!(total, tok + dec);
        assert!(loss.decoder.matching.is_some());
    }

    #[test]
    fn unlisted_classes_become_background_targets() {
        let (store, model) = build(1);
        let mut config = GenConfig::default();
        config.classes = vec![crate::data::ShapeKind::Circle];
        let sample = generate_scene(&config, 3).unwrap();
        let instr = detection_instr(&model, &["square"]);
        let mut b = Bound::new(&store);
        let loss = model.sample_loss(&mut b, &sample, &instr).unwrap();
        let m = loss.decoder.matching.unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_rows.len(), model.config.decoder.object_slots);
    }

    #[test]
    fn segmentation_loss_accepts_every_supported_point_count() {
        let (store, model) = build(2);
        let sample = scene(11);
        let bank = TemplateBank::standard();
        let set = CategorySet::new(
            ["circle", "square", "triangle", "ellipse", "star"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        for n in [8usize, 24] {
            let instr = render(
                bank.canonical(TaskKind::Segmentation),
                &RenderArgs {
                    category_set: Some(&set),
                    range: model.config.range,
                    point_count: Some(n),
                    ..Default::default()
                },
            )
            .unwrap();
            let mut b = Bound::new(&store);
            let loss = model.sample_loss(&mut b, &sample, &instr).unwrap();
            assert!(b.tape.value(loss.total)[(0, 0)].is_finite());
        }
    }

    #[test]
    fn grounding_loss_requires_an_annotated_expression() {
        let (store, model) = build(3);
        let bank = TemplateBank::standard();
        let mut sample = scene(19);
        let mut k = 20u64;
        while sample.groundings.is_empty() {
            sample = scene(k);
            k += 1;
        }
        let expr = sample.groundings[0].expression.clone();
        let instr = render(
            bank.canonical(TaskKind::Grounding),
            &RenderArgs {
                range: model.config.range,
                expression: Some(&expr),
                ..Default::default()
            },
        )
        .unwrap();
        let mut b = Bound::new(&store);
        let loss = model.sample_loss(&mut b, &sample, &instr).unwrap();
        assert!(b.tape.value(loss.total)[(0, 0)].is_finite());

        let bogus = render(
            bank.canonical(TaskKind::Grounding),
            &RenderArgs {
                range: model.config.range,
                expression: Some("the plaid dodecahedron"),
                ..Default::default()
            },
        )
        .unwrap();
        let mut b2 = Bound::new(&store);
        assert!(model.sample_loss(&mut b2, &sample, &bogus).is_err());
    }

    #[test]
    fn caption_and_vqa_losses_are_text_only() {
        let (store, model) = build(4);
        let bank = TemplateBank::standard();
        let mut sample = scene(23);
        let mut k = 24u64;
        while sample.qa.is_empty() {
            sample = scene(k);
            k += 1;
        }
        let cap = render(bank.canonical(TaskKind::Captioning), &RenderArgs::default()).unwrap();
        let mut b = Bound::new(&store);
        let loss = model.sample_loss(&mut b, &sample, &cap).unwrap();
        assert!(loss.decoder.perception.is_none());
        assert!(loss.decoder.text.is_some());

        let q = sample.qa[0].question.clone();
        let vqa = render(
            bank.canonical(TaskKind::Vqa),
            &RenderArgs {
                question: Some(&q),
                ..Default::default()
            },
        )
        .unwrap();
        let mut b2 = Bound::new(&store);
        let loss = model.sample_loss(&mut b2, &sample, &vqa).unwrap();
        assert!(loss.decoder.text.is_some());
        assert!(b2.tape.value(loss.total)[(0, 0)].is_finite());
    }

    #[test]
    fn corpus_text_encodes_without_unknown_tokens() {
        let (_, model) = build(5);
        for seed in 0..5 {
            let s = scene(seed);
            let mut texts = vec![s.caption.clone()];
            texts.extend(s.groundings.iter().map(|g| g.expression.clone()));
            texts.extend(s.qa.iter().flat_map(|p| [p.question.clone(), p.answer.clone()]));
            for t in texts {
                assert_eq!(model.unk_fraction(&t), 0.0, "unk in {t:?}");
            }
        }
    }

    #[test]
    fn untrained_detections_stay_within_canvas_and_confidence_bounds() {
        let (store, model) = build(6);
        let sample = scene(31);
        let instr = detection_instr(&model, &["circle", "square"]);
        let mut b = Bound::new(&store);
        let dets = model.predict_detections(&mut b, &sample, &instr).unwrap();
        assert!(dets.len() <= model.config.decoder.object_slots);
        let c = sample.canvas as f64;
        for d in dets {
            assert!(d.class_index < 2);
            assert!((0.0..=1.0).contains(&d.confidence));
            assert!(d.bbox.x1 <= d.bbox.x2 && d.bbox.y1 <= d.bbox.y2);
            assert!(d.bbox.x1 >= 0.0 && d.bbox.y2 <= c);
        }
    }

    #[test]
    fn segmentation_predictions_carry_the_requested_point_count() {
        let (store, model) = build(7);
        let sample = scene(37);
        let set = CategorySet::new(vec!["circle".into(), "square".into()]).unwrap();
        let instr = render(
            TemplateBank::standard().canonical(TaskKind::Segmentation),
            &RenderArgs {
                category_set: Some(&set),
                range: model.config.range,
                point_count: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        let mut b = Bound::new(&store);
        for seg in model.predict_segmentations(&mut b, &sample, &instr).unwrap() {
            assert_eq!(seg.polygon.points.len(), 8);
        }
    }

    #[test]
    fn generation_is_deterministic_lexicon_text() {
        let (store, model) = build(8);
        let sample = scene(41);
        let instr = render(
            TemplateBank::standard().canonical(TaskKind::Captioning),
            &RenderArgs::default(),
        )
        .unwrap();
        let mut b1 = Bound::new(&store);
        let t1 = model.generate(&mut b1, &sample, &instr).unwrap();
        let mut b2 = Bound::new(&store);
        let t2 = model.generate(&mut b2, &sample, &instr).unwrap();
        assert_eq!(t1, t2);
        for special in ["<bos>", "<eos>", "<pad>", "<image>"] {
            assert!(!t1.contains(special), "{t1:?}");
        }
    }

    #[test]
    fn sampled_instructions_drive_every_task_end_to_end() {
        let (store, model) = build(9);
        let bank = TemplateBank::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sample = scene(43);
        let mut k = 44u64;
        while sample.groundings.is_empty() || sample.qa.is_empty() {
            sample = scene(k);
            k += 1;
        }
        let master: Vec<String> = GenConfig::default().class_names();
        let present = present_classes(&sample);
        for kind in TaskKind::ALL {
            let ctx = SampleContext {
                master_classes: &master,
                must_include: &present,
                range: model.config.range,
                expression: sample.groundings.first().map(|g| g.expression.as_str()),
                question: sample.qa.first().map(|p| p.question.as_str()),
            };
            let instr =
                sample_instruction(&bank, kind, &mut rng, RandomnessFlags::all_on(), &ctx).unwrap();
            let mut b = Bound::new(&store);
            let loss = model.sample_loss(&mut b, &sample, &instr).unwrap();
            let v = b.tape.value(loss.total)[(0, 0)];
            assert!(v.is_finite() && v > 0.0, "{} loss {v}", kind.name());
        }
    }
}
