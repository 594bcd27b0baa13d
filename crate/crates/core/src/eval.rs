//! Metrics and the experiment harness.
//!
//! Detection and segmentation use greedy confidence-ordered matching with
//! 101-point interpolated average precision over the 0.50:0.05:0.95 IoU
//! threshold ladder; grounding reports precision at IoU 0.5; captions score
//! corpus-level BLEU-4 with brevity penalty. On top sit the
//! instruction-following report (category-subset detection plus the rate of
//! predictions that land on unlisted objects) and the desk-scale ablation
//! runner that trains one model per level and emits a metric trend.
//!
//! Determinism: predictions are ordered by descending confidence with ties
//! broken by ascending image index, then by the prediction's canonical
//! coordinate key, so every metric is invariant under permutation of the
//! input lists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::io::Dataset;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::geometry::{box_iou, polygon_from_mask, rasterize, BBox, Mask};
use crate::instruction::{
    render, CategorySet, InstructionSpec, RandomnessFlags, RenderArgs, TaskKind, TemplateBank,
    CANONICAL_SEGMENTATION_POINTS, SEGMENTATION_POINT_COUNTS,
};
use crate::model::{Detection, ModelConfig, SegPrediction, TaskModel};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tokenizer::TokenizerMode;
use crate::train::{train_stage1, train_stage2, TrainConfig};

/// A ground-truth box: category plus axis-aligned extent.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub class_index: usize,
    pub bbox: BBox<f64>,
}

/// A ground-truth instance mask.
#[derive(Debug, Clone)]
pub struct GtMask {
    pub class_index: usize,
    pub mask: Mask,
}

/// Average-precision summary over an IoU threshold ladder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ApSummary {
    /// Mean AP over categories and thresholds.
    pub map: f64,
    /// Mean AP over categories at IoU 0.5 (NaN if 0.5 is not evaluated).
    pub ap50: f64,
    /// Mean AP over categories at IoU 0.75 (NaN if 0.75 is not evaluated).
    pub ap75: f64,
    /// Category → AP averaged over thresholds.
    pub per_category: BTreeMap<usize, f64>,
    /// Predictions whose category appears nowhere in the ground truth.
    pub unknown_predictions: usize,
    pub warnings: Vec<String>,
}

/// Corpus BLEU-4 with its parts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BleuReport {
    pub bleu4: f64,
    /// Modified n-gram precisions for n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub warnings: Vec<String>,
}

/// Aggregate report over the evaluated tasks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub detection: Option<ApSummary>,
    pub segmentation: Option<ApSummary>,
    /// Grounding P@0.5.
    pub grounding: Option<f64>,
    pub caption: Option<BleuReport>,
    /// Hex SHA-256 of the model configuration JSON.
    pub config_fingerprint: String,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    /// Checks every present metric lies in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Eval(format!("{name} = {v} outside [0, 1]")));
            }
            Ok(())
        };
        if let Some(d) = &self.detection {
            check("detection mAP", d.map)?;
        }
        if let Some(s) = &self.segmentation {
            check("segmentation mAP", s.map)?;
        }
        if let Some(g) = self.grounding {
            check("grounding P@0.5", g)?;
        }
        if let Some(c) = &self.caption {
            check("BLEU-4", c.bleu4)?;
        }
        if self.wall_clock_seconds < 0.0 {
            return Err(Error::Eval("negative wall clock".into()));
        }
        Ok(())
    }
}

/// The 0.50:0.05:0.95 ladder (10 thresholds).
pub fn standard_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Hex SHA-256 over the canonical JSON of a model configuration.
pub fn config_fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Greedy-match AP engine shared by boxes and masks.

struct EngineItem {
    image: usize,
    class: usize,
    confidence: f64,
    /// Canonical coordinates for deterministic tie-breaking.
    key: Vec<f64>,
}

fn cmp_keys(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let c = x.total_cmp(y);
        if c != std::cmp::Ordering::Equal {
            return c;
        }
    }
    a.len().cmp(&b.len())
}

/// 101-point interpolated AP from ordered TP/FP flags.
fn interpolated_ap(tp_flags: &[bool], npos: usize) -> f64 {
    if tp_flags.is_empty() || npos == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / npos as f64);
    }
    for k in (0..precisions.len() - 1).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let k = recalls.partition_point(|&x| x < r);
        if k < precisions.len() {
            sum += precisions[k];
        }
    }
    sum / 101.0
}

/// Per-category AP at every threshold. `iou` maps a (prediction, ground
/// truth) global-index pair (same image, same class) to its overlap.
fn ap_per_category(
    preds: &[EngineItem],
    gts: &[(usize, usize)],
    iou: &HashMap<(usize, usize), f64>,
    thresholds: &[f64],
) -> (BTreeMap<usize, Vec<f64>>, usize, Vec<String>) {
    let categories: BTreeSet<usize> = gts.iter().map(|&(_, c)| c).collect();
    let unknown = preds.iter().filter(|p| !categories.contains(&p.class)).count();
    let mut warnings = Vec::new();
    if unknown > 0 {
        warnings.push(format!(
            "{unknown} prediction(s) in categories absent from the ground truth counted as false positives"
        ));
    }
    let mut table = BTreeMap::new();
    for &c in &categories {
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == c).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .confidence
                .total_cmp(&preds[a].confidence)
                .then_with(|| preds[a].image.cmp(&preds[b].image))
                .then_with(|| cmp_keys(&preds[a].key, &preds[b].key))
        });
        let cgt: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].1 == c).collect();
        let npos = cgt.len();
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut used = vec![false; cgt.len()];
            let mut flags = Vec::with_capacity(order.len());
            for &pi in &order {
                let mut best: Option<(f64, usize)> = None;
                for (slot, &gi) in cgt.iter().enumerate() {
                    if used[slot] || gts[gi].0 != preds[pi].image {
                        continue;
                    }
                    let v = iou.get(&(pi, gi)).copied().unwrap_or(0.0);
                    // Ties keep the earliest ground-truth index.
                    if v >= t && best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, slot));
                    }
                }
                match best {
                    Some((_, slot)) => {
                        used[slot] = true;
                        flags.push(true);
                    }
                    None => flags.push(false),
                }
            }
            aps.push(interpolated_ap(&flags, npos));
        }
        table.insert(c, aps);
    }
    (table, unknown, warnings)
}

fn summarize(
    table: BTreeMap<usize, Vec<f64>>,
    unknown: usize,
    mut warnings: Vec<String>,
    thresholds: &[f64],
) -> ApSummary {
    let at = |target: f64| -> f64 {
        match thresholds.iter().position(|&t| (t - target).abs() < 1e-9) {
            Some(idx) if !table.is_empty() => {
                table.values().map(|aps| aps[idx]).sum::<f64>() / table.len() as f64
            }
            _ => f64::NAN,
        }
    };
    let ap50 = at(0.5);
    let ap75 = at(0.75);
    let per_category: BTreeMap<usize, f64> = table
        .iter()
        .map(|(&c, aps)| (c, aps.iter().sum::<f64>() / aps.len() as f64))
        .collect();
    let map = if per_category.is_empty() {
        warnings.push("no ground-truth objects; AP reported as 0".into());
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    ApSummary {
        map,
        ap50,
        ap75,
        per_category,
        unknown_predictions: unknown,
        warnings,
    }
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Eval("no IoU thresholds".into()));
    }
    for &t in thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Eval(format!("IoU threshold {t} outside (0, 1]")));
        }
    }
    Ok(())
}

/// Box AP over parallel per-image prediction and ground-truth lists.
pub fn eval_detection(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    iou_thresholds: &[f64],
) -> Result<ApSummary> {
    validate_thresholds(iou_thresholds)?;
    if predictions.len() != ground_truth.len() {
        return Err(Error::Eval(format!(
            "{} prediction lists vs {} ground-truth lists",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut items = Vec::new();
    for (image, dets) in predictions.iter().enumerate() {
        for d in dets {
            if !d.confidence.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite confidence {} in image {image}",
                    d.confidence
                )));
            }
            items.push(EngineItem {
                image,
                class: d.class_index,
                confidence: d.confidence,
                key: vec![d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
            });
        }
    }
    let mut gts = Vec::new();
    let mut gt_boxes = Vec::new();
    for (image, list) in ground_truth.iter().enumerate() {
        for g in list {
            gts.push((image, g.class_index));
            gt_boxes.push(&g.bbox);
        }
    }
    let mut iou = HashMap::new();
    for (pi, p) in items.iter().enumerate() {
        for (gi, &(gim, gc)) in gts.iter().enumerate() {
            if gim == p.image && gc == p.class {
                let b = BBox::new(p.key[0], p.key[1], p.key[2], p.key[3])
                    .map_err(|e| Error::Eval(format!("prediction box: {e}")))?;
                iou.insert((pi, gi), box_iou(&b, gt_boxes[gi]));
            }
        }
    }
    let (table, unknown, warnings) = ap_per_category(&items, &gts, &iou, iou_thresholds);
    Ok(summarize(table, unknown, warnings, iou_thresholds))
}

/// Mask AP; predicted polygons are rasterized onto each image's canvas.
pub fn eval_segmentation(
    predictions: &[Vec<SegPrediction>],
    ground_truth: &[Vec<GtMask>],
    canvases: &[(usize, usize)],
    iou_thresholds: &[f64],
) -> Result<ApSummary> {
    validate_thresholds(iou_thresholds)?;
    if predictions.len() != ground_truth.len() || predictions.len() != canvases.len() {
        return Err(Error::Eval(format!(
            "{} prediction lists, {} ground-truth lists, {} canvases",
            predictions.len(),
            ground_truth.len(),
            canvases.len()
        )));
    }
    let mut items = Vec::new();
    let mut masks = Vec::new();
    for (image, segs) in predictions.iter().enumerate() {
        for s in segs {
            if !s.confidence.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite confidence {} in image {image}",
                    s.confidence
                )));
            }
            let mut key = vec![s.polygon.center.0, s.polygon.center.1];
            for &(dx, dy) in &s.polygon.points {
                key.push(dx);
                key.push(dy);
            }
            items.push(EngineItem {
                image,
                class: s.class_index,
                confidence: s.confidence,
                key,
            });
            masks.push(rasterize(&s.polygon, canvases[image]));
        }
    }
    let mut gts = Vec::new();
    let mut gt_masks = Vec::new();
    for (image, list) in ground_truth.iter().enumerate() {
        for g in list {
            gts.push((image, g.class_index));
            gt_masks.push(&g.mask);
        }
    }
    let mut iou = HashMap::new();
    for (pi, p) in items.iter().enumerate() {
        for (gi, &(gim, gc)) in gts.iter().enumerate() {
            if gim == p.image && gc == p.class {
                iou.insert((pi, gi), masks[pi].iou(gt_masks[gi])?);
            }
        }
    }
    let (table, unknown, warnings) = ap_per_category(&items, &gts, &iou, iou_thresholds);
    Ok(summarize(table, unknown, warnings, iou_thresholds))
}

/// Grounding precision at IoU 0.5. One entry per expression; `None` (no
/// prediction) counts as a failure.
pub fn eval_grounding(
    predictions: &[Option<BBox<f64>>],
    referents: &[BBox<f64>],
) -> Result<f64> {
    if predictions.len() != referents.len() {
        return Err(Error::Eval(format!(
            "{} predictions vs {} referents",
            predictions.len(),
            referents.len()
        )));
    }
    if referents.is_empty() {
        return Err(Error::Eval("no expressions to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(referents)
        .filter(|(p, r)| matches!(p, Some(b) if box_iou(b, r) >= 0.5))
        .count();
    Ok(hits as f64 / referents.len() as f64)
}

/// Corpus BLEU-4 with brevity penalty over whitespace tokens. Each candidate
/// needs at least one reference; empty candidates score zero and warn.
pub fn eval_caption(candidates: &[String], references: &[Vec<String>]) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::Eval(format!(
            "{} candidates vs {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Eval("empty caption corpus".into()));
    }
    let mut warnings = Vec::new();
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (ci, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(Error::Eval(format!("candidate {ci} has no references")));
        }
        let c: Vec<&str> = cand.split_whitespace().collect();
        if c.is_empty() {
            warnings.push(format!("candidate {ci} is empty"));
        }
        cand_len += c.len();
        ref_len += refs
            .iter()
            .map(|r| r.split_whitespace().count())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty reference list");
        for n in 1..=4usize {
            if c.len() >= n {
                total[n - 1] += c.len() - n + 1;
            }
            let mut counts: HashMap<Vec<&str>, usize> = HashMap::new();
            for w in c.windows(n) {
                *counts.entry(w.to_vec()).or_default() += 1;
            }
            let mut ref_max: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                let rt: Vec<&str> = r.split_whitespace().collect();
                let mut rc: HashMap<Vec<&str>, usize> = HashMap::new();
                for w in rt.windows(n) {
                    *rc.entry(w.to_vec()).or_default() += 1;
                }
                for (k, v) in rc {
                    let e = ref_max.entry(k).or_default();
                    *e = (*e).max(v);
                }
            }
            for (k, v) in &counts {
                clipped[n - 1] += (*v).min(ref_max.get(k).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        if total[n] == 0 {
            warnings.push(format!("no {}-grams in any candidate", n + 1));
        } else {
            precisions[n] = clipped[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if cand_len > ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let bleu4 = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu4,
        precisions,
        brevity_penalty,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Model-facing drivers.

/// Ground-truth boxes for the objects whose class appears in `classes`
/// (indices are positions in `classes`; other objects are unlisted).
pub fn gt_boxes(sample: &SceneSample, classes: &[String]) -> Vec<GtBox> {
    sample
        .objects
        .iter()
        .filter_map(|o| {
            classes.iter().position(|c| c == o.class_name()).map(|k| GtBox {
                class_index: k,
                bbox: o.bbox,
            })
        })
        .collect()
}

/// Ground-truth masks, indexed like [`gt_boxes`].
pub fn gt_masks(sample: &SceneSample, classes: &[String]) -> Vec<GtMask> {
    sample
        .objects
        .iter()
        .filter_map(|o| {
            classes.iter().position(|c| c == o.class_name()).map(|k| GtMask {
                class_index: k,
                mask: o.mask.clone(),
            })
        })
        .collect()
}

fn detection_instruction(classes: &[String], range: i64) -> Result<InstructionSpec> {
    let bank = TemplateBank::standard();
    let set = CategorySet::new(classes.to_vec())?;
    render(
        bank.canonical(TaskKind::Detection),
        &RenderArgs {
            category_set: Some(&set),
            range,
            point_count: None,
            question: None,
            expression: None,
        },
    )
}

/// Runs canonical detection over `samples`; returns per-image predictions
/// and ground truth ready for [`eval_detection`].
pub fn detect_samples<F: Scalar>(
    model: &TaskModel,
    store: &ParamStore<F>,
    samples: &[SceneSample],
    classes: &[String],
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<GtBox>>)> {
    let instr = detection_instruction(classes, model.config.range)?;
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut bound = Bound::new(store);
        preds.push(model.predict_detections(&mut bound, sample, &instr)?);
        gts.push(gt_boxes(sample, classes));
    }
    Ok((preds, gts))
}

/// Runs canonical segmentation with `point_count` vertices per mask.
pub fn segment_samples<F: Scalar>(
    model: &TaskModel,
    store: &ParamStore<F>,
    samples: &[SceneSample],
    classes: &[String],
    point_count: usize,
) -> Result<(Vec<Vec<SegPrediction>>, Vec<Vec<GtMask>>, Vec<(usize, usize)>)> {
    let bank = TemplateBank::standard();
    let set = CategorySet::new(classes.to_vec())?;
    let instr = render(
        bank.canonical(TaskKind::Segmentation),
        &RenderArgs {
            category_set: Some(&set),
            range: model.config.range,
            point_count: Some(point_count),
            question: None,
            expression: None,
        },
    )?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut canvases = Vec::new();
    for sample in samples {
        let mut bound = Bound::new(store);
        preds.push(model.predict_segmentations(&mut bound, sample, &instr)?);
        gts.push(gt_masks(sample, classes));
        canvases.push((sample.canvas, sample.canvas));
    }
    Ok((preds, gts, canvases))
}

/// Evaluates the requested tasks on held-out samples with canonical
/// (randomness-free) instructions.
pub fn evaluate_model<F: Scalar>(
    model: &TaskModel,
    store: &ParamStore<F>,
    samples: &[SceneSample],
    classes: &[String],
    tasks: &[TaskKind],
) -> Result<EvalReport> {
    let start = Instant::now();
    if samples.is_empty() {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    let thresholds = standard_iou_thresholds();
    let mut report = EvalReport {
        detection: None,
        segmentation: None,
        grounding: None,
        caption: None,
        config_fingerprint: config_fingerprint(&model.config),
        wall_clock_seconds: 0.0,
    };
    for &task in tasks {
        match task {
            TaskKind::Detection => {
                let (preds, gts) = detect_samples(model, store, samples, classes)?;
                report.detection = Some(eval_detection(&preds, &gts, &thresholds)?);
            }
            TaskKind::Segmentation => {
                let (preds, gts, canvases) = segment_samples(
                    model,
                    store,
                    samples,
                    classes,
                    CANONICAL_SEGMENTATION_POINTS,
                )?;
                report.segmentation =
                    Some(eval_segmentation(&preds, &gts, &canvases, &thresholds)?);
            }
            TaskKind::Grounding => {
                let bank = TemplateBank::standard();
                let mut preds = Vec::new();
                let mut refs = Vec::new();
                for sample in samples {
                    for g in &sample.groundings {
                        let instr = render(
                            bank.canonical(TaskKind::Grounding),
                            &RenderArgs {
                                category_set: None,
                                range: model.config.range,
                                point_count: None,
                                question: None,
                                expression: Some(&g.expression),
                            },
                        )?;
                        let mut bound = Bound::new(store);
                        let hit = model.predict_grounding(&mut bound, sample, &instr)?;
                        preds.push(hit.map(|d| d.bbox));
                        refs.push(sample.objects[g.object_index].bbox);
                    }
                }
                if !refs.is_empty() {
                    report.grounding = Some(eval_grounding(&preds, &refs)?);
                }
            }
            TaskKind::Captioning => {
                let bank = TemplateBank::standard();
                let instr = render(
                    bank.canonical(TaskKind::Captioning),
                    &RenderArgs {
                        category_set: None,
                        range: model.config.range,
                        point_count: None,
                        question: None,
                        expression: None,
                    },
                )?;
                let mut cands = Vec::new();
                let mut refs = Vec::new();
                for sample in samples {
                    let mut bound = Bound::new(store);
                    cands.push(model.generate(&mut bound, sample, &instr)?);
                    refs.push(vec![sample.caption.clone()]);
                }
                report.caption = Some(eval_caption(&cands, &refs)?);
            }
            TaskKind::Vqa => {
                // VQA is inspected qualitatively via `infer`; no benchmark
                // score is defined for it here.
            }
        }
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Instruction following.

/// Detection quality when the instruction lists only `subset`, plus how often
/// the model fires on objects it was not asked about.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SubsetReport {
    pub subset: Vec<String>,
    /// AP over the listed categories only.
    pub listed: ApSummary,
    /// Fraction of predictions whose best-overlap object (IoU ≥ 0.5) has an
    /// unlisted class.
    pub unlisted_rate: f64,
    pub predictions: usize,
}

/// Runs detection once per category subset. Empty subsets are rejected (an
/// instruction needs at least one category).
pub fn instruction_following_report<F: Scalar>(
    model: &TaskModel,
    store: &ParamStore<F>,
    samples: &[SceneSample],
    subsets: &[Vec<String>],
) -> Result<Vec<SubsetReport>> {
    let thresholds = standard_iou_thresholds();
    let mut reports = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let (preds, gts) = detect_samples(model, store, samples, subset)?;
        let listed = eval_detection(&preds, &gts, &thresholds)?;
        let mut total = 0usize;
        let mut unlisted_hits = 0usize;
        for (sample, dets) in samples.iter().zip(&preds) {
            for d in dets {
                total += 1;
                let best = sample
                    .objects
                    .iter()
                    .map(|o| (box_iou(&d.bbox, &o.bbox), o.class_name()))
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((iou, class)) = best {
                    if iou >= 0.5 && !subset.iter().any(|c| c == class) {
                        unlisted_hits += 1;
                    }
                }
            }
        }
        reports.push(SubsetReport {
            subset: subset.clone(),
            listed,
            unlisted_rate: if total == 0 {
                0.0
            } else {
                unlisted_hits as f64 / total as f64
            },
            predictions: total,
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Ablations.

/// Which model/training knob an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationAxis {
    /// Location-token range R (quantization steps per half-axis).
    Bins,
    /// Segmentation polygon vertices N at evaluation time.
    Points,
    /// Image token count M.
    Tokens,
    /// Query-based extraction vs average pooling.
    Tokenization,
    /// Instruction randomness on vs off during training.
    Randomness,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Bins => "bins",
            AblationAxis::Points => "points",
            AblationAxis::Tokens => "tokens",
            AblationAxis::Tokenization => "tokenization",
            AblationAxis::Randomness => "randomness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrendPoint {
    pub label: String,
    pub value: f64,
}

/// Metric-versus-level table produced by [`run_ablation`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrendTable {
    pub axis: String,
    pub metric: String,
    pub levels: Vec<TrendPoint>,
}

impl TrendTable {
    /// Human-readable two-column rendering.
    pub fn to_table_string(&self) -> String {
        let width = self
            .levels
            .iter()
            .map(|l| l.label.len())
            .chain([5])
            .max()
            .unwrap();
        let mut out = format!("{:<width$}  {}\n", "level", self.metric);
        for l in &self.levels {
            out.push_str(&format!("{:<width$}  {:.4}\n", l.label, l.value));
        }
        out
    }
}

/// A minimal standalone SVG line plot of a trend.
pub fn trend_svg(table: &TrendTable) -> String {
    let (w, h, ml, mb) = (480.0, 320.0, 50.0, 40.0);
    let plot_w = w - ml - 20.0;
    let plot_h = h - mb - 30.0;
    let n = table.levels.len().max(1);
    let y_max = table
        .levels
        .iter()
        .map(|l| l.value)
        .fold(1.0f64, f64::max)
        .max(1e-9);
    let pos = |i: usize, v: f64| -> (f64, f64) {
        let x = ml + if n == 1 { plot_w / 2.0 } else { plot_w * i as f64 / (n - 1) as f64 };
        let y = 20.0 + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));
        (x, y)
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        20.0 + plot_h,
        20.0 + plot_h,
        ml + plot_w,
        20.0 + plot_h
    ));
    let points: Vec<String> = table
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (x, y) = pos(i, l.value);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        points.join(" ")
    ));
    for (i, l) in table.levels.iter().enumerate() {
        let (x, y) = pos(i, l.value);
        svg.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"steelblue\"/>\n\
             <text x=\"{x:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            20.0 + plot_h + 16.0,
            l.label
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"14\" font-size=\"12\" text-anchor=\"middle\">{} vs {}</text>\n</svg>\n",
        ml + plot_w / 2.0,
        table.metric,
        table.axis
    ));
    svg
}

/// Trains one model per level (fixed seed) and reports the metric trend.
/// Level meaning per axis: `Bins` → R, `Points` → polygon N (single shared
/// two-stage training, per-level evaluation), `Tokens` → M,
/// `Tokenization` → 0 = average pooling / 1 = query, `Randomness` → 0 = fixed
/// instructions / 1 = randomized.
pub fn run_ablation<F: Scalar>(
    axis: AblationAxis,
    levels: &[i64],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_data: &Dataset,
    eval_samples: &[SceneSample],
    classes: &[String],
) -> Result<TrendTable> {
    if levels.is_empty() {
        return Err(Error::Eval("ablation needs at least one level".into()));
    }
    let detection_ap50 = |ckpt: &Checkpoint| -> Result<f64> {
        let (store, model) = ckpt.restore::<F>()?;
        let (preds, gts) = detect_samples(&model, &store, eval_samples, classes)?;
        Ok(eval_detection(&preds, &gts, &[0.5])?.map)
    };
    let finish_train = |model: &ModelConfig, train: &TrainConfig, label: &str| -> Result<Checkpoint> {
        let out = train_stage1::<F>(model, train, train_data, None)?;
        if let Some(reason) = out.aborted {
            return Err(Error::Eval(format!("level {label} aborted: {reason}")));
        }
        Ok(out.checkpoint)
    };
    let mut points = Vec::with_capacity(levels.len());
    match axis {
        AblationAxis::Bins => {
            for &r in levels {
                if r < 1 {
                    return Err(Error::Eval(format!("range level {r} must be >= 1")));
                }
                let label = format!("R={r}");
                let mut m = base_model.clone();
                m.range = r;
                let ckpt = finish_train(&m, base_train, &label)?;
                points.push(TrendPoint { label, value: detection_ap50(&ckpt)? });
            }
        }
        AblationAxis::Tokens => {
            for &mt in levels {
                if mt < 1 {
                    return Err(Error::Eval(format!("token level {mt} must be >= 1")));
                }
                let label = format!("M={mt}");
                let mut m = base_model.clone();
                m.tokenizer.m = mt as usize;
                m.validate()?;
                let ckpt = finish_train(&m, base_train, &label)?;
                points.push(TrendPoint { label, value: detection_ap50(&ckpt)? });
            }
        }
        AblationAxis::Tokenization => {
            for &mode in levels {
                let (label, tok_mode) = match mode {
                    0 => ("avg-pool".to_string(), TokenizerMode::AveragePool),
                    1 => ("query".to_string(), TokenizerMode::Query),
                    other => {
                        return Err(Error::Eval(format!(
                            "tokenization level {other} not in {{0, 1}}"
                        )))
                    }
                };
                let mut m = base_model.clone();
                m.tokenizer.mode = tok_mode;
                let ckpt = finish_train(&m, base_train, &label)?;
                points.push(TrendPoint { label, value: detection_ap50(&ckpt)? });
            }
        }
        AblationAxis::Randomness => {
            for &on in levels {
                let (label, flags) = match on {
                    0 => ("fixed".to_string(), RandomnessFlags {
                        description: false,
                        categories: false,
                        format: false,
                    }),
                    1 => ("random".to_string(), RandomnessFlags::all_on()),
                    other => {
                        return Err(Error::Eval(format!(
                            "randomness level {other} not in {{0, 1}}"
                        )))
                    }
                };
                let mut t = base_train.clone();
                t.randomness = flags;
                let ckpt = finish_train(base_model, &t, &label)?;
                points.push(TrendPoint { label, value: detection_ap50(&ckpt)? });
            }
        }
        AblationAxis::Points => {
            for &n in levels {
                if !SEGMENTATION_POINT_COUNTS.contains(&(n as usize)) {
                    return Err(Error::Eval(format!(
                        "point level {n} not in {SEGMENTATION_POINT_COUNTS:?}"
                    )));
                }
            }
            // One shared two-stage training; the level only changes the
            // evaluation-time instruction.
            let stage1 = train_stage1::<F>(base_model, base_train, train_data, None)?;
            if let Some(reason) = stage1.aborted {
                return Err(Error::Eval(format!("stage 1 aborted: {reason}")));
            }
            let mut t2 = base_train.clone();
            t2.stage = 2;
            let stage2 = train_stage2::<F>(&t2, &stage1.checkpoint, train_data, None)?;
            if let Some(reason) = stage2.aborted {
                return Err(Error::Eval(format!("stage 2 aborted: {reason}")));
            }
            let (store, model) = stage2.checkpoint.restore::<F>()?;
            for &n in levels {
                let (preds, gts, canvases) =
                    segment_samples(&model, &store, eval_samples, classes, n as usize)?;
                points.push(TrendPoint {
                    label: format!("N={n}"),
                    value: eval_segmentation(&preds, &gts, &canvases, &[0.5])?.map,
                });
            }
        }
    }
    Ok(TrendTable {
        axis: axis.name().to_string(),
        metric: if axis == AblationAxis::Points {
            "mask-ap50".to_string()
        } else {
            "box-ap50".to_string()
        },
        levels: points,
    })
}

/// Oracle segmentation ceiling: predicts each ground-truth mask's own
/// N-vertex polygon at confidence 1 and scores it. Bounds what any model can
/// reach at that vertex budget.
pub fn oracle_segmentation_ap(
    samples: &[SceneSample],
    classes: &[String],
    point_count: usize,
    iou_thresholds: &[f64],
) -> Result<ApSummary> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut canvases = Vec::new();
    for sample in samples {
        let gt = gt_masks(sample, classes);
        let mut p = Vec::new();
        for g in &gt {
            let (poly, _) = polygon_from_mask(&g.mask, point_count)?;
            p.push(SegPrediction {
                class_index: g.class_index,
                polygon: poly,
                confidence: 1.0,
            });
        }
        preds.push(p);
        gts.push(gt);
        canvases.push((sample.canvas, sample.canvas));
    }
    eval_segmentation(&preds, &gts, &canvases, iou_thresholds)
}
