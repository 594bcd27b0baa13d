//! Matched losses for the decoder.
//!
//! Decoded tuples are aligned to ground-truth objects by Hungarian matching
//! under a classification + location cost; matched tuples then receive
//! cross-entropy on their class slot and on every coordinate slot (targets
//! are the quantized offsets under the tuple's anchor), unmatched tuples a
//! down-weighted cross-entropy toward the per-call no-object class, and text
//! sequences standard next-token cross-entropy. The decoder loss is the mean
//! over supervised slots plus the mean over text tokens.

use crate::coord::{quantize, Anchor};
use crate::decoder::{PerceptionDecode, PredictionTuple};
use crate::error::{Error, Result};
use crate::instruction::SlotKind;
use crate::nn::{Bound, Var};
use crate::scalar::Scalar;

use super::{hungarian, MatchResult};

/// Weight of the no-object cross-entropy on unmatched tuples.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
/// Weight of the location term in the matching cost.
pub const LAMBDA_LOC: f64 = 5.0;

/// One ground-truth object, in the coordinate frame of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    /// Index into the instruction's category set.
    pub class_index: usize,
    /// Pixel coordinates, one pair per format point.
    pub points: Vec<(f64, f64)>,
}

/// Matching cost between one decoded tuple and one ground truth:
/// `−log p(class) + λ·(1/2N)·Σ (|Δx|/W + |Δy|/H)` over the tuple's decoded
/// points. With `lambda_loc` = 0 this is the pure classification cost.
pub fn perception_cost(
    pred: &PredictionTuple,
    gt: &GtObject,
    image_size: (usize, usize),
    lambda_loc: f64,
) -> f64 {
    let cls = -pred.class_probs[gt.class_index].max(1e-300).ln();
    let n = pred.points.len();
    if n == 0 || lambda_loc == 0.0 {
        return cls;
    }
    assert_eq!(n, gt.points.len(), "point count mismatch");
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let l1: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| (p.0 - g.0).abs() / w + (p.1 - g.1).abs() / h)
        .sum();
    cls + lambda_loc * l1 / (2.0 * n as f64)
}

/// The assembled loss: the scalar node, its parts, and the matching used by
/// the perception term.
#[derive(Debug, Clone)]
pub struct DecoderLossBreakdown {
    pub total: Var,
    pub perception: Option<Var>,
    pub text: Option<Var>,
    pub matching: Option<MatchResult>,
}

/// Unified decoder loss over an optional perception decode (with its ground
/// truths and the image size) and an optional teacher-forced text pass
/// (logits with one row per target id).
pub fn decoder_loss<F: Scalar>(
    bound: &mut Bound<F>,
    perception: Option<(&PerceptionDecode, &[GtObject], (usize, usize))>,
    text: Option<(Var, &[usize])>,
) -> Result<DecoderLossBreakdown> {
    let mut total: Option<Var> = None;
    let mut perception_var = None;
    let mut text_var = None;
    let mut matching = None;

    if let Some((dec, gts, image_size)) = perception {
        let n = dec.format.point_count;
        for gt in gts {
            if gt.points.len() != n {
                return Err(Error::Model(format!(
                    "ground truth has {} points, format wants {n}",
                    gt.points.len()
                )));
            }
            if gt.class_index + 1 >= dec.class_ids.len() {
                return Err(Error::Model(format!(
                    "ground-truth class {} outside the {}-entry category set",
                    gt.class_index,
                    dec.class_ids.len() - 1
                )));
            }
        }
        let tuples = dec.tuples(&bound.tape, image_size)?;
        let mut cost = ndarray::Array2::<f64>::zeros((dec.groups, gts.len()));
        for (i, t) in tuples.iter().enumerate() {
            for (j, gt) in gts.iter().enumerate() {
                cost[(i, j)] = perception_cost(t, gt, image_size, LAMBDA_LOC);
            }
        }
        let m = hungarian(cost.view())?;
        let v = perception_ce(bound, dec, gts, image_size, &m.pairs)?;
        perception_var = Some(v);
        matching = Some(m);
        total = Some(v);
    }

    if let Some((logits, targets)) = text {
        if targets.is_empty() {
            return Err(Error::Model("empty text target".into()));
        }
        let rows = bound.tape.value(logits).nrows();
        if rows != targets.len() {
            return Err(Error::Model(format!(
                "{rows} logit rows for {} text targets",
                targets.len()
            )));
        }
        let w = vec![1.0 / targets.len() as f64; targets.len()];
        let v = bound.tape.cross_entropy_sum(logits, targets, &w);
        text_var = Some(v);
        total = Some(match total {
            None => v,
            Some(t) => bound.tape.add(t, v),
        });
    }

    let total = total.ok_or_else(|| {
        Error::Model("decoder loss needs a perception or text target".into())
    })?;
    Ok(DecoderLossBreakdown {
        total,
        perception: perception_var,
        text: text_var,
        matching,
    })
}

/// Slot cross-entropy under a fixed pairing: matched groups are supervised
/// on every slot, unmatched groups on the class slot toward no-object with
/// weight [`NO_OBJECT_WEIGHT`]; mean over supervised slots.
fn perception_ce<F: Scalar>(
    bound: &mut Bound<F>,
    dec: &PerceptionDecode,
    gts: &[GtObject],
    image_size: (usize, usize),
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let a = dec.arity();
    let rows = dec.groups * a;
    let mut targets = vec![0usize; rows];
    let mut weights = vec![0.0f64; rows];
    let mut matched = vec![false; dec.groups];
    let supervised = pairs.len() * a + (dec.groups - pairs.len());
    let w = 1.0 / supervised as f64;

    for &(g, j) in pairs {
        matched[g] = true;
        let gt = &gts[j];
        let anchor = Anchor::new(dec.anchors[g].0, dec.anchors[g].1)?;
        for (si, slot) in dec.format.slots.iter().enumerate() {
            let r = dec.row(g, si);
            weights[r] = w;
            targets[r] = match *slot {
                SlotKind::Class => dec.class_ids[gt.class_index],
                SlotKind::X(i) => {
                    let (ix, _) = quantize(gt.points[i], anchor, image_size, dec.range)?;
                    dec.loc_start + (ix + dec.range) as usize
                }
                SlotKind::Y(i) => {
                    let (_, iy) = quantize(gt.points[i], anchor, image_size, dec.range)?;
                    dec.loc_start + (iy + dec.range) as usize
                }
                SlotKind::Bos => {
                    return Err(Error::Model("text slot in perception format".into()))
                }
            };
        }
    }
    let class_slot = dec
        .format
        .slots
        .iter()
        .position(|s| *s == SlotKind::Class)
        .expect("perception format has a class slot");
    for g in 0..dec.groups {
        if !matched[g] {
            let r = dec.row(g, class_slot);
            targets[r] = *dec.class_ids.last().unwrap();
            weights[r] = NO_OBJECT_WEIGHT * w;
        }
    }
    Ok(bound.tape.cross_entropy_sum(dec.logits, &targets, &weights))
}
