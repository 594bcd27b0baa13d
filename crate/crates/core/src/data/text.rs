//! Caption, referring-expression, and question generation for scenes.
//!
//! All text comes from small closed grammars over the standard lexicon.
//! Captions are a pure function of the scene (object enumeration plus one
//! spatial relation), expressions carry their structured semantics so
//! uniqueness can be verified exhaustively, and QA answers are always single
//! lexicon tokens.

use rand::Rng;

use super::shape::ShapeKind;
use super::{Color, QaPair, SceneObject, SizeBucket};

/// Attribute filter for one object: optional size and color, mandatory shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Descriptor {
    pub size: Option<SizeBucket>,
    pub color: Option<Color>,
    pub shape: ShapeKind,
}

impl Descriptor {
    pub fn matches(&self, o: &SceneObject) -> bool {
        self.shape == o.shape.kind
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|s| s == o.size_bucket)
    }

    /// "the [size] [color] shape"
    pub fn render(&self) -> String {
        let mut out = String::from("the");
        if let Some(s) = self.size {
            out.push(' ');
            out.push_str(s.name());
        }
        if let Some(c) = self.color {
            out.push(' ');
            out.push_str(c.name());
        }
        out.push(' ');
        out.push_str(self.shape.name());
        out
    }
}

/// Spatial relation between object centers (y grows downward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn render(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn holds(self, target: &SceneObject, reference: &SceneObject) -> bool {
        match self {
            Relation::LeftOf => target.center.0 < reference.center.0,
            Relation::RightOf => target.center.0 > reference.center.0,
            Relation::Above => target.center.1 < reference.center.1,
            Relation::Below => target.center.1 > reference.center.1,
        }
    }
}

/// Structured semantics of a referring expression: a target descriptor,
/// optionally constrained by a relation to a uniquely-described reference.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpressionSem {
    pub target: Descriptor,
    pub relation: Option<(Relation, Descriptor)>,
}

impl ExpressionSem {
    /// "the red circle" / "the small red circle" /
    /// "the red circle left of the blue square"
    pub fn render(&self) -> String {
        match &self.relation {
            None => self.target.render(),
            Some((rel, r)) => {
                format!("{} {} {}", self.target.render(), rel.render(), r.render())
            }
        }
    }
}

/// Exhaustive evaluation of expression semantics over a scene: the indices of
/// all objects satisfying it. A relational expression whose reference is not
/// unique satisfies nothing.
pub fn evaluate_expression(sem: &ExpressionSem, objects: &[SceneObject]) -> Vec<usize> {
    let candidates: Vec<usize> = (0..objects.len())
        .filter(|&i| sem.target.matches(&objects[i]))
        .collect();
    let Some((rel, ref_desc)) = &sem.relation else {
        return candidates;
    };
    let refs: Vec<usize> = (0..objects.len())
        .filter(|&i| ref_desc.matches(&objects[i]))
        .collect();
    let [r] = refs.as_slice() else {
        return vec![];
    };
    candidates
        .into_iter()
        .filter(|&i| i != *r && rel.holds(&objects[i], &objects[*r]))
        .collect()
}

/// Finds a uniquely-resolving expression for object `target`, trying simple
/// descriptors first, then size-qualified, then relational forms. Returns
/// `None` when the closed grammar cannot single the object out.
pub fn unique_expression(objects: &[SceneObject], target: usize) -> Option<ExpressionSem> {
    let o = &objects[target];
    let plain = Descriptor {
        size: None,
        color: Some(o.color),
        shape: o.shape.kind,
    };
    for desc in [
        plain,
        Descriptor {
            size: Some(o.size_bucket),
            ..plain
        },
    ] {
        let sem = ExpressionSem {
            target: desc,
            relation: None,
        };
        if evaluate_expression(&sem, objects) == [target] {
            return Some(sem);
        }
    }
    // Relational fallback: anchor on any uniquely color+shape-described other
    // object, in index order, trying relations in fixed order.
    for (r, reference) in objects.iter().enumerate() {
        if r == target {
            continue;
        }
        let ref_desc = Descriptor {
            size: None,
            color: Some(reference.color),
            shape: reference.shape.kind,
        };
        for rel in Relation::ALL {
            let sem = ExpressionSem {
                target: plain,
                relation: Some((rel, ref_desc)),
            };
            if evaluate_expression(&sem, objects) == [target] {
                return Some(sem);
            }
        }
    }
    None
}

/// Scene order for captions: left to right by center x, ties broken top to
/// bottom, then by index.
pub fn caption_order(objects: &[SceneObject]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..objects.len()).collect();
    idx.sort_by(|&a, &b| {
        let (oa, ob) = (&objects[a], &objects[b]);
        oa.center
            .0
            .partial_cmp(&ob.center.0)
            .unwrap()
            .then(oa.center.1.partial_cmp(&ob.center.1).unwrap())
            .then(a.cmp(&b))
    });
    idx
}

/// Deterministic caption: enumerate objects left to right, then state one
/// spatial relation between the first two.
pub fn caption(objects: &[SceneObject]) -> String {
    let order = caption_order(objects);
    let phrase = |i: usize| {
        let o = &objects[i];
        format!("a {} {}", o.color.name(), o.shape.kind.name())
    };
    let list: Vec<String> = order.iter().map(|&i| phrase(i)).collect();
    let mut out = list.join(" and ");
    out.push_str(" .");
    if order.len() >= 2 {
        let (a, b) = (&objects[order[0]], &objects[order[1]]);
        let dx = b.center.0 - a.center.0; // >= 0 by the sort
        let dy = b.center.1 - a.center.1;
        let rel = if dx >= dy.abs() {
            Relation::LeftOf
        } else if dy > 0.0 {
            Relation::Above
        } else {
            Relation::Below
        };
        out.push_str(&format!(
            " the {} {} is {} the {} {} .",
            a.color.name(),
            a.shape.kind.name(),
            rel.render(),
            b.color.name(),
            b.shape.kind.name()
        ));
    }
    out
}

/// Templated QA: one counting question always, plus an attribute and a
/// spatial question when the scene supports them, capped at `max`.
pub fn generate_qa(
    objects: &[SceneObject],
    classes: &[ShapeKind],
    colors: &[Color],
    max: usize,
    rng: &mut impl Rng,
) -> Vec<QaPair> {
    let mut out = Vec::new();

    // Counting: color+shape or shape-only, drawn over the config inventory so
    // zero counts occur too.
    let shape = classes[rng.gen_range(0..classes.len())];
    let color = if rng.gen_bool(0.5) {
        Some(colors[rng.gen_range(0..colors.len())])
    } else {
        None
    };
    let count = objects
        .iter()
        .filter(|o| o.shape.kind == shape && color.is_none_or(|c| c == o.color))
        .count();
    let question = match color {
        Some(c) => format!("how many {} {} are there ?", c.name(), shape.plural()),
        None => format!("how many {} are there ?", shape.plural()),
    };
    out.push(QaPair {
        question,
        answer: count.to_string(),
    });

    // Attribute: ask the color of a shape that appears exactly once.
    let unique_shapes: Vec<&SceneObject> = objects
        .iter()
        .filter(|o| objects.iter().filter(|p| p.shape.kind == o.shape.kind).count() == 1)
        .collect();
    if !unique_shapes.is_empty() && out.len() < max {
        let o = unique_shapes[rng.gen_range(0..unique_shapes.len())];
        out.push(QaPair {
            question: format!("what color is the {} ?", o.shape.kind.name()),
            answer: o.color.name().to_string(),
        });
    }

    // Spatial yes/no between two uniquely color+shape-described objects.
    let unique_pairs: Vec<usize> = (0..objects.len())
        .filter(|&i| {
            let o = &objects[i];
            objects
                .iter()
                .filter(|p| p.shape.kind == o.shape.kind && p.color == o.color)
                .count()
                == 1
        })
        .collect();
    if unique_pairs.len() >= 2 && out.len() < max {
        let a = unique_pairs[rng.gen_range(0..unique_pairs.len())];
        let b = loop {
            let b = unique_pairs[rng.gen_range(0..unique_pairs.len())];
            if b != a {
                break b;
            }
        };
        let rel = Relation::ALL[rng.gen_range(0..4)];
        let holds = rel.holds(&objects[a], &objects[b]);
        let desc = |i: usize| {
            format!(
                "the {} {}",
                objects[i].color.name(),
                objects[i].shape.kind.name()
            )
        };
        out.push(QaPair {
            question: format!("is {} {} {} ?", desc(a), rel.render(), desc(b)),
            answer: (if holds { "yes" } else { "no" }).to_string(),
        });
    }
    out.truncate(max);
    out
}
