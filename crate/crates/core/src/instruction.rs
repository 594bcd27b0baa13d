//! Instruction rendering and parsing.
//!
//! An instruction is plain text with everything the model needs to know about
//! the task: a category set binding names to class tokens, the coordinate
//! range, an `<image>` placeholder marking where image tokens are spliced in,
//! and — for perception tasks — a parenthesized output-format pattern like
//! `(c, x1, y1, x2, y2)` naming the slots of each predicted tuple. Text tasks
//! have no pattern; their format is a single BOS slot that starts
//! autoregressive decoding.
//!
//! Templates come from a fixed bank embedded at compile time; rendering fills
//! placeholders and parsing recovers the structured task spec from the text
//! alone, so `parse(render(..)) ` round-trips.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::split_tokens;

/// The five task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Segmentation,
    Grounding,
    Captioning,
    Vqa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Detection,
        TaskKind::Segmentation,
        TaskKind::Grounding,
        TaskKind::Captioning,
        TaskKind::Vqa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Detection => "detection",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Grounding => "grounding",
            TaskKind::Captioning => "captioning",
            TaskKind::Vqa => "vqa",
        }
    }

    fn from_name(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Does this task decode perception tuples (vs text)?
    pub fn is_perception(self) -> bool {
        matches!(
            self,
            TaskKind::Detection | TaskKind::Segmentation | TaskKind::Grounding
        )
    }
}

/// Ordered mapping from category names (or one referring expression) to class
/// token indices: first name → `<c0>`, second → `<c1>`, and so on.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn new(names: Vec<String>) -> Result<CategorySet> {
        if names.is_empty() {
            return Err(Error::Instruction("category set must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::Instruction(format!("duplicate category {n:?}")));
            }
        }
        Ok(CategorySet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one entry
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Class-token index bound to `name`, by position.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, k: usize) -> Option<&str> {
        self.names.get(k).map(String::as_str)
    }

    /// The in-instruction text form: `{"name":<c0>, "name":<c1>, ...}`.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self
            .names
            .iter()
            .enumerate()
            .map(|(k, n)| format!("\"{n}\":<c{k}>"))
            .collect();
        format!("{{{}}}", parts.join(", "))
    }
}

/// One slot of a prediction tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SlotKind {
    /// Class token slot.
    Class,
    /// X coordinate of point `i` (0-based).
    X(usize),
    /// Y coordinate of point `i` (0-based).
    Y(usize),
    /// Start-of-sequence slot for text decoding.
    Bos,
}

/// Parsed output format: the per-object slot sequence.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OutputFormatSpec {
    pub slots: Vec<SlotKind>,
    /// Number of (x, y) points; 0 for text formats.
    pub point_count: usize,
}

impl OutputFormatSpec {
    /// `[CLASS, X1, Y1, .., XN, YN]` — arity `1 + 2N`.
    pub fn perception(n: usize) -> OutputFormatSpec {
        let mut slots = vec![SlotKind::Class];
        for i in 0..n {
            slots.push(SlotKind::X(i));
            slots.push(SlotKind::Y(i));
        }
        OutputFormatSpec {
            slots,
            point_count: n,
        }
    }

    /// `[BOS]` — text tasks decode autoregressively from here.
    pub fn text() -> OutputFormatSpec {
        OutputFormatSpec {
            slots: vec![SlotKind::Bos],
            point_count: 0,
        }
    }

    pub fn arity(&self) -> usize {
        self.slots.len()
    }

    pub fn is_perception(&self) -> bool {
        self.slots.first() == Some(&SlotKind::Class)
    }

    /// Pattern text, `(c, x1, y1, x2, y2)` for N=2 or the elided
    /// `(c, x1, y1, x2, y2, ..., xN, yN)` for larger N.
    pub fn render_pattern(&self) -> String {
        let n = self.point_count;
        assert!(self.is_perception(), "text formats have no pattern");
        if n <= 3 {
            let labels: Vec<String> = (1..=n).map(|i| format!("x{i}, y{i}")).collect();
            format!("(c, {})", labels.join(", "))
        } else {
            format!("(c, x1, y1, x2, y2, ..., x{n}, y{n})")
        }
    }
}

/// Allowed segmentation point counts; detection and grounding always use 2.
pub const SEGMENTATION_POINT_COUNTS: [usize; 4] = [8, 14, 16, 24];
/// Canonical N used when format randomness is off.
pub const CANONICAL_SEGMENTATION_POINTS: usize = 16;

/// A template from the bank: task kind plus text with placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub task_kind: TaskKind,
    pub text: String,
}

impl InstructionTemplate {
    /// Placeholders this template must contain exactly once.
    fn required_placeholders(kind: TaskKind) -> &'static [&'static str] {
        match kind {
            TaskKind::Detection | TaskKind::Grounding => &["<class>", "<range>", "<image>"],
            TaskKind::Segmentation => &["<class>", "<range>", "<image>", "<format>"],
            TaskKind::Captioning => &["<image>"],
            TaskKind::Vqa => &["<image>", "<question>"],
        }
    }

    fn validate(&self) -> Result<()> {
        for ph in Self::required_placeholders(self.task_kind) {
            let count = self.text.matches(ph).count();
            if count != 1 {
                return Err(Error::Instruction(format!(
                    "{} template needs {ph} exactly once, found {count}: {:?}",
                    self.task_kind.name(),
                    self.text
                )));
            }
        }
        // Detection/grounding carry the fixed 2-point pattern literally;
        // segmentation gets its pattern from <format> at render time.
        if matches!(self.task_kind, TaskKind::Detection | TaskKind::Grounding)
            && !self.text.contains("(c, x1, y1, x2, y2)")
        {
            return Err(Error::Instruction(format!(
                "{} template lacks the (c, x1, y1, x2, y2) pattern",
                self.task_kind.name()
            )));
        }
        Ok(())
    }
}

/// The fixed template bank, embedded from `assets/templates.txt`.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    templates: Vec<InstructionTemplate>,
}

const BANK_TEXT: &str = include_str!("../assets/templates.txt");

impl TemplateBank {
    /// Parses the embedded bank; panics never (covered by tests).
    pub fn standard() -> TemplateBank {
        TemplateBank::parse(BANK_TEXT).expect("embedded template bank is valid")
    }

    /// One record per line: `kind<TAB>text`; `#` comments and blanks skipped.
    pub fn parse(text: &str) -> Result<TemplateBank> {
        let mut templates = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, body) = line.split_once('\t').ok_or_else(|| {
                Error::Instruction(format!("line {}: missing tab separator", lineno + 1))
            })?;
            let task_kind = TaskKind::from_name(kind).ok_or_else(|| {
                Error::Instruction(format!("line {}: unknown task kind {kind:?}", lineno + 1))
            })?;
            let template = InstructionTemplate {
                task_kind,
                text: body.trim().to_string(),
            };
            template.validate()?;
            templates.push(template);
        }
        for kind in TaskKind::ALL {
            let n = templates.iter().filter(|t| t.task_kind == kind).count();
            if n < 3 {
                return Err(Error::Instruction(format!(
                    "bank needs >= 3 templates for {}, found {n}",
                    kind.name()
                )));
            }
        }
        Ok(TemplateBank { templates })
    }

    pub fn templates(&self, kind: TaskKind) -> Vec<&InstructionTemplate> {
        self.templates
            .iter()
            .filter(|t| t.task_kind == kind)
            .collect()
    }

    /// The first template of a kind — used when description randomness is off.
    pub fn canonical(&self, kind: TaskKind) -> &InstructionTemplate {
        self.templates(kind)[0]
    }
}

/// A rendered instruction plus its parsed structure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InstructionSpec {
    pub text: String,
    pub task_kind: TaskKind,
    /// `None` only for text tasks (captioning, VQA).
    pub category_set: Option<CategorySet>,
    pub range: i64,
    pub format: OutputFormatSpec,
    pub question: Option<String>,
    pub expression: Option<String>,
}

/// Everything [`render`] may need to fill placeholders.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderArgs<'a> {
    pub category_set: Option<&'a CategorySet>,
    pub range: i64,
    /// Segmentation point count N; ignored elsewhere.
    pub point_count: Option<usize>,
    pub question: Option<&'a str>,
    pub expression: Option<&'a str>,
}

/// Fills a template's placeholders and returns the structured spec. The
/// rendered text retains `<image>` (filled with image tokens at model time);
/// every other placeholder must be satisfiable from `args`.
pub fn render(template: &InstructionTemplate, args: &RenderArgs) -> Result<InstructionSpec> {
    template.validate()?;
    let kind = template.task_kind;
    let mut text = template.text.clone();

    // Category set: grounding builds a one-entry set from the expression, the
    // other perception tasks take the caller's set verbatim.
    let category_set = match kind {
        TaskKind::Detection | TaskKind::Segmentation => Some(
            args.category_set
                .ok_or_else(|| Error::Instruction("missing value for <class>".into()))?
                .clone(),
        ),
        TaskKind::Grounding => {
            let expr = args
                .expression
                .ok_or_else(|| Error::Instruction("missing value for <expression>".into()))?;
            Some(CategorySet::new(vec![expr.to_string()])?)
        }
        _ => None,
    };
    if let Some(set) = &category_set {
        text = text.replace("<class>", &set.render());
    }
    if text.contains("<range>") {
        if args.range < 1 {
            return Err(Error::Instruction(format!(
                "range must be >= 1, got {}",
                args.range
            )));
        }
        text = text.replace("<range>", &args.range.to_string());
    }
    if kind == TaskKind::Segmentation {
        let n = args
            .point_count
            .ok_or_else(|| Error::Instruction("missing value for <format>".into()))?;
        if !(8..=24).contains(&n) {
            return Err(Error::Instruction(format!(
                "segmentation point count {n} outside 8..=24"
            )));
        }
        text = text.replace("<format>", &OutputFormatSpec::perception(n).render_pattern());
    }
    if kind == TaskKind::Vqa {
        let q = args
            .question
            .ok_or_else(|| Error::Instruction("missing value for <question>".into()))?;
        text = text.replace("<question>", q);
    }

    let format = parse_output_format(&text)?;
    if kind.is_perception() {
        let expect = match kind {
            TaskKind::Segmentation => args.point_count.unwrap(),
            _ => 2,
        };
        if format.point_count != expect {
            return Err(Error::Instruction(format!(
                "rendered pattern has N={}, expected {expect}",
                format.point_count
            )));
        }
    }
    Ok(InstructionSpec {
        text,
        task_kind: kind,
        category_set,
        range: args.range,
        format,
        question: args.question.map(String::from),
        expression: args.expression.map(String::from),
    })
}

/// Extracts the output format from instruction text: the slot labels inside
/// the unique parenthesized pattern `(c, x1, y1, .., xN, yN)`, with an
/// optional `...` elision in the middle. Returns the BOS format when no
/// pattern is present.
pub fn parse_output_format(text: &str) -> Result<OutputFormatSpec> {
    let tokens = split_tokens(text);
    // A pattern opens at "(" directly followed by "c".
    let mut patterns = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if tok == "(" && tokens.get(i + 1).is_some_and(|t| t == "c") {
            patterns.push(i);
        }
    }
    if patterns.len() > 1 {
        return Err(Error::Instruction(format!(
            "multiple format patterns (token positions {patterns:?})"
        )));
    }
    let Some(start) = patterns.first().copied() else {
        return Ok(OutputFormatSpec::text());
    };
    let end = tokens[start..]
        .iter()
        .position(|t| t == ")")
        .map(|p| start + p)
        .ok_or_else(|| {
            Error::Instruction(format!("unclosed format pattern at token {start}"))
        })?;

    // Collect comma-separated labels after "c".
    let mut labels: Vec<(usize, String)> = Vec::new(); // (token position, label)
    for (pos, tok) in tokens[start + 2..end].iter().enumerate() {
        let pos = start + 2 + pos;
        if tok == "," {
            continue;
        }
        labels.push((pos, tok.clone()));
    }

    // Grammar: pairs (x_i, y_i) with indices ascending; one optional "..."
    // elision before the final pair.
    let mut points: Vec<usize> = Vec::new(); // 1-based indices seen, in order
    let mut elided = false;
    let mut iter = labels.iter().peekable();
    while let Some((pos, lab)) = iter.next() {
        if lab == "..." {
            if elided || points.is_empty() {
                return Err(Error::Instruction(format!(
                    "unexpected ... at token {pos}"
                )));
            }
            elided = true;
            continue;
        }
        let xi = parse_label(lab, 'x')
            .ok_or_else(|| Error::Instruction(format!("expected x-label at token {pos}, got {lab:?}")))?;
        let Some((ypos, ylab)) = iter.next() else {
            return Err(Error::Instruction(format!(
                "dangling x{xi} at token {pos}: odd coordinate count"
            )));
        };
        let yi = parse_label(ylab, 'y')
            .ok_or_else(|| Error::Instruction(format!("expected y-label at token {ypos}, got {ylab:?}")))?;
        if yi != xi {
            return Err(Error::Instruction(format!(
                "mismatched pair x{xi}/y{yi} at token {pos}"
            )));
        }
        let expected_next = points.last().copied().unwrap_or(0) + 1;
        if xi < expected_next || (!elided && xi != expected_next) {
            return Err(Error::Instruction(format!(
                "non-monotone point index x{xi} at token {pos}"
            )));
        }
        if elided && points.last().is_some_and(|&l| xi <= l) {
            return Err(Error::Instruction(format!(
                "non-monotone point index x{xi} after ... at token {pos}"
            )));
        }
        points.push(xi);
    }
    let n = points.last().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Instruction(format!(
            "format pattern at token {start} has no coordinate labels"
        )));
    }
    Ok(OutputFormatSpec::perception(n))
}

fn parse_label(label: &str, axis: char) -> Option<usize> {
    let idx: usize = label.strip_prefix(axis)?.parse().ok()?;
    (idx >= 1).then_some(idx)
}

/// Which instruction ingredients are randomized during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RandomnessFlags {
    /// Random template per draw instead of the canonical one.
    pub description: bool,
    /// Random ordered category subset instead of the full master list.
    pub categories: bool,
    /// Random segmentation point count instead of the canonical 16.
    pub format: bool,
}

impl RandomnessFlags {
    pub fn all_on() -> RandomnessFlags {
        RandomnessFlags {
            description: true,
            categories: true,
            format: true,
        }
    }
}

/// Scene-dependent inputs for [`sample_instruction`].
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    /// The full class list categories are drawn from.
    pub master_classes: &'a [String],
    /// Classes that must appear in the sampled set (those present in the
    /// image), keeping supervision well-posed under subset randomness.
    pub must_include: &'a [String],
    pub range: i64,
    pub expression: Option<&'a str>,
    pub question: Option<&'a str>,
}

/// Draws an instruction for one training step. Deterministic given the RNG
/// state; with all flags off it renders the canonical template with the full
/// master list in canonical order and canonical N.
pub fn sample_instruction(
    bank: &TemplateBank,
    kind: TaskKind,
    rng: &mut impl Rng,
    flags: RandomnessFlags,
    ctx: &SampleContext,
) -> Result<InstructionSpec> {
    let templates = bank.templates(kind);
    let template = if flags.description {
        templates[rng.gen_range(0..templates.len())]
    } else {
        templates[0]
    };

    let category_set = if kind.is_perception() && kind != TaskKind::Grounding {
        let names: Vec<String> = if flags.categories {
            let mut names: Vec<String> = ctx.must_include.to_vec();
            for class in ctx.master_classes {
                if !names.contains(class) && rng.gen_bool(0.5) {
                    names.push(class.clone());
                }
            }
            if names.is_empty() {
                let i = rng.gen_range(0..ctx.master_classes.len());
                names.push(ctx.master_classes[i].clone());
            }
            names.shuffle(rng);
            names
        } else {
            ctx.master_classes.to_vec()
        };
        Some(CategorySet::new(names)?)
    } else {
        None
    };

    let point_count = (kind == TaskKind::Segmentation).then(|| {
        if flags.format {
            SEGMENTATION_POINT_COUNTS[rng.gen_range(0..SEGMENTATION_POINT_COUNTS.len())]
        } else {
            CANONICAL_SEGMENTATION_POINTS
        }
    });

    render(
        template,
        &RenderArgs {
            category_set: category_set.as_ref(),
            range: ctx.range,
            point_count,
            question: ctx.question,
            expression: ctx.expression,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::standard_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> Vec<String> {
        ["circle", "square", "triangle", "ellipse", "star"]
            .map(String::from)
            .to_vec()
    }

    fn bank() -> TemplateBank {
        TemplateBank::standard()
    }

    #[test]
    fn bank_has_at_least_three_templates_per_task() {
        let bank = bank();
        for kind in TaskKind::ALL {
            assert!(bank.templates(kind).len() >= 3, "{}", kind.name());
        }
    }

    #[test]
    fn detection_render_contains_pattern_and_arity_five() {
        let set = CategorySet::new(vec!["circle".into(), "square".into()]).unwrap();
        let spec = render(
            bank().canonical(TaskKind::Detection),
            &RenderArgs {
                category_set: Some(&set),
                range: 512,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(spec.text.contains("(c, x1, y1, x2, y2)"));
        assert!(spec.text.contains("{\"circle\":<c0>, \"square\":<c1>}"));
        assert!(spec.text.contains("512"));
        assert_eq!(spec.format.arity(), 5);
        assert_eq!(spec.format.point_count, 2);
    }

    #[test]
    fn segmentation_render_with_n8_has_arity_17() {
        let set = CategorySet::new(shapes()).unwrap();
        let spec = render(
            bank().canonical(TaskKind::Segmentation),
            &RenderArgs {
                category_set: Some(&set),
                range: 512,
                point_count: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(spec.format.arity(), 17);
        assert!(spec.text.contains("(c, x1, y1, x2, y2, ..., x8, y8)"));
    }

    #[test]
    fn captioning_render_has_bos_format_and_no_category_set() {
        let spec = render(
            bank().canonical(TaskKind::Captioning),
            &RenderArgs {
                range: 512,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(spec.format, OutputFormatSpec::text());
        assert!(spec.category_set.is_none());
        assert_eq!(spec.format.slots, vec![SlotKind::Bos]);
    }

    #[test]
    fn grounding_render_binds_the_expression_to_c0() {
        let spec = render(
            bank().canonical(TaskKind::Grounding),
            &RenderArgs {
                range: 512,
                expression: Some("the red circle left of the blue square"),
                ..Default::default()
            },
        )
        .unwrap();
        let set = spec.category_set.as_ref().unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.index_of("the red circle left of the blue square"), Some(0));
        assert!(spec
            .text
            .contains("{\"the red circle left of the blue square\":<c0>}"));
    }

    #[test]
    fn parse_detection_pattern() {
        let f = parse_output_format("report (c, x1, y1, x2, y2) now").unwrap();
        assert_eq!(f.point_count, 2);
        assert_eq!(
            f.slots,
            vec![
                SlotKind::Class,
                SlotKind::X(0),
                SlotKind::Y(0),
                SlotKind::X(1),
                SlotKind::Y(1)
            ]
        );
    }

    #[test]
    fn parse_elided_pattern_takes_the_highest_index() {
        let f = parse_output_format("as (c, x1, y1, x2, y2, ..., x24, y24) .").unwrap();
        assert_eq!(f.point_count, 24);
        assert_eq!(f.arity(), 49);
    }

    #[test]
    fn parse_text_without_pattern_gives_bos() {
        assert_eq!(
            parse_output_format("write a caption :").unwrap(),
            OutputFormatSpec::text()
        );
    }

    #[test]
    fn parse_rejects_malformed_patterns() {
        // Odd coordinate count.
        assert!(parse_output_format("(c, x1, y1, x2)").is_err());
        // Non-monotone indices.
        assert!(parse_output_format("(c, x2, y2, x1, y1)").is_err());
        // Mismatched pair.
        assert!(parse_output_format("(c, x1, y2)").is_err());
        // Elision needs a following pair with a larger index.
        assert!(parse_output_format("(c, x1, y1, ..., x1, y1)").is_err());
        // Two patterns.
        assert!(parse_output_format("(c, x1, y1) and (c, x1, y1)").is_err());
        // Empty pattern.
        assert!(parse_output_format("see (c) here").is_err());
    }

    #[test]
    fn render_parse_round_trip_for_every_template_and_n() {
        let bank = bank();
        let set = CategorySet::new(shapes()).unwrap();
        for template in bank.templates(TaskKind::Segmentation) {
            for n in SEGMENTATION_POINT_COUNTS {
                let spec = render(
                    template,
                    &RenderArgs {
                        category_set: Some(&set),
                        range: 64,
                        point_count: Some(n),
                        ..Default::default()
                    },
                )
                .unwrap();
                assert_eq!(parse_output_format(&spec.text).unwrap().point_count, n);
            }
        }
        for template in bank.templates(TaskKind::Detection) {
            let spec = render(
                template,
                &RenderArgs {
                    category_set: Some(&set),
                    range: 64,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(parse_output_format(&spec.text).unwrap(), spec.format);
        }
    }

    #[test]
    fn category_permutation_permutes_indices() {
        let a = CategorySet::new(vec!["circle".into(), "square".into(), "star".into()]).unwrap();
        let b = CategorySet::new(vec!["star".into(), "circle".into(), "square".into()]).unwrap();
        assert_eq!(a.index_of("star"), Some(2));
        assert_eq!(b.index_of("star"), Some(0));
        assert_eq!(a.index_of("circle"), Some(0));
        assert_eq!(b.index_of("circle"), Some(1));
    }

    #[test]
    fn missing_placeholder_values_are_rejected_by_name() {
        let err = render(
            bank().canonical(TaskKind::Detection),
            &RenderArgs {
                range: 512,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("<class>"), "{err}");
        let err = render(
            bank().canonical(TaskKind::Vqa),
            &RenderArgs {
                range: 512,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("<question>"), "{err}");
    }

    #[test]
    fn sampling_is_deterministic_and_canonical_without_flags() {
        let bank = bank();
        let classes = shapes();
        let ctx = SampleContext {
            master_classes: &classes,
            must_include: &classes[..1],
            range: 512,
            expression: None,
            question: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = sample_instruction(
            &bank,
            TaskKind::Detection,
            &mut rng,
            RandomnessFlags::default(),
            &ctx,
        )
        .unwrap();
        assert_eq!(
            spec.category_set.as_ref().unwrap().names(),
            classes.as_slice()
        );

        // Same seed, same draw — exactly.
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_instruction(&bank, TaskKind::Detection, &mut rng, RandomnessFlags::all_on(), &ctx)
                .unwrap()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn sampled_subsets_always_contain_the_image_classes() {
        let bank = bank();
        let classes = shapes();
        let must = vec!["triangle".to_string(), "star".to_string()];
        let ctx = SampleContext {
            master_classes: &classes,
            must_include: &must,
            range: 512,
            expression: None,
            question: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let spec = sample_instruction(
                &bank,
                TaskKind::Detection,
                &mut rng,
                RandomnessFlags::all_on(),
                &ctx,
            )
            .unwrap();
            let set = spec.category_set.unwrap();
            for m in &must {
                assert!(set.index_of(m).is_some());
            }
        }
    }

    #[test]
    fn segmentation_sampling_covers_every_point_count() {
        let bank = bank();
        let classes = shapes();
        let ctx = SampleContext {
            master_classes: &classes,
            must_include: &[],
            range: 512,
            expression: None,
            question: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let spec = sample_instruction(
                &bank,
                TaskKind::Segmentation,
                &mut rng,
                RandomnessFlags::all_on(),
                &ctx,
            )
            .unwrap();
            seen.insert(spec.format.point_count);
        }
        assert_eq!(
            seen,
            SEGMENTATION_POINT_COUNTS.into_iter().collect::<std::collections::HashSet<_>>()
        );
    }

    #[test]
    fn every_rendered_instruction_encodes_without_unk() {
        let bank = bank();
        let vocab = standard_vocab(512, 16).unwrap();
        let classes = shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = SampleContext {
            master_classes: &classes,
            must_include: &classes[..2],
            range: 512,
            expression: Some("the small red circle above the blue square"),
            question: Some("how many green triangles are there ?"),
        };
        for kind in TaskKind::ALL {
            for _ in 0..50 {
                let spec =
                    sample_instruction(&bank, kind, &mut rng, RandomnessFlags::all_on(), &ctx)
                        .unwrap();
                let ids = vocab.encode(&spec.text);
                assert!(
                    !ids.contains(&vocab.unk_id()),
                    "UNK in {}: {:?}",
                    kind.name(),
                    spec.text
                );
                // Exactly one image placeholder, spliced later.
                assert_eq!(
                    ids.iter().filter(|&&id| id == vocab.image_id()).count(),
                    1
                );
            }
        }
    }
}
