//! Extended vocabulary: base lexicon, location tokens, class tokens, specials.
//!
//! The decoder never sees raw coordinates or class names. Coordinates are
//! discretised into location tokens `<p-R> .. <p0> .. <pR>` and categories are
//! bound to semantics-agnostic class tokens `<c0> .. <cK-1>` by the
//! instruction text, so new tasks and categories need no vocabulary change.
//!
//! Id layout is `[specials][base lexicon][location block][class block]`, ids
//! dense from zero. A vocabulary serialises as one token per line with the
//! line number as id, and parses back to an identical table.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Special tokens, in id order starting at 0.
pub const SPECIALS: [&str; 5] = ["<image>", "<bos>", "<eos>", "<pad>", "<unk>"];

/// Everything needed to build a [`Vocab`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VocabSpec {
    /// Ordinary words: template text, format labels, caption and answer words.
    pub base_lexicon: Vec<String>,
    /// Coordinate range R; location tokens cover the integers `[-R, R]`.
    pub range: i64,
    /// Number of semantics-agnostic class tokens `<c0> .. <cK-1>`.
    pub num_class_tokens: usize,
}

/// Token table with O(1) lookup in both directions.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    base_len: usize,
    range: i64,
    num_class_tokens: usize,
}

impl Vocab {
    /// Builds the table. Rejects duplicate words and base words that collide
    /// with the reserved `<...>` token forms.
    pub fn build(spec: &VocabSpec) -> Result<Vocab> {
        if spec.range < 1 {
            return Err(Error::Vocab(format!(
                "coordinate range must be >= 1, got {}",
                spec.range
            )));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for word in &spec.base_lexicon {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid base word {word:?}")));
            }
            if word.starts_with('<') && word.ends_with('>') {
                return Err(Error::Vocab(format!(
                    "base word {word:?} collides with reserved token syntax"
                )));
            }
            tokens.push(word.clone());
        }
        for i in -spec.range..=spec.range {
            tokens.push(format!("<p{i}>"));
        }
        for k in 0..spec.num_class_tokens {
            tokens.push(format!("<c{k}>"));
        }

        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            ids,
            base_len: spec.base_lexicon.len(),
            range: spec.range,
            num_class_tokens: spec.num_class_tokens,
        })
    }

    /// Total number of tokens:
    /// `|specials| + |base| + (2R + 1) + num_class_tokens`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn range(&self) -> i64 {
        self.range
    }

    pub fn num_class_tokens(&self) -> usize {
        self.num_class_tokens
    }

    /// Text form of `id`. Panics on out-of-range ids (internal misuse).
    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn image_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn pad_id(&self) -> usize {
        3
    }

    pub fn unk_id(&self) -> usize {
        4
    }

    /// Ids of the base lexicon block.
    pub fn base_block(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..SPECIALS.len() + self.base_len
    }

    /// Ids of the location-token block, ordered `<p-R> .. <pR>`.
    pub fn location_block(&self) -> std::ops::Range<usize> {
        let start = self.base_block().end;
        start..start + (2 * self.range as usize + 1)
    }

    /// Ids of the class-token block, ordered `<c0> .. <cK-1>`.
    pub fn class_block(&self) -> std::ops::Range<usize> {
        let start = self.location_block().end;
        start..start + self.num_class_tokens
    }

    /// Id of the location token for integer offset `i` in `[-R, R]`.
    pub fn location_id(&self, i: i64) -> Result<usize> {
        if i < -self.range || i > self.range {
            return Err(Error::Vocab(format!(
                "location offset {i} outside [-{0}, {0}]",
                self.range
            )));
        }
        Ok(self.location_block().start + (i + self.range) as usize)
    }

    /// Integer offset of a location token, or `None` for other ids.
    pub fn location_value(&self, id: usize) -> Option<i64> {
        if self.location_block().contains(&id) {
            Some(id as i64 - self.location_block().start as i64 - self.range)
        } else {
            None
        }
    }

    /// Relative value `i / R` of a location token, in `[-1, 1]`.
    pub fn location_relative(&self, id: usize) -> Option<f64> {
        self.location_value(id).map(|i| i as f64 / self.range as f64)
    }

    /// Id of class token `<ck>`.
    pub fn class_id(&self, k: usize) -> Result<usize> {
        if k >= self.num_class_tokens {
            return Err(Error::Vocab(format!(
                "class token index {k} >= {}",
                self.num_class_tokens
            )));
        }
        Ok(self.class_block().start + k)
    }

    /// Index `k` of a class token `<ck>`, or `None` for other ids.
    pub fn class_index(&self, id: usize) -> Option<usize> {
        if self.class_block().contains(&id) {
            Some(id - self.class_block().start)
        } else {
            None
        }
    }

    /// Splits text into tokens and maps them to ids; unknown tokens map to
    /// `<unk>`. The scanner is shared with [`Vocab::decode`] so that
    /// `encode(decode(ids)) == ids` whenever `ids` contains no `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_tokens(text)
            .into_iter()
            .map(|tok| self.id(&tok).unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    /// Joins token texts with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number (from zero) is the id.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    /// Parses [`Vocab::serialize`] output back into an identical table.
    pub fn parse(text: &str) -> Result<Vocab> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() {
            return Err(Error::Vocab("vocabulary file too short".into()));
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines[i] != *special {
                return Err(Error::Vocab(format!(
                    "line {i} must be {special:?}, got {:?}",
                    lines[i]
                )));
            }
        }
        let is_location = |s: &str| {
            s.strip_prefix("<p")
                .and_then(|t| t.strip_suffix('>'))
                .is_some_and(|t| t.parse::<i64>().is_ok())
        };
        let rest = &lines[SPECIALS.len()..];
        let base_len = rest.iter().position(|l| is_location(l)).unwrap_or(rest.len());
        let base_lexicon: Vec<String> = rest[..base_len].iter().map(|s| s.to_string()).collect();
        let loc_len = rest[base_len..]
            .iter()
            .position(|l| !is_location(l))
            .unwrap_or(rest.len() - base_len);
        if loc_len == 0 || loc_len % 2 == 0 {
            return Err(Error::Vocab(format!(
                "location block must hold 2R + 1 tokens, found {loc_len}"
            )));
        }
        let range = (loc_len as i64 - 1) / 2;
        let num_class_tokens = rest.len() - base_len - loc_len;
        let vocab = Vocab::build(&VocabSpec {
            base_lexicon,
            range,
            num_class_tokens,
        })?;
        // Every line must match the rebuilt table exactly (catches reordered
        // or malformed location/class blocks).
        for (id, line) in lines.iter().enumerate() {
            if vocab.token(id) != *line {
                return Err(Error::Vocab(format!(
                    "line {id} is {line:?} but layout implies {:?}",
                    vocab.token(id)
                )));
            }
        }
        Ok(vocab)
    }
}

/// Scanner shared by encoding and the instruction parser.
///
/// Rules: `<...>` runs are single tokens, identifier-like runs (letter then
/// letters/digits) are words, standalone digits are split one per token so any
/// number can be spelled from ten digit words, `...` is one token, and every
/// other non-space character stands alone. Letters are lowercased.
pub fn split_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            let mut tok = String::new();
            while i < chars.len() {
                tok.push(chars[i]);
                i += 1;
                if tok.ends_with('>') {
                    break;
                }
            }
            out.push(tok);
        } else if c.is_alphabetic() {
            let mut tok = String::new();
            while i < chars.len() && (chars[i].is_alphanumeric()) {
                tok.extend(chars[i].to_lowercase());
                i += 1;
            }
            out.push(tok);
        } else if c == '.' && chars.get(i + 1) == Some(&'.') && chars.get(i + 2) == Some(&'.') {
            out.push("...".into());
            i += 3;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// The fixed word list for the shapes task suite: template words, tuple
/// labels `c x1 y1 .. x24 y24`, digits, punctuation, and the caption/answer
/// grammar. Shared by every task so one vocabulary serves them all.
pub fn standard_lexicon() -> Vec<String> {
    fn push(words: &mut Vec<String>, list: &[&str]) {
        words.extend(list.iter().map(|w| w.to_string()));
    }
    let mut words: Vec<String> = Vec::new();
    // Shape classes and their plurals, and the colour attributes.
    push(&mut words, &[
        "circle", "square", "triangle", "ellipse", "star", "circles", "squares", "triangles",
        "ellipses", "stars", "red", "green", "blue", "yellow", "purple", "small", "medium",
        "large",
    ]);
    // Instruction template words.
    push(&mut words, &[
        "please", "examine", "the", "image", "and", "identify", "all", "objects", "belonging",
        "to", "category", "set", "for", "each", "object", "specify", "its", "location", "within",
        "range", "using", "format", "where", "class", "index", "integer", "offsets", "are",
        "relative", "token", "centers", "detect", "in", "output", "as", "a", "list", "of",
        "tuple", "tuples", "find", "every", "instance", "from", "report", "coordinates", "locate",
        "region", "described", "by", "expression", "segment", "boundary", "points", "polygon",
        "with", "vertices", "trace", "outline", "contour", "write", "short", "caption",
        "describing", "scene", "describe", "this", "one", "sentence", "give", "answer",
        "question", "based", "on", "look", "at", "then", "is", "answering", "provide",
        "box", "bounding", "top", "bottom", "corners", "it",
    ]);
    // Tuple slot labels.
    words.push("c".into());
    for i in 1..=24 {
        words.push(format!("x{i}"));
        words.push(format!("y{i}"));
    }
    // Digits (numbers are spelled digit by digit).
    for d in 0..10 {
        words.push(d.to_string());
    }
    // Punctuation.
    push(&mut words, &["(", ")", "{", "}", ",", ":", ".", "?", "\"", "...", "-"]);
    // Caption and answer grammar beyond words already present.
    push(&mut words, &[
        "there", "left", "right", "above", "below", "contains", "how", "many", "what", "color",
        "shape", "yes", "no", "an", "empty",
    ]);
    words
}

/// Builds the vocabulary used by the task suite.
pub fn standard_vocab(range: i64, num_class_tokens: usize) -> Result<Vocab> {
    Vocab::build(&VocabSpec {
        base_lexicon: standard_lexicon(),
        range,
        num_class_tokens,
    })
}
