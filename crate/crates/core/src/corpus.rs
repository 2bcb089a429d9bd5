//! Sentences, BIO label sets, CoNLL column I/O and entity-level scoring.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used for tokens outside any entity.
pub const OUTSIDE: &str = "O";
const DOCSTART: &str = "-DOCSTART-";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    surface: String,
    normalized: String,
}

impl Token {
    /// Returns `None` for an empty (or whitespace-only) surface.
    pub fn new(surface: impl Into<String>) -> Option<Self> {
        let surface = surface.into();
        if surface.trim().is_empty() {
            return None;
        }
        let normalized = normalize(&surface);
        Some(Self {
            surface,
            normalized,
        })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn normalized(&self) -> &str {
        &self.normalized
    }
}

/// Lowercased, whitespace-trimmed form of a token surface.
pub fn normalize(surface: &str) -> String {
    surface.trim().to_lowercase()
}

/// Splits free text on whitespace into tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace().filter_map(Token::new).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub id: String,
    pub tokens: Vec<Token>,
    pub labels: Option<Vec<String>>,
    /// Original input lines, one per token, when the sentence was read from CoNLL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_lines: Option<Vec<String>>,
}

impl LabeledSentence {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>, labels: Option<Vec<String>>) -> Self {
        Self {
            id: id.into(),
            tokens,
            labels,
            raw_lines: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(Token::surface).collect()
    }

    pub fn text(&self) -> String {
        self.surfaces().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Unlabeled,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub kind: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        debug_assert!(start < end);
        Self {
            start,
            end,
            kind: kind.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub sentences: Vec<LabeledSentence>,
    /// `O` first, then the remaining tags in lexicographic order.
    pub label_set: Vec<String>,
    /// Index of the first sentence of every document, ascending.
    pub documents: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset and derives its label set. Without `documents` the whole
    /// set is a single document.
    pub fn new(
        split: Split,
        sentences: Vec<LabeledSentence>,
        documents: Option<Vec<usize>>,
    ) -> Result<Self> {
        let mut tags = BTreeSet::new();
        for s in &sentences {
            if s.tokens.is_empty() {
                return Err(Error::Data(format!("sentence {} has no tokens", s.id)));
            }
            match (&s.labels, split) {
                (Some(_), Split::Unlabeled) => {
                    return Err(Error::Data(format!(
                        "sentence {} carries labels in the unlabeled split",
                        s.id
                    )))
                }
                (Some(labels), _) => {
                    if labels.len() != s.tokens.len() {
                        return Err(Error::Data(format!(
                            "sentence {} has {} tokens but {} labels",
                            s.id,
                            s.tokens.len(),
                            labels.len()
                        )));
                    }
                    for l in labels {
                        check_tag(l).map_err(|m| Error::Data(format!("sentence {}: {m}", s.id)))?;
                        tags.insert(l.clone());
                    }
                }
                (None, _) => {}
            }
        }
        let mut ids = BTreeSet::new();
        for s in &sentences {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sentence id {}", s.id)));
            }
        }
        let documents = match documents {
            Some(d) => d,
            None if sentences.is_empty() => Vec::new(),
            None => vec![0],
        };
        Ok(Self {
            split,
            sentences,
            label_set: ordered_label_set(tags),
            documents,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Range of sentence indices making up the document that contains `index`.
    pub fn document_of(&self, index: usize) -> std::ops::Range<usize> {
        let pos = self.documents.partition_point(|&start| start <= index);
        let start = if pos == 0 { 0 } else { self.documents[pos - 1] };
        let end = self
            .documents
            .get(pos)
            .copied()
            .unwrap_or(self.sentences.len());
        start..end
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.sentences.iter().position(|s| s.id == id)
    }

    /// Gold label sequences; sentences without labels contribute all-`O`.
    pub fn gold(&self) -> Vec<Vec<String>> {
        self.sentences
            .iter()
            .map(|s| {
                s.labels
                    .clone()
                    .unwrap_or_else(|| vec![OUTSIDE.to_string(); s.len()])
            })
            .collect()
    }
}

fn ordered_label_set(tags: BTreeSet<String>) -> Vec<String> {
    let mut out = vec![OUTSIDE.to_string()];
    out.extend(tags.into_iter().filter(|t| t != OUTSIDE));
    out
}

fn check_tag(tag: &str) -> std::result::Result<(), String> {
    if tag == OUTSIDE {
        return Ok(());
    }
    match tag.split_once('-') {
        Some(("B" | "I", kind)) if !kind.is_empty() => Ok(()),
        _ => Err(format!("invalid BIO tag {tag:?}")),
    }
}

/// Which whitespace-separated columns hold the token and the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConllColumns {
    pub token: usize,
    pub label: Option<usize>,
}

impl Default for ConllColumns {
    fn default() -> Self {
        Self {
            token: 0,
            label: Some(1),
        }
    }
}

/// Reads a CoNLL column file. Blank lines separate sentences and `-DOCSTART-`
/// lines open a new document.
pub fn read_conll<R: BufRead>(source: R, columns: ConllColumns, split: Split) -> Result<Dataset> {
    let needed = columns.label.map_or(columns.token, |l| l.max(columns.token)) + 1;
    let mut sentences = Vec::new();
    let mut documents = Vec::new();
    let mut saw_docstart = false;
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut raw = Vec::new();

    let flush = |tokens: &mut Vec<Token>,
                     labels: &mut Vec<String>,
                     raw: &mut Vec<String>,
                     sentences: &mut Vec<LabeledSentence>| {
        if tokens.is_empty() {
            return;
        }
        let id = format!("{split}-{}", sentences.len());
        let mut s = LabeledSentence::new(
            id,
            std::mem::take(tokens),
            columns.label.map(|_| std::mem::take(labels)),
        );
        s.raw_lines = Some(std::mem::take(raw));
        sentences.push(s);
    };

    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut labels, &mut raw, &mut sentences);
            continue;
        }
        if trimmed.starts_with(DOCSTART) {
            flush(&mut tokens, &mut labels, &mut raw, &mut sentences);
            saw_docstart = true;
            if documents.last() != Some(&sentences.len()) {
                documents.push(sentences.len());
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < needed {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected at least {needed} columns, found {}", fields.len()),
            });
        }
        tokens.push(Token::new(fields[columns.token]).expect("split_whitespace yields non-empty"));
        if let Some(l) = columns.label {
            let tag = fields[l];
            check_tag(tag).map_err(|message| Error::Parse {
                line: lineno,
                message,
            })?;
            labels.push(tag.to_string());
        }
        raw.push(trimmed.to_string());
    }
    flush(&mut tokens, &mut labels, &mut raw, &mut sentences);

    // Trailing DOCSTART with no sentences after it opens an empty document.
    documents.retain(|&d| d < sentences.len());
    let documents = if saw_docstart && !sentences.is_empty() {
        if documents.first() != Some(&0) {
            documents.insert(0, 0);
        }
        Some(documents)
    } else {
        None
    };
    Dataset::new(split, sentences, documents)
}

/// Writes `token label` lines (or bare tokens for unlabeled data), one blank
/// line between sentences and a `-DOCSTART-` line before every document when
/// the dataset has more than one.
pub fn write_conll<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let docstarts = dataset.documents.len() > 1;
    for (i, s) in dataset.sentences.iter().enumerate() {
        if docstarts && dataset.documents.binary_search(&i).is_ok() {
            writeln!(out, "{DOCSTART} -X- O O")?;
            writeln!(out)?;
        }
        for (j, tok) in s.tokens.iter().enumerate() {
            match &s.labels {
                Some(l) => writeln!(out, "{} {}", tok.surface(), l[j])?,
                None => writeln!(out, "{}", tok.surface())?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Extracts maximal entity spans from a BIO sequence. An `I-T` that does not
/// continue a span of type `T` opens a new span, as conlleval does.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in labels.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, kind) = match tag.split_once('-') {
            Some((p @ ("B" | "I"), k)) => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && matches!(open, Some((_, k)) if k == kind);
        if continues {
            continue;
        }
        if let Some((start, k)) = open.take() {
            spans.push(EntitySpan::new(start, i, k));
        }
        if prefix != "O" {
            open = Some((i, kind));
        }
    }
    if let Some((start, k)) = open {
        spans.push(EntitySpan::new(start, labels.len(), k));
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        Self {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

/// `2pr / (p + r)`, zero when `p + r` is zero.
pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro-averaged entity-level precision/recall/F1 over exact span matches.
pub fn entity_f1<G, P>(gold: &[G], pred: &[P]) -> Result<Prf>
where
    G: AsRef<[String]>,
    P: AsRef<[String]>,
{
    if gold.len() != pred.len() {
        return Err(Error::Alignment(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut matched, mut n_pred, mut n_gold) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g.len() != p.len() {
            return Err(Error::Alignment(format!(
                "sentence {i}: {} gold labels vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs: BTreeSet<EntitySpan> = extract_spans(g).into_iter().collect();
        let ps = extract_spans(p);
        n_gold += gs.len();
        n_pred += ps.len();
        matched += ps.iter().filter(|s| gs.contains(*s)).count();
    }
    Ok(Prf::from_counts(matched, n_pred, n_gold))
}
