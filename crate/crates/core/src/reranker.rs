//! Re-ranking of retrieved texts and assembly of the context-augmented view.
//!
//! Texts are scored against the input sentence by greedy token matching over
//! unit-normalized token representations: recall averages each sentence
//! token's best cosine match in the candidate, precision averages each
//! candidate token's best match in the sentence, and the F1 of the two orders
//! the candidates. An idf-weighted variant, a token-level fuzzy match and the
//! search engine's own order are available for comparison.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{harmonic_mean, normalize, tokenize, Token};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::retrieval::RetrievedText;

pub const DEFAULT_SEP_TOKEN: &str = "[SEP]";
pub const DEFAULT_MAX_VIEW_LEN: usize = 510;
pub const DEFAULT_CONTEXTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Original,
    Retrieval,
}

/// Token representations for one view of one text, `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Matrix,
    pub view: ViewTag,
}

impl EmbeddingMatrix {
    pub fn new(rows: Matrix, view: ViewTag) -> Self {
        Self { rows, view }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Copy with every row scaled to unit length.
    pub fn normalized(&self) -> Result<Matrix> {
        let mut out = self.rows.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { row: r });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }
}

/// Something that maps a token sequence to token representations.
pub trait Embedder: Sync {
    fn embed(&self, tokens: &[Token]) -> Result<EmbeddingMatrix>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut sim = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            sim.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    Ok(sim)
}

fn greedy_scores(
    sent: &EmbeddingMatrix,
    cand: &EmbeddingMatrix,
    sent_w: Option<&[f64]>,
    cand_w: Option<&[f64]>,
) -> Result<BertScore> {
    if sent.is_empty() || cand.is_empty() {
        return Err(Error::Shape("greedy matching needs at least one row per side".into()));
    }
    let sim = similarity(&sent.normalized()?, &cand.normalized()?)?;
    let (n, m) = sim.shape();

    let row_best: Vec<f64> = (0..n)
        .map(|i| sim.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let col_best: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| sim.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let weighted = |best: &[f64], w: Option<&[f64]>, side| -> Result<f64> {
        match w {
            None => Ok(best.iter().sum::<f64>() / best.len() as f64),
            Some(w) => {
                let total: f64 = w.iter().sum();
                if total == 0.0 {
                    return Err(Error::ZeroWeights { side });
                }
                Ok(best.iter().zip(w).map(|(b, w)| b * w).sum::<f64>() / total)
            }
        }
    };
    let recall = weighted(&row_best, sent_w, "sentence")?;
    let precision = weighted(&col_best, cand_w, "candidate")?;
    Ok(BertScore {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    })
}

/// Greedy-matching precision, recall and F1 between a sentence and a candidate.
pub fn bertscore(sent: &EmbeddingMatrix, cand: &EmbeddingMatrix) -> Result<BertScore> {
    greedy_scores(sent, cand, None, None)
}

/// As [`bertscore`], with each position's best match weighted by the idf of its token.
pub fn bertscore_idf(
    sent: &EmbeddingMatrix,
    cand: &EmbeddingMatrix,
    idf: &IdfTable,
    sent_tokens: &[Token],
    cand_tokens: &[Token],
) -> Result<BertScore> {
    if sent_tokens.len() != sent.len() || cand_tokens.len() != cand.len() {
        return Err(Error::Shape("token count differs from embedding rows".into()));
    }
    let sw: Vec<f64> = sent_tokens.iter().map(|t| idf.weight(t.normalized())).collect();
    let cw: Vec<f64> = cand_tokens.iter().map(|t| idf.weight(t.normalized())).collect();
    greedy_scores(sent, cand, Some(&sw), Some(&cw))
}

/// Inverse document frequencies over a candidate pool:
/// `ln((1 + N) / (1 + df)) + 1`, with `df = 0` for unseen tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    weights: HashMap<String, f64>,
    default: f64,
}

impl IdfTable {
    pub fn from_documents<'a, I, D>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a Token>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0usize;
        for doc in docs {
            n += 1;
            let uniq: HashSet<&str> = doc.into_iter().map(Token::normalized).collect();
            for w in uniq {
                *df.entry(w.to_string()).or_default() += 1;
            }
        }
        let idf = |d: usize| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0;
        Self {
            weights: df.into_iter().map(|(w, d)| (w, idf(d))).collect(),
            default: idf(0),
        }
    }

    /// A table that assigns the same weight to every token.
    pub fn uniform(weight: f64) -> Self {
        Self {
            weights: HashMap::new(),
            default: weight,
        }
    }

    pub fn with_weight(mut self, token: &str, weight: f64) -> Self {
        self.weights.insert(normalize(token), weight);
        self
    }

    pub fn weight(&self, normalized: &str) -> f64 {
        self.weights.get(normalized).copied().unwrap_or(self.default)
    }
}

/// `1 - lev(a, b) / max(|a|, |b|)` over normalized tokens; `1` when both are empty.
pub fn fuzzy_match(sent: &[Token], cand: &[Token]) -> f64 {
    let (n, m) = (sent.len(), cand.len());
    if n == 0 && m == 0 {
        return 1.0;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = usize::from(sent[i - 1].normalized() != cand[j - 1].normalized());
            cur[j] = (prev[j - 1] + sub).min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    1.0 - prev[m] as f64 / n.max(m) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    Engine,
    Fuzzy,
    Bertscore,
    BertscoreIdf,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "engine" => Ok(Self::Engine),
            "fuzzy" => Ok(Self::Fuzzy),
            "bertscore" => Ok(Self::Bertscore),
            "bertscore-idf" => Ok(Self::BertscoreIdf),
            other => Err(Error::Config(format!("unknown scorer {other:?}"))),
        }
    }
}

/// Scoring strategy with whatever it needs to run.
pub enum Scorer<'a> {
    EngineOrder,
    Fuzzy,
    BertScore(&'a dyn Embedder),
    /// The idf table is built from the candidate pool of each sentence.
    BertScoreIdf(&'a dyn Embedder),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredText {
    pub text: RetrievedText,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores every text, sorts by descending score (ties by engine rank, then
/// normalized text) and keeps the first `l`. The engine-order scorer keeps the
/// input order and reports zero scores.
pub fn rank_and_select(
    sentence: &[Token],
    texts: &[RetrievedText],
    scorer: &Scorer<'_>,
    l: usize,
) -> Result<Vec<ScoredText>> {
    let cand_tokens: Vec<Vec<Token>> = texts.iter().map(|t| tokenize(&t.text)).collect();
    let scores: Vec<BertScore> = match scorer {
        Scorer::EngineOrder => {
            return Ok(texts
                .iter()
                .take(l)
                .map(|t| ScoredText {
                    text: t.clone(),
                    precision: 0.0,
                    recall: 0.0,
                    f1: 0.0,
                })
                .collect())
        }
        Scorer::Fuzzy => cand_tokens
            .iter()
            .map(|c| {
                let s = fuzzy_match(sentence, c);
                BertScore {
                    precision: s,
                    recall: s,
                    f1: s,
                }
            })
            .collect(),
        Scorer::BertScore(embedder) => {
            let sent = embedder.embed(sentence)?;
            cand_tokens
                .par_iter()
                .map(|c| bertscore(&sent, &embedder.embed(c)?))
                .collect::<Result<_>>()?
        }
        Scorer::BertScoreIdf(embedder) => {
            let sent = embedder.embed(sentence)?;
            let idf = IdfTable::from_documents(cand_tokens.iter());
            cand_tokens
                .par_iter()
                .map(|c| bertscore_idf(&sent, &embedder.embed(c)?, &idf, sentence, c))
                .collect::<Result<_>>()?
        }
    };
    let mut scored: Vec<ScoredText> = texts
        .iter()
        .zip(scores)
        .map(|(t, s)| ScoredText {
            text: t.clone(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        })
        .collect();
    scored.sort_by(|a, b| {
        b.f1.partial_cmp(&a.f1)
            .unwrap_or(Ordering::Equal)
            .then(a.text.engine_rank.cmp(&b.text.engine_rank))
            .then_with(|| normalize(&a.text.text).cmp(&normalize(&b.text.text)))
    });
    scored.truncate(l);
    Ok(scored)
}

/// The selected contexts and the token sequence appended to the sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBundle {
    pub selected: Vec<ScoredText>,
    pub assembled: Vec<Token>,
    pub sep_token: String,
}

impl ContextBundle {
    /// An empty bundle: only the leading separator.
    pub fn empty(sep_token: &str) -> Self {
        Self {
            selected: Vec::new(),
            assembled: vec![Token::new(sep_token).expect("separator must be non-empty")],
            sep_token: sep_token.to_string(),
        }
    }
}

/// Concatenates contexts in rank order, each preceded by `sep_token`, keeping
/// `sentence_len + assembled.len() <= max_view_len`. Truncation removes
/// lowest-ranked content first, then the tail of the last surviving text.
pub fn assemble_context(
    selected: &[ScoredText],
    sentence_len: usize,
    sep_token: &str,
    max_view_len: usize,
) -> Result<ContextBundle> {
    let sep = Token::new(sep_token)
        .ok_or_else(|| Error::Config("separator token must be non-empty".into()))?;
    if max_view_len <= sentence_len + 1 {
        return Err(Error::Config(format!(
            "max view length {max_view_len} leaves no room after a {sentence_len}-token sentence"
        )));
    }
    let budget = max_view_len - sentence_len;
    let mut assembled = vec![sep.clone()];
    let mut kept = Vec::new();
    for s in selected {
        let toks = tokenize(&s.text.text);
        if toks.is_empty() {
            continue;
        }
        // Every text after the first needs its own separator.
        let needs_sep = !kept.is_empty();
        let room = budget.saturating_sub(assembled.len() + usize::from(needs_sep));
        if room == 0 {
            break;
        }
        if needs_sep {
            assembled.push(sep.clone());
        }
        assembled.extend(toks.into_iter().take(room));
        kept.push(s.clone());
    }
    Ok(ContextBundle {
        selected: kept,
        assembled,
        sep_token: sep_token.to_string(),
    })
}

/// First line of a context dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format: String,
    pub version: u32,
    pub scorer: ScorerKind,
    pub k: usize,
    pub l: usize,
    pub query_word_limit: usize,
    pub sep_token: String,
    pub max_view_len: usize,
    pub leak_filter: bool,
}

pub const CONTEXT_DUMP_FORMAT: &str = "ragtag-contexts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub text: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub sentence_id: String,
    pub contexts: Vec<ContextEntry>,
}

/// Precomputed contexts keyed by sentence id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextDump {
    pub header: Option<DumpHeader>,
    pub records: BTreeMap<String, Vec<ContextEntry>>,
}

impl ContextDump {
    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut dump = ContextDump::default();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Format {
                record: i,
                message: e.to_string(),
            })?;
            if value.get("format").is_some() {
                dump.header = Some(serde_json::from_value(value).map_err(|e| Error::Format {
                    record: i,
                    message: e.to_string(),
                })?);
                continue;
            }
            let rec: ContextRecord = serde_json::from_value(value).map_err(|e| Error::Format {
                record: i,
                message: e.to_string(),
            })?;
            dump.records.insert(rec.sentence_id, rec.contexts);
        }
        Ok(dump)
    }

    /// Writes the header (if any) followed by records in the given order.
    pub fn write<W: Write>(&self, order: &[String], mut out: W) -> Result<()> {
        if let Some(h) = &self.header {
            serde_json::to_writer(&mut out, h)?;
            writeln!(out)?;
        }
        for id in order {
            let contexts = self.records.get(id).cloned().unwrap_or_default();
            serde_json::to_writer(
                &mut out,
                &ContextRecord {
                    sentence_id: id.clone(),
                    contexts,
                },
            )?;
            writeln!(out)?;
        }
        Ok(())
    }

    /// Assembled bundle for a sentence, or `None` when the dump has no record for it.
    pub fn bundle(
        &self,
        sentence_id: &str,
        sentence_len: usize,
        sep_token: &str,
        max_view_len: usize,
    ) -> Option<Result<ContextBundle>> {
        let entries = self.records.get(sentence_id)?;
        let scored: Vec<ScoredText> = entries
            .iter()
            .enumerate()
            .map(|(rank, e)| ScoredText {
                text: RetrievedText {
                    text: e.text.clone(),
                    origin_query: String::new(),
                    engine_rank: rank,
                },
                precision: e.f1,
                recall: e.f1,
                f1: e.f1,
            })
            .collect();
        Some(assemble_context(&scored, sentence_len, sep_token, max_view_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Matrix::from_rows(rows).unwrap(), ViewTag::Original)
    }

    fn toks(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    fn rt(text: &str, rank: usize) -> RetrievedText {
        RetrievedText {
            text: text.into(),
            origin_query: "q".into(),
            engine_rank: rank,
        }
    }

    fn scored(text: &str, rank: usize) -> ScoredText {
        ScoredText {
            text: rt(text, rank),
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        }
    }

    #[test]
    fn bertscore_examples() {
        let a = emb(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = bertscore(&a, &a).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let b = emb(&[vec![0.0, 0.0, 1.0]]);
        let c = emb(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let s = bertscore(&c, &b).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));

        let cand = emb(&[vec![1.0, 0.0]]);
        let s = bertscore(&a, &cand).unwrap();
        assert!((s.recall - 0.5).abs() < 1e-15);
        assert!((s.precision - 1.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_reported() {
        let a = emb(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(bertscore(&a, &a), Err(Error::ZeroNorm { row: 1 })));
    }

    #[test]
    fn idf_examples() {
        let sent = emb(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cand = emb(&[vec![1.0, 1.0], vec![1.0, 0.2]]);
        let st = toks("a b");
        let ct = toks("c d");
        let plain = bertscore(&sent, &cand).unwrap();
        let uni = bertscore_idf(&sent, &cand, &IdfTable::uniform(2.5), &st, &ct).unwrap();
        assert!((plain.f1 - uni.f1).abs() < 1e-12);

        // Weight 0 on "a": recall is the best match of "b" alone.
        let idf = IdfTable::uniform(1.0).with_weight("a", 0.0);
        let s = bertscore_idf(&sent, &cand, &idf, &st, &ct).unwrap();
        let best_b = 1.0 / 2f64.sqrt();
        assert!((s.recall - best_b).abs() < 1e-12);

        let s = bertscore_idf(&sent, &sent, &IdfTable::uniform(0.3), &st, &st).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-12);

        let zero = IdfTable::uniform(0.0);
        assert!(matches!(
            bertscore_idf(&sent, &cand, &zero, &st, &ct),
            Err(Error::ZeroWeights { side: "sentence" })
        ));
    }

    #[test]
    fn idf_table_formula() {
        let docs = [toks("a b"), toks("a c")];
        let idf = IdfTable::from_documents(docs.iter());
        assert!((idf.weight("a") - ((3.0f64 / 3.0).ln() + 1.0)).abs() < 1e-15);
        assert!((idf.weight("b") - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-15);
        assert!((idf.weight("zzz") - (3.0f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn fuzzy_examples() {
        assert_eq!(fuzzy_match(&toks("a b c"), &toks("A b c")), 1.0);
        assert_eq!(fuzzy_match(&toks("a b"), &toks("c d")), 0.0);
        assert!((fuzzy_match(&toks("a b c"), &toks("a c")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fuzzy_match(&[], &[]), 1.0);
        assert_eq!(fuzzy_match(&toks("a"), &[]), 0.0);
    }

    #[test]
    fn ranking_contract() {
        let texts = vec![rt("x y z", 0), rt("a b c", 1), rt("a b", 2)];
        let sent = toks("a b c");
        assert!(rank_and_select(&sent, &texts, &Scorer::Fuzzy, 0).unwrap().is_empty());
        let all = rank_and_select(&sent, &texts, &Scorer::Fuzzy, 10).unwrap();
        let order: Vec<usize> = all.iter().map(|s| s.text.engine_rank).collect();
        assert_eq!(order, vec![1, 2, 0]);
        let engine = rank_and_select(&sent, &texts, &Scorer::EngineOrder, 2).unwrap();
        let order: Vec<usize> = engine.iter().map(|s| s.text.engine_rank).collect();
        assert_eq!(order, vec![0, 1]);
    }

    #[test]
    fn ties_break_by_engine_rank() {
        let texts = vec![rt("q r", 3), rt("s t", 1), rt("u v", 2)];
        let out = rank_and_select(&toks("a b"), &texts, &Scorer::Fuzzy, 3).unwrap();
        let order: Vec<usize> = out.iter().map(|s| s.text.engine_rank).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn assembly_examples() {
        let b = assemble_context(&[], 5, "[SEP]", 510).unwrap();
        assert_eq!(b.assembled.len(), 1);
        assert_eq!(b.assembled[0].surface(), "[SEP]");

        let b = assemble_context(&[scored("a b", 0), scored("c", 1)], 3, "[SEP]", 510).unwrap();
        let s: Vec<&str> = b.assembled.iter().map(Token::surface).collect();
        assert_eq!(s, ["[SEP]", "a", "b", "[SEP]", "c"]);

        assert!(assemble_context(&[], 10, "[SEP]", 11).is_err());
        assert!(assemble_context(&[], 1, "  ", 11).is_err());
    }

    #[test]
    fn truncation_drops_low_ranked_then_tail() {
        let words = |n: usize, p: &str| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>().join(" ");
        // 1 + 299 + 1 + 299 = 600 units.
        let sel = [scored(&words(299, "a"), 0), scored(&words(299, "b"), 1)];
        let b = assemble_context(&sel, 20, "[SEP]", 510).unwrap();
        assert_eq!(b.assembled.len(), 490);
        assert_eq!(b.selected.len(), 2);
        assert_eq!(b.assembled.last().unwrap().surface(), "b188");

        // Budget exhausted before the third text gets any token.
        let sel = [scored(&words(5, "a"), 0), scored(&words(4, "b"), 1), scored("c d", 2)];
        let b = assemble_context(&sel, 2, "[SEP]", 13).unwrap();
        let s: Vec<&str> = b.assembled.iter().map(Token::surface).collect();
        assert_eq!(s.len(), 11);
        assert_eq!(b.selected.len(), 2);
        assert_eq!(s.last(), Some(&"b3"));
    }

    #[test]
    fn dump_round_trip() {
        let mut dump = ContextDump::default();
        dump.records.insert(
            "s1".into(),
            vec![ContextEntry {
                text: "hello world".into(),
                f1: 0.5,
            }],
        );
        dump.records.insert("s2".into(), vec![]);
        let mut buf = Vec::new();
        dump.write(&["s1".into(), "s2".into()], &mut buf).unwrap();
        let back = ContextDump::read(buf.as_slice()).unwrap();
        assert_eq!(back, dump);
        let b = back.bundle("s1", 2, "[SEP]", 510).unwrap().unwrap();
        assert_eq!(b.assembled.len(), 3);
        assert!(back.bundle("nope", 2, "[SEP]", 510).is_none());
    }
}
