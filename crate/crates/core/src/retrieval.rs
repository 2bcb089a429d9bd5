//! Retrieval of related texts for a sentence.
//!
//! Long sentences are chunked into sub-queries at punctuation, every query is
//! answered fixture-first (a JSON-lines cache in front of an optional live
//! search service), results are truncated to `k` per query, converted to text
//! (snippet, falling back to the title), de-duplicated and optionally filtered
//! against dataset sentences. Document-neighbor and random providers produce
//! contexts of controlled quality for ablations.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use aho_corasick::AhoCorasick;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabeledSentence, Token};
use crate::error::{Error, Result};

pub const DEFAULT_QUERY_WORD_LIMIT: usize = 30;
pub const DEFAULT_MAX_RESULTS: usize = 20;
pub const DEFAULT_PUNCTUATION: [&str; 6] = [".", ",", ";", ":", "!", "?"];

/// One result as returned by a search service, before ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchResult {
    pub title: String,
    pub snippet: String,
    pub engine_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedText {
    pub text: String,
    pub origin_query: String,
    pub engine_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub query_word_limit: usize,
    /// `k`: results kept per query.
    pub max_results_per_query: usize,
    pub leak_filter: bool,
    /// Additionally drop texts sharing any n-gram of this length with the data.
    pub leak_ngram: Option<usize>,
    pub punctuation: Vec<String>,
    pub parallelism: usize,
    pub timeout: Duration,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            query_word_limit: DEFAULT_QUERY_WORD_LIMIT,
            max_results_per_query: DEFAULT_MAX_RESULTS,
            leak_filter: true,
            leak_ngram: None,
            punctuation: DEFAULT_PUNCTUATION.iter().map(|s| s.to_string()).collect(),
            parallelism: 4,
            timeout: Duration::from_secs(10),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_word_limit == 0 {
            return Err(Error::Config("query word limit must be at least 1".into()));
        }
        if self.max_results_per_query == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.leak_ngram == Some(0) {
            return Err(Error::Config("leak n-gram length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a sentence into search queries of at most `limit` words. Sentences
/// within the limit become one query; longer ones are cut after punctuation
/// tokens, adjacent pieces are merged while they fit, and pieces that are
/// still too long are cut every `limit` words.
pub fn chunk_query<S: AsRef<str>>(sentence: &[Token], limit: usize, punctuation: &[S]) -> Vec<String> {
    assert!(limit >= 1, "query word limit must be at least 1");
    let join = |toks: &[Token]| {
        toks.iter()
            .map(Token::surface)
            .collect::<Vec<_>>()
            .join(" ")
    };
    if sentence.is_empty() {
        return Vec::new();
    }
    if sentence.len() <= limit {
        return vec![join(sentence)];
    }
    let is_punct = |t: &Token| punctuation.iter().any(|p| p.as_ref() == t.surface());

    let mut pieces: Vec<&[Token]> = Vec::new();
    let mut start = 0;
    for (i, tok) in sentence.iter().enumerate() {
        if is_punct(tok) {
            pieces.push(&sentence[start..=i]);
            start = i + 1;
        }
    }
    if start < sentence.len() {
        pieces.push(&sentence[start..]);
    }

    let mut chunks: Vec<Vec<Token>> = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    for piece in pieces {
        if current.len() + piece.len() <= limit {
            current.extend_from_slice(piece);
            continue;
        }
        if !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
        }
        if piece.len() <= limit {
            current.extend_from_slice(piece);
        } else {
            let mut parts = piece.chunks(limit).peekable();
            while let Some(part) = parts.next() {
                if parts.peek().is_some() {
                    chunks.push(part.to_vec());
                } else {
                    current.extend_from_slice(part);
                }
            }
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks.iter().map(|c| join(c)).collect()
}

/// Text for a result: the snippet, or the title when the snippet is blank.
/// `None` when both are blank.
pub fn result_to_text(result: &SearchResult) -> Option<String> {
    [&result.snippet, &result.title]
        .into_iter()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .find(|s| !s.is_empty())
}

/// A search service: one query in, an ordered list of hits out.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str) -> std::result::Result<Vec<SearchHit>, String>;
}

/// HTTP search service. Issues `GET <endpoint>?q=<query>` and accepts either a
/// JSON array of `{title, snippet}` objects or an object with a `results` array.
pub struct HttpSearchClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpSearchClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        Self {
            endpoint: endpoint.into(),
            agent: config.into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HttpResponse {
    Bare(Vec<SearchHit>),
    Wrapped { results: Vec<SearchHit> },
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str) -> std::result::Result<Vec<SearchHit>, String> {
        let body = self
            .agent
            .get(&self.endpoint)
            .query("q", query)
            .call()
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        match serde_json::from_str(&body).map_err(|e| e.to_string())? {
            HttpResponse::Bare(hits) | HttpResponse::Wrapped { results: hits } => Ok(hits),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    query: String,
    results: Vec<SearchHit>,
}

/// JSON-lines query cache, one `{"query", "results"}` record per line. The
/// file is append-only and the last record for a query wins.
pub struct FixtureCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, Vec<SearchHit>>>,
    writer: Mutex<()>,
}

impl FixtureCache {
    /// Opens (or prepares to create) a cache file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            Self::parse(BufReader::new(File::open(&path)?))?
        } else {
            HashMap::new()
        };
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    /// A cache that lives only in memory.
    pub fn in_memory(entries: impl IntoIterator<Item = (String, Vec<SearchHit>)>) -> Self {
        Self {
            path: None,
            entries: RwLock::new(entries.into_iter().collect()),
            writer: Mutex::new(()),
        }
    }

    fn parse<R: BufRead>(source: R) -> Result<HashMap<String, Vec<SearchHit>>> {
        let mut out = HashMap::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                record: i,
                message: e.to_string(),
            })?;
            out.insert(rec.query, rec.results);
        }
        Ok(out)
    }

    pub fn get(&self, query: &str) -> Option<Vec<SearchHit>> {
        self.entries.read().expect("cache lock").get(query).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a response, appending it to the backing file if there is one.
    pub fn insert(&self, query: &str, results: Vec<SearchHit>) -> Result<()> {
        let _guard = self.writer.lock().expect("cache writer lock");
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let rec = FixtureRecord {
                query: query.to_string(),
                results: results.clone(),
            };
            serde_json::to_writer(&mut f, &rec)?;
            writeln!(f)?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(query.to_string(), results);
        Ok(())
    }
}

/// Fixture-first search: the cache answers when it can, the live client
/// (if any) answers misses and every live response is written to the cache.
pub struct CachedSearch {
    cache: FixtureCache,
    live: Option<Box<dyn SearchClient>>,
    live_calls: AtomicUsize,
}

impl CachedSearch {
    pub fn new(cache: FixtureCache, live: Option<Box<dyn SearchClient>>) -> Self {
        Self {
            cache,
            live,
            live_calls: AtomicUsize::new(0),
        }
    }

    /// Number of requests that reached the live client.
    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &FixtureCache {
        &self.cache
    }

    pub fn lookup(&self, query: &str) -> Result<Vec<SearchHit>> {
        if let Some(hits) = self.cache.get(query) {
            return Ok(hits);
        }
        let live = self.live.as_ref().ok_or_else(|| Error::Retrieval {
            query: query.to_string(),
            message: "not in fixture cache and no live client configured".into(),
        })?;
        self.live_calls.fetch_add(1, Ordering::Relaxed);
        let hits = live.search(query).map_err(|message| Error::Retrieval {
            query: query.to_string(),
            message,
        })?;
        self.cache.insert(query, hits.clone())?;
        Ok(hits)
    }

    /// Resolves every query not yet cached using up to `parallelism` workers.
    /// Returns the queries that failed.
    pub fn prefetch(&self, queries: &[String], parallelism: usize) -> Vec<Error> {
        let mut seen = HashSet::new();
        let missing: Vec<&String> = queries
            .iter()
            .filter(|q| self.cache.get(q).is_none() && seen.insert(q.as_str()))
            .collect();
        if missing.is_empty() || self.live.is_none() {
            return missing
                .into_iter()
                .filter_map(|q| self.lookup(q).err())
                .collect();
        }
        let next = AtomicUsize::new(0);
        let errors = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..parallelism.max(1).min(missing.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = missing.get(i) else { break };
                    if let Err(e) = self.lookup(q) {
                        errors.lock().expect("error list").push((i, e));
                    }
                });
            }
        });
        let mut errors = errors.into_inner().expect("error list");
        errors.sort_by_key(|(i, _)| *i);
        errors.into_iter().map(|(_, e)| e).collect()
    }
}

/// Queries for a sentence under `config`.
pub fn sentence_queries(sentence: &LabeledSentence, config: &RetrievalConfig) -> Vec<String> {
    chunk_query(&sentence.tokens, config.query_word_limit, &config.punctuation)
}

/// Retrieved texts for one sentence: chunk queries in order, each truncated to
/// `k` results, converted to text and de-duplicated by normalized form.
pub fn retrieve(
    sentence: &LabeledSentence,
    client: &CachedSearch,
    config: &RetrievalConfig,
) -> Result<Vec<RetrievedText>> {
    config.validate()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for query in sentence_queries(sentence, config) {
        let hits = client.lookup(&query)?;
        for (rank, hit) in hits.into_iter().take(config.max_results_per_query).enumerate() {
            let result = SearchResult {
                title: hit.title,
                snippet: hit.snippet,
                engine_rank: rank,
            };
            let Some(text) = result_to_text(&result) else {
                continue;
            };
            if seen.insert(normalize_text(&text)) {
                out.push(RetrievedText {
                    text,
                    origin_query: query.clone(),
                    engine_rank: rank,
                });
            }
        }
    }
    Ok(out)
}

/// Drops retrieved texts that contain a dataset sentence (case-folded,
/// whitespace-normalized substring match) and, optionally, texts sharing any
/// word n-gram with the data.
pub struct LeakFilter {
    sentences: Option<AhoCorasick>,
    ngram: Option<(usize, HashSet<String>)>,
}

impl LeakFilter {
    pub fn new(corpora: &[&Dataset], ngram: Option<usize>) -> Self {
        let patterns: Vec<String> = corpora
            .iter()
            .flat_map(|d| &d.sentences)
            .map(|s| normalize_text(&s.text()))
            .filter(|s| !s.is_empty())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        let sentences = (!patterns.is_empty())
            .then(|| AhoCorasick::new(&patterns).expect("patterns are plain strings"));
        let ngram = ngram.map(|n| {
            let grams = corpora
                .iter()
                .flat_map(|d| &d.sentences)
                .flat_map(|s| word_ngrams(&normalize_text(&s.text()), n))
                .collect();
            (n, grams)
        });
        Self { sentences, ngram }
    }

    pub fn leaks(&self, text: &str) -> bool {
        let norm = normalize_text(text);
        if self.sentences.as_ref().is_some_and(|ac| ac.is_match(&norm)) {
            return true;
        }
        match &self.ngram {
            Some((n, grams)) => word_ngrams(&norm, *n).iter().any(|g| grams.contains(g)),
            None => false,
        }
    }

    pub fn apply(&self, texts: Vec<RetrievedText>) -> Vec<RetrievedText> {
        texts.into_iter().filter(|t| !self.leaks(&t.text)).collect()
    }
}

fn word_ngrams(norm: &str, n: usize) -> Vec<String> {
    let words: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
    words.windows(n).map(|w| w.join(" ")).collect()
}

/// Convenience wrapper over [`LeakFilter`] with full-sentence matching only.
pub fn leak_filter(texts: Vec<RetrievedText>, corpora: &[&Dataset]) -> Vec<RetrievedText> {
    if corpora.is_empty() {
        return texts;
    }
    LeakFilter::new(corpora, None).apply(texts)
}

/// Neighboring sentences of the same document as contexts, taken alternately
/// after and before the sentence (next, previous, second next, ...) until the
/// next one would exceed `budget` words.
pub fn document_contexts(
    dataset: &Dataset,
    index: usize,
    budget: usize,
) -> Result<Vec<RetrievedText>> {
    let sentence = dataset
        .sentences
        .get(index)
        .ok_or_else(|| Error::Data(format!("sentence index {index} out of range")))?;
    let doc = dataset.document_of(index);
    let mut order = Vec::new();
    for step in 1..doc.len() {
        if index + step < doc.end {
            order.push(index + step);
        }
        if index >= doc.start + step {
            order.push(index - step);
        }
    }
    let mut used = 0;
    let mut out = Vec::new();
    for (rank, j) in order.into_iter().enumerate() {
        let s = &dataset.sentences[j];
        if used + s.len() > budget {
            break;
        }
        used += s.len();
        out.push(RetrievedText {
            text: s.text(),
            origin_query: sentence.id.clone(),
            engine_rank: rank,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextSource {
    Search,
    Document,
    RandomRetrieved,
    RandomData,
}

impl std::str::FromStr for ContextSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "search" => Ok(Self::Search),
            "document" => Ok(Self::Document),
            "random-retrieved" => Ok(Self::RandomRetrieved),
            "random-data" => Ok(Self::RandomData),
            other => Err(Error::Config(format!("unknown context source {other:?}"))),
        }
    }
}

/// Where random contexts are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomPool {
    Retrieved,
    Data,
}

/// `count` texts drawn from `pool` without replacement (all of it when the pool
/// is smaller), deterministic for a given seed.
pub fn random_contexts<S: AsRef<str>>(
    mode: RandomPool,
    pool: &[S],
    count: usize,
    seed: u64,
) -> Result<Vec<RetrievedText>> {
    if pool.is_empty() {
        return Err(Error::Data("random context pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = count.min(pool.len());
    Ok(sample(&mut rng, pool.len(), amount)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| RetrievedText {
            text: pool[i].as_ref().to_string(),
            origin_query: match mode {
                RandomPool::Retrieved => "random-retrieved".into(),
                RandomPool::Data => "random-data".into(),
            },
            engine_rank: rank,
        })
        .collect())
}
