//! From datasets and a search cache to per-sentence context bundles.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::corpus::{Dataset, Token};
use crate::error::{Error, Result};
use crate::reranker::{
    rank_and_select, ContextDump, ContextEntry, DumpHeader, Embedder, Scorer, ScorerKind,
    CONTEXT_DUMP_FORMAT, DEFAULT_CONTEXTS, DEFAULT_MAX_VIEW_LEN, DEFAULT_SEP_TOKEN,
};
use crate::retrieval::{
    document_contexts, random_contexts, retrieve, sentence_queries, CachedSearch, ContextSource,
    LeakFilter, RandomPool, RetrievalConfig, RetrievedText,
};

pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextPipeline {
    pub retrieval: RetrievalConfig,
    pub scorer: ScorerKind,
    /// Contexts kept per sentence after re-ranking.
    pub l: usize,
    pub sep_token: String,
    pub max_view_len: usize,
}

impl Default for ContextPipeline {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            scorer: ScorerKind::Bertscore,
            l: DEFAULT_CONTEXTS,
            sep_token: DEFAULT_SEP_TOKEN.to_string(),
            max_view_len: DEFAULT_MAX_VIEW_LEN,
        }
    }
}

/// Sentences that ended up with no context.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Coverage {
    pub sentences: usize,
    pub empty: Vec<String>,
}

impl ContextPipeline {
    pub fn header(&self) -> DumpHeader {
        DumpHeader {
            format: CONTEXT_DUMP_FORMAT.to_string(),
            version: DUMP_VERSION,
            scorer: self.scorer,
            k: self.retrieval.max_results_per_query,
            l: self.l,
            query_word_limit: self.retrieval.query_word_limit,
            sep_token: self.sep_token.clone(),
            max_view_len: self.max_view_len,
            leak_filter: self.retrieval.leak_filter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        if self.l == 0 {
            return Err(Error::Config("at least one context must be selected".into()));
        }
        if self.sep_token.trim().is_empty() {
            return Err(Error::Config("separator token must be non-empty".into()));
        }
        Ok(())
    }

    /// Resolves every query of `target` through `search` (live misses are
    /// fetched in parallel first), removes texts leaking any of `leak_corpora`,
    /// re-ranks and keeps the top `l` per sentence.
    pub fn build_dump(
        &self,
        target: &Dataset,
        leak_corpora: &[&Dataset],
        search: &CachedSearch,
        embedder: Option<&dyn Embedder>,
    ) -> Result<(ContextDump, Coverage)> {
        self.validate()?;
        let queries: Vec<String> = target
            .sentences
            .iter()
            .flat_map(|s| sentence_queries(s, &self.retrieval))
            .collect();
        let failures = search.prefetch(&queries, self.retrieval.parallelism);
        if let Some(first) = failures.into_iter().next() {
            return Err(first);
        }
        let filter = self
            .retrieval
            .leak_filter
            .then(|| LeakFilter::new(leak_corpora, self.retrieval.leak_ngram));
        let scorer = match (self.scorer, embedder) {
            (ScorerKind::Engine, _) => Scorer::EngineOrder,
            (ScorerKind::Fuzzy, _) => Scorer::Fuzzy,
            (ScorerKind::Bertscore, Some(e)) => Scorer::BertScore(e),
            (ScorerKind::BertscoreIdf, Some(e)) => Scorer::BertScoreIdf(e),
            (kind, None) => {
                return Err(Error::Config(format!(
                    "scorer {kind:?} needs token representations"
                )))
            }
        };
        let records: Vec<(String, Vec<ContextEntry>)> = target
            .sentences
            .par_iter()
            .map(|s| {
                let mut texts = retrieve(s, search, &self.retrieval)?;
                if let Some(f) = &filter {
                    texts = f.apply(texts);
                }
                let selected = rank_and_select(&s.tokens, &texts, &scorer, self.l)?;
                let entries = selected
                    .into_iter()
                    .map(|t| ContextEntry {
                        text: t.text.text,
                        f1: t.f1,
                    })
                    .collect();
                Ok((s.id.clone(), entries))
            })
            .collect::<Result<_>>()?;
        let mut dump = ContextDump {
            header: Some(self.header()),
            ..ContextDump::default()
        };
        let mut coverage = Coverage {
            sentences: records.len(),
            empty: Vec::new(),
        };
        for (id, entries) in records {
            if entries.is_empty() {
                coverage.empty.push(id.clone());
            }
            dump.records.insert(id, entries);
        }
        Ok((dump, coverage))
    }
}

impl ContextPipeline {
    /// Contexts that do not come from re-ranked search results: neighbouring
    /// sentences of the same document, or `l` random texts drawn from all
    /// retrieved texts or from the dataset itself. Search is only consulted
    /// for the retrieved-text pool.
    pub fn build_alternative_dump(
        &self,
        source: ContextSource,
        target: &Dataset,
        leak_corpora: &[&Dataset],
        search: &CachedSearch,
        seed: u64,
    ) -> Result<(ContextDump, Coverage)> {
        self.validate()?;
        let retrieved_pool = match source {
            ContextSource::Search => {
                return Err(Error::Config(
                    "search contexts are built by re-ranking, not by this method".into(),
                ))
            }
            ContextSource::RandomRetrieved => {
                let filter = self
                    .retrieval
                    .leak_filter
                    .then(|| LeakFilter::new(leak_corpora, self.retrieval.leak_ngram));
                let mut seen = std::collections::HashSet::new();
                let mut pool = Vec::new();
                for s in &target.sentences {
                    let mut texts = retrieve(s, search, &self.retrieval)?;
                    if let Some(f) = &filter {
                        texts = f.apply(texts);
                    }
                    for t in texts {
                        if seen.insert(t.text.clone()) {
                            pool.push(t.text);
                        }
                    }
                }
                pool
            }
            _ => Vec::new(),
        };
        let data_pool: Vec<String> = target.sentences.iter().map(|s| s.text()).collect();

        let mut dump = ContextDump {
            header: Some(self.header()),
            ..ContextDump::default()
        };
        let mut coverage = Coverage {
            sentences: target.len(),
            empty: Vec::new(),
        };
        for (i, s) in target.sentences.iter().enumerate() {
            let sentence_seed = seed.wrapping_add(i as u64);
            let texts: Vec<RetrievedText> = match source {
                ContextSource::Document => {
                    let budget = self.max_view_len.saturating_sub(s.len() + 1);
                    document_contexts(target, i, budget)?
                }
                ContextSource::RandomRetrieved if retrieved_pool.is_empty() => Vec::new(),
                ContextSource::RandomRetrieved => {
                    random_contexts(RandomPool::Retrieved, &retrieved_pool, self.l, sentence_seed)?
                }
                _ => {
                    let own = s.text();
                    let mut picked =
                        random_contexts(RandomPool::Data, &data_pool, self.l + 1, sentence_seed)?;
                    if let Some(pos) = picked.iter().position(|t| t.text == own) {
                        picked.remove(pos);
                    }
                    picked.truncate(self.l);
                    picked
                }
            };
            if texts.is_empty() {
                coverage.empty.push(s.id.clone());
            }
            let entries = texts
                .into_iter()
                .map(|t| ContextEntry { text: t.text, f1: 0.0 })
                .collect();
            dump.records.insert(s.id.clone(), entries);
        }
        Ok((dump, coverage))
    }
}

/// Assembled context tokens for every sentence of `dataset` found in `dump`.
/// Sentences missing from the dump get only the separator unless `strict`.
pub fn context_map(
    dump: &ContextDump,
    dataset: &Dataset,
    sep_token: &str,
    max_view_len: usize,
    strict: bool,
) -> Result<HashMap<String, Vec<Token>>> {
    let mut out = HashMap::with_capacity(dataset.len());
    for s in &dataset.sentences {
        let bundle = match dump.bundle(&s.id, s.len(), sep_token, max_view_len) {
            Some(b) => b?,
            None if strict => {
                return Err(Error::Data(format!("context dump has no record for sentence {}", s.id)))
            }
            None => continue,
        };
        out.insert(s.id.clone(), bundle.assembled);
    }
    Ok(out)
}
