//! A generated NER task whose entity types can only be read off retrieved
//! context.
//!
//! Entity names are random pseudo-words, so their spelling carries no type
//! signal, and the sentence templates never hint at a type. For every name the
//! search fixtures hold a gazetteer-style snippet ("the singer Bakoru released
//! a new album") that places a type cue next to the name. Half of the names
//! never occur in the labeled training data; they show up in dev and in the
//! unlabeled pool, so a contextless tagger can only type them correctly by
//! learning from the context view.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{tokenize, write_conll, Dataset, LabeledSentence, Split, Token};
use crate::encoder::HashFeatureSpec;
use crate::error::Result;
use crate::pipeline::{context_map, ContextPipeline};
use crate::reranker::ScorerKind;
use crate::retrieval::{sentence_queries, CachedSearch, FixtureCache, RetrievalConfig, SearchHit};
use crate::trainer::{ContextMap, Mode, TrainConfig};

pub const TYPES: [&str; 3] = ["LOC", "ORG", "PER"];

const SYLLABLES: [&str; 24] = [
    "ba", "ke", "ri", "lo", "mu", "sa", "te", "vi", "no", "da", "ru", "ze", "pa", "gi", "fo", "ha",
    "ni", "to", "me", "ku", "la", "so", "we", "ji",
];

const ONE_SLOT: [&str; 8] = [
    "yesterday we talked about {} again",
    "{} was in the news this week",
    "everyone has heard of {} by now",
    "nobody expected to read about {} today",
    "there is a new story about {}",
    "{} came up twice during lunch",
    "my friend keeps mentioning {}",
    "we finally looked up {} online",
];

const TWO_SLOTS: [&str; 4] = [
    "{} and {} were both in the report",
    "people compared {} with {} last night",
    "after {} the talk moved on to {}",
    "we read about {} before hearing of {}",
];

const NO_SLOT: [&str; 4] = [
    "nothing much happened this week",
    "we stayed home and read all day",
    "the weather was fine this morning",
    "it was a quiet and slow afternoon",
];

const GAZETTEER: [(&str, [&str; 4]); 3] = [
    (
        "LOC",
        [
            "the city {} lies on the coast",
            "visitors to the town {} enjoy the old harbor",
            "{} province has a mild climate",
            "the capital {} has a large population",
        ],
    ),
    (
        "ORG",
        [
            "the company {} reported higher profits",
            "shares of firm {} rose sharply",
            "{} corporation announced a merger",
            "the bank {} opened new branches",
        ],
    ),
    (
        "PER",
        [
            "the singer {} released a new album",
            "the actor {} won an award",
            "{} biography and early career",
            "the footballer {} scored twice",
        ],
    ),
];

const FILLER: [&str; 6] = [
    "latest news and updates from around the world",
    "read the full story on our website",
    "photos and videos from the weekend",
    "sign up for the daily newsletter",
    "top stories and trending topics today",
    "opinion and analysis from our writers",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Labeled sentences, split between train and dev.
    pub labeled: usize,
    pub dev: usize,
    pub unlabeled: usize,
    pub names_per_type: usize,
    /// Fraction of names withheld from the labeled training data.
    pub held_fraction: f64,
    /// Probability that a dev or unlabeled mention uses a held-out name.
    pub held_rate: f64,
    pub distractors: usize,
    /// Probability that a name's gazetteer snippet is missing from a result list.
    pub missing_rate: f64,
    /// Probability that a training mention is annotated with a wrong type.
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            labeled: 2000,
            dev: 500,
            unlabeled: 2000,
            names_per_type: 120,
            held_fraction: 0.5,
            held_rate: 0.5,
            distractors: 4,
            missing_rate: 0.05,
            label_noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub unlabeled: Dataset,
    /// Search results per query, sorted by query.
    pub fixtures: Vec<(String, Vec<SearchHit>)>,
    /// Type of every generated name.
    pub gazetteer: BTreeMap<String, String>,
}

struct Name {
    text: String,
    kind: &'static str,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    let mut w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("syllables")).collect();
    w[..1].make_ascii_uppercase();
    w
}

fn generate_names(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Name> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for kind in TYPES {
        let mut made = 0;
        while made < config.names_per_type {
            let text = if rng.random_bool(0.25) {
                format!("{} {}", pseudo_word(rng), pseudo_word(rng))
            } else {
                pseudo_word(rng)
            };
            if seen.insert(text.to_lowercase()) {
                out.push(Name { text, kind });
                made += 1;
            }
        }
    }
    out
}

fn fill(template: &str, names: &[&Name]) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or(""));
    for (part, name) in parts.zip(names) {
        out.push_str(&name.text);
        out.push_str(part);
    }
    out
}

fn labeled_sentence(id: String, template: &str, names: &[&Name], labeled: bool) -> LabeledSentence {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut pieces = template.split("{}");
    let push_plain = |text: &str, tokens: &mut Vec<Token>, labels: &mut Vec<String>| {
        for t in tokenize(text) {
            tokens.push(t);
            labels.push("O".to_string());
        }
    };
    push_plain(pieces.next().unwrap_or(""), &mut tokens, &mut labels);
    for (piece, name) in pieces.zip(names) {
        for (i, t) in tokenize(&name.text).into_iter().enumerate() {
            tokens.push(t);
            labels.push(format!("{}-{}", if i == 0 { "B" } else { "I" }, name.kind));
        }
        push_plain(piece, &mut tokens, &mut labels);
    }
    LabeledSentence::new(id, tokens, labeled.then_some(labels))
}

/// Replaces the type of each entity with a different one with probability `rate`.
fn corrupt_types(sentence: &mut LabeledSentence, rate: f64, rng: &mut ChaCha8Rng) {
    let Some(labels) = sentence.labels.as_mut() else {
        return;
    };
    let mut current: Option<String> = None;
    for label in labels.iter_mut() {
        if let Some(kind) = label.strip_prefix("B-") {
            current = rng.random_bool(rate).then(|| {
                let others: Vec<&str> = TYPES.iter().copied().filter(|t| *t != kind).collect();
                others.choose(rng).expect("other types").to_string()
            });
        } else if !label.starts_with("I-") {
            current = None;
        }
        if let Some(kind) = &current {
            *label = format!("{}-{kind}", &label[..1]);
        }
    }
}

fn snippet(name: &Name, rng: &mut ChaCha8Rng) -> String {
    let (_, templates) = GAZETTEER
        .iter()
        .find(|(k, _)| *k == name.kind)
        .expect("every type has gazetteer templates");
    fill(templates.choose(rng).expect("templates"), &[name])
}

/// Generates the corpus and its search fixtures.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = generate_names(config, &mut rng);
    names.shuffle(&mut rng);
    let held_count = (names.len() as f64 * config.held_fraction).round() as usize;
    let (held, seen): (Vec<&Name>, Vec<&Name>) = {
        let (h, s) = names.split_at(held_count);
        (h.iter().collect(), s.iter().collect())
    };

    let pick = |rng: &mut ChaCha8Rng, allow_held: bool| -> &Name {
        if allow_held && !held.is_empty() && rng.random_bool(config.held_rate) {
            held.choose(rng).expect("held names")
        } else {
            seen.choose(rng).expect("seen names")
        }
    };

    let make = |split: Split, count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count);
        let mut mentions = Vec::with_capacity(count);
        for i in 0..count {
            let roll: f64 = rng.random();
            let (template, slots) = if roll < 0.1 {
                (*NO_SLOT.choose(rng).expect("templates"), 0)
            } else if roll < 0.3 {
                (*TWO_SLOTS.choose(rng).expect("templates"), 2)
            } else {
                (*ONE_SLOT.choose(rng).expect("templates"), 1)
            };
            let allow_held = split != Split::Train;
            let chosen: Vec<&Name> = (0..slots).map(|_| pick(rng, allow_held)).collect();
            out.push(labeled_sentence(
                format!("{split}-{i}"),
                template,
                &chosen,
                split != Split::Unlabeled,
            ));
            if split == Split::Train && config.label_noise > 0.0 {
                corrupt_types(&mut out[i], config.label_noise, rng);
            }
            mentions.push(chosen);
        }
        (out, mentions)
    };

    let train_count = config.labeled.saturating_sub(config.dev);
    let (train_s, train_m) = make(Split::Train, train_count, &mut rng);
    let (dev_s, dev_m) = make(Split::Dev, config.dev, &mut rng);
    let (unl_s, unl_m) = make(Split::Unlabeled, config.unlabeled, &mut rng);

    let retrieval = RetrievalConfig::default();
    let mut fixtures: HashMap<String, Vec<SearchHit>> = HashMap::new();
    for (sentences, mentions) in [(&train_s, &train_m), (&dev_s, &dev_m), (&unl_s, &unl_m)] {
        for (s, chosen) in sentences.iter().zip(mentions) {
            for query in sentence_queries(s, &retrieval) {
                if fixtures.contains_key(&query) {
                    continue;
                }
                let mut hits = Vec::new();
                for name in chosen {
                    if !rng.random_bool(config.missing_rate) {
                        hits.push(snippet(name, &mut rng));
                    }
                }
                for _ in 0..config.distractors {
                    if rng.random_bool(0.5) {
                        hits.push(FILLER.choose(&mut rng).expect("filler").to_string());
                    } else {
                        let other = names.choose(&mut rng).expect("names");
                        hits.push(snippet(other, &mut rng));
                    }
                }
                hits.shuffle(&mut rng);
                let hits = hits
                    .into_iter()
                    .map(|snippet| SearchHit {
                        title: String::new(),
                        snippet,
                    })
                    .collect();
                fixtures.insert(query, hits);
            }
        }
    }
    let mut fixtures: Vec<(String, Vec<SearchHit>)> = fixtures.into_iter().collect();
    fixtures.sort_by(|a, b| a.0.cmp(&b.0));

    Ok(SynthCorpus {
        train: Dataset::new(Split::Train, train_s, None)?,
        dev: Dataset::new(Split::Dev, dev_s, None)?,
        unlabeled: Dataset::new(Split::Unlabeled, unl_s, None)?,
        fixtures,
        gazetteer: names
            .iter()
            .map(|n| (n.text.clone(), n.kind.to_string()))
            .collect(),
    })
}

#[derive(Serialize)]
struct FixtureLine<'a> {
    query: &'a str,
    results: &'a [SearchHit],
}

impl SynthCorpus {
    pub fn search(&self) -> CachedSearch {
        CachedSearch::new(FixtureCache::in_memory(self.fixtures.clone()), None)
    }

    /// Writes `train.conll`, `dev.conll`, `unlabeled.conll` and `search_cache.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, ds) in [
            ("train.conll", &self.train),
            ("dev.conll", &self.dev),
            ("unlabeled.conll", &self.unlabeled),
        ] {
            let mut out = BufWriter::new(File::create(dir.join(name))?);
            write_conll(ds, &mut out)?;
            out.flush()?;
        }
        let mut out = BufWriter::new(File::create(dir.join("search_cache.jsonl"))?);
        for (query, results) in &self.fixtures {
            serde_json::to_writer(&mut out, &FixtureLine { query, results })?;
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Context bundles for all three splits, re-ranked by fuzzy token match.
    pub fn contexts(&self, pipeline: &ContextPipeline) -> Result<ContextMap> {
        let search = self.search();
        let all = [&self.train, &self.dev, &self.unlabeled];
        let mut out = ContextMap::new();
        for ds in all {
            let (dump, _) = pipeline.build_dump(ds, &all, &search, None)?;
            out.extend(context_map(&dump, ds, &pipeline.sep_token, pipeline.max_view_len, true)?);
        }
        Ok(out)
    }
}

/// Re-ranking setup used for the synthetic task.
pub fn pipeline() -> ContextPipeline {
    ContextPipeline {
        scorer: ScorerKind::Fuzzy,
        ..ContextPipeline::default()
    }
}

/// Training setup sized for the synthetic task: a smaller hash space and
/// faster encoder learning than the defaults meant for large corpora.
pub fn train_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        encoder_lr: 0.01,
        crf_lr: 0.05,
        batch_size: 8,
        epochs: 4,
        hidden: 16,
        init_scale: 0.1,
        spec: HashFeatureSpec {
            dims: 1 << 13,
            ..HashFeatureSpec::default()
        },
        ..TrainConfig::default()
    }
}
