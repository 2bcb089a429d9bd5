//! `ragtag`: retrieve, re-rank, train, evaluate and predict from the command line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ragtag::corpus::{entity_f1, read_conll, ConllColumns, Dataset, Prf, Split};
use ragtag::encoder::{load_embedding_dump, EmbeddingStore, EncoderParams};
use ragtag::pipeline::{context_map, ContextPipeline};
use ragtag::reranker::{
    ContextDump, Embedder, ScorerKind, ViewTag, DEFAULT_MAX_VIEW_LEN, DEFAULT_SEP_TOKEN,
};
use ragtag::retrieval::{
    sentence_queries, CachedSearch, ContextSource, FixtureCache, HttpSearchClient, SearchClient,
};
use ragtag::synth::{self, SynthConfig};
use ragtag::trainer::{
    evaluate, marginals, predict, train_from, training_labels, Checkpoint, ContextMap, Mode, Model,
    TrainConfig, TrainData,
};
use ragtag::{Error, Result};

const DEFAULT_SEED: u64 = 42;
const RERANK_HIDDEN: usize = 128;
const MAX_LISTED_FAILURES: usize = 20;
const TABLE5: [Mode; 6] = [
    Mode::WoContext,
    Mode::WContext,
    Mode::JointNoCl,
    Mode::ClBoth,
    Mode::ClL2,
    Mode::ClKl,
];

#[derive(Parser, Debug)]
#[command(name = "ragtag", version, about = "Retrieval-augmented sequence tagging")]
struct Cli {
    /// TOML file with [data], [retrieval], [rerank], [encoder] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Query the search service (or its cache), re-rank and write contexts.jsonl.
    Retrieve(RetrieveCmd),
    /// Re-rank cached search results only; never calls the service.
    Rerank(RetrieveCmd),
    /// Train a model and write checkpoint.bin and metrics.jsonl.
    Train(TrainCmd),
    /// Score a checkpoint on gold data, or score a predictions file.
    Eval(EvalCmd),
    /// Append predicted labels to the input lines.
    Predict(PredictCmd),
    /// Train every configuration of a preset and score both input views.
    Matrix(MatrixCmd),
    /// Write the synthetic ambiguity corpus and its search cache.
    Synth(SynthCmd),
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn parse_view(s: &str) -> std::result::Result<ViewTag, String> {
    match s {
        "original" | "wo_context" => Ok(ViewTag::Original),
        "retrieval" | "w_context" => Ok(ViewTag::Retrieval),
        _ => Err(format!("expected original or retrieval, got {s:?}")),
    }
}

macro_rules! overlay {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl $name {
            /// Flag values win over file values.
            fn overlay(self, file: Self) -> Self {
                Self { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Token-only CoNLL file.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long)]
    token_col: Option<usize>,
    #[arg(long)]
    label_col: Option<usize>,
}
overlay!(DataArgs { train, dev, test, unlabeled, token_col, label_col });

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
struct RetrievalArgs {
    /// JSON-lines search cache; new live results are appended to it.
    #[arg(long)]
    retrieval_fixture: Option<PathBuf>,
    /// Search service URL queried for cache misses.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    query_word_limit: Option<usize>,
    #[arg(long, value_parser = parse_switch)]
    leak_filter: Option<bool>,
    #[arg(long)]
    leak_ngram: Option<usize>,
    /// search, document, random-retrieved or random-data.
    #[arg(long)]
    context_source: Option<ContextSource>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}
overlay!(RetrievalArgs {
    retrieval_fixture,
    endpoint,
    k,
    query_word_limit,
    leak_filter,
    leak_ngram,
    context_source,
    parallelism,
    timeout_secs,
});

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
struct RerankArgs {
    /// engine, fuzzy, bertscore or bertscore-idf.
    #[arg(long)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    sep_token: Option<String>,
    #[arg(long)]
    max_view_len: Option<usize>,
    /// Context file written by `ragtag retrieve`.
    #[arg(long)]
    contexts: Option<PathBuf>,
}
overlay!(RerankArgs { scorer, l, sep_token, max_view_len, contexts });

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum EncoderKind {
    Hash,
    External,
}

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
struct EncoderArgs {
    #[arg(long, value_enum)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    hash_dims: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hash_seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// JSON-lines token representations for the external encoder.
    #[arg(long)]
    embedding_dump: Option<PathBuf>,
}
overlay!(EncoderArgs { encoder, hash_dims, window, hash_seed, hidden, embedding_dump });

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// wo_context, w_context, joint_no_cl, cl_l2, cl_kl or cl_both.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    crf_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Labeled batches per block of the alternation schedule.
    #[arg(long)]
    labeled_steps: Option<usize>,
    /// Unlabeled batches per block of the alternation schedule.
    #[arg(long)]
    unlabeled_steps: Option<usize>,
    #[arg(long, value_parser = parse_switch)]
    bio_mask: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    stop_row: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    strict_contexts: Option<bool>,
    #[arg(long)]
    nll_weight: Option<f64>,
    #[arg(long)]
    nll_ext_weight: Option<f64>,
    #[arg(long)]
    cl_l2_weight: Option<f64>,
    #[arg(long)]
    cl_kl_weight: Option<f64>,
}
overlay!(TrainArgs {
    mode,
    epochs,
    batch_size,
    encoder_lr,
    crf_lr,
    weight_decay,
    clip_norm,
    init_scale,
    labeled_steps,
    unlabeled_steps,
    bio_mask,
    stop_row,
    strict_contexts,
    nll_weight,
    nll_ext_weight,
    cl_l2_weight,
    cl_kl_weight,
});

#[derive(Deserialize, Debug, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    data: DataArgs,
    retrieval: RetrievalArgs,
    rerank: RerankArgs,
    encoder: EncoderArgs,
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct RetrieveCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    rerank: RerankArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rerank: RerankArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rerank: RerankArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// original (wo_context) or retrieval (w_context).
    #[arg(long, value_parser = parse_view)]
    view: Option<ViewTag>,
    /// File written by `ragtag predict` on gold data: the gold label in
    /// --label-col, the prediction in the last column.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rerank: RerankArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_view)]
    view: Option<ViewTag>,
    /// Also write per-token label marginals as JSON lines.
    #[arg(long)]
    dump_marginals: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Preset {
    Table5,
}

#[derive(Args, Debug)]
struct MatrixCmd {
    #[arg(long, value_enum, default_value = "table5")]
    preset: Preset,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rerank: RerankArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct SynthCmd {
    #[arg(long)]
    labeled: Option<usize>,
    #[arg(long = "dev-size")]
    dev: Option<usize>,
    #[arg(long = "unlabeled-size")]
    unlabeled: Option<usize>,
    #[arg(long)]
    names_per_type: Option<usize>,
    #[arg(long)]
    label_noise: Option<f64>,
}

struct Run {
    seed: u64,
    out: PathBuf,
    out_given: bool,
    file: FileConfig,
}

impl Run {
    fn out_path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Retrieval { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let out_given = cli.out.is_some() || file.out.is_some();
    let run = Run {
        seed: cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        out: cli.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        out_given,
        file,
    };
    match cli.command {
        Command::Retrieve(cmd) => cmd_retrieve(&run, cmd, true),
        Command::Rerank(cmd) => cmd_retrieve(&run, cmd, false),
        Command::Train(cmd) => cmd_train(&run, cmd),
        Command::Eval(cmd) => cmd_eval(&run, cmd),
        Command::Predict(cmd) => cmd_predict(&run, cmd),
        Command::Matrix(cmd) => cmd_matrix(&run, cmd),
        Command::Synth(cmd) => cmd_synth(&run, cmd),
    }
}

fn read_dataset(path: &Path, split: Split, data: &DataArgs, labeled: bool) -> Result<Dataset> {
    let columns = ConllColumns {
        token: data.token_col.unwrap_or(0),
        label: labeled.then(|| data.label_col.unwrap_or(1)),
    };
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_conll(BufReader::new(file), columns, split).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Every dataset named in `data`, in train, dev, test, unlabeled order.
fn load_all(data: &DataArgs) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for (path, split) in [
        (&data.train, Split::Train),
        (&data.dev, Split::Dev),
        (&data.test, Split::Test),
        (&data.unlabeled, Split::Unlabeled),
    ] {
        if let Some(p) = path {
            out.push(read_dataset(p, split, data, split != Split::Unlabeled)?);
        }
    }
    Ok(out)
}

fn context_pipeline(r: &RetrievalArgs, rr: &RerankArgs) -> ContextPipeline {
    let mut p = ContextPipeline::default();
    if let Some(k) = r.k {
        p.retrieval.max_results_per_query = k;
    }
    if let Some(q) = r.query_word_limit {
        p.retrieval.query_word_limit = q;
    }
    if let Some(f) = r.leak_filter {
        p.retrieval.leak_filter = f;
    }
    p.retrieval.leak_ngram = r.leak_ngram;
    if let Some(n) = r.parallelism {
        p.retrieval.parallelism = n;
    }
    if let Some(t) = r.timeout_secs {
        p.retrieval.timeout = Duration::from_secs(t);
    }
    if let Some(s) = rr.scorer {
        p.scorer = s;
    }
    if let Some(l) = rr.l {
        p.l = l;
    }
    if let Some(s) = &rr.sep_token {
        p.sep_token = s.clone();
    }
    if let Some(m) = rr.max_view_len {
        p.max_view_len = m;
    }
    p
}

fn train_config(run: &Run, t: &TrainArgs, e: &EncoderArgs) -> TrainConfig {
    let mut c = TrainConfig {
        seed: run.seed,
        ..TrainConfig::default()
    };
    if let Some(m) = t.mode {
        c.mode = m;
    }
    if let Some(v) = t.epochs {
        c.epochs = v;
    }
    if let Some(v) = t.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = t.encoder_lr {
        c.encoder_lr = v;
    }
    if let Some(v) = t.crf_lr {
        c.crf_lr = v;
    }
    if let Some(v) = t.weight_decay {
        c.weight_decay = v;
    }
    c.clip_norm = t.clip_norm;
    if let Some(v) = t.init_scale {
        c.init_scale = v;
    }
    if let Some(v) = t.labeled_steps {
        c.alternation.labeled = v;
    }
    if let Some(v) = t.unlabeled_steps {
        c.alternation.unlabeled = v;
    }
    if let Some(v) = t.bio_mask {
        c.bio_mask = v;
    }
    if let Some(v) = t.stop_row {
        c.stop_row = v;
    }
    if let Some(v) = t.strict_contexts {
        c.strict_contexts = v;
    }
    if let Some(v) = t.nll_weight {
        c.weights.nll = v;
    }
    if let Some(v) = t.nll_ext_weight {
        c.weights.nll_ext = v;
    }
    if let Some(v) = t.cl_l2_weight {
        c.weights.cl_l2 = v;
    }
    if let Some(v) = t.cl_kl_weight {
        c.weights.cl_kl = v;
    }
    if let Some(v) = e.hidden {
        c.hidden = v;
    }
    if let Some(v) = e.hash_dims {
        c.spec.dims = v;
    }
    if let Some(v) = e.window {
        c.spec.window = v;
    }
    if let Some(v) = e.hash_seed {
        c.spec.hash_seed = v;
    }
    c
}

fn load_store(e: &EncoderArgs) -> Result<Option<Arc<EmbeddingStore>>> {
    match &e.embedding_dump {
        Some(path) => {
            let file = File::open(path).map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
            Ok(Some(Arc::new(load_embedding_dump(BufReader::new(file))?)))
        }
        None => Ok(None),
    }
}

struct Contexts {
    map: Option<ContextMap>,
    sep_token: String,
}

/// Reads the context file (if any) and assembles contexts for `datasets`.
fn load_contexts(rr: &RerankArgs, datasets: &[&Dataset]) -> Result<Contexts> {
    let Some(path) = &rr.contexts else {
        return Ok(Contexts {
            map: None,
            sep_token: rr.sep_token.clone().unwrap_or_else(|| DEFAULT_SEP_TOKEN.to_string()),
        });
    };
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let dump = ContextDump::read(BufReader::new(file))?;
    let header = dump.header.as_ref();
    let sep_token = rr
        .sep_token
        .clone()
        .or_else(|| header.map(|h| h.sep_token.clone()))
        .unwrap_or_else(|| DEFAULT_SEP_TOKEN.to_string());
    let max_view_len = rr
        .max_view_len
        .or_else(|| header.map(|h| h.max_view_len))
        .unwrap_or(DEFAULT_MAX_VIEW_LEN);
    let mut map = ContextMap::new();
    for ds in datasets {
        let part = context_map(&dump, ds, &sep_token, max_view_len, false)?;
        if part.is_empty() && !ds.is_empty() {
            eprintln!(
                "warning: {} has no records for the {} split",
                path.display(),
                ds.split
            );
        }
        map.extend(part);
    }
    Ok(Contexts {
        map: Some(map),
        sep_token,
    })
}

fn missing_contexts(what: &str) -> Error {
    Error::Config(format!(
        "{what} needs retrieved contexts: run `ragtag retrieve` first and pass its contexts.jsonl with --contexts"
    ))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    body(&mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CoverageReport {
    sentences: usize,
    with_contexts: usize,
    empty: Vec<String>,
}

fn cmd_retrieve(run: &Run, cmd: RetrieveCmd, live: bool) -> Result<()> {
    let f = &run.file;
    let data = cmd.data.overlay(f.data.clone());
    let retrieval = cmd.retrieval.overlay(f.retrieval.clone());
    let rerank = cmd.rerank.overlay(f.rerank.clone());
    let encoder = cmd.encoder.overlay(f.encoder.clone());

    let pipeline = context_pipeline(&retrieval, &rerank);
    pipeline.validate()?;
    let datasets = load_all(&data)?;
    if datasets.is_empty() {
        return Err(Error::Config(
            "nothing to retrieve for: pass --train, --dev, --test or --unlabeled".into(),
        ));
    }
    if !live && retrieval.endpoint.is_some() {
        return Err(Error::Config(
            "rerank works from the cache only; use `ragtag retrieve` to query the service".into(),
        ));
    }
    let cache = match &retrieval.retrieval_fixture {
        Some(p) => FixtureCache::open(p)?,
        None if !live => return Err(Error::Config("rerank needs --retrieval-fixture".into())),
        None => FixtureCache::in_memory([]),
    };
    let client = retrieval.endpoint.as_ref().filter(|_| live).map(|url| {
        Box::new(HttpSearchClient::new(url.clone(), pipeline.retrieval.timeout)) as Box<dyn SearchClient>
    });
    let search = CachedSearch::new(cache, client);
    let source = retrieval.context_source.unwrap_or(ContextSource::Search);

    if matches!(source, ContextSource::Search | ContextSource::RandomRetrieved) {
        let queries: Vec<String> = datasets
            .iter()
            .flat_map(|ds| ds.sentences.iter())
            .flat_map(|s| sentence_queries(s, &pipeline.retrieval))
            .collect();
        let failures = search.prefetch(&queries, pipeline.retrieval.parallelism);
        if !failures.is_empty() {
            eprintln!("{} queries failed:", failures.len());
            for e in failures.iter().take(MAX_LISTED_FAILURES) {
                eprintln!("  {e}");
            }
            if failures.len() > MAX_LISTED_FAILURES {
                eprintln!("  ... and {} more", failures.len() - MAX_LISTED_FAILURES);
            }
            return Err(failures.into_iter().next().expect("non-empty"));
        }
    }

    let embedder = match pipeline.scorer {
        ScorerKind::Bertscore | ScorerKind::BertscoreIdf => {
            let mut spec = TrainConfig::default().spec;
            if let Some(d) = encoder.hash_dims {
                spec.dims = d;
            }
            if let Some(w) = encoder.window {
                spec.window = w;
            }
            if let Some(s) = encoder.hash_seed {
                spec.hash_seed = s;
            }
            Some(EncoderParams::random(spec, RERANK_HIDDEN, 1.0, run.seed)?)
        }
        _ => None,
    };
    let leak: Vec<&Dataset> = datasets.iter().collect();
    let mut dump = ContextDump {
        header: Some(pipeline.header()),
        ..ContextDump::default()
    };
    let mut order = Vec::new();
    let mut report = CoverageReport {
        sentences: 0,
        with_contexts: 0,
        empty: Vec::new(),
    };
    for ds in &datasets {
        let (part, coverage) = match source {
            ContextSource::Search => pipeline.build_dump(
                ds,
                &leak,
                &search,
                embedder.as_ref().map(|e| e as &dyn Embedder),
            )?,
            other => pipeline.build_alternative_dump(other, ds, &leak, &search, run.seed)?,
        };
        dump.records.extend(part.records);
        order.extend(ds.sentences.iter().map(|s| s.id.clone()));
        report.sentences += coverage.sentences;
        report.with_contexts += coverage.sentences - coverage.empty.len();
        report.empty.extend(coverage.empty);
    }

    let contexts_path = run.out_path("contexts.jsonl")?;
    write_file(&contexts_path, |w| dump.write(&order, w))?;
    write_file(&run.out_path("coverage.json")?, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    eprintln!(
        "{}: {} sentences, {} without contexts, {} live queries",
        contexts_path.display(),
        report.sentences,
        report.empty.len(),
        search.live_calls()
    );
    Ok(())
}

fn cmd_train(run: &Run, cmd: TrainCmd) -> Result<()> {
    let f = &run.file;
    let data = cmd.data.overlay(f.data.clone());
    let rerank = cmd.rerank.overlay(f.rerank.clone());
    let encoder = cmd.encoder.overlay(f.encoder.clone());
    let targs = cmd.train.overlay(f.train.clone());
    let config = train_config(run, &targs, &encoder);
    config.validate()?;

    let train_path = data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("train needs --train".into()))?;
    let train = read_dataset(train_path, Split::Train, &data, true)?;
    let dev = data
        .dev
        .as_ref()
        .map(|p| read_dataset(p, Split::Dev, &data, true))
        .transpose()?;
    let unlabeled = data
        .unlabeled
        .as_ref()
        .map(|p| read_dataset(p, Split::Unlabeled, &data, false))
        .transpose()?;
    let external = encoder.encoder == Some(EncoderKind::External);
    if config.mode.needs_context() && rerank.contexts.is_none() && !external {
        return Err(missing_contexts(&format!("mode {}", config.mode)));
    }
    let mut all = vec![&train];
    all.extend(dev.as_ref());
    all.extend(unlabeled.as_ref());
    let contexts = load_contexts(&rerank, &all)?;

    let train_data = TrainData {
        train: &train,
        dev: dev.as_ref(),
        contexts: contexts.map.as_ref(),
        unlabeled: unlabeled.as_ref(),
        sep_token: &contexts.sep_token,
    };
    let model = if external {
        let store = load_store(&encoder)?
            .ok_or_else(|| Error::Config("the external encoder needs --embedding-dump".into()))?;
        Model::init_external(training_labels(&train_data), store, &config)?
    } else {
        Model::init(training_labels(&train_data), &config)?
    };
    let outcome = train_from(model, &train_data, &config)?;

    write_file(&run.out_path("metrics.jsonl")?, |w| {
        for record in &outcome.log {
            serde_json::to_writer(&mut *w, record)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    let checkpoint_path = run.out_path("checkpoint.bin")?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        config,
    };
    write_file(&checkpoint_path, |w| checkpoint.write(w))?;
    eprintln!("{}: epoch {}", checkpoint_path.display(), outcome.best_epoch);
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    view: Option<ViewTag>,
    sentences: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

impl EvalOutput {
    fn new(split: String, view: Option<ViewTag>, sentences: usize, m: Prf) -> Self {
        Self {
            split,
            view,
            sentences,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_checkpoint(path: &Path, encoder: &EncoderArgs) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Checkpoint::read(BufReader::new(file), load_store(encoder)?)
}

/// Requires contexts for the retrieval view of a hash-encoder model.
fn check_view(checkpoint: &Checkpoint, view: ViewTag, contexts: &Contexts) -> Result<()> {
    let hash = checkpoint.model.hash_params().is_some();
    if view == ViewTag::Retrieval && hash && contexts.map.is_none() {
        return Err(missing_contexts("the retrieval view"));
    }
    Ok(())
}

fn cmd_eval(run: &Run, cmd: EvalCmd) -> Result<()> {
    let f = &run.file;
    let data = cmd.data.overlay(f.data.clone());
    if let Some(path) = &cmd.predictions {
        let (sentences, metrics) = score_predictions(path, data.label_col.unwrap_or(1))?;
        return print_json(&EvalOutput::new("predictions".into(), None, sentences, metrics));
    }
    let rerank = cmd.rerank.overlay(f.rerank.clone());
    let encoder = cmd.encoder.overlay(f.encoder.clone());
    let checkpoint_path = cmd
        .checkpoint
        .ok_or_else(|| Error::Config("eval needs --checkpoint or --predictions".into()))?;
    let (path, split) = match (&data.test, &data.dev) {
        (Some(p), _) => (p, Split::Test),
        (None, Some(p)) => (p, Split::Dev),
        _ => return Err(Error::Config("eval needs gold data: pass --test or --dev".into())),
    };
    let dataset = read_dataset(path, split, &data, true)?;
    let checkpoint = read_checkpoint(&checkpoint_path, &encoder)?;
    let view = cmd.view.unwrap_or(ViewTag::Original);
    let contexts = load_contexts(&rerank, &[&dataset])?;
    check_view(&checkpoint, view, &contexts)?;
    let report = evaluate(
        &dataset,
        contexts.map.as_ref(),
        &checkpoint.model,
        view,
        &contexts.sep_token,
    )?;
    print_json(&EvalOutput::new(split.to_string(), Some(view), dataset.len(), report.metrics))
}

/// Scores a file whose `label_col` holds gold tags and whose last column holds predictions.
fn score_predictions(path: &Path, label_col: usize) -> Result<(usize, Prf)> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    let (mut g, mut p) = (Vec::new(), Vec::new());
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with("-DOCSTART-") {
            if !g.is_empty() {
                gold.push(std::mem::take(&mut g));
                pred.push(std::mem::take(&mut p));
            }
            continue;
        }
        if fields.len() < (label_col + 2).max(2) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "{}: expected a gold column {label_col} and a prediction column",
                    path.display()
                ),
            });
        }
        g.push(fields[label_col].to_string());
        p.push(fields[fields.len() - 1].to_string());
    }
    if !g.is_empty() {
        gold.push(g);
        pred.push(p);
    }
    Ok((gold.len(), entity_f1(&gold, &pred)?))
}

fn cmd_predict(run: &Run, cmd: PredictCmd) -> Result<()> {
    let f = &run.file;
    let data = cmd.data.overlay(f.data.clone());
    let rerank = cmd.rerank.overlay(f.rerank.clone());
    let encoder = cmd.encoder.overlay(f.encoder.clone());
    let (path, split) = match (&data.test, &data.dev, &data.unlabeled) {
        (Some(p), _, _) => (p, Split::Test),
        (None, Some(p), _) => (p, Split::Dev),
        (None, None, Some(p)) => (p, Split::Unlabeled),
        _ => {
            return Err(Error::Config(
                "predict needs input: pass --test, --dev or --unlabeled".into(),
            ))
        }
    };
    let dataset = read_dataset(path, split, &data, false)?;
    let checkpoint = read_checkpoint(&cmd.checkpoint, &encoder)?;
    let view = cmd.view.unwrap_or(ViewTag::Original);
    let contexts = load_contexts(&rerank, &[&dataset])?;
    check_view(&checkpoint, view, &contexts)?;
    let predictions = predict(
        &dataset,
        contexts.map.as_ref(),
        &checkpoint.model,
        view,
        &contexts.sep_token,
    )?;

    let emit = |w: &mut dyn Write| -> Result<()> {
        for (s, labels) in dataset.sentences.iter().zip(&predictions) {
            let raw = s.raw_lines.as_deref().unwrap_or_default();
            for (line, label) in raw.iter().zip(labels) {
                writeln!(w, "{line} {label}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    if run.out_given {
        let out = run.out_path("predictions.conll")?;
        write_file(&out, |w| emit(w))?;
        eprintln!("{}: {} sentences", out.display(), dataset.len());
    } else {
        let stdout = io::stdout();
        let mut lock = BufWriter::new(stdout.lock());
        emit(&mut lock)?;
        lock.flush()?;
    }

    if let Some(path) = &cmd.dump_marginals {
        let records = marginals(
            &dataset,
            contexts.map.as_ref(),
            &checkpoint.model,
            view,
            &contexts.sep_token,
        )?;
        write_file(path, |w| {
            for r in &records {
                serde_json::to_writer(&mut *w, r)?;
                writeln!(w)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MatrixRow {
    mode: String,
    best_epoch: usize,
    original: Prf,
    retrieval: Prf,
}

#[derive(Serialize)]
struct MatrixReport {
    preset: &'static str,
    split: String,
    rows: Vec<MatrixRow>,
}

fn cmd_matrix(run: &Run, cmd: MatrixCmd) -> Result<()> {
    let f = &run.file;
    let data = cmd.data.overlay(f.data.clone());
    let rerank = cmd.rerank.overlay(f.rerank.clone());
    let encoder = cmd.encoder.overlay(f.encoder.clone());
    let targs = cmd.train.overlay(f.train.clone());
    let Preset::Table5 = cmd.preset;

    let train_path = data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("matrix needs --train".into()))?;
    let train = read_dataset(train_path, Split::Train, &data, true)?;
    let dev = data
        .dev
        .as_ref()
        .map(|p| read_dataset(p, Split::Dev, &data, true))
        .transpose()?;
    let test = data
        .test
        .as_ref()
        .map(|p| read_dataset(p, Split::Test, &data, true))
        .transpose()?;
    let target = test
        .as_ref()
        .or(dev.as_ref())
        .ok_or_else(|| Error::Config("matrix needs --dev or --test to score".into()))?;
    let external = encoder.encoder == Some(EncoderKind::External);
    if rerank.contexts.is_none() && !external {
        return Err(missing_contexts("the table5 matrix"));
    }
    let mut all = vec![&train];
    all.extend(dev.as_ref());
    all.extend(test.as_ref());
    let contexts = load_contexts(&rerank, &all)?;
    let store = if external {
        Some(load_store(&encoder)?.ok_or_else(|| {
            Error::Config("the external encoder needs --embedding-dump".into())
        })?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for mode in TABLE5 {
        let config = TrainConfig {
            mode,
            ..train_config(run, &targs, &encoder)
        };
        config.validate()?;
        let train_data = TrainData {
            train: &train,
            dev: dev.as_ref(),
            contexts: contexts.map.as_ref(),
            unlabeled: None,
            sep_token: &contexts.sep_token,
        };
        let labels = training_labels(&train_data);
        let model = match &store {
            Some(s) => Model::init_external(labels, s.clone(), &config)?,
            None => Model::init(labels, &config)?,
        };
        let outcome = train_from(model, &train_data, &config)?;
        let score = |view| -> Result<Prf> {
            Ok(evaluate(target, contexts.map.as_ref(), &outcome.model, view, &contexts.sep_token)?.metrics)
        };
        rows.push(MatrixRow {
            mode: mode.to_string(),
            best_epoch: outcome.best_epoch,
            original: score(ViewTag::Original)?,
            retrieval: score(ViewTag::Retrieval)?,
        });
    }

    println!("{:<12} {:>10} {:>10}", "trained", "original", "retrieval");
    for r in &rows {
        println!(
            "{:<12} {:>10.2} {:>10.2}",
            r.mode,
            100.0 * r.original.f1,
            100.0 * r.retrieval.f1
        );
    }
    let report = MatrixReport {
        preset: "table5",
        split: target.split.to_string(),
        rows,
    };
    write_file(&run.out_path("matrix.json")?, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })
}

fn cmd_synth(run: &Run, cmd: SynthCmd) -> Result<()> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        seed: run.seed,
        labeled: cmd.labeled.unwrap_or(defaults.labeled),
        dev: cmd.dev.unwrap_or(defaults.dev),
        unlabeled: cmd.unlabeled.unwrap_or(defaults.unlabeled),
        names_per_type: cmd.names_per_type.unwrap_or(defaults.names_per_type),
        label_noise: cmd.label_noise.unwrap_or(defaults.label_noise),
        ..defaults
    };
    let corpus = synth::generate(&config)?;
    std::fs::create_dir_all(&run.out)?;
    corpus.write(&run.out)?;
    eprintln!(
        "{}: {} train, {} dev, {} unlabeled sentences, {} cached queries",
        run.out.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.unlabeled.len(),
        corpus.fixtures.len()
    );
    Ok(())
}
