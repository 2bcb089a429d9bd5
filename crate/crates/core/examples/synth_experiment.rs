//! Trains every mode on the synthetic ambiguity task and prints dev F1 under
//! both views, plus the effect of unlabeled data on the contextless view.
//!
//!     cargo run --release -p ragtag --example synth_experiment [seed]

use std::time::Instant;

use ragtag::reranker::ViewTag;
use ragtag::synth::{self, SynthConfig};
use ragtag::trainer::{evaluate, train, Mode, TrainData};

fn main() -> ragtag::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let corpus = synth::generate(&SynthConfig::default())?;
    let pipeline = synth::pipeline();
    let contexts = corpus.contexts(&pipeline)?;
    let sep = pipeline.sep_token.as_str();

    println!("{:<12} {:>10} {:>10} {:>8}", "mode", "wo_ctx", "w_ctx", "secs");
    for mode in Mode::ALL {
        let start = Instant::now();
        let data = TrainData {
            train: &corpus.train,
            dev: Some(&corpus.dev),
            contexts: Some(&contexts),
            unlabeled: None,
            sep_token: sep,
        };
        let out = train(&data, &synth::train_config(mode, seed))?;
        let wo = evaluate(&corpus.dev, Some(&contexts), &out.model, ViewTag::Original, sep)?;
        let w = evaluate(&corpus.dev, Some(&contexts), &out.model, ViewTag::Retrieval, sep)?;
        println!(
            "{:<12} {:>10.2} {:>10.2} {:>8.1}",
            mode.to_string(),
            100.0 * wo.metrics.f1,
            100.0 * w.metrics.f1,
            start.elapsed().as_secs_f64()
        );
    }

    let start = Instant::now();
    let data = TrainData {
        train: &corpus.train,
        dev: Some(&corpus.dev),
        contexts: Some(&contexts),
        unlabeled: Some(&corpus.unlabeled),
        sep_token: sep,
    };
    let out = train(&data, &synth::train_config(Mode::ClKl, seed))?;
    let wo = evaluate(&corpus.dev, Some(&contexts), &out.model, ViewTag::Original, sep)?;
    let w = evaluate(&corpus.dev, Some(&contexts), &out.model, ViewTag::Retrieval, sep)?;
    println!(
        "{:<12} {:>10.2} {:>10.2} {:>8.1}",
        "cl_kl+unl",
        100.0 * wo.metrics.f1,
        100.0 * w.metrics.f1,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
