//! Reference implementations the library is checked against: exhaustive path
//! enumeration, brute-force cosine matching, a line-by-line port of
//! conlleval's chunk counting, and finite differences over model parameters.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ragtag::corpus::{tokenize, Token};
use ragtag::crf::{LatticeGrad, ScoreLattice};
use ragtag::encoder::HashFeatureSpec;
use ragtag::linalg::Matrix;
use ragtag::trainer::{Gradients, Model, Mode, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Matrix {
    let normal = Normal::new(0.0, sd).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Random lattice with `N(0, sd^2)` scores. With `mask_rate > 0` some
/// transitions are forbidden, never all of a row.
pub fn random_lattice(rng: &mut ChaCha8Rng, n: usize, t: usize, sd: f64, stop: bool, mask_rate: f64) -> ScoreLattice {
    let emit = normal_matrix(rng, n, t, sd);
    let mut trans = normal_matrix(rng, t + 1, t, sd);
    if mask_rate > 0.0 {
        for r in 0..=t {
            let keep = rng.random_range(0..t);
            for c in 0..t {
                if c != keep && rng.random_bool(mask_rate) {
                    trans.set(r, c, f64::NEG_INFINITY);
                }
            }
        }
    }
    let stop = stop.then(|| {
        let normal = Normal::new(0.0, sd).unwrap();
        (0..t).map(|_| normal.sample(rng)).collect()
    });
    ScoreLattice::new(emit, trans, stop).unwrap()
}

/// Every label sequence of length `n` over `t` labels.
pub fn all_paths(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..t).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn brute_score(lat: &ScoreLattice, path: &[usize]) -> f64 {
    let t = lat.labels();
    let mut s = 0.0;
    let mut prev = t;
    for (i, &y) in path.iter().enumerate() {
        s += lat.trans.get(prev, y) + lat.emit.get(i, y);
        prev = y;
    }
    if let (Some(stop), Some(&last)) = (&lat.stop, path.last()) {
        s += stop[last];
    }
    s
}

pub struct Enumerated {
    pub log_z: f64,
    pub best_score: f64,
    pub marginals: Matrix,
    /// Same layout as [`LatticeGrad`]: emission marginals, pairwise counts with
    /// the start row, stop counts.
    pub counts: LatticeGrad,
}

pub fn enumerate(lat: &ScoreLattice) -> Enumerated {
    let (n, t) = (lat.len(), lat.labels());
    let paths = all_paths(n, t);
    let scores: Vec<f64> = paths.iter().map(|p| brute_score(lat, p)).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = best + scores.iter().map(|s| (s - best).exp()).sum::<f64>().ln();
    let mut marginals = Matrix::zeros(n, t);
    let mut trans = Matrix::zeros(t + 1, t);
    let mut stop = lat.stop.as_ref().map(|_| vec![0.0; t]);
    for (p, s) in paths.iter().zip(&scores) {
        let w = (s - log_z).exp();
        let mut prev = t;
        for (i, &y) in p.iter().enumerate() {
            marginals.add_at(i, y, w);
            trans.add_at(prev, y, w);
            prev = y;
        }
        if let Some(st) = &mut stop {
            st[prev] += w;
        }
    }
    Enumerated {
        log_z,
        best_score: best,
        marginals: marginals.clone(),
        counts: LatticeGrad {
            emit: marginals,
            trans,
            stop,
        },
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Precision, recall, F1 by evaluating every pair's cosine directly.
pub fn brute_bertscore(sent: &Matrix, cand: &Matrix) -> (f64, f64, f64) {
    let recall = (0..sent.rows())
        .map(|i| {
            (0..cand.rows())
                .map(|j| cosine(sent.row(i), cand.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / sent.rows() as f64;
    let precision = (0..cand.rows())
        .map(|j| {
            (0..sent.rows())
                .map(|i| cosine(sent.row(i), cand.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / cand.rows() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn split_tag(tag: &str) -> (&str, &str) {
    match tag.split_once('-') {
        Some((prefix, kind)) => (prefix, kind),
        None => (tag, ""),
    }
}

fn end_of_chunk(prev_tag: &str, tag: &str, prev_type: &str, kind: &str) -> bool {
    matches!(
        (prev_tag, tag),
        ("B", "B") | ("B", "O") | ("I", "B") | ("I", "O") | ("E", "E") | ("E", "I") | ("E", "O")
    ) || (prev_tag != "O" && prev_tag != "." && prev_type != kind)
        || prev_tag == "]"
        || prev_tag == "["
}

fn start_of_chunk(prev_tag: &str, tag: &str, prev_type: &str, kind: &str) -> bool {
    matches!(
        (prev_tag, tag),
        ("B", "B") | ("I", "B") | ("O", "B") | ("O", "I") | ("E", "E") | ("E", "I") | ("O", "E")
    ) || (tag != "O" && tag != "." && prev_type != kind)
        || tag == "["
        || tag == "]"
}

/// Chunk counts as conlleval computes them: (correct, guessed, gold).
/// Sentences are separated by a boundary that acts as an `O` line.
pub fn conlleval_counts(sentences: &[(Vec<String>, Vec<String>)]) -> (usize, usize, usize) {
    let (mut correct_chunk, mut found_guessed, mut found_correct) = (0, 0, 0);
    let mut in_correct = false;
    let (mut last_c, mut last_g) = ("O".to_string(), "O".to_string());
    let (mut last_ct, mut last_gt) = (String::new(), String::new());
    let boundary = (vec!["O".to_string()], vec!["O".to_string()]);
    let lines = sentences
        .iter()
        .flat_map(|(g, p)| g.iter().zip(p).chain(boundary.0.iter().zip(&boundary.1)));
    for (gold, guess) in lines {
        let (c, ct) = split_tag(gold);
        let (g, gt) = split_tag(guess);
        if in_correct {
            let ec = end_of_chunk(&last_c, c, &last_ct, ct);
            let eg = end_of_chunk(&last_g, g, &last_gt, gt);
            if ec && eg && last_gt == last_ct {
                in_correct = false;
                correct_chunk += 1;
            } else if ec != eg || gt != ct {
                in_correct = false;
            }
        }
        let sc = start_of_chunk(&last_c, c, &last_ct, ct);
        let sg = start_of_chunk(&last_g, g, &last_gt, gt);
        if sc && sg && gt == ct {
            in_correct = true;
        }
        if sc {
            found_correct += 1;
        }
        if sg {
            found_guessed += 1;
        }
        last_c = c.to_string();
        last_g = g.to_string();
        last_ct = ct.to_string();
        last_gt = gt.to_string();
    }
    if in_correct {
        correct_chunk += 1;
    }
    (correct_chunk, found_guessed, found_correct)
}

/// Precision, recall and F1 as fractions, from conlleval's counts.
pub fn conlleval_prf(sentences: &[(Vec<String>, Vec<String>)]) -> (f64, f64, f64) {
    let (ok, guessed, gold) = conlleval_counts(sentences);
    let p = if guessed > 0 { ok as f64 / guessed as f64 } else { 0.0 };
    let r = if gold > 0 { ok as f64 / gold as f64 } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub const LABELS: [&str; 3] = ["O", "B-X", "I-X"];

pub fn labels() -> Vec<String> {
    LABELS.iter().map(|s| s.to_string()).collect()
}

pub fn tiny_config(mode: Mode, seed: u64, stop_row: bool) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        hidden: 3,
        init_scale: 0.5,
        stop_row,
        spec: HashFeatureSpec {
            dims: 32,
            window: 1,
            char_ngrams: vec![2],
            hash_seed: seed,
            context_cooccurrence: true,
        },
        ..TrainConfig::default()
    }
}

const VOCAB: [&str; 8] = ["Rome", "is", "far", "Ada", "met", "the", "city", "singer"];

/// A short random sentence, gold labels, and a context that repeats some of its words.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Token>, Vec<usize>, Vec<Token>) {
    let n = rng.random_range(1..=4);
    let words: Vec<&str> = (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
    let gold = (0..n).map(|_| rng.random_range(0..LABELS.len())).collect();
    let mut ctx = vec!["[SEP]"];
    for _ in 0..rng.random_range(2..=6) {
        ctx.push(if rng.random_bool(0.4) {
            words[rng.random_range(0..n)]
        } else {
            VOCAB[rng.random_range(0..VOCAB.len())]
        });
    }
    (tokenize(&words.join(" ")), gold, tokenize(&ctx.join(" ")))
}

/// Flat access to every trainable parameter of a hash-encoder model: encoder
/// projection (feature-major), CRF emission, transition, stop.
pub fn param_count(m: &Model) -> usize {
    m.hash_params().map_or(0, |p| p.as_slice().len())
        + m.crf.emission.as_slice().len()
        + m.crf.transition.as_slice().len()
        + m.crf.stop.as_ref().map_or(0, Vec::len)
}

fn locate(m: &Model, mut k: usize) -> (usize, usize) {
    let sizes = [
        m.hash_params().map_or(0, |p| p.as_slice().len()),
        m.crf.emission.as_slice().len(),
        m.crf.transition.as_slice().len(),
        m.crf.stop.as_ref().map_or(0, Vec::len),
    ];
    for (group, size) in sizes.into_iter().enumerate() {
        if k < size {
            return (group, k);
        }
        k -= size;
    }
    panic!("parameter index out of range");
}

pub fn param_get(m: &Model, k: usize) -> f64 {
    match locate(m, k) {
        (0, i) => m.hash_params().unwrap().as_slice()[i],
        (1, i) => m.crf.emission.as_slice()[i],
        (2, i) => m.crf.transition.as_slice()[i],
        (_, i) => m.crf.stop.as_ref().unwrap()[i],
    }
}

pub fn param_set(m: &mut Model, k: usize, v: f64) {
    match locate(m, k) {
        (0, i) => m.hash_params_mut().unwrap().as_mut_slice()[i] = v,
        (1, i) => m.crf.emission.as_mut_slice()[i] = v,
        (2, i) => m.crf.transition.as_mut_slice()[i] = v,
        (_, i) => m.crf.stop.as_mut().unwrap()[i] = v,
    }
}

pub fn grad_get(m: &Model, g: &Gradients, k: usize) -> f64 {
    match locate(m, k) {
        (0, i) => {
            let d = m.hash_params().unwrap().hidden();
            g.encoder.as_ref().unwrap().get(i % d, i / d)
        }
        (1, i) => g.crf.emission.as_slice()[i],
        (2, i) => g.crf.transition.as_slice()[i],
        (_, i) => g.crf.stop.as_ref().unwrap()[i],
    }
}

/// Central difference of `f` in parameter `k`.
pub fn central_difference(m: &Model, k: usize, h: f64, f: impl Fn(&Model) -> f64) -> f64 {
    let mut p = m.clone();
    let x = param_get(m, k);
    param_set(&mut p, k, x + h);
    let up = f(&p);
    param_set(&mut p, k, x - h);
    let down = f(&p);
    (up - down) / (2.0 * h)
}
