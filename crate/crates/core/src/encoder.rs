//! Token representations for both input views.
//!
//! The built-in encoder hashes sparse lexical features of each token (and,
//! for the retrieval view, features of where the token recurs in the
//! retrieved context) into `F` buckets and projects them linearly to `d`
//! dimensions: `v_i = A phi_i`. It has no nonlinearity, so its gradient is an
//! exact outer product. Representations computed elsewhere can instead be
//! loaded from a JSON-lines dump.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reranker::{Embedder, EmbeddingMatrix, ViewTag};

/// Most context occurrences of one token that contribute features.
pub const MAX_CONTEXT_OCCURRENCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashFeatureSpec {
    /// Number of hash buckets `F`; a power of two.
    pub dims: usize,
    /// Neighbor window half-width.
    pub window: usize,
    pub char_ngrams: Vec<usize>,
    pub hash_seed: u64,
    pub context_cooccurrence: bool,
}

impl Default for HashFeatureSpec {
    fn default() -> Self {
        Self {
            dims: 1 << 14,
            window: 2,
            char_ngrams: vec![2, 3],
            hash_seed: 0x5eed,
            context_cooccurrence: true,
        }
    }
}

impl HashFeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 || !self.dims.is_power_of_two() {
            return Err(Error::Config(format!(
                "hash dims must be a power of two >= 2, got {}",
                self.dims
            )));
        }
        if self.dims > u32::MAX as usize {
            return Err(Error::Config("hash dims too large".into()));
        }
        if self.char_ngrams.contains(&0) {
            return Err(Error::Config("character n-gram length must be positive".into()));
        }
        Ok(())
    }

    fn bucket(&self, feature: &str) -> u32 {
        (hash_feature(feature, self.hash_seed) & (self.dims as u64 - 1)) as u32
    }
}

/// Seeded 64-bit FNV-1a over the UTF-8 bytes, finished with the SplitMix64
/// mixer so low bits are usable as a bucket index.
pub fn hash_feature(feature: &str, seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in feature.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Sparse feature counts, sorted by bucket index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    fn from_buckets(mut buckets: Vec<u32>) -> Self {
        buckets.sort_unstable();
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(buckets.len());
        for b in buckets {
            match entries.last_mut() {
                Some((last, c)) if *last == b => *c += 1.0,
                _ => entries.push((b, 1.0)),
            }
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |pos| self.entries[pos].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn shape_of(surface: &str) -> String {
    let mut shape = String::new();
    for c in surface.chars() {
        let s = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if !shape.ends_with(s) {
            shape.push(s);
        }
    }
    shape
}

fn neighbor(tokens: &[Token], at: isize) -> &str {
    if at < 0 {
        "<s>"
    } else {
        tokens.get(at as usize).map_or("</s>", Token::normalized)
    }
}

/// Hashed features of `sentence[position]`, optionally anchored in `context`.
pub fn featurize(
    sentence: &[Token],
    position: usize,
    context: Option<&[Token]>,
    spec: &HashFeatureSpec,
) -> FeatureVector {
    let tok = &sentence[position];
    let w = spec.window as isize;
    let mut names: Vec<String> = vec![
        "bias".into(),
        format!("s:{}", tok.surface()),
        format!("n:{}", tok.normalized()),
        format!("shape:{}", shape_of(tok.surface())),
    ];
    let marked: Vec<char> = std::iter::once('^')
        .chain(tok.surface().chars())
        .chain(std::iter::once('$'))
        .collect();
    for &n in &spec.char_ngrams {
        for gram in marked.windows(n) {
            names.push(format!("g{n}:{}", gram.iter().collect::<String>()));
        }
    }
    for off in (-w..=w).filter(|&o| o != 0) {
        names.push(format!("w{off}:{}", neighbor(sentence, position as isize + off)));
    }

    if let (Some(ctx), true) = (context, spec.context_cooccurrence) {
        let hits: Vec<usize> = ctx
            .iter()
            .enumerate()
            .filter(|(_, c)| c.normalized() == tok.normalized())
            .map(|(j, _)| j)
            .take(MAX_CONTEXT_OCCURRENCES)
            .collect();
        if !hits.is_empty() {
            names.push("ctx:match".into());
            let cw = w.max(1);
            for j in hits {
                for off in (-cw..=cw).filter(|&o| o != 0) {
                    names.push(format!("cw{off}:{}", neighbor(ctx, j as isize + off)));
                }
            }
        }
    }
    FeatureVector::from_buckets(names.iter().map(|n| spec.bucket(n)).collect())
}

/// Projection `A` (`d x F`) and the feature spec it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Stored transposed: row `f` is column `f` of `A`.
    projection_t: Matrix,
    pub spec: HashFeatureSpec,
}

impl EncoderParams {
    pub fn zeros(spec: HashFeatureSpec, hidden: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            projection_t: Matrix::zeros(spec.dims, hidden),
            spec,
        })
    }

    /// Entries drawn from `N(0, scale^2)`.
    pub fn random(spec: HashFeatureSpec, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(spec, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        p.projection_t
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = normal.sample(&mut rng));
        Ok(p)
    }

    /// Builds parameters from `A` given as `d x F`.
    pub fn from_projection(projection: &Matrix, spec: HashFeatureSpec) -> Result<Self> {
        spec.validate()?;
        if projection.cols() != spec.dims {
            return Err(Error::Config(format!(
                "projection has {} columns but the feature space has {}",
                projection.cols(),
                spec.dims
            )));
        }
        let (d, f) = projection.shape();
        let mut t = Matrix::zeros(f, d);
        for r in 0..d {
            for c in 0..f {
                t.set(c, r, projection.get(r, c));
            }
        }
        Ok(Self {
            projection_t: t,
            spec,
        })
    }

    pub fn hidden(&self) -> usize {
        self.projection_t.cols()
    }

    pub fn dims(&self) -> usize {
        self.projection_t.rows()
    }

    /// `A[row][feature]`.
    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.projection_t.get(feature, row)
    }

    pub fn set(&mut self, row: usize, feature: usize, value: f64) {
        self.projection_t.set(feature, row, value);
    }

    /// Column `f` of `A` as a slice of length `d`.
    pub fn column(&self, feature: usize) -> &[f64] {
        self.projection_t.row(feature)
    }

    pub fn column_mut(&mut self, feature: usize) -> &mut [f64] {
        self.projection_t.row_mut(feature)
    }

    /// Flat parameter buffer in feature-major order.
    pub fn as_slice(&self) -> &[f64] {
        self.projection_t.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.projection_t.as_mut_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.projection_t.is_finite()
    }

    fn project(&self, phi: &FeatureVector, out: &mut [f64]) {
        for &(f, c) in phi.entries() {
            for (o, a) in out.iter_mut().zip(self.column(f as usize)) {
                *o += c * a;
            }
        }
    }
}

fn view_of(context: Option<&[Token]>) -> ViewTag {
    if context.is_some() {
        ViewTag::Retrieval
    } else {
        ViewTag::Original
    }
}

/// Representations of the sentence positions: row `i` is `A phi_i`.
pub fn encode(sentence: &[Token], context: Option<&[Token]>, params: &EncoderParams) -> EmbeddingMatrix {
    let d = params.hidden();
    let mut rows = Matrix::zeros(sentence.len(), d);
    for i in 0..sentence.len() {
        let phi = featurize(sentence, i, context, &params.spec);
        params.project(&phi, rows.row_mut(i));
    }
    EmbeddingMatrix::new(rows, view_of(context))
}

/// Features of every position, reusable between forward and backward passes.
pub fn featurize_all(
    sentence: &[Token],
    context: Option<&[Token]>,
    spec: &HashFeatureSpec,
) -> Vec<FeatureVector> {
    (0..sentence.len())
        .map(|i| featurize(sentence, i, context, spec))
        .collect()
}

/// [`encode`] over precomputed features.
pub fn encode_features(features: &[FeatureVector], params: &EncoderParams, view: ViewTag) -> EmbeddingMatrix {
    let mut rows = Matrix::zeros(features.len(), params.hidden());
    for (i, phi) in features.iter().enumerate() {
        params.project(phi, rows.row_mut(i));
    }
    EmbeddingMatrix::new(rows, view)
}

/// Sparse gradient with respect to `A`: only touched columns are stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderGrad {
    pub hidden: usize,
    pub columns: BTreeMap<u32, Vec<f64>>,
}

impl EncoderGrad {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            columns: BTreeMap::new(),
        }
    }

    /// Adds `scale * (upstream_i outer phi_i)` for every position.
    pub fn accumulate(&mut self, features: &[FeatureVector], upstream: &Matrix, scale: f64) {
        for (i, phi) in features.iter().enumerate() {
            let g = upstream.row(i);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for &(f, c) in phi.entries() {
                let col = self
                    .columns
                    .entry(f)
                    .or_insert_with(|| vec![0.0; self.hidden]);
                for (a, b) in col.iter_mut().zip(g) {
                    *a += scale * c * b;
                }
            }
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &EncoderGrad) {
        for (f, g) in &other.columns {
            let col = self
                .columns
                .entry(*f)
                .or_insert_with(|| vec![0.0; other.hidden]);
            for (a, b) in col.iter_mut().zip(g) {
                *a += c * b;
            }
        }
    }

    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.columns.get(&(feature as u32)).map_or(0.0, |c| c[row])
    }

    /// Dense `d x F` view.
    pub fn to_dense(&self, dims: usize) -> Matrix {
        let mut m = Matrix::zeros(self.hidden, dims);
        for (&f, col) in &self.columns {
            for (r, v) in col.iter().enumerate() {
                m.set(r, f as usize, *v);
            }
        }
        m
    }

    pub fn squared_norm(&self) -> f64 {
        self.columns.values().flatten().map(|v| v * v).sum()
    }
}

/// `dL/dA = sum_i (dL/dv_i) outer phi_i`.
pub fn encode_backward(
    sentence: &[Token],
    context: Option<&[Token]>,
    params: &EncoderParams,
    upstream: &Matrix,
) -> Result<EncoderGrad> {
    if upstream.shape() != (sentence.len(), params.hidden()) {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, expected ({}, {})",
            upstream.shape(),
            sentence.len(),
            params.hidden()
        )));
    }
    let features = featurize_all(sentence, context, &params.spec);
    let mut grad = EncoderGrad::new(params.hidden());
    grad.accumulate(&features, upstream, 1.0);
    Ok(grad)
}

impl Embedder for EncoderParams {
    fn embed(&self, tokens: &[Token]) -> Result<EmbeddingMatrix> {
        Ok(encode(tokens, None, self))
    }
}

#[derive(Deserialize)]
struct DumpRecord {
    sentence_id: String,
    view: ViewTag,
    rows: Vec<Vec<f64>>,
}

/// Externally computed representations keyed by sentence id and view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    pub dim: Option<usize>,
    pub matrices: HashMap<(String, ViewTag), EmbeddingMatrix>,
}

impl EmbeddingStore {
    pub fn get(&self, sentence_id: &str, view: ViewTag) -> Option<&EmbeddingMatrix> {
        self.matrices.get(&(sentence_id.to_string(), view))
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Reads `{"sentence_id", "view", "rows"}` JSON lines.
pub fn load_embedding_dump<R: BufRead>(source: R) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::default();
    let mut record = 0;
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format { record, message };
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let rows = Matrix::from_rows(&rec.rows).ok_or_else(|| fail("ragged rows".into()))?;
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(fail("embedding matrix must have at least one row and column".into()));
        }
        if !rows.is_finite() {
            return Err(fail("non-finite entry".into()));
        }
        match store.dim {
            Some(d) if d != rows.cols() => {
                return Err(fail(format!("dimension {} differs from {d}", rows.cols())))
            }
            _ => store.dim = Some(rows.cols()),
        }
        let key = (rec.sentence_id, rec.view);
        if store.matrices.contains_key(&key) {
            return Err(fail(format!("duplicate record for {:?} / {:?}", key.0, key.1)));
        }
        store.matrices.insert(key, EmbeddingMatrix::new(rows, rec.view));
        record += 1;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn small_spec() -> HashFeatureSpec {
        HashFeatureSpec {
            dims: 64,
            window: 1,
            char_ngrams: vec![3],
            hash_seed: 11,
            context_cooccurrence: true,
        }
    }

    #[test]
    fn featurize_is_deterministic() {
        let s = tokenize("Paris is nice");
        let a = featurize(&s, 0, None, &small_spec());
        assert_eq!(a, featurize(&s, 0, None, &small_spec()));
        assert!(a.entries().iter().all(|&(i, c)| (i as usize) < 64 && c > 0.0));
    }

    #[test]
    fn context_features_fire_only_on_occurrence() {
        let s = tokenize("Paris is nice");
        let spec = small_spec();
        let none = featurize(&s, 0, None, &spec);
        let unrelated = tokenize("[SEP] london is big");
        assert_eq!(featurize(&s, 0, Some(&unrelated), &spec), none);
        let related = tokenize("[SEP] the city of paris");
        let with = featurize(&s, 0, Some(&related), &spec);
        let extra: f64 = with.entries().iter().map(|e| e.1).sum::<f64>()
            - none.entries().iter().map(|e| e.1).sum::<f64>();
        assert!(extra >= 1.0);
        let off = HashFeatureSpec {
            context_cooccurrence: false,
            ..spec
        };
        assert_eq!(featurize(&s, 0, Some(&related), &off), featurize(&s, 0, None, &off));
    }

    #[test]
    fn occurrence_cap() {
        let s = tokenize("a");
        let spec = small_spec();
        let four = tokenize("a x a x a x a x");
        let many = tokenize("a x a x a x a x a x a x");
        assert_eq!(featurize(&s, 0, Some(&four), &spec), featurize(&s, 0, Some(&many), &spec));
    }

    #[test]
    fn encode_linearity_and_zero() {
        let s = tokenize("one two three");
        let zero = EncoderParams::zeros(small_spec(), 3).unwrap();
        assert!(encode(&s, None, &zero).rows.as_slice().iter().all(|&v| v == 0.0));
        let p = EncoderParams::random(small_spec(), 3, 1.0, 5).unwrap();
        let mut p2 = p.clone();
        p2.as_mut_slice().iter_mut().for_each(|v| *v *= -2.5);
        let a = encode(&s, None, &p);
        let b = encode(&s, None, &p2);
        for (x, y) in a.rows.as_slice().iter().zip(b.rows.as_slice()) {
            assert!((y + 2.5 * x).abs() < 1e-12);
        }
        assert_eq!(a.view, ViewTag::Original);
        assert_eq!(encode(&s, Some(&s), &p).view, ViewTag::Retrieval);
    }

    #[test]
    fn backward_base_cases() {
        let s = tokenize("solo");
        let p = EncoderParams::random(small_spec(), 2, 1.0, 1).unwrap();
        let g = encode_backward(&s, None, &p, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
        let up = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let g = encode_backward(&s, None, &p, &up).unwrap();
        let phi = featurize(&s, 0, None, &p.spec);
        for &(f, c) in phi.entries() {
            assert!((g.get(0, f as usize) - 0.3 * c).abs() < 1e-15);
            assert!((g.get(1, f as usize) + 0.7 * c).abs() < 1e-15);
        }
        assert!(encode_backward(&s, None, &p, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn single_feature_gradient_column_equals_upstream() {
        // One position with exactly one active bucket of count 1.
        let spec = HashFeatureSpec {
            dims: 2,
            window: 0,
            char_ngrams: vec![],
            hash_seed: 0,
            context_cooccurrence: false,
        };
        let phi = FeatureVector::from_buckets(vec![1]);
        let up = Matrix::from_rows(&[vec![0.25, 4.0, -1.0]]).unwrap();
        let mut g = EncoderGrad::new(3);
        g.accumulate(&[phi], &up, 1.0);
        let dense = g.to_dense(spec.dims);
        assert_eq!((0..3).map(|r| dense.get(r, 1)).collect::<Vec<_>>(), up.row(0));
        assert!((0..3).all(|r| dense.get(r, 0) == 0.0));
    }

    #[test]
    fn bad_specs() {
        let mut s = small_spec();
        s.dims = 48;
        assert!(s.validate().is_err());
        s.dims = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn dump_examples() {
        assert!(load_embedding_dump("".as_bytes()).unwrap().is_empty());
        let one = r#"{"sentence_id":"s1","view":"original","rows":[[1,2,3],[4,5,6]]}"#;
        let store = load_embedding_dump(one.as_bytes()).unwrap();
        assert_eq!(store.get("s1", ViewTag::Original).unwrap().rows.shape(), (2, 3));

        let dup = format!("{one}\n{one}\n");
        match load_embedding_dump(dup.as_bytes()) {
            Err(Error::Format { record, .. }) => assert_eq!(record, 1),
            other => panic!("unexpected {other:?}"),
        }
        let bad_d = format!("{one}\n{}\n", r#"{"sentence_id":"s2","view":"retrieval","rows":[[1,2]]}"#);
        assert!(matches!(load_embedding_dump(bad_d.as_bytes()), Err(Error::Format { record: 1, .. })));
        let nan = r#"{"sentence_id":"s","view":"original","rows":[[NaN]]}"#;
        assert!(matches!(load_embedding_dump(nan.as_bytes()), Err(Error::Format { record: 0, .. })));
    }
}
