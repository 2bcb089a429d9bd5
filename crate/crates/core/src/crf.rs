//! Linear-chain CRF: potentials, partition function, marginals, Viterbi and
//! exact gradients, all computed in log space.
//!
//! A lattice over `n` positions and `t` labels holds emission scores
//! `emit[i][y] = W_y . v_i` and a `(t + 1) x t` transition table whose last row
//! scores the move from the start symbol into the first label. A path score is
//! `sum_i trans[y_{i-1}][y_i] + emit[i][y_i]` (plus an optional stop score on the
//! final label).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, Matrix};
use crate::reranker::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `t x d`; row `y` is `W_y`.
    pub emission: Matrix,
    /// `(t + 1) x t`; row `t` is the start row.
    pub transition: Matrix,
    /// Optional per-label score for ending the sequence.
    pub stop: Option<Vec<f64>>,
    /// Transitions forbidden by the BIO constraint (`O -> I-T`, `B-X -> I-Y`, ...),
    /// same shape as `transition`. `None` means unconstrained.
    #[serde(default)]
    pub mask: Option<Vec<bool>>,
}

impl CrfParams {
    pub fn zeros(labels: usize, hidden: usize) -> Self {
        Self {
            emission: Matrix::zeros(labels, hidden),
            transition: Matrix::zeros(labels + 1, labels),
            stop: None,
            mask: None,
        }
    }

    pub fn labels(&self) -> usize {
        self.emission.rows()
    }

    pub fn hidden(&self) -> usize {
        self.emission.cols()
    }

    pub fn with_stop(mut self) -> Self {
        self.stop = Some(vec![0.0; self.labels()]);
        self
    }

    /// Enables BIO masking for the given label inventory.
    pub fn with_bio_mask<S: AsRef<str>>(mut self, labels: &[S]) -> Self {
        self.mask = Some(bio_transition_mask(labels));
        self
    }

    pub fn is_finite(&self) -> bool {
        self.emission.is_finite()
            && self.transition.is_finite()
            && self.stop.iter().flatten().all(|v| v.is_finite())
    }
}

/// `allowed[from * t + to]` for `from` in `0..=t` (row `t` is start).
pub fn bio_transition_mask<S: AsRef<str>>(labels: &[S]) -> Vec<bool> {
    let t = labels.len();
    let mut allowed = vec![true; (t + 1) * t];
    for (to, tag) in labels.iter().enumerate() {
        let Some(kind) = tag.as_ref().strip_prefix("I-") else {
            continue;
        };
        for from in 0..=t {
            let ok = from < t
                && matches!(labels[from].as_ref().split_once('-'),
                            Some(("B" | "I", k)) if k == kind);
            allowed[from * t + to] = ok;
        }
    }
    allowed
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLattice {
    /// `n x t`.
    pub emit: Matrix,
    /// `(t + 1) x t`; masked entries are `-inf`.
    pub trans: Matrix,
    pub stop: Option<Vec<f64>>,
}

/// Gradient (or expected-count) table with the same layout as a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrad {
    pub emit: Matrix,
    pub trans: Matrix,
    pub stop: Option<Vec<f64>>,
}

impl LatticeGrad {
    fn zeros_like(lattice: &ScoreLattice) -> Self {
        Self {
            emit: Matrix::zeros(lattice.len(), lattice.labels()),
            trans: Matrix::zeros(lattice.labels() + 1, lattice.labels()),
            stop: lattice.stop.as_ref().map(|s| vec![0.0; s.len()]),
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &LatticeGrad) {
        self.emit.axpy(c, &other.emit);
        self.trans.axpy(c, &other.trans);
        if let (Some(a), Some(b)) = (&mut self.stop, &other.stop) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalTable {
    /// `n x t`, rows sum to one.
    pub q: Matrix,
}

impl MarginalTable {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    /// Checks every row is a distribution within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (position, row) in self.q.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            let bad_entry = row.iter().any(|p| !p.is_finite() || *p < -tol);
            if bad_entry || (sum - 1.0).abs() > tol {
                return Err(Error::Distribution { position, sum });
            }
        }
        Ok(())
    }
}

/// Builds the score lattice for one view of a sentence.
pub fn score_lattice(v: &EmbeddingMatrix, params: &CrfParams) -> Result<ScoreLattice> {
    let (n, d) = v.rows.shape();
    if d != params.hidden() {
        return Err(Error::Shape(format!(
            "representations have dimension {d}, CRF expects {}",
            params.hidden()
        )));
    }
    let t = params.labels();
    let mut emit = Matrix::zeros(n, t);
    for i in 0..n {
        let vi = v.rows.row(i);
        for y in 0..t {
            emit.set(i, y, dot(params.emission.row(y), vi));
        }
    }
    let mut trans = params.transition.clone();
    if let Some(mask) = &params.mask {
        for (s, &ok) in trans.as_mut_slice().iter_mut().zip(mask) {
            if !ok {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    Ok(ScoreLattice {
        emit,
        trans,
        stop: params.stop.clone(),
    })
}

impl ScoreLattice {
    pub fn new(emit: Matrix, trans: Matrix, stop: Option<Vec<f64>>) -> Result<Self> {
        let t = emit.cols();
        if trans.shape() != (t + 1, t) {
            return Err(Error::Shape(format!(
                "transition table is {:?}, expected ({}, {t})",
                trans.shape(),
                t + 1
            )));
        }
        if stop.as_ref().is_some_and(|s| s.len() != t) {
            return Err(Error::Shape("stop vector length differs from label count".into()));
        }
        Ok(Self { emit, trans, stop })
    }

    pub fn len(&self) -> usize {
        self.emit.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emit.rows() == 0
    }

    pub fn labels(&self) -> usize {
        self.emit.cols()
    }

    fn start(&self) -> usize {
        self.labels()
    }

    fn stop_score(&self, y: usize) -> f64 {
        self.stop.as_ref().map_or(0.0, |s| s[y])
    }

    /// Log forward table: `alpha[i][y]` sums all prefixes ending in `y` at `i`.
    pub fn forward(&self) -> Matrix {
        let (n, t) = self.emit.shape();
        let mut alpha = Matrix::zeros(n, t);
        if n == 0 {
            return alpha;
        }
        for y in 0..t {
            alpha.set(0, y, self.trans.get(self.start(), y) + self.emit.get(0, y));
        }
        for i in 1..n {
            for y in 0..t {
                let prev = alpha.row(i - 1);
                let s = log_sum_exp((0..t).map(|a| prev[a] + self.trans.get(a, y)));
                alpha.set(i, y, s + self.emit.get(i, y));
            }
        }
        alpha
    }

    /// Log backward table: `beta[i][y]` sums all suffixes after label `y` at `i`.
    pub fn backward(&self) -> Matrix {
        let (n, t) = self.emit.shape();
        let mut beta = Matrix::zeros(n, t);
        if n == 0 {
            return beta;
        }
        for y in 0..t {
            beta.set(n - 1, y, self.stop_score(y));
        }
        for i in (0..n - 1).rev() {
            for y in 0..t {
                let next = beta.row(i + 1);
                let s = log_sum_exp(
                    (0..t).map(|b| self.trans.get(y, b) + self.emit.get(i + 1, b) + next[b]),
                );
                beta.set(i, y, s);
            }
        }
        beta
    }

    fn log_z_from(&self, alpha: &Matrix) -> f64 {
        let n = self.len();
        log_sum_exp((0..self.labels()).map(|y| alpha.get(n - 1, y) + self.stop_score(y)))
    }

    /// `ln Z`, the log-sum over all `t^n` label paths.
    pub fn log_partition(&self) -> f64 {
        assert!(!self.is_empty(), "log partition of an empty lattice");
        self.log_z_from(&self.forward())
    }

    fn check_path(&self, path: &[usize]) -> Result<()> {
        if path.len() != self.len() {
            return Err(Error::Shape(format!(
                "path has {} labels, lattice has {} positions",
                path.len(),
                self.len()
            )));
        }
        if let Some(&bad) = path.iter().find(|&&y| y >= self.labels()) {
            return Err(Error::LabelIndex {
                index: bad,
                labels: self.labels(),
            });
        }
        Ok(())
    }

    pub fn path_score(&self, path: &[usize]) -> Result<f64> {
        self.check_path(path)?;
        let mut prev = self.start();
        let mut score = 0.0;
        for (i, &y) in path.iter().enumerate() {
            score += self.trans.get(prev, y) + self.emit.get(i, y);
            prev = y;
        }
        if let Some(&last) = path.last() {
            score += self.stop_score(last);
        }
        Ok(score)
    }

    /// Negative log-likelihood of `gold`.
    pub fn nll(&self, gold: &[usize]) -> Result<f64> {
        let s = self.path_score(gold)?;
        Ok(self.log_partition() - s)
    }

    fn log_marginals(&self, alpha: &Matrix, beta: &Matrix, log_z: f64) -> Matrix {
        let (n, t) = self.emit.shape();
        let mut out = Matrix::zeros(n, t);
        for i in 0..n {
            for y in 0..t {
                out.set(i, y, alpha.get(i, y) + beta.get(i, y) - log_z);
            }
        }
        out
    }

    /// Per-position posteriors `q[i][y]` by forward-backward.
    pub fn marginals(&self) -> MarginalTable {
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = self.log_z_from(&alpha);
        let mut q = self.log_marginals(&alpha, &beta, log_z);
        q.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());
        MarginalTable { q }
    }

    /// Expected feature counts: per-position marginals, pairwise transition
    /// counts (start row included) and stop counts.
    pub fn expected_counts(&self) -> LatticeGrad {
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = self.log_z_from(&alpha);
        self.expected_counts_with(&alpha, &beta, log_z)
    }

    fn expected_counts_with(&self, alpha: &Matrix, beta: &Matrix, log_z: f64) -> LatticeGrad {
        let (n, t) = self.emit.shape();
        let mut counts = LatticeGrad::zeros_like(self);
        for i in 0..n {
            for y in 0..t {
                counts
                    .emit
                    .set(i, y, (alpha.get(i, y) + beta.get(i, y) - log_z).exp());
            }
        }
        for y in 0..t {
            counts.trans.set(t, y, counts.emit.get(0, y));
        }
        for i in 1..n {
            for a in 0..t {
                for b in 0..t {
                    let lp = alpha.get(i - 1, a)
                        + self.trans.get(a, b)
                        + self.emit.get(i, b)
                        + beta.get(i, b)
                        - log_z;
                    counts.trans.add_at(a, b, lp.exp());
                }
            }
        }
        if let Some(stop) = &mut counts.stop {
            for (y, s) in stop.iter_mut().enumerate() {
                *s = counts.emit.get(n - 1, y);
            }
        }
        counts
    }

    fn add_path_counts(&self, path: &[usize], grad: &mut LatticeGrad, c: f64) {
        let mut prev = self.start();
        for (i, &y) in path.iter().enumerate() {
            grad.emit.add_at(i, y, c);
            grad.trans.add_at(prev, y, c);
            prev = y;
        }
        if let (Some(stop), Some(&last)) = (&mut grad.stop, path.last()) {
            stop[last] += c;
        }
    }

    /// Gradient of [`Self::nll`]: expected counts minus gold counts.
    pub fn nll_backward(&self, gold: &[usize]) -> Result<LatticeGrad> {
        self.check_path(gold)?;
        let mut grad = self.expected_counts();
        self.add_path_counts(gold, &mut grad, -1.0);
        Ok(grad)
    }

    /// Loss and gradient in one pass.
    pub fn nll_with_grad(&self, gold: &[usize]) -> Result<(f64, LatticeGrad)> {
        self.check_path(gold)?;
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = self.log_z_from(&alpha);
        let loss = log_z - self.path_score(gold)?;
        let mut grad = self.expected_counts_with(&alpha, &beta, log_z);
        self.add_path_counts(gold, &mut grad, -1.0);
        Ok((loss, grad))
    }

    /// Highest-scoring path and its score. Ties go to the lower label index.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        let (n, t) = self.emit.shape();
        if n == 0 {
            return (Vec::new(), 0.0);
        }
        let mut delta = Matrix::zeros(n, t);
        let mut back = vec![0usize; n * t];
        for y in 0..t {
            delta.set(0, y, self.trans.get(self.start(), y) + self.emit.get(0, y));
        }
        for i in 1..n {
            for y in 0..t {
                let mut best = (0, f64::NEG_INFINITY);
                for a in 0..t {
                    let s = delta.get(i - 1, a) + self.trans.get(a, y);
                    if s > best.1 {
                        best = (a, s);
                    }
                }
                back[i * t + y] = best.0;
                delta.set(i, y, best.1 + self.emit.get(i, y));
            }
        }
        let mut last = (0, f64::NEG_INFINITY);
        for y in 0..t {
            let s = delta.get(n - 1, y) + self.stop_score(y);
            if s > last.1 {
                last = (y, s);
            }
        }
        let mut path = vec![last.0; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i * t + path[i]];
        }
        (path, last.1)
    }

    /// Cross-entropy `-sum_i sum_y p[i][y] ln q[i][y]` of this lattice's
    /// marginals `q` against fixed target distributions `p`, with its exact
    /// gradient with respect to every lattice score.
    ///
    /// Using `d ln q_i(y) = E[f | y_i = y] - E[f]` for the feature counts `f`,
    /// the gradient is `n E[f] - E[f R]` with `R(path) = sum_i p_i(y_i) / q_i(y_i)`.
    /// `E[f R]` comes from forward and backward passes that carry the
    /// conditional expectation of the prefix and suffix sums of `R`.
    pub fn marginal_cross_entropy(&self, target: &MarginalTable) -> Result<(f64, LatticeGrad)> {
        let (n, t) = self.emit.shape();
        if target.q.shape() != (n, t) {
            return Err(Error::Shape(format!(
                "target marginals are {:?}, lattice is ({n}, {t})",
                target.q.shape()
            )));
        }
        target.validate(1e-6)?;
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = self.log_z_from(&alpha);
        let log_q = self.log_marginals(&alpha, &beta, log_z);

        let mut loss = 0.0;
        let mut ratio = Matrix::zeros(n, t);
        for i in 0..n {
            for y in 0..t {
                let p = target.q.get(i, y);
                if p > 0.0 {
                    let lq = log_q.get(i, y);
                    loss -= p * lq;
                    ratio.set(i, y, (p.ln() - lq).exp());
                }
            }
        }

        // Conditional expected prefix sum of R given y_i = y.
        let mut pre = Matrix::zeros(n, t);
        for y in 0..t {
            pre.set(0, y, ratio.get(0, y));
        }
        for i in 1..n {
            for y in 0..t {
                let ay = alpha.get(i, y);
                let mut acc = ratio.get(i, y);
                if ay > f64::NEG_INFINITY {
                    for a in 0..t {
                        let w = (alpha.get(i - 1, a) + self.trans.get(a, y) + self.emit.get(i, y)
                            - ay)
                            .exp();
                        if w > 0.0 {
                            acc += w * pre.get(i - 1, a);
                        }
                    }
                }
                pre.set(i, y, acc);
            }
        }
        // Conditional expected suffix sum of R (strictly after i) given y_i = y.
        let mut suf = Matrix::zeros(n, t);
        for i in (0..n.saturating_sub(1)).rev() {
            for y in 0..t {
                let by = beta.get(i, y);
                if by == f64::NEG_INFINITY {
                    continue;
                }
                let mut acc = 0.0;
                for b in 0..t {
                    let w = (self.trans.get(y, b) + self.emit.get(i + 1, b) + beta.get(i + 1, b)
                        - by)
                        .exp();
                    if w > 0.0 {
                        acc += w * (ratio.get(i + 1, b) + suf.get(i + 1, b));
                    }
                }
                suf.set(i, y, acc);
            }
        }

        let nf = n as f64;
        let mut grad = LatticeGrad::zeros_like(self);
        for i in 0..n {
            for y in 0..t {
                let q = log_q.get(i, y).exp();
                if q == 0.0 {
                    continue;
                }
                let g = q * (nf - pre.get(i, y) - suf.get(i, y));
                grad.emit.set(i, y, g);
                if i == 0 {
                    grad.trans.set(t, y, g);
                }
            }
        }
        for i in 1..n {
            for a in 0..t {
                for b in 0..t {
                    let pair = (alpha.get(i - 1, a)
                        + self.trans.get(a, b)
                        + self.emit.get(i, b)
                        + beta.get(i, b)
                        - log_z)
                        .exp();
                    if pair == 0.0 {
                        continue;
                    }
                    let fr = pre.get(i - 1, a) + ratio.get(i, b) + suf.get(i, b);
                    grad.trans.add_at(a, b, pair * (nf - fr));
                }
            }
        }
        if let Some(stop) = &mut grad.stop {
            for (y, s) in stop.iter_mut().enumerate() {
                let q = log_q.get(n - 1, y).exp();
                *s = q * (nf - pre.get(n - 1, y));
            }
        }
        Ok((loss, grad))
    }
}

/// Entropy `-sum_i sum_y p ln p` of a marginal table.
pub fn marginal_entropy(table: &MarginalTable) -> f64 {
    table
        .q
        .as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}
