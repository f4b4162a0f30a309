//! Forward chart passes: exact argmax parsing, the smoothed inside pass with
//! soft backpointers, top-down backpointer reconstruction, and the
//! log-partition variant of the same recurrences.
//!
//! Items come in four kinds over a span `(i, j)` with `0 <= i <= j <= n`:
//!
//! - `RightIncomplete(i, j)`: carries the arc `i -> j`, built from a
//!   right-complete left half and a left-complete right half.
//! - `LeftIncomplete(i, j)`: carries the arc `j -> i`, same antecedents.
//! - `RightComplete(i, j)`: everything in the span is a descendant of `i`.
//! - `LeftComplete(i, j)`: everything in the span is a descendant of `j`.
//!
//! Split ranges: incomplete items and `LeftComplete` split at
//! `k in [i, j-1]`, `RightComplete` at `k in [i+1, j]`; either way a span of
//! length `l` has `l` candidate splits. Within a span the incomplete items
//! must be filled first: `RightComplete(i, j)` reads `RightIncomplete(i, j)`
//! at `k = j`, and `LeftComplete(i, j)` reads `LeftIncomplete(i, j)` at
//! `k = i`.

use crate::tree::{is_projective, ArcWeights, HardTree, Mat, SoftTree, Temperature};
use crate::{Error, Result};

/// The four chart item shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemKind {
    RightIncomplete,
    LeftIncomplete,
    RightComplete,
    LeftComplete,
}

impl ItemKind {
    pub const ALL: [ItemKind; 4] = [
        ItemKind::RightIncomplete,
        ItemKind::LeftIncomplete,
        ItemKind::RightComplete,
        ItemKind::LeftComplete,
    ];

    #[inline]
    pub(crate) fn idx(self) -> usize {
        match self {
            ItemKind::RightIncomplete => 0,
            ItemKind::LeftIncomplete => 1,
            ItemKind::RightComplete => 2,
            ItemKind::LeftComplete => 3,
        }
    }

    /// First split point for a span starting at `i`.
    #[inline]
    pub fn split_start(self, i: usize) -> usize {
        match self {
            ItemKind::RightComplete => i + 1,
            _ => i,
        }
    }

    pub fn is_incomplete(self) -> bool {
        matches!(self, ItemKind::RightIncomplete | ItemKind::LeftIncomplete)
    }
}

/// How item values combine their antecedent scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChartMode {
    /// Soft backpointers `b = softmax(a / tau)` and value `sum_k b_k a_k`:
    /// a smooth surrogate of the max.
    Smoothed { tau: f64 },
    /// `b = softmax(a)` and value `logsumexp(a)`: sums over derivations,
    /// yielding the log-partition function at the goal item.
    LogSumExp,
}

impl ChartMode {
    pub(crate) fn tau(self) -> f64 {
        match self {
            ChartMode::Smoothed { tau } => tau,
            ChartMode::LogSumExp => 1.0,
        }
    }
}

/// Chart of antecedent scores `a`, soft backpointers `b` and item values `c`.
///
/// `a` and `b` are ragged per-span vectors indexed by split point; `c` is one
/// scalar per item. Base items (`i == j`) have value 0 and no splits.
pub struct Chart {
    n: usize,
    mode: ChartMode,
    /// Per-kind item values, dense over spans.
    c: [Vec<f64>; 4],
    /// Per-kind antecedent scores, ragged storage shared via `off`.
    a: [Vec<f64>; 4],
    /// Per-kind soft backpointers, same layout as `a`.
    b: [Vec<f64>; 4],
    /// Start of the split vector of span `(i, j)` in the ragged storage.
    off: Vec<usize>,
}

impl Chart {
    fn new(n: usize, mode: ChartMode) -> Self {
        let side = n + 1;
        let mut off = vec![0usize; side * side];
        let mut total = 0usize;
        for l in 1..=n {
            for i in 0..=n - l {
                let j = i + l;
                off[i * side + j] = total;
                total += l;
            }
        }
        Chart {
            n,
            mode,
            c: std::array::from_fn(|_| vec![0.0; side * side]),
            a: std::array::from_fn(|_| vec![0.0; total]),
            b: std::array::from_fn(|_| vec![0.0; total]),
            off,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> ChartMode {
        self.mode
    }

    #[inline]
    fn span(&self, i: usize, j: usize) -> usize {
        i * (self.n + 1) + j
    }

    #[inline]
    pub(crate) fn range(&self, i: usize, j: usize) -> std::ops::Range<usize> {
        let s = self.off[self.span(i, j)];
        s..s + (j - i)
    }

    pub fn value(&self, kind: ItemKind, i: usize, j: usize) -> f64 {
        self.c[kind.idx()][self.span(i, j)]
    }

    /// Antecedent scores of `(i, j)`, indexed from `kind.split_start(i)`.
    pub fn scores(&self, kind: ItemKind, i: usize, j: usize) -> &[f64] {
        &self.a[kind.idx()][self.range(i, j)]
    }

    /// Soft backpointers of `(i, j)`, indexed from `kind.split_start(i)`.
    pub fn backpointers(&self, kind: ItemKind, i: usize, j: usize) -> &[f64] {
        &self.b[kind.idx()][self.range(i, j)]
    }
}

/// Writes `softmax(a / tau)` into `b` and returns `sum_k b_k a_k`.
fn smoothed_combine(a: &[f64], b: &mut [f64], tau: f64) -> f64 {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (bk, &ak) in b.iter_mut().zip(a) {
        let e = ((ak - max) / tau).exp();
        *bk = e;
        z += e;
    }
    let mut out = 0.0;
    for (bk, &ak) in b.iter_mut().zip(a) {
        *bk /= z;
        out += *bk * ak;
    }
    out
}

/// Writes `softmax(a)` into `b` and returns `logsumexp(a)` (max-shifted).
fn logsumexp_combine(a: &[f64], b: &mut [f64]) -> f64 {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (bk, &ak) in b.iter_mut().zip(a) {
        let e = (ak - max).exp();
        *bk = e;
        z += e;
    }
    for bk in b.iter_mut() {
        *bk /= z;
    }
    max + z.ln()
}

fn fill_chart(w: &ArcWeights, mode: ChartMode) -> Chart {
    let n = w.n();
    let mut chart = Chart::new(n, mode);
    let side = n + 1;

    for l in 1..=n {
        for i in 0..=n - l {
            let j = i + l;
            let span = i * side + j;
            let rng = chart.range(i, j);

            // Incomplete items: split k in [i, j-1], halves RC(i,k) + LC(k+1,j).
            for (slot, k) in rng.clone().zip(i..j) {
                let half = chart.c[ItemKind::RightComplete.idx()][i * side + k]
                    + chart.c[ItemKind::LeftComplete.idx()][(k + 1) * side + j];
                chart.a[ItemKind::RightIncomplete.idx()][slot] = half;
                chart.a[ItemKind::LeftIncomplete.idx()][slot] = half;
            }
            for (kind, arc_w) in [
                (ItemKind::RightIncomplete, w.get(i, j)),
                (ItemKind::LeftIncomplete, w.get(j, i)),
            ] {
                let a = &chart.a[kind.idx()][rng.clone()];
                let b = &mut chart.b[kind.idx()][rng.clone()];
                chart.c[kind.idx()][span] = arc_w
                    + match mode {
                        ChartMode::Smoothed { tau } => smoothed_combine(a, b, tau),
                        ChartMode::LogSumExp => logsumexp_combine(a, b),
                    };
            }

            // Complete items read the same-span incomplete item just written.
            for (slot, k) in rng.clone().zip(i + 1..=j) {
                chart.a[ItemKind::RightComplete.idx()][slot] = chart.c
                    [ItemKind::RightIncomplete.idx()][i * side + k]
                    + chart.c[ItemKind::RightComplete.idx()][k * side + j];
            }
            for (slot, k) in rng.clone().zip(i..j) {
                chart.a[ItemKind::LeftComplete.idx()][slot] = chart.c
                    [ItemKind::LeftComplete.idx()][i * side + k]
                    + chart.c[ItemKind::LeftIncomplete.idx()][k * side + j];
            }
            for kind in [ItemKind::RightComplete, ItemKind::LeftComplete] {
                let a = &chart.a[kind.idx()][rng.clone()];
                let b = &mut chart.b[kind.idx()][rng.clone()];
                chart.c[kind.idx()][span] = match mode {
                    ChartMode::Smoothed { tau } => smoothed_combine(a, b, tau),
                    ChartMode::LogSumExp => logsumexp_combine(a, b),
                };
            }
        }
    }
    chart
}

/// Smoothed inside pass at temperature `tau`.
pub fn inside_relaxed(w: &ArcWeights, tau: Temperature) -> Chart {
    fill_chart(w, ChartMode::Smoothed { tau: tau.get() })
}

/// Log-partition function over projective trees, with the chart kept for
/// marginal computation. `logZ` is the goal item's value.
pub fn log_partition(w: &ArcWeights) -> (f64, Chart) {
    let chart = fill_chart(w, ChartMode::LogSumExp);
    let logz = chart.value(ItemKind::RightComplete, 0, w.n());
    (logz, chart)
}

/// Log-probability of `t` under the log-linear distribution induced by `w`.
pub fn tree_log_prob(t: &HardTree, w: &ArcWeights) -> Result<f64> {
    if t.n() != w.n() {
        return Err(Error::Shape(format!(
            "tree covers {} words but weights cover {}",
            t.n(),
            w.n()
        )));
    }
    if !is_projective(t) {
        return Err(Error::Domain(
            "tree is not projective; the distribution is over projective trees only".into(),
        ));
    }
    let score = crate::tree::tree_score(&t.to_matrix(), w)?;
    let (logz, _) = log_partition(w);
    Ok(score - logz)
}

/// Per-item contribution mass accumulated by backpointer reconstruction.
pub struct ContribChart {
    n: usize,
    ct: [Vec<f64>; 4],
}

impl ContribChart {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contribution(&self, kind: ItemKind, i: usize, j: usize) -> f64 {
        self.ct[kind.idx()][i * (self.n + 1) + j]
    }
}

/// Top-down reconstruction: distributes the goal item's unit mass through the
/// soft backpointers and reads the soft tree off the incomplete items.
///
/// Spans are processed in decreasing length; within a span the complete items
/// distribute first because they feed the same-span incomplete items.
pub fn backptr_reconstruct(chart: &Chart) -> (ContribChart, SoftTree) {
    let n = chart.n();
    let side = n + 1;
    let mut ct: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; side * side]);
    ct[ItemKind::RightComplete.idx()][n] = 1.0; // goal item RC(0, n)

    for l in (1..=n).rev() {
        for i in 0..=n - l {
            let j = i + l;
            let span = i * side + j;

            let mass = ct[ItemKind::RightComplete.idx()][span];
            for (b, k) in chart
                .backpointers(ItemKind::RightComplete, i, j)
                .iter()
                .zip(i + 1..=j)
            {
                let m = mass * b;
                ct[ItemKind::RightIncomplete.idx()][i * side + k] += m;
                ct[ItemKind::RightComplete.idx()][k * side + j] += m;
            }
            let mass = ct[ItemKind::LeftComplete.idx()][span];
            for (b, k) in chart
                .backpointers(ItemKind::LeftComplete, i, j)
                .iter()
                .zip(i..j)
            {
                let m = mass * b;
                ct[ItemKind::LeftComplete.idx()][i * side + k] += m;
                ct[ItemKind::LeftIncomplete.idx()][k * side + j] += m;
            }
            for kind in [ItemKind::RightIncomplete, ItemKind::LeftIncomplete] {
                let mass = ct[kind.idx()][span];
                for (b, k) in chart.backpointers(kind, i, j).iter().zip(i..j) {
                    let m = mass * b;
                    ct[ItemKind::RightComplete.idx()][i * side + k] += m;
                    ct[ItemKind::LeftComplete.idx()][(k + 1) * side + j] += m;
                }
            }
        }
    }

    let mut t = Mat::zeros(side);
    for i in 0..=n {
        for j in i + 1..=n {
            t[(i, j)] = ct[ItemKind::RightIncomplete.idx()][i * side + j];
            t[(j, i)] = ct[ItemKind::LeftIncomplete.idx()][i * side + j];
        }
    }
    let soft = SoftTree::new_unchecked(n, chart.mode().tau(), t);
    (ContribChart { n, ct }, soft)
}

/// Smoothed parse: inside pass followed by backpointer reconstruction.
/// All intermediates are returned for the backward pass.
pub fn relaxed_eisner(w: &ArcWeights, tau: Temperature) -> (SoftTree, Chart, ContribChart) {
    let chart = inside_relaxed(w, tau);
    let (contrib, soft) = backptr_reconstruct(&chart);
    (soft, chart, contrib)
}

/// Exact arc-factored argmax over projective trees, O(n^3).
///
/// Ties break toward the smallest split index, so the result is
/// deterministic even on degenerate weight matrices.
pub fn hard_eisner(w: &ArcWeights) -> (HardTree, f64) {
    let n = w.n();
    let side = n + 1;
    let mut c = [
        vec![0.0f64; side * side],
        vec![0.0f64; side * side],
        vec![0.0f64; side * side],
        vec![0.0f64; side * side],
    ];
    let mut bp = [
        vec![0usize; side * side],
        vec![0usize; side * side],
        vec![0usize; side * side],
        vec![0usize; side * side],
    ];

    let argmax = |scores: &mut dyn Iterator<Item = (usize, f64)>| -> (usize, f64) {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (k, s) in scores {
            if s > best.1 {
                best = (k, s);
            }
        }
        best
    };

    for l in 1..=n {
        for i in 0..=n - l {
            let j = i + l;
            let span = i * side + j;

            let (k, s) = argmax(
                &mut (i..j).map(|k| {
                    (
                        k,
                        c[ItemKind::RightComplete.idx()][i * side + k]
                            + c[ItemKind::LeftComplete.idx()][(k + 1) * side + j],
                    )
                }),
            );
            c[ItemKind::RightIncomplete.idx()][span] = w.get(i, j) + s;
            bp[ItemKind::RightIncomplete.idx()][span] = k;
            c[ItemKind::LeftIncomplete.idx()][span] = w.get(j, i) + s;
            bp[ItemKind::LeftIncomplete.idx()][span] = k;

            let (k, s) = argmax(
                &mut (i + 1..=j).map(|k| {
                    (
                        k,
                        c[ItemKind::RightIncomplete.idx()][i * side + k]
                            + c[ItemKind::RightComplete.idx()][k * side + j],
                    )
                }),
            );
            c[ItemKind::RightComplete.idx()][span] = s;
            bp[ItemKind::RightComplete.idx()][span] = k;

            let (k, s) = argmax(
                &mut (i..j).map(|k| {
                    (
                        k,
                        c[ItemKind::LeftComplete.idx()][i * side + k]
                            + c[ItemKind::LeftIncomplete.idx()][k * side + j],
                    )
                }),
            );
            c[ItemKind::LeftComplete.idx()][span] = s;
            bp[ItemKind::LeftComplete.idx()][span] = k;
        }
    }

    let mut heads = vec![0usize; n];
    let mut stack = vec![(ItemKind::RightComplete, 0usize, n)];
    while let Some((kind, i, j)) = stack.pop() {
        if i == j {
            continue;
        }
        let k = bp[kind.idx()][i * side + j];
        match kind {
            ItemKind::RightIncomplete => {
                heads[j - 1] = i;
                stack.push((ItemKind::RightComplete, i, k));
                stack.push((ItemKind::LeftComplete, k + 1, j));
            }
            ItemKind::LeftIncomplete => {
                heads[i - 1] = j;
                stack.push((ItemKind::RightComplete, i, k));
                stack.push((ItemKind::LeftComplete, k + 1, j));
            }
            ItemKind::RightComplete => {
                stack.push((ItemKind::RightIncomplete, i, k));
                stack.push((ItemKind::RightComplete, k, j));
            }
            ItemKind::LeftComplete => {
                stack.push((ItemKind::LeftComplete, i, k));
                stack.push((ItemKind::LeftIncomplete, k, j));
            }
        }
    }

    let best = c[ItemKind::RightComplete.idx()][n];
    let tree = HardTree::from_heads(heads).expect("chart reconstruction yields a valid tree");
    (tree, best)
}
