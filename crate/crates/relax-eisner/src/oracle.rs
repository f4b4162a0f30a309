//! Brute-force ground truth on small sentences: exhaustive enumeration of
//! projective trees, exact argmax, partition function, marginals and counts.
//!
//! Everything here is deliberately independent of the chart algorithms it
//! cross-checks; candidates are generated as raw head vectors and filtered
//! through the public validity predicates.

use crate::chart::{Chart, ItemKind};
use crate::tree::{is_projective, is_valid_tree, tree_score, ArcWeights, HardTree, Mat};
use crate::{Error, Result};

/// Enumeration is refused above this length; the candidate space is
/// `(n+1)^n` head vectors.
pub const MAX_ORACLE_LEN: usize = 8;

/// Exhaustive, duplicate-free list of projective trees for `n` words.
#[derive(Clone, Debug)]
pub struct TreeSet {
    n: usize,
    trees: Vec<HardTree>,
}

impl TreeSet {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn trees(&self) -> &[HardTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

fn guard_len(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("sentence length must be at least 1".into()));
    }
    if n > MAX_ORACLE_LEN {
        return Err(Error::Domain(format!(
            "enumeration refused for n = {}: the candidate space has (n+1)^n head vectors, \
             which is only tractable up to n = {}",
            n, MAX_ORACLE_LEN
        )));
    }
    Ok(())
}

/// All projective trees over `n` words, by filtering every head vector
/// through `is_valid_tree` and then `is_projective`.
pub fn enumerate_projective(n: usize) -> Result<TreeSet> {
    guard_len(n)?;
    let mut trees = Vec::new();
    // Mixed-radix counter over heads[m] in 0..=n, skipping h == m.
    let mut heads = vec![0usize; n];
    let mut scratch = Mat::zeros(n + 1);
    'outer: loop {
        if heads.iter().enumerate().all(|(i, &h)| h != i + 1) {
            for v in scratch.iter().map(|(p, _)| p).collect::<Vec<_>>() {
                scratch[v] = 0.0;
            }
            for (i, &h) in heads.iter().enumerate() {
                scratch[(h, i + 1)] = 1.0;
            }
            if is_valid_tree(&scratch, n)? {
                let t = HardTree::from_heads(heads.clone())?;
                if is_projective(&t) {
                    trees.push(t);
                }
            }
        }
        for slot in 0..n {
            heads[slot] += 1;
            if heads[slot] <= n {
                continue 'outer;
            }
            heads[slot] = 0;
        }
        break;
    }
    Ok(TreeSet { n, trees })
}

/// Independent projectivity check used to cross-validate `is_projective`:
/// for each arc, every strictly interior vertex must reach the head by
/// walking its ancestor chain.
pub fn projective_by_ancestor_walk(t: &HardTree) -> bool {
    let ancestor_reaches = |mut v: usize, target: usize| -> bool {
        loop {
            if v == target {
                return true;
            }
            if v == 0 {
                return false;
            }
            v = t.head_of(v);
        }
    };
    for (h, m) in t.arcs() {
        let (lo, hi) = if h < m { (h, m) } else { (m, h) };
        for k in lo + 1..hi {
            if !ancestor_reaches(k, h) {
                return false;
            }
        }
    }
    true
}

/// Argmax over the enumerated trees. Ties are reported, never broken.
pub struct OracleBest {
    pub score: f64,
    /// Every tree attaining the maximum score.
    pub maximizers: Vec<HardTree>,
    pub tie: bool,
}

pub fn oracle_best(w: &ArcWeights) -> Result<OracleBest> {
    let set = enumerate_projective(w.n())?;
    let mut best = f64::NEG_INFINITY;
    let mut maximizers: Vec<HardTree> = Vec::new();
    for t in set.trees() {
        let s = tree_score(&t.to_matrix(), w)?;
        if s > best {
            best = s;
            maximizers.clear();
            maximizers.push(t.clone());
        } else if s == best {
            maximizers.push(t.clone());
        }
    }
    Ok(OracleBest { score: best, tie: maximizers.len() > 1, maximizers })
}

/// Log-partition by direct logsumexp over enumerated tree scores.
pub fn oracle_logz(w: &ArcWeights) -> Result<f64> {
    let set = enumerate_projective(w.n())?;
    let scores: Vec<f64> = set
        .trees()
        .iter()
        .map(|t| tree_score(&t.to_matrix(), w))
        .collect::<Result<_>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + z.ln())
}

/// Arc marginals by explicit expectation over enumerated trees.
pub fn oracle_marginals(w: &ArcWeights) -> Result<Mat> {
    let n = w.n();
    let set = enumerate_projective(n)?;
    let scores: Vec<f64> = set
        .trees()
        .iter()
        .map(|t| tree_score(&t.to_matrix(), w))
        .collect::<Result<_>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut mu = Mat::zeros(n + 1);
    for (t, s) in set.trees().iter().zip(&scores) {
        let p = (s - max).exp() / z;
        for (h, m) in t.arcs() {
            mu[(h, m)] += p;
        }
    }
    Ok(mu)
}

/// Number of projective trees over `n` words.
pub fn oracle_count(n: usize) -> Result<usize> {
    Ok(enumerate_projective(n)?.len())
}

/// Entropy of the log-linear tree distribution by direct summation.
pub fn oracle_entropy(w: &ArcWeights) -> Result<f64> {
    let set = enumerate_projective(w.n())?;
    let scores: Vec<f64> = set
        .trees()
        .iter()
        .map(|t| tree_score(&t.to_matrix(), w))
        .collect::<Result<_>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut h = 0.0;
    for s in &scores {
        let p = (s - max).exp() / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Expected arc-selection matrix of the derivation distribution induced by a
/// chart's soft backpointers, by explicit enumeration of derivations.
///
/// Each derivation picks one split per expanded item starting from the goal;
/// its probability is the product of the backpointer entries along the way.
/// Agreement with `backptr_reconstruct` is the distributive-law identity the
/// reconstruction pass relies on.
pub fn soft_tree_by_enumeration(chart: &Chart) -> Result<Mat> {
    let n = chart.n();
    guard_len(n)?;

    type Deriv = (f64, Vec<(usize, usize)>);

    fn expand(chart: &Chart, kind: ItemKind, i: usize, j: usize) -> Vec<Deriv> {
        if i == j {
            return vec![(1.0, Vec::new())];
        }
        let b = chart.backpointers(kind, i, j);
        let mut out = Vec::new();
        for (slot, k) in (kind.split_start(i)..).take(j - i).enumerate() {
            let p = b[slot];
            let (arc, left, right) = match kind {
                ItemKind::RightIncomplete => (
                    Some((i, j)),
                    expand(chart, ItemKind::RightComplete, i, k),
                    expand(chart, ItemKind::LeftComplete, k + 1, j),
                ),
                ItemKind::LeftIncomplete => (
                    Some((j, i)),
                    expand(chart, ItemKind::RightComplete, i, k),
                    expand(chart, ItemKind::LeftComplete, k + 1, j),
                ),
                ItemKind::RightComplete => (
                    None,
                    expand(chart, ItemKind::RightIncomplete, i, k),
                    expand(chart, ItemKind::RightComplete, k, j),
                ),
                ItemKind::LeftComplete => (
                    None,
                    expand(chart, ItemKind::LeftComplete, i, k),
                    expand(chart, ItemKind::LeftIncomplete, k, j),
                ),
            };
            for (pl, al) in &left {
                for (pr, ar) in &right {
                    let mut arcs = Vec::with_capacity(al.len() + ar.len() + 1);
                    if let Some(a) = arc {
                        arcs.push(a);
                    }
                    arcs.extend_from_slice(al);
                    arcs.extend_from_slice(ar);
                    out.push((p * pl * pr, arcs));
                }
            }
        }
        out
    }

    let derivations = expand(chart, ItemKind::RightComplete, 0, n);
    let mut expected = Mat::zeros(n + 1);
    for (p, arcs) in derivations {
        for (h, m) in arcs {
            expected[(h, m)] += p;
        }
    }
    Ok(expected)
}
