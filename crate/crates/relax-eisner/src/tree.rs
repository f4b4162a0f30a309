//! Tree and weight data types, validity and projectivity predicates,
//! arc-factored scoring and attachment accuracy.
//!
//! Conventions used everywhere in this crate: a sentence of `n` words is
//! indexed `1..=n`, position `0` is the artificial root. Matrices are
//! `(n+1) x (n+1)` with rows indexed by head and columns by modifier, so
//! `m[(h, m)]` refers to the arc `h -> m`. Positions `h == m` and `m == 0`
//! never denote a real dependency; the chart algorithms do not read them.

use crate::{Error, Result};

/// Dense square matrix of `f64`, row = head, column = modifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    side: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(side: usize) -> Self {
        Mat { side, data: vec![0.0; side * side] }
    }

    /// Builds from row vectors; every row must have length `rows.len()`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let side = rows.len();
        let mut data = Vec::with_capacity(side * side);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != side {
                return Err(Error::Shape(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    side
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.side)
            .map(|r| self.data[r * self.side..(r + 1) * self.side].to_vec())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        let side = self.side;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &v)| ((i / side, i % side), v))
    }

    /// Frobenius inner product `sum_ij a[i][j] * b[i][j]`.
    pub fn dot(&self, other: &Mat) -> Result<f64> {
        if self.side != other.side {
            return Err(Error::Shape(format!(
                "matrix sides differ: {} vs {}",
                self.side, other.side
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn scaled_add(&mut self, factor: f64, other: &Mat) {
        assert_eq!(self.side, other.side);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.side + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.side + c]
    }
}

/// Arc weight matrix for a sentence of `n` words.
#[derive(Clone, Debug)]
pub struct ArcWeights {
    n: usize,
    w: Mat,
}

impl ArcWeights {
    /// A zero weight matrix; `n` is the word count, excluding the root.
    pub fn zeros(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("sentence length must be at least 1".into()));
        }
        Ok(ArcWeights { n, w: Mat::zeros(n + 1) })
    }

    pub fn from_matrix(n: usize, w: Mat) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("sentence length must be at least 1".into()));
        }
        if w.side() != n + 1 {
            return Err(Error::Shape(format!(
                "weight matrix side {} does not match n+1 = {}",
                w.side(),
                n + 1
            )));
        }
        if !w.is_finite() {
            return Err(Error::Domain("weights must be finite".into()));
        }
        Ok(ArcWeights { n, w })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, head: usize, modifier: usize) -> f64 {
        self.w[(head, modifier)]
    }

    pub fn set(&mut self, head: usize, modifier: usize, value: f64) {
        self.w[(head, modifier)] = value;
    }

    pub fn matrix(&self) -> &Mat {
        &self.w
    }

    /// Adds `factor * g` to the weights; used by gradient-ascent loops.
    pub fn add_scaled(&mut self, factor: f64, g: &Mat) -> Result<()> {
        if g.side() != self.n + 1 {
            return Err(Error::Shape(format!(
                "gradient side {} does not match n+1 = {}",
                g.side(),
                self.n + 1
            )));
        }
        self.w.scaled_add(factor, g);
        Ok(())
    }

    /// Overwrites the never-read positions (`h == m` and `m == 0`) with
    /// `-1e9` so that malformed inputs cannot leak into perturbed parses.
    pub fn mask_invalid(&mut self) {
        for h in 0..=self.n {
            self.w[(h, 0)] = -1e9;
            self.w[(h, h)] = -1e9;
        }
    }

    /// Visits every position that can hold a real dependency.
    pub fn valid_positions(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..=n).flat_map(move |h| (1..=n).filter(move |&m| m != h).map(move |m| (h, m)))
    }
}

/// A projective dependency tree stored as a head vector:
/// `heads[m - 1]` is the head of word `m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardTree {
    heads: Vec<usize>,
}

impl HardTree {
    /// Validates that the head vector describes a root-anchored arborescence.
    pub fn from_heads(heads: Vec<usize>) -> Result<Self> {
        let n = heads.len();
        if n == 0 {
            return Err(Error::Domain("tree must cover at least one word".into()));
        }
        for (i, &h) in heads.iter().enumerate() {
            let m = i + 1;
            if h > n {
                return Err(Error::Domain(format!(
                    "word {} has out-of-range head {}",
                    m, h
                )));
            }
            if h == m {
                return Err(Error::Domain(format!("word {} is its own head", m)));
            }
        }
        // Walking up from any word must reach the root without revisiting.
        for start in 1..=n {
            let mut seen = vec![false; n + 1];
            let mut v = start;
            while v != 0 {
                if seen[v] {
                    return Err(Error::Domain(format!(
                        "cycle detected through word {}",
                        start
                    )));
                }
                seen[v] = true;
                v = heads[v - 1];
            }
        }
        Ok(HardTree { heads })
    }

    /// Reads a tree out of a binary adjacency matrix.
    pub fn from_matrix(t: &Mat, n: usize) -> Result<Self> {
        if !is_valid_tree(t, n)? {
            return Err(Error::Domain("matrix is not a valid dependency tree".into()));
        }
        let mut heads = vec![0usize; n];
        for m in 1..=n {
            for h in 0..=n {
                if t[(h, m)] == 1.0 {
                    heads[m - 1] = h;
                }
            }
        }
        Ok(HardTree { heads })
    }

    pub fn n(&self) -> usize {
        self.heads.len()
    }

    /// Head of word `m`, `1 <= m <= n`.
    pub fn head_of(&self, m: usize) -> usize {
        self.heads[m - 1]
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    /// Iterates the `(head, modifier)` arcs.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.heads.iter().enumerate().map(|(i, &h)| (h, i + 1))
    }

    pub fn to_matrix(&self) -> Mat {
        let n = self.n();
        let mut t = Mat::zeros(n + 1);
        for (h, m) in self.arcs() {
            t[(h, m)] = 1.0;
        }
        t
    }

    /// True iff `m` is reachable from `h` by walking arcs downward.
    /// Implemented as an ancestor walk from `m`; O(n) per query.
    pub fn is_descendant_of(&self, m: usize, h: usize) -> bool {
        let mut v = m;
        while v != 0 {
            v = self.heads[v - 1];
            if v == h {
                return true;
            }
        }
        h == 0
    }
}

/// Soft selection of arcs produced by the relaxed parser at temperature `tau`.
///
/// Every modifier column sums to one and the total mass equals the word
/// count: the matrix is the expectation of a binary tree under the
/// derivation distribution induced by the soft backpointers.
#[derive(Clone, Debug)]
pub struct SoftTree {
    n: usize,
    tau: f64,
    t: Mat,
}

impl SoftTree {
    pub(crate) fn new_unchecked(n: usize, tau: f64, t: Mat) -> Self {
        SoftTree { n, tau, t }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn matrix(&self) -> &Mat {
        &self.t
    }

    /// Thresholds entries at 1/2. Near the zero-temperature limit this
    /// recovers the hard parse.
    pub fn round(&self) -> Result<HardTree> {
        let mut m = Mat::zeros(self.n + 1);
        for ((h, md), v) in self.t.iter() {
            if v >= 0.5 {
                m[(h, md)] = 1.0;
            }
        }
        HardTree::from_matrix(&m, self.n)
    }
}

/// Softmax temperature; strictly positive (zero is the hard parser's job).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be a positive finite real, got {}",
                tau
            )));
        }
        Ok(Temperature(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Checks whether a binary matrix is a root-anchored spanning arborescence:
/// column 0 empty, one head per word, connected and acyclic.
pub fn is_valid_tree(t: &Mat, n: usize) -> Result<bool> {
    if t.side() != n + 1 {
        return Err(Error::Shape(format!(
            "candidate side {} does not match n+1 = {}",
            t.side(),
            n + 1
        )));
    }
    for (_, v) in t.iter() {
        if v != 0.0 && v != 1.0 {
            return Ok(false);
        }
    }
    for h in 0..=n {
        if t[(h, 0)] != 0.0 {
            return Ok(false);
        }
    }
    let mut heads = vec![0usize; n];
    for m in 1..=n {
        let mut count = 0;
        for h in 0..=n {
            if t[(h, m)] == 1.0 {
                heads[m - 1] = h;
                count += 1;
            }
        }
        if count != 1 || heads[m - 1] == m {
            return Ok(false);
        }
    }
    Ok(HardTree::from_heads(heads).is_ok())
}

/// Projectivity: for every arc `(h, m)`, each vertex strictly between `h`
/// and `m` must be a descendant of `h`.
pub fn is_projective(t: &HardTree) -> bool {
    for (h, m) in t.arcs() {
        let (lo, hi) = if h < m { (h, m) } else { (m, h) };
        for k in lo + 1..hi {
            if !t.is_descendant_of(k, h) {
                return false;
            }
        }
    }
    true
}

/// Arc-factored score `sum_hm t[h][m] * w[h][m]` of a hard or soft selection.
pub fn tree_score(t: &Mat, w: &ArcWeights) -> Result<f64> {
    t.dot(w.matrix())
}

/// Unlabeled attachment score: fraction of words with the correct head.
pub fn uas(predicted: &HardTree, gold: &HardTree) -> Result<f64> {
    if predicted.n() != gold.n() {
        return Err(Error::Shape(format!(
            "trees cover {} and {} words",
            predicted.n(),
            gold.n()
        )));
    }
    let correct = predicted
        .heads()
        .iter()
        .zip(gold.heads())
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / gold.n() as f64)
}
