//! Randomness: Gumbel noise, the Gumbel-Max trick for categoricals,
//! Gaussian reparametrization, and perturb-and-parse tree sampling.
//!
//! All sampling is driven by an explicit [`Seed`]; nothing reads OS entropy.
//! Noise enters every estimator as an input rather than a function of the
//! parameters, so fixed-seed gradients are pathwise derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chart::{hard_eisner, relaxed_eisner, Chart, ContribChart};
use crate::tree::{ArcWeights, HardTree, Mat, SoftTree, Temperature};
use crate::{Error, Result};

/// Keeps uniform draws away from 0 and 1 before the double logarithm.
const UNIFORM_GUARD: f64 = 1.0 / 9007199254740992.0; // 2^-53

/// Seed plus stream id for independent substreams of one generator.
///
/// Identical `(seed, stream)` pairs give bit-identical noise. The generator
/// is ChaCha8, which exposes 2^64 independent streams per seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seed {
    pub seed: u64,
    pub stream: u64,
}

impl Seed {
    pub fn new(seed: u64) -> Self {
        Seed { seed, stream: 0 }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        Seed { seed: self.seed, stream }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Standard Gumbel noise for every admissible arc position; entries at
/// `h == m` and `m == 0` stay zero.
pub fn sample_gumbel(n: usize, seed: Seed) -> Mat {
    let mut rng = seed.rng();
    let mut p = Mat::zeros(n + 1);
    for h in 0..=n {
        for m in 0..=n {
            // Draw unconditionally so masking does not shift later positions.
            let u: f64 = rng.gen::<f64>().clamp(UNIFORM_GUARD, 1.0 - UNIFORM_GUARD);
            if m != h && m != 0 {
                p[(h, m)] = -(-u.ln()).ln();
            }
        }
    }
    p
}

/// Gumbel-Max draw from the softmax of `log_weights`.
pub fn gumbel_max_categorical(log_weights: &[f64], seed: Seed) -> usize {
    let mut rng = seed.rng();
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (k, &lw) in log_weights.iter().enumerate() {
        let u: f64 = rng.gen::<f64>().clamp(UNIFORM_GUARD, 1.0 - UNIFORM_GUARD);
        let v = lw - (-u.ln()).ln();
        if v > best_val {
            best = k;
            best_val = v;
        }
    }
    best
}

/// Diagonal Gaussian parameters: mean and strictly positive standard
/// deviation, elementwise.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "mean has dimension {} but std has {}",
                mean.len(),
                std.len()
            )));
        }
        if !mean.iter().all(|v| v.is_finite()) || !std.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Domain(
                "mean must be finite and std strictly positive".into(),
            ));
        }
        Ok(GaussianParams { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

/// Reparametrized Gaussian sample `z = mean + std * e`, returning the raw
/// noise `e` as well so callers can differentiate analytically
/// (`dz/dmean = 1`, `dz/dstd = e`).
pub fn reparam_gaussian(params: &GaussianParams, seed: Seed) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed.rng();
    let e: Vec<f64> = (0..params.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let z = params
        .mean
        .iter()
        .zip(&params.std)
        .zip(&e)
        .map(|((m, s), e)| m + s * e)
        .collect();
    (z, e)
}

fn perturbed(w: &ArcWeights, seed: Seed) -> ArcWeights {
    let noise = sample_gumbel(w.n(), seed);
    let mut out = w.clone();
    for (h, m) in ArcWeights::valid_positions(w.n()) {
        out.set(h, m, w.get(h, m) + noise[(h, m)]);
    }
    out
}

/// Approximate tree sample: exact argmax parse of independently perturbed
/// weights. Always a valid projective tree.
pub fn perturb_and_parse_hard(w: &ArcWeights, seed: Seed) -> HardTree {
    hard_eisner(&perturbed(w, seed)).0
}

/// Relaxed counterpart: smoothed parse of the same perturbed weights.
/// For fixed noise the result is differentiable in `w` everywhere.
pub fn perturb_and_parse_relaxed(
    w: &ArcWeights,
    tau: Temperature,
    seed: Seed,
) -> (SoftTree, Chart, ContribChart) {
    relaxed_eisner(&perturbed(w, seed), tau)
}
