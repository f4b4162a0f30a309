//! Manual reverse-mode differentiation through the chart passes.
//!
//! The engine runs in two phases, mirroring the forward pipeline in reverse:
//!
//! 1. Through the reconstruction pass (ascending span length): contribution
//!    gradients `dct` flow from each item's distribution targets back into
//!    the item, and backpointer gradients `db` are collected. Incomplete
//!    items come first within a span; the complete items' targets include
//!    the same-span incomplete items.
//! 2. Through the inside pass (descending span length): `db` picks up the
//!    direct path through the item value (smoothed mode only), the softmax
//!    Jacobian converts it into score gradients `da`, and those flow into
//!    the value gradients `dc` of both antecedents. Complete items come
//!    first within a span. Arc-weight gradients are the `dc` of the
//!    incomplete items.
//!
//! Both `db` and `da` accumulate every path required by the chain rule; the
//! finite-difference suite in this module's tests is the arbiter of that.
//!
//! The same engine also differentiates the log-partition chart: seeding the
//! goal item's `dc` with 1 yields the arc marginals (the classic outside
//! pass), and running the full two phases over a logsumexp chart with the
//! weight matrix as the incoming tree gradient yields the exact gradient of
//! the tree KL to the uniform prior.

use crate::chart::{
    backptr_reconstruct, log_partition, Chart, ChartMode, ContribChart, ItemKind,
};
use crate::tree::{ArcWeights, Mat};
use crate::{Error, Result};

/// Dense gradient buffers mirroring the chart layout.
struct GradBuffers {
    dc: [Vec<f64>; 4],
    dct: [Vec<f64>; 4],
    db: [Vec<f64>; 4],
    da: [Vec<f64>; 4],
}

/// The two items a split `k` of `(kind, i, j)` connects to; these are both
/// the deduction antecedents and the reconstruction targets.
#[inline]
fn halves(kind: ItemKind, i: usize, j: usize, k: usize) -> ((usize, usize, usize), (usize, usize, usize)) {
    match kind {
        ItemKind::RightIncomplete | ItemKind::LeftIncomplete => (
            (ItemKind::RightComplete.idx(), i, k),
            (ItemKind::LeftComplete.idx(), k + 1, j),
        ),
        ItemKind::RightComplete => (
            (ItemKind::RightIncomplete.idx(), i, k),
            (ItemKind::RightComplete.idx(), k, j),
        ),
        ItemKind::LeftComplete => (
            (ItemKind::LeftComplete.idx(), i, k),
            (ItemKind::LeftIncomplete.idx(), k, j),
        ),
    }
}

fn run_backward(
    chart: &Chart,
    recon: Option<(&ContribChart, &Mat)>,
    goal_seed: f64,
) -> Mat {
    let n = chart.n();
    let side = n + 1;
    let ragged = chart.range(0, n).end;
    let mut buf = GradBuffers {
        dc: std::array::from_fn(|_| vec![0.0; side * side]),
        dct: std::array::from_fn(|_| vec![0.0; side * side]),
        db: std::array::from_fn(|_| vec![0.0; ragged]),
        da: std::array::from_fn(|_| vec![0.0; ragged]),
    };
    let tau = chart.mode().tau();

    // Phase 1: backward through the reconstruction pass.
    if let Some((contrib, d_tree)) = recon {
        for l in 1..=n {
            for i in 0..=n - l {
                let j = i + l;
                let span = i * side + j;
                for kind in [
                    ItemKind::RightIncomplete,
                    ItemKind::LeftIncomplete,
                    ItemKind::RightComplete,
                    ItemKind::LeftComplete,
                ] {
                    let seed = match kind {
                        ItemKind::RightIncomplete => d_tree[(i, j)],
                        ItemKind::LeftIncomplete => d_tree[(j, i)],
                        _ => 0.0,
                    };
                    let ct_item = contrib.contribution(kind, i, j);
                    let b = chart.backpointers(kind, i, j);
                    let rng = chart.range(i, j);
                    let mut acc = seed;
                    for ((slot, k), &bk) in rng.zip(kind.split_start(i)..).zip(b) {
                        let ((k1, i1, j1), (k2, i2, j2)) = halves(kind, i, j, k);
                        let downstream =
                            buf.dct[k1][i1 * side + j1] + buf.dct[k2][i2 * side + j2];
                        acc += downstream * bk;
                        buf.db[kind.idx()][slot] = downstream * ct_item;
                    }
                    buf.dct[kind.idx()][span] = acc;
                }
            }
        }
    }

    // Phase 2: backward through the inside pass.
    buf.dc[ItemKind::RightComplete.idx()][n] = goal_seed;
    let smoothed = matches!(chart.mode(), ChartMode::Smoothed { .. });
    for l in (1..=n).rev() {
        for i in 0..=n - l {
            let j = i + l;
            let span = i * side + j;
            for kind in [
                ItemKind::RightComplete,
                ItemKind::LeftComplete,
                ItemKind::RightIncomplete,
                ItemKind::LeftIncomplete,
            ] {
                let dc_item = buf.dc[kind.idx()][span];
                let a = chart.scores(kind, i, j);
                let b = chart.backpointers(kind, i, j);
                let rng = chart.range(i, j);

                // Total backpointer gradient: reconstruction path plus, for
                // the smoothed value sum(b * a), the direct path dc * a.
                let mut s = 0.0;
                for (slot, (&ak, &bk)) in rng.clone().zip(a.iter().zip(b)) {
                    if smoothed {
                        buf.db[kind.idx()][slot] += dc_item * ak;
                    }
                    s += buf.db[kind.idx()][slot] * bk;
                }
                for ((slot, k), &bk) in rng.zip(kind.split_start(i)..).zip(b) {
                    let da = dc_item * bk + bk * (buf.db[kind.idx()][slot] - s) / tau;
                    buf.da[kind.idx()][slot] = da;
                    let ((k1, i1, j1), (k2, i2, j2)) = halves(kind, i, j, k);
                    buf.dc[k1][i1 * side + j1] += da;
                    buf.dc[k2][i2 * side + j2] += da;
                }
            }
        }
    }

    let mut dw = Mat::zeros(side);
    for i in 0..=n {
        for j in i + 1..=n {
            dw[(i, j)] = buf.dc[ItemKind::RightIncomplete.idx()][i * side + j];
            dw[(j, i)] = buf.dc[ItemKind::LeftIncomplete.idx()][i * side + j];
        }
    }
    dw
}

/// Gradient of a loss with respect to the arc weights, given its gradient
/// `d_tree` with respect to the soft tree. `chart` and `contrib` must come
/// from the same `relaxed_eisner` call.
pub fn backward_relaxed(chart: &Chart, contrib: &ContribChart, d_tree: &Mat) -> Result<Mat> {
    if !matches!(chart.mode(), ChartMode::Smoothed { .. }) {
        return Err(Error::Domain(
            "backward_relaxed expects a smoothed chart; log-partition charts \
             are differentiated by marginals / tree_kl_grad"
                .into(),
        ));
    }
    if contrib.n() != chart.n() {
        return Err(Error::Shape(format!(
            "chart covers {} words but contributions cover {}",
            chart.n(),
            contrib.n()
        )));
    }
    if d_tree.side() != chart.n() + 1 {
        return Err(Error::Shape(format!(
            "gradient matrix side {} does not match n+1 = {}",
            d_tree.side(),
            chart.n() + 1
        )));
    }
    if !d_tree.is_finite() {
        return Err(Error::Domain("incoming tree gradient must be finite".into()));
    }
    Ok(run_backward(chart, Some((contrib, d_tree)), 0.0))
}

/// Exact arc marginals `mu[h][m] = d logZ / d w[h][m]`, by seeding the goal
/// item of the log-partition chart and running the inside backward pass.
pub fn marginals(w: &ArcWeights) -> Mat {
    let (_, chart) = log_partition(w);
    run_backward(&chart, None, 1.0)
}

/// Exact gradient of `tree_kl_to_uniform` with respect to the arc weights.
///
/// The marginal vector equals the soft tree of a reconstruction pass over
/// the log-partition chart, so the KL gradient
/// `d/dw [ -logZ + <mu(w), w> ]` reduces to the two-phase backward over
/// that chart with the weights themselves as the incoming tree gradient:
/// the `-logZ` term's gradient `-mu` cancels against the direct `<mu, w>`
/// product-rule term.
pub fn tree_kl_grad(w: &ArcWeights) -> Mat {
    let (_, chart) = log_partition(w);
    let (contrib, _) = backptr_reconstruct(&chart);
    run_backward(&chart, Some((&contrib, w.matrix())), 0.0)
}

/// Finite-difference comparison report.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Coordinate `(head, modifier)` attaining the largest relative error.
    pub worst: (usize, usize),
}

/// Compares an analytic gradient against central finite differences of `f`
/// over every admissible arc position.
///
/// The relative error divides by `max(|analytic|, |numeric|)`; coordinates
/// where both magnitudes fall below 1e-6 contribute their absolute error
/// instead, since the quotient would only amplify round-off.
pub fn grad_check<F>(
    mut f: F,
    analytic: &Mat,
    at: &ArcWeights,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ArcWeights) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Domain("step must be positive".into()));
    }
    let n = at.n();
    if analytic.side() != n + 1 {
        return Err(Error::Shape(format!(
            "gradient side {} does not match n+1 = {}",
            analytic.side(),
            n + 1
        )));
    }
    let mut report = GradCheckReport { max_abs_err: 0.0, max_rel_err: 0.0, worst: (0, 0) };
    for (h, m) in ArcWeights::valid_positions(n) {
        let mut probe = at.clone();
        probe.set(h, m, at.get(h, m) + step);
        let up = f(&probe)?;
        probe.set(h, m, at.get(h, m) - step);
        let down = f(&probe)?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Domain(format!(
                "function non-finite when probing coordinate ({}, {})",
                h, m
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let exact = analytic[(h, m)];
        let abs = (numeric - exact).abs();
        let scale = numeric.abs().max(exact.abs());
        let rel = if scale > 1e-6 { abs / scale } else { abs };
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (h, m);
        }
    }
    Ok(report)
}
