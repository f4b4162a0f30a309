//! Loss composition for semi-supervised latent-tree training: Gaussian and
//! tree KL terms, single-sample ELBO estimates with a pluggable decoder, the
//! combined semi-supervised loss, and a GCN layer that consumes soft
//! adjacency matrices.

use crate::chart::tree_log_prob;
use crate::grad::{backward_relaxed, marginals, tree_kl_grad};
use crate::sampling::{
    perturb_and_parse_hard, perturb_and_parse_relaxed, reparam_gaussian, GaussianParams, Seed,
};
use crate::tree::{is_projective, ArcWeights, HardTree, Mat, Temperature};
use crate::{chart, Error, Result};

/// KL divergence of a diagonal Gaussian from the standard normal:
/// `0.5 * sum(m^2 + v^2 - log v^2 - 1)`. Zero exactly at the prior.
pub fn gaussian_kl(params: &GaussianParams) -> f64 {
    params
        .mean()
        .iter()
        .zip(params.std())
        .map(|(m, v)| 0.5 * (m * m + v * v - (v * v).ln() - 1.0))
        .sum()
}

fn gaussian_kl_grad(params: &GaussianParams) -> (Vec<f64>, Vec<f64>) {
    let d_mean = params.mean().to_vec();
    let d_std = params.std().iter().map(|v| v - 1.0 / v).collect();
    (d_mean, d_std)
}

/// Entropy of the log-linear tree distribution, via the identity
/// `H = logZ - <mu, w>`. Lies in `[0, log #trees]`.
pub fn tree_entropy(w: &ArcWeights) -> f64 {
    let (logz, _) = chart::log_partition(w);
    let mu = marginals(w);
    logz - mu.dot(w.matrix()).expect("matching sides")
}

/// KL divergence of the tree distribution from the uniform prior over
/// projective trees: `log #trees - H`. Zero iff the distribution is uniform.
pub fn tree_kl_to_uniform(w: &ArcWeights) -> f64 {
    let zeros = ArcWeights::zeros(w.n()).expect("n >= 1");
    let (log_count, _) = chart::log_partition(&zeros);
    log_count - tree_entropy(w)
}

/// Dense linear map used for the GCN transforms.
#[derive(Clone, Debug)]
pub struct Linear {
    out_dim: usize,
    in_dim: usize,
    w: Vec<f64>,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != out_dim * in_dim {
            return Err(Error::Shape(format!(
                "linear map {}x{} needs {} entries, got {}",
                out_dim,
                in_dim,
                out_dim * in_dim,
                w.len()
            )));
        }
        Ok(Linear { out_dim, in_dim, w })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "input has dimension {}, map expects {}",
                x.len(),
                self.in_dim
            )));
        }
        Ok((0..self.out_dim)
            .map(|r| {
                self.w[r * self.in_dim..(r + 1) * self.in_dim]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }
}

/// One graph-convolution layer over a (possibly soft) adjacency matrix.
///
/// For each position `i`, incoming-head and outgoing-modifier messages are
/// weighted by the adjacency entries and restricted to positions strictly
/// below `i`, so the layer is autoregressive:
/// `g_i = tanh(self(o_i) + sum_{h<i} T[h][i] head(o_h) + sum_{m<i} T[i][m] mod(o_m))`.
pub fn soft_gcn_layer(
    inputs: &[Vec<f64>],
    adjacency: &Mat,
    head_map: &Linear,
    mod_map: &Linear,
    self_map: &Linear,
) -> Result<Vec<Vec<f64>>> {
    if inputs.len() != adjacency.side() {
        return Err(Error::Shape(format!(
            "{} input vectors for an adjacency of side {}",
            inputs.len(),
            adjacency.side()
        )));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut acc = self_map.apply(&inputs[i])?;
        for h in 0..i {
            let t = adjacency[(h, i)];
            if t != 0.0 {
                for (a, b) in acc.iter_mut().zip(head_map.apply(&inputs[h])?) {
                    *a += t * b;
                }
            }
        }
        for m in 0..i {
            let t = adjacency[(i, m)];
            if t != 0.0 {
                for (a, b) in acc.iter_mut().zip(mod_map.apply(&inputs[m])?) {
                    *a += t * b;
                }
            }
        }
        out.push(acc.into_iter().map(f64::tanh).collect());
    }
    Ok(out)
}

/// Evaluation of a decoder: the conditional log-likelihood and its gradients
/// with respect to the tree matrix and the latent vector.
#[derive(Clone, Debug)]
pub struct DecoderEval {
    pub value: f64,
    pub d_tree: Mat,
    pub d_z: Vec<f64>,
}

/// Conditional likelihood model `log p(s | T, z)`. The tree argument may be
/// a hard adjacency matrix or a soft selection of arcs.
pub trait Decoder {
    fn log_likelihood(&self, tree: &Mat, z: &[f64]) -> Result<DecoderEval>;
}

/// Linear test decoder: `log p = <G, T> + <g, z> - offset`. Its gradients
/// are exactly `G` and `g`, which makes it a complete exerciser for every
/// gradient path a real decoder would use.
#[derive(Clone, Debug)]
pub struct LinearDecoder {
    pub tree_weight: Mat,
    pub z_weight: Vec<f64>,
    pub offset: f64,
}

impl Decoder for LinearDecoder {
    fn log_likelihood(&self, tree: &Mat, z: &[f64]) -> Result<DecoderEval> {
        if z.len() != self.z_weight.len() {
            return Err(Error::Shape(format!(
                "latent vector has dimension {}, decoder expects {}",
                z.len(),
                self.z_weight.len()
            )));
        }
        let value = self.tree_weight.dot(tree)?
            + self.z_weight.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            - self.offset;
        Ok(DecoderEval { value, d_tree: self.tree_weight.clone(), d_z: self.z_weight.clone() })
    }
}

/// Gradient of a loss with respect to diagonal Gaussian parameters.
#[derive(Clone, Debug)]
pub struct GaussianGrad {
    pub d_mean: Vec<f64>,
    pub d_std: Vec<f64>,
}

/// Single-sample ELBO estimate for an unlabeled sentence.
///
/// The tree is a relaxed perturb-and-parse sample, the latent vector is a
/// reparametrized Gaussian draw (noise substreams `2*stream` and
/// `2*stream + 1` of `seed`), and
/// `value = log p(s|T,z) - kl_z_weight * KL_z - kl_tree_weight * KL_T`.
/// Returned gradients are pathwise derivatives at the fixed noise.
pub fn unsup_elbo_estimate(
    w: &ArcWeights,
    gparams: &GaussianParams,
    decoder: &dyn Decoder,
    tau: Temperature,
    seed: Seed,
    kl_z_weight: f64,
    kl_tree_weight: f64,
) -> Result<(f64, Mat, GaussianGrad)> {
    let tree_seed = seed.with_stream(seed.stream.wrapping_mul(2));
    let z_seed = seed.with_stream(seed.stream.wrapping_mul(2).wrapping_add(1));
    let (soft, chart, contrib) = perturb_and_parse_relaxed(w, tau, tree_seed);
    let (z, e) = reparam_gaussian(gparams, z_seed);
    let eval = decoder.log_likelihood(soft.matrix(), &z)?;

    let mut value = eval.value;
    let mut d_w = backward_relaxed(&chart, &contrib, &eval.d_tree)?;
    let (kl_dm, kl_dv) = gaussian_kl_grad(gparams);
    let mut d_mean = eval.d_z.clone();
    let mut d_std: Vec<f64> = eval.d_z.iter().zip(&e).map(|(g, e)| g * e).collect();

    if kl_z_weight != 0.0 {
        value -= kl_z_weight * gaussian_kl(gparams);
        for ((dm, ds), (km, kv)) in d_mean.iter_mut().zip(&mut d_std).zip(kl_dm.iter().zip(&kl_dv))
        {
            *dm -= kl_z_weight * km;
            *ds -= kl_z_weight * kv;
        }
    }
    if kl_tree_weight != 0.0 {
        value -= kl_tree_weight * tree_kl_to_uniform(w);
        d_w.scaled_add(-kl_tree_weight, &tree_kl_grad(w));
    }
    Ok((value, d_w, GaussianGrad { d_mean, d_std }))
}

/// Single-sample ELBO estimate for a labeled sentence: the tree is observed,
/// only the latent vector is sampled.
pub fn sup_elbo_estimate(
    gold: &HardTree,
    gparams: &GaussianParams,
    decoder: &dyn Decoder,
    seed: Seed,
    kl_z_weight: f64,
) -> Result<(f64, GaussianGrad)> {
    if !is_projective(gold) {
        return Err(Error::Domain("gold tree is not projective".into()));
    }
    let (z, e) = reparam_gaussian(gparams, seed);
    let eval = decoder.log_likelihood(&gold.to_matrix(), &z)?;
    let mut value = eval.value;
    let mut d_mean = eval.d_z.clone();
    let mut d_std: Vec<f64> = eval.d_z.iter().zip(&e).map(|(g, e)| g * e).collect();
    if kl_z_weight != 0.0 {
        value -= kl_z_weight * gaussian_kl(gparams);
        let (kl_dm, kl_dv) = gaussian_kl_grad(gparams);
        for ((dm, ds), (km, kv)) in d_mean.iter_mut().zip(&mut d_std).zip(kl_dm.iter().zip(&kl_dv))
        {
            *dm -= kl_z_weight * km;
            *ds -= kl_z_weight * kv;
        }
    }
    Ok((value, GaussianGrad { d_mean, d_std }))
}

/// A sentence with observed parse.
pub struct LabeledExample {
    pub weights: ArcWeights,
    pub gold: HardTree,
    pub gaussian: GaussianParams,
}

/// A sentence whose parse is latent.
pub struct UnlabeledExample {
    pub weights: ArcWeights,
    pub gaussian: GaussianParams,
}

/// The combined loss, decomposed per term, with gradients for every input.
///
/// `total = discriminative - sup_elbo - unsup_elbo`, where `discriminative`
/// already carries its minus sign (it sums `-log q(T|s)` over labeled
/// sentences) and the ELBO sums enter negated because the loss is minimized.
pub struct LossBundle {
    pub discriminative: f64,
    pub sup_elbo: f64,
    pub unsup_elbo: f64,
    pub kl_z_weight: f64,
    pub kl_tree_weight: f64,
    pub total: f64,
    /// Per labeled sentence: gradient of `total` w.r.t. its arc weights and
    /// Gaussian parameters.
    pub labeled_grads: Vec<(Mat, GaussianGrad)>,
    /// Per unlabeled sentence, same convention.
    pub unlabeled_grads: Vec<(Mat, GaussianGrad)>,
}

fn negate_gaussian(mut g: GaussianGrad) -> GaussianGrad {
    for v in g.d_mean.iter_mut().chain(g.d_std.iter_mut()) {
        *v = -*v;
    }
    g
}

/// Semi-supervised loss over a batch. Sentence `i` of the labeled
/// (respectively unlabeled) set draws its noise from substream
/// `stream + i` (respectively `stream + labeled.len() + i`) of `seed`.
pub fn semi_supervised_loss(
    labeled: &[LabeledExample],
    unlabeled: &[UnlabeledExample],
    decoder: &dyn Decoder,
    tau: Temperature,
    seed: Seed,
    kl_z_weight: f64,
    kl_tree_weight: f64,
) -> Result<LossBundle> {
    if kl_z_weight < 0.0 || kl_tree_weight < 0.0 {
        return Err(Error::Domain("KL weights must be nonnegative".into()));
    }
    let mut bundle = LossBundle {
        discriminative: 0.0,
        sup_elbo: 0.0,
        unsup_elbo: 0.0,
        kl_z_weight,
        kl_tree_weight,
        total: 0.0,
        labeled_grads: Vec::with_capacity(labeled.len()),
        unlabeled_grads: Vec::with_capacity(unlabeled.len()),
    };

    for (i, ex) in labeled.iter().enumerate() {
        if !is_projective(&ex.gold) {
            return Err(Error::Domain(format!(
                "labeled sentence {}: gold tree is not projective",
                i
            )));
        }
        bundle.discriminative -= tree_log_prob(&ex.gold, &ex.weights)?;
        // d(-log q)/dw = mu(w) - T_gold.
        let mut d_w = marginals(&ex.weights);
        d_w.scaled_add(-1.0, &ex.gold.to_matrix());

        let sent_seed = seed.with_stream(seed.stream.wrapping_add(i as u64));
        let (sup, d_gauss) =
            sup_elbo_estimate(&ex.gold, &ex.gaussian, decoder, sent_seed, kl_z_weight)?;
        bundle.sup_elbo += sup;
        bundle.labeled_grads.push((d_w, negate_gaussian(d_gauss)));
    }

    for (i, ex) in unlabeled.iter().enumerate() {
        let sent_seed =
            seed.with_stream(seed.stream.wrapping_add((labeled.len() + i) as u64));
        let (unsup, d_w, d_gauss) = unsup_elbo_estimate(
            &ex.weights,
            &ex.gaussian,
            decoder,
            tau,
            sent_seed,
            kl_z_weight,
            kl_tree_weight,
        )?;
        bundle.unsup_elbo += unsup;
        let mut neg_d_w = Mat::zeros(d_w.side());
        neg_d_w.scaled_add(-1.0, &d_w);
        bundle.unlabeled_grads.push((neg_d_w, negate_gaussian(d_gauss)));
    }

    bundle.total = bundle.discriminative - bundle.sup_elbo - bundle.unsup_elbo;
    Ok(bundle)
}

/// Outcome of the gradient-flow demonstration.
pub struct RecoverReport {
    pub target: HardTree,
    pub recovered: bool,
    pub steps: usize,
}

/// Demonstrates useful gradient flow through the relaxation: starting from
/// zero weights, gradient ascent on `<T_target, SoftTree(w)>` at `tau = 1`
/// should drive the hard parse of `w` onto a random projective target.
pub fn recover_tree_by_gradient(
    n: usize,
    seed: Seed,
    max_steps: usize,
    learning_rate: f64,
) -> Result<RecoverReport> {
    let zeros = ArcWeights::zeros(n)?;
    let target = perturb_and_parse_hard(&zeros, seed);
    let target_mat = target.to_matrix();
    let tau = Temperature::new(1.0)?;
    let mut w = zeros;
    for step in 0..=max_steps {
        if chart::hard_eisner(&w).0 == target {
            return Ok(RecoverReport { target, recovered: true, steps: step });
        }
        if step == max_steps {
            break;
        }
        let (_, chart, contrib) = chart::relaxed_eisner(&w, tau);
        let d_w = backward_relaxed(&chart, &contrib, &target_mat)?;
        w.add_scaled(learning_rate, &d_w)?;
    }
    Ok(RecoverReport { target, recovered: false, steps: max_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check;
    use crate::oracle;
    use rand::Rng;

    fn random_weights(n: usize, rng: &mut impl Rng) -> ArcWeights {
        let mut w = ArcWeights::zeros(n).unwrap();
        for (h, m) in ArcWeights::valid_positions(n) {
            w.set(h, m, rng.gen_range(-1.5..1.5));
        }
        w
    }

    fn random_decoder(n: usize, dim: usize, rng: &mut impl Rng) -> LinearDecoder {
        let mut g = Mat::zeros(n + 1);
        for h in 0..=n {
            for m in 0..=n {
                g[(h, m)] = rng.gen_range(-1.0..1.0);
            }
        }
        LinearDecoder {
            tree_weight: g,
            z_weight: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            offset: rng.gen_range(-1.0..1.0),
        }
    }

    #[test]
    fn gaussian_kl_zero_at_prior() {
        assert_eq!(gaussian_kl(&GaussianParams::standard(4)), 0.0);
    }

    #[test]
    fn gaussian_kl_unit_mean_shift() {
        let p = GaussianParams::new(vec![1.0], vec![1.0]).unwrap();
        assert!((gaussian_kl(&p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_nonnegative() {
        let mut rng = Seed::new(21).rng();
        for _ in 0..50 {
            let d = 3;
            let p = GaussianParams::new(
                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..d).map(|_| rng.gen_range(0.1..3.0)).collect(),
            )
            .unwrap();
            assert!(gaussian_kl(&p) >= -1e-12);
        }
    }

    #[test]
    fn gaussian_params_reject_nonpositive_std() {
        assert!(GaussianParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn entropy_single_word_is_zero() {
        let w = ArcWeights::zeros(1).unwrap();
        assert!(tree_entropy(&w).abs() < 1e-12);
    }

    #[test]
    fn entropy_uniform_two_words() {
        let w = ArcWeights::zeros(2).unwrap();
        assert!((tree_entropy(&w) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_enumeration() {
        let mut rng = Seed::new(31).rng();
        for n in 2..=5 {
            for _ in 0..5 {
                let w = random_weights(n, &mut rng);
                let h = tree_entropy(&w);
                let expected = oracle::oracle_entropy(&w).unwrap();
                assert!((h - expected).abs() < 1e-8, "n = {}: {} vs {}", n, h, expected);
                let count = oracle::oracle_count(n).unwrap() as f64;
                assert!(h >= -1e-10 && h <= count.ln() + 1e-10);
            }
        }
    }

    #[test]
    fn kl_uniform_zero_at_zero_weights() {
        for n in 1..=4 {
            let w = ArcWeights::zeros(n).unwrap();
            assert!(tree_kl_to_uniform(&w).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_uniform_positive_when_skewed() {
        let mut w = ArcWeights::zeros(2).unwrap();
        w.set(0, 2, 10.0);
        assert!(tree_kl_to_uniform(&w) > 0.1);
    }

    #[test]
    fn kl_uniform_matches_enumeration() {
        let mut rng = Seed::new(41).rng();
        for n in 2..=5 {
            let w = random_weights(n, &mut rng);
            let expected =
                (oracle::oracle_count(n).unwrap() as f64).ln() - oracle::oracle_entropy(&w).unwrap();
            assert!((tree_kl_to_uniform(&w) - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn gcn_zero_adjacency_reduces_to_self_map() {
        let self_map = Linear::new(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        let head_map = Linear::new(2, 2, vec![9.0; 4]).unwrap();
        let mod_map = Linear::new(2, 2, vec![-9.0; 4]).unwrap();
        let inputs = vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![-0.2, 0.5]];
        let adj = Mat::zeros(3);
        let out = soft_gcn_layer(&inputs, &adj, &head_map, &mod_map, &self_map).unwrap();
        for (o, x) in out.iter().zip(&inputs) {
            let want: Vec<f64> =
                self_map.apply(x).unwrap().into_iter().map(f64::tanh).collect();
            assert_eq!(o, &want);
        }
    }

    #[test]
    fn gcn_hard_adjacency_matches_arc_iteration() {
        // Independent route: iterate the tree's arcs directly instead of
        // scanning the adjacency matrix.
        let mut rng = Seed::new(61).rng();
        let n = 4;
        let dim = 3;
        let tree = HardTree::from_heads(vec![0, 1, 1, 3]).unwrap();
        let rand_map = |rng: &mut rand_chacha::ChaCha8Rng| {
            Linear::new(dim, dim, (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let head_map = rand_map(&mut rng);
        let mod_map = rand_map(&mut rng);
        let self_map = rand_map(&mut rng);
        let inputs: Vec<Vec<f64>> = (0..=n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let fast =
            soft_gcn_layer(&inputs, &tree.to_matrix(), &head_map, &mod_map, &self_map).unwrap();

        let mut by_arcs = Vec::new();
        for i in 0..=n {
            let mut acc = self_map.apply(&inputs[i]).unwrap();
            for (h, m) in tree.arcs() {
                if m == i && h < i {
                    for (a, b) in acc.iter_mut().zip(head_map.apply(&inputs[h]).unwrap()) {
                        *a += b;
                    }
                }
                if h == i && m < i {
                    for (a, b) in acc.iter_mut().zip(mod_map.apply(&inputs[m]).unwrap()) {
                        *a += b;
                    }
                }
            }
            by_arcs.push(acc.into_iter().map(f64::tanh).collect::<Vec<f64>>());
        }
        assert_eq!(fast, by_arcs);
    }

    #[test]
    fn gcn_is_autoregressive() {
        let mut rng = Seed::new(71).rng();
        let n = 3;
        let dim = 2;
        let maps: Vec<Linear> = (0..3)
            .map(|_| {
                Linear::new(dim, dim, (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let mut adj = Mat::zeros(n + 1);
        for h in 0..=n {
            for m in 0..=n {
                if h != m && m != 0 {
                    adj[(h, m)] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let inputs: Vec<Vec<f64>> = (0..=n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let base = soft_gcn_layer(&inputs, &adj, &maps[0], &maps[1], &maps[2]).unwrap();
        // Perturbing positions >= 2 must leave outputs at positions < 2 alone.
        let mut bumped = inputs.clone();
        for row in bumped.iter_mut().skip(2) {
            for v in row.iter_mut() {
                *v += 10.0;
            }
        }
        let after = soft_gcn_layer(&bumped, &adj, &maps[0], &maps[1], &maps[2]).unwrap();
        assert_eq!(base[0], after[0]);
        assert_eq!(base[1], after[1]);
    }

    #[test]
    fn unsup_elbo_unrolls_to_its_definition_without_kl() {
        let mut rng = Seed::new(81).rng();
        let n = 3;
        let dim = 2;
        let w = random_weights(n, &mut rng);
        let gparams = GaussianParams::new(vec![0.3, -0.2], vec![0.8, 1.2]).unwrap();
        let decoder = random_decoder(n, dim, &mut rng);
        let tau = Temperature::new(1.0).unwrap();
        let seed = Seed::new(5);

        let (value, d_w, _) =
            unsup_elbo_estimate(&w, &gparams, &decoder, tau, seed, 0.0, 0.0).unwrap();

        let (soft, chart, contrib) =
            perturb_and_parse_relaxed(&w, tau, seed.with_stream(0));
        let (z, _) = reparam_gaussian(&gparams, seed.with_stream(1));
        let want = decoder.tree_weight.dot(soft.matrix()).unwrap()
            + decoder.z_weight.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            - decoder.offset;
        assert!((value - want).abs() < 1e-12);
        let want_dw = backward_relaxed(&chart, &contrib, &decoder.tree_weight).unwrap();
        for (pos, v) in d_w.iter() {
            assert!((v - want_dw[pos]).abs() < 1e-12);
        }
    }

    #[test]
    fn unsup_elbo_weight_gradient_passes_finite_differences() {
        let mut rng = Seed::new(91).rng();
        for (n, kl_tree) in [(2, 0.0), (3, 0.5), (4, 0.0)] {
            let w = random_weights(n, &mut rng);
            let gparams = GaussianParams::new(vec![0.1], vec![0.9]).unwrap();
            let decoder = random_decoder(n, 1, &mut rng);
            let tau = Temperature::new(0.8).unwrap();
            let seed = Seed::new(17);
            let (_, d_w, _) =
                unsup_elbo_estimate(&w, &gparams, &decoder, tau, seed, 0.01, kl_tree).unwrap();
            let report = grad_check(
                |probe| {
                    unsup_elbo_estimate(probe, &gparams, &decoder, tau, seed, 0.01, kl_tree)
                        .map(|(v, _, _)| v)
                },
                &d_w,
                &w,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-5,
                "n = {}, kl_tree = {}: rel err {} at {:?}",
                n,
                kl_tree,
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn unsup_elbo_gaussian_gradient_passes_finite_differences() {
        let mut rng = Seed::new(101).rng();
        let n = 3;
        let w = random_weights(n, &mut rng);
        let gparams = GaussianParams::new(vec![0.4, -0.3], vec![0.7, 1.3]).unwrap();
        let decoder = random_decoder(n, 2, &mut rng);
        let tau = Temperature::new(1.0).unwrap();
        let seed = Seed::new(23);
        let (_, _, g) =
            unsup_elbo_estimate(&w, &gparams, &decoder, tau, seed, 0.01, 0.0).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            for (which, analytic) in [(0, g.d_mean[d]), (1, g.d_std[d])] {
                let eval = |delta: f64| {
                    let mut mean = gparams.mean().to_vec();
                    let mut std = gparams.std().to_vec();
                    if which == 0 {
                        mean[d] += delta;
                    } else {
                        std[d] += delta;
                    }
                    let p = GaussianParams::new(mean, std).unwrap();
                    unsup_elbo_estimate(&w, &p, &decoder, tau, seed, 0.01, 0.0)
                        .unwrap()
                        .0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (numeric - analytic).abs() < 1e-6,
                    "coordinate {} ({}): {} vs {}",
                    d,
                    if which == 0 { "mean" } else { "std" },
                    numeric,
                    analytic
                );
            }
        }
    }

    #[test]
    fn unsup_elbo_mean_is_stable_across_seed_blocks() {
        // Two disjoint seed blocks must estimate the same expectation.
        let mut rng = Seed::new(111).rng();
        let n = 3;
        let w = random_weights(n, &mut rng);
        let gparams = GaussianParams::standard(1);
        let mut decoder = random_decoder(n, 1, &mut rng);
        decoder.z_weight = vec![0.0];
        let tau = Temperature::new(1.0).unwrap();
        let draws = 10_000u64;
        let block = |offset: u64| {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in 0..draws {
                let (v, _, _) = unsup_elbo_estimate(
                    &w,
                    &gparams,
                    &decoder,
                    tau,
                    Seed::new(999).with_stream(offset + i),
                    0.0,
                    0.0,
                )
                .unwrap();
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / draws as f64;
            let var = (sumsq / draws as f64 - mean * mean).max(0.0);
            (mean, (var / draws as f64).sqrt())
        };
        let (m1, se1) = block(0);
        let (m2, se2) = block(draws);
        let tol = 3.0 * (se1.powi(2) + se2.powi(2)).sqrt();
        assert!((m1 - m2).abs() < tol, "{} vs {} (tol {})", m1, m2, tol);
    }

    #[test]
    fn sup_elbo_unrolls_to_its_definition() {
        let mut rng = Seed::new(121).rng();
        let n = 3;
        let gold = HardTree::from_heads(vec![0, 1, 2]).unwrap();
        let gparams = GaussianParams::new(vec![0.5, -0.1], vec![1.1, 0.6]).unwrap();
        let decoder = random_decoder(n, 2, &mut rng);
        let seed = Seed::new(3);
        let (value, _) = sup_elbo_estimate(&gold, &gparams, &decoder, seed, 0.0).unwrap();
        let (z, _) = reparam_gaussian(&gparams, seed);
        let want = decoder.tree_weight.dot(&gold.to_matrix()).unwrap()
            + decoder.z_weight.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            - decoder.offset;
        assert!((value - want).abs() < 1e-12);

        // kl_z_weight = 1 subtracts exactly the Gaussian KL.
        let (with_kl, _) = sup_elbo_estimate(&gold, &gparams, &decoder, seed, 1.0).unwrap();
        assert!((with_kl - (value - gaussian_kl(&gparams))).abs() < 1e-12);
    }

    #[test]
    fn sup_elbo_mean_gradient_passes_finite_differences() {
        let mut rng = Seed::new(131).rng();
        let gold = HardTree::from_heads(vec![0, 1]).unwrap();
        let gparams = GaussianParams::new(vec![0.2, -0.4], vec![0.9, 1.4]).unwrap();
        let decoder = random_decoder(2, 2, &mut rng);
        let seed = Seed::new(29);
        let (_, g) = sup_elbo_estimate(&gold, &gparams, &decoder, seed, 0.01).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            let eval = |delta: f64| {
                let mut mean = gparams.mean().to_vec();
                mean[d] += delta;
                let p = GaussianParams::new(mean, gparams.std().to_vec()).unwrap();
                sup_elbo_estimate(&gold, &p, &decoder, seed, 0.01).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((numeric - g.d_mean[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn sup_elbo_rejects_non_projective_gold() {
        let gold = HardTree::from_heads(vec![2, 0, 1]).unwrap();
        let gparams = GaussianParams::standard(1);
        let decoder = LinearDecoder {
            tree_weight: Mat::zeros(4),
            z_weight: vec![0.0],
            offset: 0.0,
        };
        assert!(matches!(
            sup_elbo_estimate(&gold, &gparams, &decoder, Seed::new(1), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn semi_supervised_loss_without_unlabeled_data() {
        let mut rng = Seed::new(141).rng();
        let decoder = random_decoder(2, 1, &mut rng);
        let labeled = vec![LabeledExample {
            weights: ArcWeights::zeros(2).unwrap(),
            gold: HardTree::from_heads(vec![0, 1]).unwrap(),
            gaussian: GaussianParams::standard(1),
        }];
        let bundle = semi_supervised_loss(
            &labeled,
            &[],
            &decoder,
            Temperature::new(1.0).unwrap(),
            Seed::new(7),
            0.01,
            0.0,
        )
        .unwrap();
        assert_eq!(bundle.unsup_elbo, 0.0);
        assert!(bundle.unlabeled_grads.is_empty());
        // One labeled sentence over zero weights: -log q = log 3.
        assert!((bundle.discriminative - 3.0f64.ln()).abs() < 1e-10);
        assert!((bundle.total - (bundle.discriminative - bundle.sup_elbo)).abs() < 1e-12);
    }

    #[test]
    fn semi_supervised_loss_rejects_non_projective_gold() {
        let decoder = LinearDecoder {
            tree_weight: Mat::zeros(4),
            z_weight: vec![0.0],
            offset: 0.0,
        };
        let labeled = vec![LabeledExample {
            weights: ArcWeights::zeros(3).unwrap(),
            gold: HardTree::from_heads(vec![2, 0, 1]).unwrap(),
            gaussian: GaussianParams::standard(1),
        }];
        let err = semi_supervised_loss(
            &labeled,
            &[],
            &decoder,
            Temperature::new(1.0).unwrap(),
            Seed::new(7),
            0.0,
            0.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sentence 0"));
    }

    #[test]
    fn semi_supervised_gradients_pass_finite_differences() {
        let mut rng = Seed::new(151).rng();
        let decoder = random_decoder(3, 1, &mut rng);
        let tau = Temperature::new(1.0).unwrap();
        let seed = Seed::new(37);
        let make_labeled = |w: ArcWeights| LabeledExample {
            weights: w,
            gold: HardTree::from_heads(vec![0, 1, 1]).unwrap(),
            gaussian: GaussianParams::new(vec![0.2], vec![0.8]).unwrap(),
        };
        let make_unlabeled = |w: ArcWeights| UnlabeledExample {
            weights: w,
            gaussian: GaussianParams::new(vec![-0.1], vec![1.2]).unwrap(),
        };
        let w_l: Vec<ArcWeights> = (0..2).map(|_| random_weights(3, &mut rng)).collect();
        let w_u: Vec<ArcWeights> = (0..2).map(|_| random_weights(3, &mut rng)).collect();

        let eval = |w_l: &[ArcWeights], w_u: &[ArcWeights]| {
            let labeled: Vec<_> = w_l.iter().map(|w| make_labeled(w.clone())).collect();
            let unlabeled: Vec<_> = w_u.iter().map(|w| make_unlabeled(w.clone())).collect();
            semi_supervised_loss(&labeled, &unlabeled, &decoder, tau, seed, 0.01, 0.0)
                .unwrap()
        };
        let bundle = eval(&w_l, &w_u);

        // Spot-check the weight gradient of labeled sentence 0 and
        // unlabeled sentence 1 against central differences on the total.
        for (which, idx, analytic) in [
            ("labeled", 0usize, &bundle.labeled_grads[0].0),
            ("unlabeled", 1usize, &bundle.unlabeled_grads[1].0),
        ] {
            let base = if which == "labeled" { &w_l[0] } else { &w_u[1] };
            let report = grad_check(
                |probe| {
                    let mut l = w_l.clone();
                    let mut u = w_u.clone();
                    if which == "labeled" {
                        l[idx] = probe.clone();
                    } else {
                        u[idx] = probe.clone();
                    }
                    Ok(eval(&l, &u).total)
                },
                analytic,
                base,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-5,
                "{} {}: rel err {} at {:?}",
                which,
                idx,
                report.max_rel_err,
                report.worst
            );
        }

        // Gaussian gradient of unlabeled sentence 0.
        let g = &bundle.unlabeled_grads[0].1;
        let h = 1e-6;
        let eval_gauss = |delta_mean: f64| {
            let labeled: Vec<_> = w_l.iter().map(|w| make_labeled(w.clone())).collect();
            let mut unlabeled: Vec<_> = w_u.iter().map(|w| make_unlabeled(w.clone())).collect();
            unlabeled[0].gaussian =
                GaussianParams::new(vec![-0.1 + delta_mean], vec![1.2]).unwrap();
            semi_supervised_loss(&labeled, &unlabeled, &decoder, tau, seed, 0.01, 0.0)
                .unwrap()
                .total
        };
        let numeric = (eval_gauss(h) - eval_gauss(-h)) / (2.0 * h);
        assert!((numeric - g.d_mean[0]).abs() < 1e-6);
    }

    #[test]
    fn recovery_reaches_small_targets() {
        for s in 0..5 {
            let report = recover_tree_by_gradient(4, Seed::new(s), 300, 0.5).unwrap();
            assert!(report.recovered, "seed {} stalled", s);
        }
    }
}
