//! Central finite-difference checks of every hand-derived gradient.
//!
//! Three levels are checked: each layer on its own (against a random linear
//! functional of its output), each loss term on its own, and the complete
//! objective `E` with respect to sampled parameters of every layer.
//! Coordinates whose perturbation flips a ReLU or max-pool branch are
//! skipped, since the derivative does not exist there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::Sample;
use crate::error::{FannError, Result};
use crate::layers::{Layer, LayerContext, LayerKind};
use crate::losses::{
    hinge_argument, local_regression_grad, local_regression_loss, parameter_regularizer, replicate_channels,
    squared_distance, triplet_grad_slices, GaussianKernel,
};
use crate::net::{Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::trainer::{evaluate_batch, Objective, Triplet, TripletBatch};

/// Bound for individual layers and loss terms.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Bound for the composed objective.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

const LAYER_STEP: f64 = 1e-5;
const NETWORK_STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
/// Coordinates probed per tensor in layer and loss checks.
const PROBES: usize = 48;
/// Weight and bias coordinates probed per layer in the network check.
const NETWORK_PROBES: (usize, usize) = (4, 1);

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a kink.
    pub skipped: usize,
}

impl CheckResult {
    fn new(name: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        // NaN must not hide behind max()
        self.max_rel_error = if e.is_nan() { f64::INFINITY } else { self.max_rel_error.max(e) };
        self.checked += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub layers: Vec<CheckResult>,
    pub terms: Vec<CheckResult>,
    pub network: CheckResult,
}

impl GradcheckReport {
    pub fn max_layer_error(&self) -> f64 {
        self.layers.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_term_error(&self) -> f64 {
        self.terms.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_layer_error() < LAYER_TOLERANCE
            && self.max_term_error() < LAYER_TOLERANCE
            && self.network.max_rel_error < NETWORK_TOLERANCE
            && self.network.checked > 0
    }

    /// All checks, layers first, then loss terms, then the network.
    pub fn all(&self) -> impl Iterator<Item = &CheckResult> {
        self.layers.iter().chain(&self.terms).chain(std::iter::once(&self.network))
    }
}

fn normal_tensor<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Tensor> {
    Tensor::from_fn(dims, |_| StandardNormal.sample(rng))
}

/// Up to `n` distinct indices below `len`, in random order.
fn probe_indices<R: Rng>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        sample(rng, len, n).into_vec()
    }
}

/// Whether two contexts of the same piecewise-linear layer took different
/// branches.
fn branch_changed(kind: LayerKind, a: &LayerContext, b: &LayerContext) -> bool {
    match (kind, a, b) {
        (LayerKind::Relu, LayerContext::Input(x), LayerContext::Input(y)) => {
            x.data().iter().zip(y.data()).any(|(p, q)| (*p > 0.0) != (*q > 0.0))
        }
        (LayerKind::MaxPool, LayerContext::Pool(x), LayerContext::Pool(y)) => x.winners != y.winners,
        _ => false,
    }
}

/// Checks one layer against `L(x) = Σ r ⊙ layer(x)` for a random `r`.
pub fn check_layer<R: Rng>(name: &str, layer: &Layer, input_dims: &[usize], rng: &mut R) -> Result<CheckResult> {
    let x = normal_tensor(input_dims, rng)?;
    let (y, ctx) = layer.forward(&x)?;
    let r = normal_tensor(y.dims(), rng)?.scale(1.0 / (y.len() as f64).sqrt());
    let objective = |layer: &Layer, x: &Tensor| -> Result<(f64, LayerContext)> {
        let (y, ctx) = layer.forward(x)?;
        Ok((y.dot(&r)?, ctx))
    };

    let mut grads = layer
        .params
        .as_ref()
        .map(|p| (Tensor::zeros_like(&p.weights), Tensor::zeros_like(&p.biases)));
    let gx = layer.backward_into(&ctx, &r, grads.as_mut().map(|(w, b)| (w, b)))?;

    let mut result = CheckResult::new(name);
    for i in probe_indices(x.len(), PROBES, rng) {
        let mut xp = x.clone();
        xp.data_mut()[i] += LAYER_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= LAYER_STEP;
        let (fp, cp) = objective(layer, &xp)?;
        let (fm, cm) = objective(layer, &xm)?;
        if branch_changed(layer.spec.kind, &cp, &ctx) || branch_changed(layer.spec.kind, &cm, &ctx) {
            result.skipped += 1;
            continue;
        }
        result.record(gx.data()[i], (fp - fm) / (2.0 * LAYER_STEP));
    }

    if let Some((gw, gb)) = &grads {
        for (which, g) in [(0, gw), (1, gb)] {
            for i in probe_indices(g.len(), PROBES, rng) {
                let probe = |delta: f64| -> Result<f64> {
                    let mut l = layer.clone();
                    let p = l.params.as_mut().expect("parameterized layer");
                    let t = if which == 0 { &mut p.weights } else { &mut p.biases };
                    t.data_mut()[i] += delta;
                    Ok(objective(&l, &x)?.0)
                };
                let numeric = (probe(LAYER_STEP)? - probe(-LAYER_STEP)?) / (2.0 * LAYER_STEP);
                result.record(g.data()[i], numeric);
            }
        }
    }
    Ok(result)
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    let v = normal_tensor(&[dim], rng)?;
    let n = v.norm();
    Ok(v.data().iter().map(|x| x / n).collect())
}

/// Hinge loss gradient on random unit embeddings with an active hinge.
pub fn check_triplet_term<R: Rng>(dim: usize, margin: f64, rng: &mut R) -> Result<CheckResult> {
    let f = [random_unit(dim, rng)?, random_unit(dim, rng)?, random_unit(dim, rng)?];
    let u: f64 = rng.random_range(0.0..=1.0);
    let v = 1.0 - u;
    let hinge = |f: &[Vec<f64>; 3], m: f64| {
        let (d12, d13, d23) = (
            squared_distance(&f[0], &f[1]),
            squared_distance(&f[0], &f[2]),
            squared_distance(&f[1], &f[2]),
        );
        hinge_argument(d12, d13, d23, u, v, m)
    };
    let loss = |f: &[Vec<f64>; 3], m: f64| hinge(f, m).max(0.0);
    // lift the margin until the hinge is comfortably active
    let margin = margin.max(0.5 - hinge(&f, 0.0));
    let (g1, g2, g3) = triplet_grad_slices(&f[0], &f[1], &f[2], u, v, margin);
    let analytic = [g1, g2, g3];

    let mut result = CheckResult::new("L1");
    for k in 0..3 {
        for i in probe_indices(dim, PROBES, rng) {
            let mut fp = f.clone();
            fp[k][i] += LAYER_STEP;
            let mut fm = f.clone();
            fm[k][i] -= LAYER_STEP;
            let numeric = (loss(&fp, margin) - loss(&fm, margin)) / (2.0 * LAYER_STEP);
            result.record(analytic[k][i], numeric);
        }
    }
    Ok(result)
}

/// Local regression gradient on a random reconstruction and binary mask.
pub fn check_regression_term<R: Rng>(
    name: &str,
    dims: [usize; 3],
    kernel: &GaussianKernel,
    rng: &mut R,
) -> Result<CheckResult> {
    let [c, h, w] = dims;
    let recon = Tensor::from_fn(&dims, |_| rng.random_range(-0.5..1.5))?;
    let mask = Tensor::from_fn(&[1, h, w], |_| f64::from(u8::from(rng.random_bool(0.4))))?;
    let mask = replicate_channels(&mask, c)?;
    let analytic = local_regression_grad(&recon, &mask, kernel)?;
    let mut result = CheckResult::new(name);
    for i in probe_indices(recon.len(), PROBES * 4, rng) {
        let mut p = recon.clone();
        p.data_mut()[i] += LAYER_STEP;
        let mut m = recon.clone();
        m.data_mut()[i] -= LAYER_STEP;
        let numeric = (local_regression_loss(&p, &mask, kernel)? - local_regression_loss(&m, &mask, kernel)?)
            / (2.0 * LAYER_STEP);
        result.record(analytic.data()[i], numeric);
    }
    Ok(result)
}

/// Regularizer gradient on the parameters of `net`.
pub fn check_regularizer_term<R: Rng>(net: &Network, rng: &mut R) -> Result<CheckResult> {
    let sets: Vec<_> = net.param_sets().cloned().collect();
    let (_, grads) = parameter_regularizer(&sets);
    let mut result = CheckResult::new("R");
    for (k, (gw, _)) in grads.iter().enumerate() {
        for i in probe_indices(gw.len(), PROBES / 8, rng) {
            let probe = |delta: f64| {
                let mut s = sets.clone();
                s[k].weights.data_mut()[i] += delta;
                parameter_regularizer(&s).0
            };
            let numeric = (probe(LAYER_STEP) - probe(-LAYER_STEP)) / (2.0 * LAYER_STEP);
            result.record(gw.data()[i], numeric);
        }
    }
    Ok(result)
}

fn synthetic_triplet<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Result<Vec<Sample>> {
    let [c, h, w] = cfg.input_shape;
    let labels = [(0, 0), (0, 1), (1, 0)];
    labels
        .iter()
        .map(|&(id, cam)| {
            let image = Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))?;
            let mask = Tensor::from_fn(&[1, h, w], |_| f64::from(u8::from(rng.random_bool(0.4))))?;
            Sample::new(image, mask, id, cam)
        })
        .collect()
}

fn patterns(net: &Network, samples: &[Sample]) -> Result<Vec<u64>> {
    samples
        .iter()
        .map(|s| Ok(net.forward_with(&s.image, true)?.activation_pattern()))
        .collect()
}

/// Gradient of the full objective, with every term switched on, at sampled
/// coordinates of every parameterized layer.
///
/// The batch holds two triplets over three random images so that gradient
/// accumulation across triplets and shared images is exercised. The margin
/// is raised until both hinges are active.
pub fn check_network<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Result<CheckResult> {
    let mut net = Network::build(cfg)?;
    let samples = synthetic_triplet(cfg, rng)?;
    let batch = TripletBatch {
        triplets: vec![
            Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            },
            Triplet {
                anchor: 1,
                positive: 0,
                negative: 2,
            },
        ],
    };
    let weights = [(cfg.init_u, cfg.init_v), (0.3, 0.7)];
    let mut obj = Objective::from_config(cfg)?;
    // squared distances between unit vectors never exceed 4
    obj.margin = obj.margin.max(4.5);

    let (_, grads) = evaluate_batch(&net, &samples, &batch, &weights, &obj, true, true)?;
    let grads = grads.ok_or_else(|| FannError::InvalidArgument("gradient was not computed".into()))?;
    let base = patterns(&net, &samples)?;
    let names: Vec<String> = net.named_params().map(|(n, _)| n.to_string()).collect();

    let mut result = CheckResult::new("network");
    for (name, (gw, gb)) in names.iter().zip(grads.iter()) {
        for (which, g, n) in [(0, gw, NETWORK_PROBES.0), (1, gb, NETWORK_PROBES.1)] {
            // prefer coordinates the objective actually depends on
            let order = probe_indices(g.len(), g.len(), rng);
            let mut picked: Vec<usize> = order.iter().copied().filter(|&i| g.data()[i] != 0.0).take(n).collect();
            if picked.is_empty() {
                picked = order.into_iter().take(n).collect();
            }
            for i in picked {
                let mut probe = |delta: f64| -> Result<(f64, Vec<u64>)> {
                    let p = net.params_mut(name).expect("named layer");
                    let t = if which == 0 { &mut p.weights } else { &mut p.biases };
                    let old = t.data()[i];
                    t.data_mut()[i] = old + delta;
                    let out = evaluate_batch(&net, &samples, &batch, &weights, &obj, true, false)
                        .and_then(|(terms, _)| Ok((terms.e, patterns(&net, &samples)?)));
                    let p = net.params_mut(name).expect("named layer");
                    let t = if which == 0 { &mut p.weights } else { &mut p.biases };
                    t.data_mut()[i] = old;
                    out
                };
                let (ep, pp) = probe(NETWORK_STEP)?;
                let (em, pm) = probe(-NETWORK_STEP)?;
                if pp != base || pm != base {
                    result.skipped += 1;
                    continue;
                }
                result.record(g.data()[i], (ep - em) / (2.0 * NETWORK_STEP));
            }
        }
    }
    Ok(result)
}

/// Runs every check for one seed. The seed drives both the network
/// initialization and the random probes.
pub fn gradcheck(cfg: &NetworkConfig, seed: u64) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let net = Network::build(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut layers = Vec::new();
    for (name, layer, dims) in net.layers_with_inputs()? {
        layers.push(check_layer(name, layer, &dims, &mut rng)?);
    }

    let kernel = GaussianKernel::new(cfg.kernel_sigma, cfg.kernel_rho, cfg.kernel_normalized)?;
    let wide = GaussianKernel::new(1.0, cfg.kernel_rho, cfg.kernel_normalized)?;
    let terms = vec![
        check_triplet_term(cfg.embedding_dim(), cfg.margin, &mut rng)?,
        check_regression_term("L2", cfg.input_shape, &kernel, &mut rng)?,
        check_regression_term("L2 (sigma=1)", cfg.input_shape, &wide, &mut rng)?,
        check_regularizer_term(&net, &mut rng)?,
    ];
    let network = check_network(&cfg, &mut rng)?;
    Ok(GradcheckReport {
        seed,
        layers,
        terms,
        network,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn desk_config_passes_one_seed() {
        let report = gradcheck(&NetworkConfig::desk(), 3).unwrap();
        for c in report.all() {
            assert!(c.checked > 0, "{} checked nothing", c.name);
        }
        assert!(report.passed(), "{report:#?}");
    }
}
