//! Triplet sampling and mini-batch gradient descent on
//! `E = mean over triplets of (L1 + ζ·L2) + η·R`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::dataio::Sample;
use crate::error::{FannError, Result};
use crate::losses::{
    hinge_argument, local_regression_grad, local_regression_loss, parameter_regularizer, replicate_channels,
    squared_distance, triplet_grad_slices, AdaptiveWeightState, GaussianKernel, TripletLossKind,
};
use crate::net::{ForwardTrace, Gradients, Network, NetworkConfig};
use crate::tensor::Tensor;

/// Indices into the sample list. Also the key of the persistent weight map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    /// Distinct sample indices in ascending order.
    pub fn images(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .triplets
            .iter()
            .flat_map(|t| [t.anchor, t.positive, t.negative])
            .collect();
        set.into_iter().collect()
    }
}

/// Identity and camera of each sample, grouped for sampling.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    labels: Vec<(u32, u32)>,
    /// Identities with at least two images, with their sample indices.
    feasible: Vec<(u32, Vec<usize>)>,
    cross_camera: bool,
}

impl TripletSampler {
    /// `labels[i]` is the `(identity, camera)` of sample `i`.
    pub fn new(labels: Vec<(u32, u32)>, cross_camera: bool) -> Result<Self> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &(id, _)) in labels.iter().enumerate() {
            groups.entry(id).or_default().push(i);
        }
        let mut feasible = Vec::new();
        for (id, members) in &groups {
            if members.len() < 2 {
                warn!("identity {id} has a single image and cannot anchor a triplet; skipped");
            } else {
                feasible.push((*id, members.clone()));
            }
        }
        if feasible.is_empty() || groups.len() < 2 {
            return Err(FannError::Dataset(format!(
                "no triplet can be formed from {} images of {} identities",
                labels.len(),
                groups.len()
            )));
        }
        Ok(TripletSampler {
            labels,
            feasible,
            cross_camera,
        })
    }

    pub fn from_samples(samples: &[Sample], cross_camera: bool) -> Result<Self> {
        Self::new(samples.iter().map(|s| (s.identity, s.camera)).collect(), cross_camera)
    }

    /// Uniform identity, then two distinct images of it (from different
    /// cameras when possible), then a uniform image of another identity.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> TripletBatch {
        let n = self.labels.len();
        let triplets = (0..batch_size)
            .map(|_| {
                let (id, members) = &self.feasible[rng.random_range(0..self.feasible.len())];
                let anchor = members[rng.random_range(0..members.len())];
                let cam = self.labels[anchor].1;
                let others: Vec<usize> = members.iter().copied().filter(|&m| m != anchor).collect();
                let cross: Vec<usize> = if self.cross_camera {
                    others.iter().copied().filter(|&m| self.labels[m].1 != cam).collect()
                } else {
                    Vec::new()
                };
                let pool = if cross.is_empty() { &others } else { &cross };
                let positive = pool[rng.random_range(0..pool.len())];
                let negative = loop {
                    let k = rng.random_range(0..n);
                    if self.labels[k].0 != *id {
                        break k;
                    }
                };
                Triplet {
                    anchor,
                    positive,
                    negative,
                }
            })
            .collect();
        TripletBatch { triplets }
    }
}

/// Scalar terms of the objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Terms {
    pub e: f64,
    /// Mean hinge loss over triplets.
    pub l1: f64,
    /// Mean over triplets of the summed reconstruction loss of all three
    /// images. Zero when reconstructions were not evaluated.
    pub l2: f64,
    pub r: f64,
    pub mean_u: f64,
    pub mean_v: f64,
    /// Fraction of triplets with an active hinge.
    pub active: f64,
}

/// Settings shared by objective evaluations.
#[derive(Debug, Clone)]
pub struct Objective {
    pub margin: f64,
    pub zeta: f64,
    pub eta: f64,
    pub kernel: GaussianKernel,
}

impl Objective {
    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        Ok(Objective {
            margin: cfg.margin,
            zeta: cfg.zeta,
            eta: cfg.eta,
            kernel: GaussianKernel::new(cfg.kernel_sigma, cfg.kernel_rho, cfg.kernel_normalized)?,
        })
    }
}

fn non_finite(term: &str) -> FannError {
    FannError::NonFinite { term: term.into() }
}

/// Evaluates `E` on a batch with fixed per-triplet weights `(u, v)` and,
/// when `want_grads` is set, its gradient with respect to every parameter.
///
/// `E = (Σ_i (L1_i + ζ·L2_i) + η·R) / B` for a batch of `B` triplets, so the
/// regularizer gradient `2ηΩ` is averaged together with the loss gradients.
///
/// Reconstructions are evaluated when `decode` is set or `ζ > 0`.
pub fn evaluate_batch(
    net: &Network,
    samples: &[Sample],
    batch: &TripletBatch,
    weights: &[(f64, f64)],
    obj: &Objective,
    decode: bool,
    want_grads: bool,
) -> Result<(Terms, Option<Gradients>)> {
    let traces = forward_images(net, samples, &batch.images(), decode || obj.zeta > 0.0)?;
    terms_and_grads(net, samples, batch, weights, obj, &traces, want_grads)
}

fn forward_images(
    net: &Network,
    samples: &[Sample],
    images: &[usize],
    decode: bool,
) -> Result<BTreeMap<usize, ForwardTrace>> {
    let traces: Vec<Result<ForwardTrace>> = images
        .par_iter()
        .map(|&i| net.forward_with(&samples[i].image, decode))
        .collect();
    images.iter().copied().zip(traces).map(|(i, t)| Ok((i, t?))).collect()
}

fn terms_and_grads(
    net: &Network,
    samples: &[Sample],
    batch: &TripletBatch,
    weights: &[(f64, f64)],
    obj: &Objective,
    traces: &BTreeMap<usize, ForwardTrace>,
    want_grads: bool,
) -> Result<(Terms, Option<Gradients>)> {
    let b = batch.triplets.len();
    if b == 0 || weights.len() != b {
        return Err(FannError::InvalidArgument(format!(
            "batch of {b} triplets with {} weight pairs",
            weights.len()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let dim = net.embedding_dim();

    // per image: how often it occurs and the accumulated embedding gradient
    let mut emb_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut l1_sum = 0.0;
    let mut active = 0usize;
    let (mut su, mut sv) = (0.0, 0.0);
    for (t, &(u, v)) in batch.triplets.iter().zip(weights) {
        let f = |i: usize| traces[&i].ranking_embedding.data();
        let (f1, f2, f3) = (f(t.anchor), f(t.positive), f(t.negative));
        let (d12, d13, d23) = (squared_distance(f1, f2), squared_distance(f1, f3), squared_distance(f2, f3));
        let hinge = hinge_argument(d12, d13, d23, u, v, obj.margin);
        l1_sum += hinge.max(0.0);
        su += u;
        sv += v;
        for i in [t.anchor, t.positive, t.negative] {
            *counts.entry(i).or_insert(0) += 1;
        }
        if hinge > 0.0 {
            active += 1;
            if want_grads {
                let (g1, g2, g3) = triplet_grad_slices(f1, f2, f3, u, v, obj.margin);
                for (i, g) in [(t.anchor, g1), (t.positive, g2), (t.negative, g3)] {
                    let acc = emb_grads.entry(i).or_insert_with(|| vec![0.0; dim]);
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x * inv_b;
                    }
                }
            }
        }
    }

    let images: Vec<usize> = counts.keys().copied().collect();
    let decoded = traces.values().all(|t| t.reconstruction.is_some());
    let per_image: Vec<Result<(f64, Option<Gradients>)>> = images
        .par_iter()
        .map(|&i| {
            let trace = &traces[&i];
            let mut l2 = 0.0;
            let mut g_rec = None;
            if decoded {
                let recon = trace.reconstruction.as_ref().expect("decoded");
                let mask = replicate_channels(&samples[i].mask, recon.dims()[0])?;
                l2 = local_regression_loss(recon, &mask, &obj.kernel)?;
                if want_grads && obj.zeta > 0.0 {
                    let scale = obj.zeta * counts[&i] as f64 * inv_b;
                    g_rec = Some(local_regression_grad(recon, &mask, &obj.kernel)?.scale(scale));
                }
            }
            if !want_grads {
                return Ok((l2, None));
            }
            let g_emb = emb_grads.get(&i).map(|g| Tensor::vector(g.clone())).transpose()?;
            let mut grads = net.zero_gradients();
            if g_emb.is_some() || g_rec.is_some() {
                net.backward_into(trace, g_emb.as_ref(), g_rec.as_ref(), &mut grads)?;
            }
            Ok((l2, Some(grads)))
        })
        .collect();

    let mut l2_sum = 0.0;
    let mut total = want_grads.then(|| net.zero_gradients());
    for (i, r) in images.iter().zip(per_image) {
        let (l2, g) = r?;
        l2_sum += l2 * counts[i] as f64;
        if let (Some(acc), Some(g)) = (total.as_mut(), g) {
            acc.add_assign(&g)?;
        }
    }

    let (r, reg_grads) = parameter_regularizer(net.param_sets());
    if let Some(acc) = total.as_mut() {
        if obj.eta > 0.0 {
            // the regularizer joins the batch sum before averaging
            for ((gw, gb), (rw, rb)) in acc.iter_mut().zip(&reg_grads) {
                gw.axpy(obj.eta * inv_b, rw)?;
                gb.axpy(obj.eta * inv_b, rb)?;
            }
        }
    }

    let l1 = l1_sum * inv_b;
    let l2 = l2_sum * inv_b;
    let terms = Terms {
        e: l1 + obj.zeta * l2 + obj.eta * r * inv_b,
        l1,
        l2,
        r,
        mean_u: su * inv_b,
        mean_v: sv * inv_b,
        active: active as f64 * inv_b,
    };
    for (name, v) in [("L1", terms.l1), ("L2", terms.l2), ("R", terms.r), ("E", terms.e)] {
        if !v.is_finite() {
            return Err(non_finite(name));
        }
    }
    if let Some(g) = &total {
        if !g.all_finite() {
            return Err(non_finite("parameter gradient"));
        }
    }
    Ok((terms, total))
}

/// Optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub weights: BTreeMap<Triplet, AdaptiveWeightState>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            iteration: 0,
            weights: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `τ₀ · decay^⌊h / interval⌋`.
    pub fn learning_rate(&self, cfg: &TrainConfig) -> f64 {
        learning_rate_at(cfg, self.iteration)
    }

    /// Current `(u, v)` of each triplet, without updating.
    pub fn weights_for(&self, batch: &TripletBatch, net: &NetworkConfig, kind: TripletLossKind) -> Vec<(f64, f64)> {
        batch
            .triplets
            .iter()
            .map(|t| match kind {
                TripletLossKind::Asymmetric => (1.0, 0.0),
                TripletLossKind::Symmetric => self
                    .weights
                    .get(t)
                    .map_or((net.init_u, net.init_v), |w| (w.u(), w.v())),
            })
            .collect()
    }
}

pub fn learning_rate_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi((iteration / cfg.lr_decay_interval) as i32)
}

/// One iteration: forward the batch, update the per-triplet weights from the
/// current distances, then take a gradient step on `E` evaluated with the
/// updated weights. Returns the terms at the pre-step parameters.
pub fn train_step(
    net: &mut Network,
    samples: &[Sample],
    batch: &TripletBatch,
    state: &mut TrainState,
    cfg: &TrainConfig,
    obj: &Objective,
    decode: bool,
) -> Result<Terms> {
    let net_cfg = net.config().clone();
    let traces = forward_images(net, samples, &batch.images(), decode || obj.zeta > 0.0)?;

    if cfg.loss_kind == TripletLossKind::Symmetric {
        for t in &batch.triplets {
            let f = |i: usize| traces[&i].ranking_embedding.data();
            let (f1, f2, f3) = (f(t.anchor), f(t.positive), f(t.negative));
            let w = match state.weights.get_mut(t) {
                Some(w) => w,
                None => {
                    let fresh = AdaptiveWeightState::new(net_cfg.init_u, net_cfg.init_v, net_cfg.gamma, net_cfg.sign_mode)?;
                    state.weights.entry(*t).or_insert(fresh)
                }
            };
            w.update(squared_distance(f1, f2), squared_distance(f1, f3), squared_distance(f2, f3), obj.margin);
        }
    }
    let weights = state.weights_for(batch, &net_cfg, cfg.loss_kind);
    let (terms, grads) = terms_and_grads(net, samples, batch, &weights, obj, &traces, true)?;
    let grads = grads.expect("gradients requested");
    net.apply_update(&grads, state.learning_rate(cfg))?;
    state.iteration += 1;
    Ok(terms)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub terms: Terms,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "iter,E,L1,L2,R,mean_u,mean_v,lr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let t = &r.terms;
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, t.e, t.l1, t.l2, t.r, t.mean_u, t.mean_v, r.lr
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub state: TrainState,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "state.txt";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

fn state_text(state: &TrainState, lr: f64, last: Option<&MetricsRow>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "iteration = {}", state.iteration);
    let _ = writeln!(s, "lr = {lr:e}");
    let _ = writeln!(s, "rng_seed = {}", hex(&state.rng.get_seed()));
    let _ = writeln!(s, "rng_stream = {}", state.rng.get_stream());
    let _ = writeln!(s, "rng_word_pos = {}", state.rng.get_word_pos());
    let _ = writeln!(s, "weight_states = {}", state.weights.len());
    if let Some(m) = last {
        let t = &m.terms;
        let _ = writeln!(s, "last_iter = {}", m.iteration);
        let _ = writeln!(s, "E = {:e}\nL1 = {:e}\nL2 = {:e}\nR = {:e}", t.e, t.l1, t.l2, t.r);
        let _ = writeln!(s, "mean_u = {:e}\nmean_v = {:e}", t.mean_u, t.mean_v);
    }
    s
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_checkpoint(dir: &Path, net: &Network, run: &RunConfig, state: &TrainState, last: Option<&MetricsRow>) -> Result<()> {
    save_checkpoint(dir, net, run)?;
    let path = dir.join(STATE_FILE);
    fs::write(&path, state_text(state, state.learning_rate(&run.train), last)).map_err(|e| FannError::io(&path, e))
}

/// Runs `run.train.iterations` steps. Metrics are logged at every multiple of
/// `log_interval` below the iteration count plus once after the last step,
/// on a freshly sampled batch. With an output directory, writes
/// `metrics.csv`, periodic checkpoints under `checkpoints/` and the final
/// checkpoint under `checkpoint/`.
pub fn train(net: &mut Network, samples: &[Sample], run: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = &run.train;
    cfg.validate()?;
    let obj = Objective::from_config(net.config())?;
    let sampler = TripletSampler::from_samples(samples, cfg.cross_camera)?;
    let mut state = TrainState::new(cfg.seed);
    let mut metrics = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| FannError::io(dir, e))?;
    }

    for h in 0..cfg.iterations {
        let batch = sampler.sample(cfg.batch_size, &mut state.rng);
        let lr = state.learning_rate(cfg);
        let logged = h % cfg.log_interval == 0;
        let terms = train_step(net, samples, &batch, &mut state, cfg, &obj, logged)?;
        if logged {
            info!(
                "iter {h}: E={:.5} L1={:.5} L2={:.5} R={:.3} active={:.2} lr={lr:e}",
                terms.e, terms.l1, terms.l2, terms.r, terms.active
            );
            metrics.push(MetricsRow {
                iteration: h,
                terms,
                lr,
            });
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0 && state.iteration.is_multiple_of(cfg.checkpoint_interval) {
                let sub: PathBuf = dir.join("checkpoints").join(format!("iter_{:07}", state.iteration));
                write_checkpoint(&sub, net, run, &state, metrics.last())?;
            }
        }
    }

    let batch = sampler.sample(cfg.batch_size, &mut state.rng);
    let weights = state.weights_for(&batch, net.config(), cfg.loss_kind);
    let (terms, _) = evaluate_batch(net, samples, &batch, &weights, &obj, true, false)?;
    metrics.push(MetricsRow {
        iteration: state.iteration,
        terms,
        lr: state.learning_rate(cfg),
    });

    if let Some(dir) = out_dir {
        let path = dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&metrics)).map_err(|e| FannError::io(&path, e))?;
        write_checkpoint(&dir.join(FINAL_CHECKPOINT), net, run, &state, metrics.last())?;
    }
    Ok(TrainOutcome { metrics, state })
}
