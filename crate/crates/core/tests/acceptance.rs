//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdicts print in order and the
//! long end-to-end experiment runs exactly once. Exits nonzero if any
//! criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fann_core::config::{Preset, RunConfig};
use fann_core::dataio::{
    decode_fant, decode_pgm, decode_ppm, encode_fant, encode_pgm, encode_ppm, generate_synthetic_dataset, Clutter,
    Sample, SynthConfig,
};
use fann_core::evaluator::{
    cmc, distance_matrix, evaluate_protocol, match_ranks, mean_average_precision, DistanceMatrix,
};
use fann_core::gradcheck::{gradcheck, LAYER_TOLERANCE, NETWORK_TOLERANCE};
use fann_core::losses::{simulate_triplet_dynamics, DynamicsConfig, DynamicsRow, TripletLossKind};
use fann_core::net::{Network, NetworkConfig};
use fann_core::trainer::train;
use fann_core::{FannError, Tensor};

const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const DYNAMICS_TOLERANCE: f64 = 1e-9;
const DYNAMICS_INITS: u64 = 100;
const ORACLE_INSTANCES: u64 = 100;
const ORACLE_TOLERANCE: f64 = 1e-12;
const E2E_ITERATIONS: usize = 2000;
const E2E_MIN_TOP1: f64 = 0.90;
const E2E_MIN_MAP: f64 = 0.80;
const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_BUDGET: Duration = Duration::from_secs(600);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

type Outcome = Result<Verdict, Box<dyn std::error::Error>>;

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = NetworkConfig::desk();
    let (mut layer, mut term, mut network) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for seed in 0..GRADCHECK_SEEDS {
        let report = gradcheck(&cfg, seed)?;
        layer = layer.max(report.max_layer_error());
        term = term.max(report.max_term_error());
        network = network.max(report.network.max_rel_error);
        if !report.passed() {
            failures.push(seed);
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty()
        && layer < LAYER_TOLERANCE
        && term < LAYER_TOLERANCE
        && network < NETWORK_TOLERANCE
        && elapsed < GRADCHECK_BUDGET;
    Ok(Verdict::new(
        pass,
        format!(
            "{GRADCHECK_SEEDS} seeds, max rel err layers {layer:.2e} terms {term:.2e} (< {LAYER_TOLERANCE:e}), \
             network {network:.2e} (< {NETWORK_TOLERANCE:e}), failing seeds {failures:?}, {:.1}s (< {}s)",
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs()
        ),
    ))
}

fn gap(r: &DynamicsRow) -> f64 {
    (r.d13 - r.d23).abs()
}

/// Largest increase of `|d13 − d23|` between consecutive steps from the
/// first step with an active hinge on.
fn worst_gap_increase(rows: &[DynamicsRow], margin: f64) -> f64 {
    let Some(first) = rows.iter().position(|r| r.hinge_active(margin)) else {
        return f64::NEG_INFINITY;
    };
    rows[first..]
        .windows(2)
        .map(|w| gap(&w[1]) - gap(&w[0]))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn weight_dynamics() -> Outcome {
    // u + v over a real training run
    let dir = tempfile::tempdir()?;
    let samples = synthetic(dir.path(), 6, 2, Clutter::Light, 3)?;
    let mut run = RunConfig::preset(Preset::Desk);
    run.train.iterations = 300;
    let mut net = Network::build(&run.network)?;
    let outcome = train(&mut net, &samples, &run, None)?;
    let states = outcome.state.weights.len();
    let off_sum = outcome
        .state
        .weights
        .values()
        .filter(|w| w.u() + w.v() != 1.0)
        .count();
    let moved = outcome.state.weights.values().filter(|w| w.u() != run.network.init_u).count();

    let textual = DynamicsConfig::new(TripletLossKind::Symmetric);
    let rows = simulate_triplet_dynamics(&textual)?;
    let textual_worst = worst_gap_increase(&rows, textual.margin);
    let textual_sum_ok = rows.iter().all(|r| r.u + r.v == 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(0xd1a);
    let mut counterexample = None;
    for k in 0..DYNAMICS_INITS {
        let mut cfg = DynamicsConfig::new(TripletLossKind::Asymmetric);
        for p in &mut cfg.init {
            *p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        }
        let rows = simulate_triplet_dynamics(&cfg)?;
        let worst = worst_gap_increase(&rows, cfg.margin);
        if worst > DYNAMICS_TOLERANCE {
            counterexample = Some((k, worst));
            break;
        }
    }

    let pass = states > 0 && off_sum == 0 && textual_sum_ok && textual_worst <= DYNAMICS_TOLERANCE && counterexample.is_some();
    Ok(Verdict::new(
        pass,
        format!(
            "{states} triplet states after 300 iterations ({moved} moved), {off_sum} with u+v != 1; \
             textual max |d13-d23| increase {textual_worst:.2e} (<= {DYNAMICS_TOLERANCE:e}); \
             asymmetric counterexample {}",
            match counterexample {
                Some((k, w)) => format!("at init {k} (increase {w:.2e})"),
                None => format!("not found in {DYNAMICS_INITS} inits"),
            }
        ),
    ))
}

fn shape_fidelity() -> Outcome {
    let cfg = NetworkConfig::full();
    let net = Network::build(&cfg)?;
    let tap = net.tap_dims()?;
    let image = Tensor::from_fn(&[3, 229, 79], |i| (i % 251) as f64 / 251.0)?;
    let trace = net.forward(&image)?;
    let recon = trace.reconstruction.as_ref().map(|r| r.dims().to_vec()).unwrap_or_default();
    let slices: Vec<Vec<usize>> = trace
        .encoder_features
        .clone()
        .slice_height(cfg.parts)?
        .iter()
        .map(|t| t.dims().to_vec())
        .collect();
    let embedding = trace.ranking_embedding.len();

    // a decoder whose last stride no longer restores 229x79 must not build
    let mut broken = cfg.clone();
    if let Some(last) = broken.decoder.last_mut() {
        last.stride = (2, 2);
    }
    let rejects_decoder = matches!(Network::build(&broken), Err(FannError::Junction { .. }));
    let mut broken = cfg.clone();
    broken.parts = 40;
    let rejects_parts = Network::build(&broken).is_err();

    let pass = tap == [64, 36, 11]
        && recon == [3, 229, 79]
        && slices.len() == 4
        && slices.iter().all(|s| s == &[64, 9, 11])
        && embedding == 1200
        && cfg.embedding_dim() == 1200
        && rejects_decoder
        && rejects_parts;
    Ok(Verdict::new(
        pass,
        format!(
            "tap {tap:?}, reconstruction {recon:?}, slices {slices:?}, embedding {embedding}, \
             mis-sized decoder rejected {rejects_decoder}, 40 parts rejected {rejects_parts}"
        ),
    ))
}

fn oracle_ranks(dist: &DistanceMatrix, probe_ids: &[u32], gallery_ids: &[u32]) -> (Vec<usize>, Vec<f64>) {
    let mut ranks = Vec::new();
    let mut aps = Vec::new();
    for i in 0..dist.rows {
        let row = dist.row(i);
        let mut order: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        order.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let first = order.iter().position(|&(_, j)| gallery_ids[j] == probe_ids[i]).expect("match");
        ranks.push(first + 1);
        // precision at each relevant item by counting, without the sorted order
        let relevant: Vec<usize> = (0..dist.cols).filter(|&j| gallery_ids[j] == probe_ids[i]).collect();
        let at_or_before = |j: usize, set: &mut dyn Iterator<Item = usize>| {
            set.filter(|&k| (row[k], k) <= (row[j], j)).count() as f64
        };
        let ap = relevant
            .iter()
            .map(|&j| at_or_before(j, &mut relevant.iter().copied()) / at_or_before(j, &mut (0..dist.cols)))
            .sum::<f64>()
            / relevant.len() as f64;
        aps.push(ap);
    }
    (ranks, aps)
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Tensor::vector(v.into_iter().map(|x| x / n).collect()).expect("non-empty")
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let (mut worst_cmc, mut worst_map) = (0.0f64, 0.0f64);
    let mut rank_mismatches = 0;
    let mut non_monotone = 0;
    let mut order_mismatches = 0;
    let mut ties = 0;
    for instance in 0..ORACLE_INSTANCES {
        let probes = rng.random_range(1..=20);
        let gallery = rng.random_range(probes.max(2)..=80);
        let ids = rng.random_range(2..=gallery.min(30)) as u32;
        let mut gallery_ids: Vec<u32> = (0..gallery).map(|j| (j as u32) % ids).collect();
        gallery_ids.shuffle(&mut rng);
        let probe_ids: Vec<u32> = (0..probes).map(|_| gallery_ids[rng.random_range(0..gallery)]).collect();
        // every third instance draws from a coarse grid so ties occur
        let coarse = instance % 3 == 0;
        let data = (0..probes * gallery)
            .map(|_| {
                let d: f64 = rng.random_range(0.0..4.0);
                if coarse {
                    (d * 2.0).floor() / 2.0
                } else {
                    d
                }
            })
            .collect();
        let dist = DistanceMatrix {
            rows: probes,
            cols: gallery,
            data,
        };
        if coarse {
            ties += 1;
        }
        let (ranks, aps) = oracle_ranks(&dist, &probe_ids, &gallery_ids);
        if match_ranks(&dist, &probe_ids, &gallery_ids, None)? != ranks {
            rank_mismatches += 1;
        }
        let curve = cmc(&dist, &probe_ids, &gallery_ids, gallery)?;
        for (k, c) in curve.iter().enumerate() {
            let expected = ranks.iter().filter(|&&r| r <= k + 1).count() as f64 / probes as f64;
            worst_cmc = worst_cmc.max((c - expected).abs());
        }
        if curve.windows(2).any(|w| w[1] < w[0]) || (curve[gallery - 1] - 1.0).abs() > ORACLE_TOLERANCE {
            non_monotone += 1;
        }
        let map = mean_average_precision(&dist, &probe_ids, &gallery_ids)?;
        worst_map = worst_map.max((map - aps.iter().sum::<f64>() / probes as f64).abs());

        // distance order against cosine order on unit vectors
        let dim = rng.random_range(2..=32);
        let p: Vec<Tensor> = (0..probes).map(|_| unit_vector(dim, &mut rng)).collect();
        let g: Vec<Tensor> = (0..gallery).map(|_| unit_vector(dim, &mut rng)).collect();
        let dm = distance_matrix(&p, &g)?;
        for (i, pi) in p.iter().enumerate() {
            let row = dm.row(i);
            let mut by_dist: Vec<usize> = (0..gallery).collect();
            by_dist.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let cos: Vec<f64> = g.iter().map(|gj| pi.dot(gj).expect("same dim")).collect();
            let mut by_cos: Vec<usize> = (0..gallery).collect();
            by_cos.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
            if by_dist != by_cos {
                order_mismatches += 1;
            }
        }
    }
    let pass = rank_mismatches == 0
        && worst_cmc <= ORACLE_TOLERANCE
        && worst_map <= ORACLE_TOLERANCE
        && non_monotone == 0
        && order_mismatches == 0;
    Ok(Verdict::new(
        pass,
        format!(
            "{ORACLE_INSTANCES} instances ({ties} with ties): rank mismatches {rank_mismatches}, \
             max |cmc diff| {worst_cmc:.1e}, max |mAP diff| {worst_map:.1e} (<= {ORACLE_TOLERANCE:e}), \
             non-monotone curves {non_monotone}, distance/cosine order mismatches {order_mismatches}"
        ),
    ))
}

fn synthetic(dir: &Path, identities: usize, per_camera: usize, clutter: Clutter, seed: u64) -> Result<Vec<Sample>, FannError> {
    let mut cfg = SynthConfig::new(identities, per_camera, 2, 37, 13);
    cfg.clutter = clutter;
    cfg.seed = seed;
    generate_synthetic_dataset(&cfg, dir)?.manifest.load_samples()
}

struct E2eRun {
    top1: f64,
    map: f64,
    seconds: f64,
}

fn e2e_run(clutter: Clutter, zeta: f64, seed: u64) -> Result<E2eRun, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let samples = synthetic(dir.path(), 20, 4, clutter, seed)?;
    let mut run = RunConfig::preset(Preset::Desk);
    run.network.zeta = zeta;
    run.network.seed = seed;
    run.train.seed = seed;
    run.train.iterations = E2E_ITERATIONS;
    run.protocol.trials = 10;
    let mut net = Network::build(&run.network)?;
    train(&mut net, &samples, &run, None)?;
    let result = evaluate_protocol(&net, &samples, &run.protocol)?;
    Ok(E2eRun {
        top1: result.top1(),
        map: result.mean_map,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::preset(Preset::Desk).network;
    let main = e2e_run(Clutter::Light, cfg.zeta, 0)?;
    println!(
        "    light clutter, zeta {}: top-1 {:.3} mAP {:.3} ({:.0}s)",
        cfg.zeta, main.top1, main.map, main.seconds
    );
    let mut with_mask = Vec::new();
    let mut without = Vec::new();
    for seed in E2E_SEEDS {
        for (zeta, out) in [(cfg.zeta, &mut with_mask), (0.0, &mut without)] {
            let r = e2e_run(Clutter::Heavy, zeta, seed)?;
            println!(
                "    heavy clutter, zeta {zeta}, seed {seed}: top-1 {:.3} mAP {:.3} ({:.0}s)",
                r.top1, r.map, r.seconds
            );
            out.push(r.top1);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_mask, m_plain) = (mean(&with_mask), mean(&without));
    let elapsed = start.elapsed();
    let pass = main.top1 >= E2E_MIN_TOP1 && main.map >= E2E_MIN_MAP && m_plain < m_mask && elapsed < E2E_BUDGET;
    Ok(Verdict::new(
        pass,
        format!(
            "top-1 {:.3} (>= {E2E_MIN_TOP1}), mAP {:.3} (>= {E2E_MIN_MAP}); heavy clutter mean top-1 \
             zeta=0 {m_plain:.3} vs zeta={} {m_mask:.3} (need strictly lower); {:.0}s (< {}s)",
            main.top1,
            main.map,
            cfg.zeta,
            elapsed.as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    ))
}

fn tree(dir: &Path) -> std::io::Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside").to_path_buf();
                out.push((rel, fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn reproducibility() -> Outcome {
    let data = tempfile::tempdir()?;
    let samples = synthetic(data.path(), 5, 2, Clutter::Heavy, 11)?;
    let mut run = RunConfig::preset(Preset::Desk);
    run.train.iterations = 120;
    run.train.log_interval = 10;
    run.train.checkpoint_interval = 50;
    let mut trees = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir()?;
        let mut net = Network::build(&run.network)?;
        train(&mut net, &samples, &run, Some(out.path()))?;
        trees.push(tree(out.path())?);
    }
    let files = trees[0].len();
    let bytes: usize = trees[0].iter().map(|(_, b)| b.len()).sum();
    let differing: Vec<String> = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.display().to_string())
        .collect();
    let has_csv = trees[0].iter().any(|(p, _)| p.ends_with("metrics.csv"));
    let has_params = trees[0].iter().any(|(p, _)| p.extension().is_some_and(|e| e == "fant"));
    let pass = trees[0].len() == trees[1].len() && differing.is_empty() && has_csv && has_params;
    Ok(Verdict::new(
        pass,
        format!("{files} files, {bytes} bytes per run, differing {differing:?}"),
    ))
}

fn malformed(result: Result<Tensor, FannError>) -> bool {
    matches!(&result, Err(e @ FannError::Format { .. }) if e.to_string().contains("offset"))
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0);
    let path = Path::new("memory");
    let mut fant_ok = 0;
    let mut fant_bad = 0;
    for _ in 0..200 {
        let ndim = rng.random_range(1..=4);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.random_range(1..=5)).collect();
        // arbitrary finite bit patterns, subnormals and signed zeros included
        let t = Tensor::from_fn(&dims, |_| loop {
            let v = f64::from_bits(rng.random::<u64>());
            if v.is_finite() {
                break v;
            }
        })?;
        let back = decode_fant(&encode_fant(&t), path)?;
        let same = back.dims() == t.dims() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if same {
            fant_ok += 1;
        } else {
            fant_bad += 1;
        }
    }

    let mut pnm_bad = 0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let img = Tensor::from_fn(&[3, h, w], |_| f64::from(rng.random::<u8>()) / 255.0)?;
        let bytes = encode_ppm(&img)?;
        let back = decode_ppm(&bytes, path)?;
        if back != img || encode_ppm(&back)? != bytes {
            pnm_bad += 1;
        }
        let gray = Tensor::from_fn(&[1, h, w], |_| f64::from(rng.random::<u8>()) / 255.0)?;
        let bytes = encode_pgm(&gray)?;
        let back = decode_pgm(&bytes, path)?;
        if back != gray || encode_pgm(&back)? != bytes {
            pnm_bad += 1;
        }
    }

    let good = encode_fant(&Tensor::from_fn(&[2, 3], |i| i as f64)?);
    let mut bad_fant: Vec<(&str, Vec<u8>)> = vec![
        ("empty", Vec::new()),
        ("truncated header", good[..7].to_vec()),
        ("truncated payload", good[..good.len() - 3].to_vec()),
        ("trailing bytes", [good.clone(), vec![0; 8]].concat()),
    ];
    let mut patched = |name, at: usize, byte: u8| {
        let mut b = good.clone();
        b[at] = byte;
        bad_fant.push((name, b));
    };
    patched("bad magic", 0, b'X');
    patched("bad version", 4, 9);
    patched("bad dtype", 8, 2);
    patched("zero rank", 9, 0);
    patched("zero extent", 10, 0);
    let mut nan = good.clone();
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    bad_fant.push(("non-finite payload", nan));
    let fant_rejections: Vec<&str> = bad_fant
        .iter()
        .filter(|(_, b)| !malformed(decode_fant(b, path)))
        .map(|(n, _)| *n)
        .collect();

    let bad_pnm: Vec<(&str, &[u8], bool)> = vec![
        ("wrong magic", b"P3\n2 2\n255\n", true),
        ("missing height", b"P6\n2\n", true),
        ("maxval 65535", b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", true),
        ("truncated pixels", b"P6\n2 2\n255\n\x00\x01\x02", true),
        ("no separator", b"P5\n1 1\n255", false),
        ("zero width", b"P5\n0 1\n255\n", false),
    ];
    let pnm_rejections: Vec<&str> = bad_pnm
        .iter()
        .filter(|(_, b, colour)| {
            let r = if *colour { decode_ppm(b, path) } else { decode_pgm(b, path) };
            !malformed(r)
        })
        .map(|(n, _, _)| *n)
        .collect();

    let pass = fant_bad == 0 && pnm_bad == 0 && fant_rejections.is_empty() && pnm_rejections.is_empty();
    Ok(Verdict::new(
        pass,
        format!(
            "FANT {fant_ok}/{} bit-exact, PPM/PGM {pnm_bad} mismatches over 100 images, \
             malformed inputs not rejected with an offset: FANT {fant_rejections:?}, PNM {pnm_rejections:?}",
            fant_ok + fant_bad
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("weight dynamics", weight_dynamics),
        ("shape fidelity", shape_fidelity),
        ("evaluation oracle equivalence", oracle_equivalence),
        ("end-to-end synthetic experiment", end_to_end),
        ("reproducibility", reproducibility),
        ("format round trips", format_round_trips),
    ];
    let only: Option<usize> = std::env::var("FANN_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
