//! Ranking evaluation: distance matrices, CMC curves, mAP and the repeated
//! single-shot protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ProtocolConfig;
use crate::dataio::Sample;
use crate::error::{FannError, Result};
use crate::losses::{squared_distance, UNIT_NORM_TOLERANCE};
use crate::net::Network;
use crate::tensor::Tensor;

/// Row-major `probes × gallery` matrix of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// `‖p_i − g_j‖²` for unit-norm embeddings. On the unit sphere this equals
/// `2 − 2·cos`, so it ranks exactly as descending cosine similarity.
pub fn distance_matrix(probes: &[Tensor], gallery: &[Tensor]) -> Result<DistanceMatrix> {
    let dim = probes.first().or(gallery.first()).map_or(0, Tensor::len);
    for (what, set) in [("probe", probes), ("gallery", gallery)] {
        for (i, t) in set.iter().enumerate() {
            if t.len() != dim {
                return Err(FannError::ShapeMismatch {
                    op: "distance_matrix",
                    left: t.dims().to_vec(),
                    right: vec![dim],
                });
            }
            if (t.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(FannError::InvalidArgument(format!(
                    "{what} embedding {i} has norm {}, expected 1",
                    t.norm()
                )));
            }
        }
    }
    let mut data = Vec::with_capacity(probes.len() * gallery.len());
    for p in probes {
        for g in gallery {
            data.push(squared_distance(p.data(), g.data()));
        }
    }
    Ok(DistanceMatrix {
        rows: probes.len(),
        cols: gallery.len(),
        data,
    })
}

/// Optional per-pair exclusion: `true` removes gallery item `j` from the
/// ranking of probe `i`.
pub type Exclusion<'a> = &'a (dyn Fn(usize, usize) -> bool + Sync);

fn check_labels(dist: &DistanceMatrix, probe_ids: &[u32], gallery_ids: &[u32]) -> Result<()> {
    if probe_ids.len() != dist.rows || gallery_ids.len() != dist.cols {
        return Err(FannError::InvalidArgument(format!(
            "{}x{} distance matrix with {} probe and {} gallery labels",
            dist.rows,
            dist.cols,
            probe_ids.len(),
            gallery_ids.len()
        )));
    }
    Ok(())
}

fn no_match(i: usize, id: u32) -> FannError {
    FannError::Protocol(format!("probe {i} (identity {id}) has no matching gallery entry"))
}

/// Ties are broken by gallery index: `(d, j)` ordering.
fn before(da: f64, ja: usize, db: f64, jb: usize) -> bool {
    da < db || (da == db && ja < jb)
}

/// 1-based rank of the first correct match of each probe.
pub fn match_ranks(
    dist: &DistanceMatrix,
    probe_ids: &[u32],
    gallery_ids: &[u32],
    exclude: Option<Exclusion>,
) -> Result<Vec<usize>> {
    check_labels(dist, probe_ids, gallery_ids)?;
    let keep = |i: usize, j: usize| exclude.is_none_or(|ex| !ex(i, j));
    (0..dist.rows)
        .map(|i| {
            let row = dist.row(i);
            let best = (0..dist.cols)
                .filter(|&j| keep(i, j) && gallery_ids[j] == probe_ids[i])
                .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
                .ok_or_else(|| no_match(i, probe_ids[i]))?;
            let ahead = (0..dist.cols)
                .filter(|&j| keep(i, j) && before(row[j], j, row[best], best))
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

/// `cmc[n − 1]` is the fraction of probes whose first correct match is
/// within the top `n`.
pub fn cmc(dist: &DistanceMatrix, probe_ids: &[u32], gallery_ids: &[u32], max_rank: usize) -> Result<Vec<f64>> {
    cmc_excluding(dist, probe_ids, gallery_ids, max_rank, None)
}

pub fn cmc_excluding(
    dist: &DistanceMatrix,
    probe_ids: &[u32],
    gallery_ids: &[u32],
    max_rank: usize,
    exclude: Option<Exclusion>,
) -> Result<Vec<f64>> {
    let ranks = match_ranks(dist, probe_ids, gallery_ids, exclude)?;
    if ranks.is_empty() {
        return Err(FannError::Protocol("no probes".into()));
    }
    let mut hist = vec![0usize; max_rank];
    for r in ranks.iter().filter(|&&r| r <= max_rank) {
        hist[r - 1] += 1;
    }
    let n = ranks.len() as f64;
    let mut acc = 0;
    Ok(hist
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

/// Mean over probes of the average precision over each probe's relevant
/// gallery entries.
pub fn mean_average_precision(dist: &DistanceMatrix, probe_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    map_excluding(dist, probe_ids, gallery_ids, None)
}

pub fn map_excluding(
    dist: &DistanceMatrix,
    probe_ids: &[u32],
    gallery_ids: &[u32],
    exclude: Option<Exclusion>,
) -> Result<f64> {
    check_labels(dist, probe_ids, gallery_ids)?;
    if dist.rows == 0 {
        return Err(FannError::Protocol("no probes".into()));
    }
    let mut total = 0.0;
    for i in 0..dist.rows {
        let row = dist.row(i);
        let mut order: Vec<usize> = (0..dist.cols)
            .filter(|&j| exclude.is_none_or(|ex| !ex(i, j)))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if gallery_ids[j] == probe_ids[i] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(no_match(i, probe_ids[i]));
        }
        total += precision_sum / hits as f64;
    }
    Ok(total / dist.rows as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub distance: DistanceMatrix,
    pub cmc: Vec<f64>,
    pub map: f64,
}

/// Per-trial results and their averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub trials: Vec<RankingResult>,
    pub mean_cmc: Vec<f64>,
    pub mean_map: f64,
}

impl ProtocolResult {
    pub fn top1(&self) -> f64 {
        self.mean_cmc[0]
    }
}

/// Embeds every sample; order follows the input.
pub fn embed_all(net: &Network, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples.par_iter().map(|s| net.embed(&s.image)).collect()
}

/// Ranks probe-camera images against a gallery drawn from the gallery
/// camera, `trials` times, and averages the curves.
///
/// Only identities seen by both cameras take part. In single-shot mode each
/// trial keeps one random gallery image per identity. Gallery images that
/// share both identity and camera with the probe are never ranked.
pub fn evaluate_protocol(net: &Network, samples: &[Sample], cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    let embeddings = embed_all(net, samples)?;
    evaluate_embeddings(&embeddings, samples, cfg)
}

pub fn evaluate_embeddings(embeddings: &[Tensor], samples: &[Sample], cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    if cfg.trials == 0 || cfg.max_rank == 0 {
        return Err(FannError::Protocol("trials and max_rank must be positive".into()));
    }
    let mut probes_by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut gallery_by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.camera == cfg.probe_camera {
            probes_by_id.entry(s.identity).or_default().push(i);
        }
        if s.camera == cfg.gallery_camera {
            gallery_by_id.entry(s.identity).or_default().push(i);
        }
    }
    let ids: Vec<u32> = probes_by_id
        .keys()
        .copied()
        .filter(|id| gallery_by_id.contains_key(id))
        .collect();
    if ids.len() < 2 {
        return Err(FannError::Protocol(format!(
            "need at least 2 identities seen by cameras {} and {}, found {}",
            cfg.probe_camera,
            cfg.gallery_camera,
            ids.len()
        )));
    }
    let probes: Vec<usize> = ids.iter().flat_map(|id| probes_by_id[id].iter().copied()).collect();
    let probe_ids: Vec<u32> = probes.iter().map(|&i| samples[i].identity).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let gallery: Vec<usize> = if cfg.multi_shot {
            ids.iter().flat_map(|id| gallery_by_id[id].iter().copied()).collect()
        } else {
            ids.iter()
                .map(|id| {
                    let g = &gallery_by_id[id];
                    g[rng.random_range(0..g.len())]
                })
                .collect()
        };
        let gallery_ids: Vec<u32> = gallery.iter().map(|&j| samples[j].identity).collect();
        let p: Vec<Tensor> = probes.iter().map(|&i| embeddings[i].clone()).collect();
        let g: Vec<Tensor> = gallery.iter().map(|&j| embeddings[j].clone()).collect();
        let distance = distance_matrix(&p, &g)?;
        let same_view = |i: usize, j: usize| {
            let (a, b) = (&samples[probes[i]], &samples[gallery[j]]);
            probes[i] == gallery[j] || (a.identity == b.identity && a.camera == b.camera)
        };
        let exclude: Exclusion = &same_view;
        let curve = cmc_excluding(&distance, &probe_ids, &gallery_ids, cfg.max_rank, Some(exclude))?;
        let map = map_excluding(&distance, &probe_ids, &gallery_ids, Some(exclude))?;
        trials.push(RankingResult {
            distance,
            cmc: curve,
            map,
        });
    }
    let t = trials.len() as f64;
    let mean_cmc = (0..cfg.max_rank)
        .map(|k| trials.iter().map(|r| r.cmc[k]).sum::<f64>() / t)
        .collect();
    let mean_map = trials.iter().map(|r| r.map).sum::<f64>() / t;
    Ok(ProtocolResult {
        trials,
        mean_cmc,
        mean_map,
    })
}

/// `rank,cmc` rows followed by a `map=<value>` line.
pub fn ranking_csv(cmc: &[f64], map: f64) -> String {
    let mut out = String::from("rank,cmc\n");
    for (k, v) in cmc.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", k + 1);
    }
    let _ = writeln!(out, "map={map}");
    out
}

/// Writes `trial_NN.csv` per trial and `mean.csv` into `dir`.
pub fn write_protocol_csv(dir: impl AsRef<Path>, result: &ProtocolResult) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| FannError::io(dir, e))?;
    for (k, r) in result.trials.iter().enumerate() {
        let path = dir.join(format!("trial_{k:02}.csv"));
        fs::write(&path, ranking_csv(&r.cmc, r.map)).map_err(|e| FannError::io(&path, e))?;
    }
    let path = dir.join("mean.csv");
    fs::write(&path, ranking_csv(&result.mean_cmc, result.mean_map)).map_err(|e| FannError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Tensor {
        let t = Tensor::vector(v.to_vec()).unwrap();
        let n = t.norm();
        t.scale(1.0 / n)
    }

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> DistanceMatrix {
        DistanceMatrix { rows, cols, data }
    }

    #[test]
    fn exact_match_ranks_first() {
        let p = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let g = vec![unit(&[0.0, 1.0]), unit(&[1.0, 1.0]), unit(&[1.0, 0.0])];
        let d = distance_matrix(&p, &g).unwrap();
        assert_eq!((d.rows, d.cols), (2, 3));
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(match_ranks(&d, &[7, 8], &[8, 9, 7], None).unwrap(), vec![1, 1]);
        assert!(distance_matrix(&p, &[unit(&[1.0, 0.0, 0.0])]).is_err());
    }

    #[test]
    fn cmc_examples() {
        let d = matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(cmc(&d, &[5], &[1, 2, 5, 3], 5).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        let d = matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(cmc(&d, &[0, 1], &[0, 1], 2).unwrap(), vec![1.0, 1.0]);
        assert!(cmc(&d, &[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn ties_broken_by_gallery_index() {
        let d = matrix(1, 3, vec![0.5, 0.5, 0.5]);
        assert_eq!(match_ranks(&d, &[1], &[0, 1, 1], None).unwrap(), vec![2]);
    }

    #[test]
    fn ap_hand_example() {
        let d = matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let ap = mean_average_precision(&d, &[1], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let ap = mean_average_precision(&d, &[1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn exclusion_removes_entries() {
        let d = matrix(1, 3, vec![0.0, 0.1, 0.2]);
        let ex = |_: usize, j: usize| j == 0;
        assert_eq!(match_ranks(&d, &[1], &[1, 0, 1], Some(&ex)).unwrap(), vec![2]);
    }

    fn labelled(ids: &[u32], cam: u32) -> Vec<Sample> {
        ids.iter()
            .map(|&id| {
                Sample::new(
                    Tensor::zeros(&[3, 2, 2]).unwrap(),
                    Tensor::zeros(&[1, 2, 2]).unwrap(),
                    id,
                    cam,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn protocol_perfect_embeddings() {
        let mut samples = labelled(&[0, 0, 1, 1, 2], 0);
        samples.extend(labelled(&[0, 1, 1, 2, 3], 1));
        let emb: Vec<Tensor> = samples
            .iter()
            .map(|s| {
                let mut v = vec![0.0; 4];
                v[s.identity as usize] = 1.0;
                Tensor::vector(v).unwrap()
            })
            .collect();
        let cfg = ProtocolConfig {
            trials: 3,
            max_rank: 3,
            ..ProtocolConfig::default()
        };
        let r = evaluate_embeddings(&emb, &samples, &cfg).unwrap();
        assert_eq!(r.mean_cmc, vec![1.0; 3]);
        assert_eq!(r.mean_map, 1.0);
        assert_eq!(r.trials.len(), 3);
        // identity 3 has no probe, so the gallery holds identities 0..=2
        assert_eq!(r.trials[0].distance.cols, 3);
        let again = evaluate_embeddings(&emb, &samples, &cfg).unwrap();
        assert_eq!(again, r);
        let one = evaluate_embeddings(&emb, &samples, &ProtocolConfig { trials: 1, ..cfg.clone() }).unwrap();
        assert_eq!(one.mean_cmc, one.trials[0].cmc);
    }

    #[test]
    fn protocol_needs_shared_identities() {
        let mut samples = labelled(&[0], 0);
        samples.extend(labelled(&[0, 1], 1));
        let emb = vec![Tensor::vector(vec![1.0]).unwrap(); 3];
        assert!(evaluate_embeddings(&emb, &samples, &ProtocolConfig::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(ranking_csv(&[0.5, 1.0], 0.75), "rank,cmc\n1,0.5\n2,1\nmap=0.75\n");
    }
}
