//! Feature extraction over prototypes, seeded k-means and knee selection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{CandidateSubgraph, PrototypeCluster};
use crate::scene_graph::{Category, NodeLabel, Relation};

/// Length of the structural block: 10 label counts, 9 relation counts,
/// node count, edge count, mean depth, mean radius.
pub const STRUCTURAL_DIM: usize = Category::ALL.len() + Relation::ALL.len() + 4;

pub const MAX_ITERATIONS: usize = 300;
pub const CONVERGENCE_SHIFT: f64 = 1e-8;

/// Unnormalized features of one prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeatures {
    pub structural: Vec<f64>,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub structural: Vec<f64>,
    pub appearance: Vec<f64>,
}

impl FeatureVector {
    pub fn concat(&self) -> Vec<f64> {
        self.structural.iter().chain(&self.appearance).copied().collect()
    }
}

/// Mean of the instance embeddings renormalized to unit length. Returns the
/// zero vector of `dim` when there is nothing to aggregate.
pub fn aggregate_appearance(embeddings: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::schema(format!(
                "appearance dimension {} does not match run dimension {dim}",
                e.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(e.iter()) {
            *a += v;
        }
    }
    if embeddings.is_empty() {
        return Ok(acc);
    }
    let n = embeddings.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|a| *a /= norm);
    }
    Ok(acc)
}

pub fn structural_features(sub: &CandidateSubgraph) -> Vec<f64> {
    let mut v = vec![0.0; STRUCTURAL_DIM];
    for label in sub.labels() {
        if let NodeLabel::WorkZone(c) = label {
            v[c.index()] += 1.0;
        }
    }
    let off = Category::ALL.len();
    for r in sub.relations() {
        v[off + r.index()] += 1.0;
    }
    let off = off + Relation::ALL.len();
    v[off] = sub.node_count() as f64;
    v[off + 1] = sub.edges.len() as f64;
    v[off + 2] = sub.mean_depth;
    v[off + 3] = sub.mean_radius;
    v
}

pub fn extract_features(proto: &PrototypeCluster, appearance: &[f64], appearance_dim: usize) -> Result<RawFeatures> {
    if appearance.len() != appearance_dim {
        return Err(Error::schema(format!(
            "appearance dimension {} does not match run dimension {appearance_dim}",
            appearance.len()
        )));
    }
    Ok(RawFeatures {
        structural: structural_features(&proto.representative),
        appearance: appearance.to_vec(),
    })
}

fn zscore(rows: &[&[f64]]) -> (Vec<Vec<f64>>, Normalization) {
    let dim = rows.first().map_or(0, |r| r.len());
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in scale.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt());
    let out = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| if *s > 1e-12 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect();
    (out, Normalization { mean, scale })
}

/// Z-scores the structural and appearance blocks independently over the
/// sample set; constant dimensions map to zero.
pub fn normalize(samples: &[RawFeatures]) -> (Vec<FeatureVector>, Normalization, Normalization) {
    let s: Vec<&[f64]> = samples.iter().map(|f| f.structural.as_slice()).collect();
    let a: Vec<&[f64]> = samples.iter().map(|f| f.appearance.as_slice()).collect();
    let (sn, snorm) = zscore(&s);
    let (an, anorm) = zscore(&a);
    let vectors = sn
        .into_iter()
        .zip(an)
        .map(|(structural, appearance)| FeatureVector { structural, appearance })
        .collect();
    (vectors, snorm, anorm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
    /// SSE after each assignment step.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            if d2[idx] <= 0.0 {
                // Rounding ran past the last positive weight.
                idx = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap();
            }
            idx
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Seeded k-means++ followed by Lloyd iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds sample count {n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("feature vectors have mixed dimensions"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            sse += d;
        }
        history.push(sse);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut reseeded = false;
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed from the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[j] = points[far].clone();
                assignments[far] = j;
                reseeded = true;
                shift = f64::INFINITY;
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if (!reseeded && shift < CONVERGENCE_SHIFT) || iterations >= MAX_ITERATIONS {
            break;
        }
    }

    let mut sse = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        assignments[i] = j;
        sse += d;
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        sse,
        iterations,
        sse_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowChoice {
    pub k: usize,
    /// Scaled distance of each interior K to the chord.
    pub distances: BTreeMap<usize, f64>,
    /// K values whose SSE rose relative to the previous K.
    pub non_monotone: Vec<usize>,
}

/// Knee of an SSE curve: the interior K farthest from the chord joining the
/// first and last points after both axes are scaled to `[0, 1]`. Ties go to
/// the smallest K.
pub fn elbow_select(sse_by_k: &BTreeMap<usize, f64>) -> Result<ElbowChoice> {
    if sse_by_k.len() < 3 {
        return Err(Error::invalid("elbow selection needs at least three K values"));
    }
    if sse_by_k.values().any(|v| !v.is_finite()) {
        return Err(Error::invalid("SSE values must be finite"));
    }
    let pts: Vec<(usize, f64)> = sse_by_k.iter().map(|(&k, &s)| (k, s)).collect();
    let non_monotone = pts.windows(2).filter(|w| w[1].1 > w[0].1).map(|w| w[1].0).collect();

    let (k0, k1) = (pts[0].0 as f64, pts[pts.len() - 1].0 as f64);
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(k, s)| {
            let y = if span > 0.0 { (s - lo) / span } else { 0.0 };
            ((k as f64 - k0) / (k1 - k0), y)
        })
        .collect();
    let (ax, ay) = scaled[0];
    let (bx, by) = scaled[scaled.len() - 1];
    let (dx, dy) = (bx - ax, by - ay);
    let len = dx.hypot(dy);

    let mut distances = BTreeMap::new();
    let mut best: Option<(usize, f64)> = None;
    for (i, &(x, y)) in scaled.iter().enumerate().take(scaled.len() - 1).skip(1) {
        let d = (dy * (x - ax) - dx * (y - ay)).abs() / len;
        let k = pts[i].0;
        distances.insert(k, d);
        match best {
            Some((_, bd)) if d <= bd + 1e-12 => {}
            _ => best = Some((k, d)),
        }
    }
    Ok(ElbowChoice {
        k: best.expect("at least one interior point").0,
        distances,
        non_monotone,
    })
}

/// SSE for every K in `2..=k_max` (capped at the sample count).
pub fn sse_sweep(points: &[Vec<f64>], k_max: usize, seed: u64) -> Result<BTreeMap<usize, ClusterModel>> {
    let upper = k_max.min(points.len());
    (2..=upper)
        .into_par_iter()
        .map(|k| kmeans(points, k, seed).map(|m| (k, m)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub sse_curve: BTreeMap<usize, f64>,
    pub elbow: Option<ElbowChoice>,
    /// Member source frames per cluster (union over prototype members).
    pub clusters: Vec<Vec<String>>,
    pub seed: u64,
}

/// Clusters prototypes end to end: features, normalization, K sweep, knee,
/// final model. Fewer than four prototypes skip the sweep.
pub fn cluster_prototypes(
    protos: &[PrototypeCluster],
    appearance_dim: usize,
    k_max: usize,
    seed: u64,
) -> Result<ClusterReport> {
    if protos.is_empty() {
        return Ok(ClusterReport {
            k: 0,
            sse_curve: BTreeMap::new(),
            elbow: None,
            clusters: Vec::new(),
            seed,
        });
    }
    let raw: Vec<RawFeatures> = protos
        .iter()
        .map(|p| {
            let app = aggregate_appearance(&p.representative.instance_embeddings(), appearance_dim)?;
            extract_features(p, &app, appearance_dim)
        })
        .collect::<Result<_>>()?;
    let (vectors, _, _) = normalize(&raw);
    let points: Vec<Vec<f64>> = vectors.iter().map(FeatureVector::concat).collect();

    let (k, sse_curve, elbow) = if points.len() >= 4 {
        let sweep = sse_sweep(&points, k_max, seed)?;
        let curve: BTreeMap<usize, f64> = sweep.iter().map(|(k, m)| (*k, m.sse)).collect();
        let choice = elbow_select(&curve)?;
        (choice.k, curve, Some(choice))
    } else {
        (points.len(), BTreeMap::new(), None)
    };
    let model = kmeans(&points, k, seed)?;
    let mut clusters = vec![Vec::new(); k];
    for (p, &j) in protos.iter().zip(&model.assignments) {
        clusters[j].extend(p.members.iter().cloned());
    }
    for c in &mut clusters {
        c.sort();
    }
    Ok(ClusterReport {
        k,
        sse_curve,
        elbow,
        clusters,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr_free::gaussian;

    /// Box-Muller on a seeded stream; keeps the test free of extra crates.
    mod rand_distr_free {
        use rand::Rng;
        pub fn gaussian(rng: &mut impl Rng) -> f64 {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    pub(crate) fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..30 {
                pts.push(vec![c[0] + 0.1 * gaussian(&mut rng), c[1] + 0.1 * gaussian(&mut rng)]);
                truth.push(b);
            }
        }
        (pts, truth)
    }

    #[test]
    fn k_equals_n_gives_zero_sse() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, 4.0], vec![-2.0, 7.0]];
        let m = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(m.sse, 0.0);
        let mut a = m.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn k_one_centroid_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, 4.0], vec![-2.0, 7.0], vec![1.0, 0.0]];
        let m = kmeans(&pts, 1, 5).unwrap();
        assert!((m.centroids[0][0] - 0.5).abs() < 1e-12);
        assert!((m.centroids[0][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_samples_rejected() {
        assert!(kmeans(&[vec![1.0]], 2, 0).is_err());
    }

    #[test]
    fn blobs_recovered_and_sse_monotone() {
        let (pts, truth) = blobs(11);
        let m = kmeans(&pts, 3, 42).unwrap();
        // Brute-force check: every point's assigned cluster maps one-to-one to
        // its blob.
        let mut map = BTreeMap::new();
        for (a, t) in m.assignments.iter().zip(&truth) {
            let prev = map.insert(*t, *a);
            assert!(prev.is_none() || prev == Some(*a));
        }
        assert_eq!(map.len(), 3);
        for w in m.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let (pts, _) = blobs(3);
        assert_eq!(kmeans(&pts, 4, 9).unwrap(), kmeans(&pts, 4, 9).unwrap());
    }

    #[test]
    fn elbow_finds_breakpoint_at_ten() {
        let curve: BTreeMap<usize, f64> = (2..=15)
            .map(|k| {
                let s = if k <= 10 {
                    1000.0 - 100.0 * (k - 2) as f64
                } else {
                    200.0 - 10.0 * (k - 10) as f64
                };
                (k, s)
            })
            .collect();
        assert_eq!(elbow_select(&curve).unwrap().k, 10);
    }

    #[test]
    fn elbow_linear_ties_to_smallest_interior() {
        let curve: BTreeMap<usize, f64> = (2..=15).map(|k| (k, 100.0 - 5.0 * k as f64)).collect();
        assert_eq!(elbow_select(&curve).unwrap().k, 3);
    }

    #[test]
    fn elbow_is_affine_invariant_and_flags_rises() {
        let curve: BTreeMap<usize, f64> = [(2, 50.0), (3, 20.0), (4, 15.0), (5, 16.0), (6, 10.0)].into();
        let base = elbow_select(&curve).unwrap();
        assert_eq!(base.non_monotone, vec![5]);
        let scaled: BTreeMap<usize, f64> = curve.iter().map(|(k, v)| (*k, 3.0 * v + 7.0)).collect();
        assert_eq!(elbow_select(&scaled).unwrap().k, base.k);
        assert!(elbow_select(&[(2, 1.0), (3, 0.5)].into()).is_err());
    }

    #[test]
    fn blob_sweep_selects_three() {
        let (pts, _) = blobs(5);
        let sweep = sse_sweep(&pts, 15, 7).unwrap();
        let curve: BTreeMap<usize, f64> = sweep.iter().map(|(k, m)| (*k, m.sse)).collect();
        assert_eq!(elbow_select(&curve).unwrap().k, 3);
    }

    #[test]
    fn appearance_aggregation_is_renormalized_mean() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let agg = aggregate_appearance(&[&a, &b], 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((agg[0] - h).abs() < 1e-15 && (agg[1] - h).abs() < 1e-15);
        assert!(aggregate_appearance(&[&[1.0, 0.0, 0.0]], 2).is_err());
    }

    #[test]
    fn normalization_centres_each_dimension() {
        let raw: Vec<RawFeatures> = (0..6)
            .map(|i| RawFeatures {
                structural: vec![i as f64, 3.0, (i * i) as f64],
                appearance: vec![(i % 2) as f64, 0.5],
            })
            .collect();
        let (vecs, _, _) = normalize(&raw);
        for d in 0..3 {
            let m: f64 = vecs.iter().map(|v| v.structural[d]).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-9);
        }
        assert!(vecs.iter().all(|v| v.structural[1] == 0.0 && v.appearance[1] == 0.0));
    }
}
