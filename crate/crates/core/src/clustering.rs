//! Ward agglomerative clustering with silhouette-selected cluster count.
//!
//! Merge costs are Ward variance increases
//! `ΔESS(A, B) = |A||B| / (|A| + |B|) · ‖c_A − c_B‖²`, maintained through the
//! Lance–Williams recurrence on squared distances. Cluster ids follow the
//! usual dendrogram convention: leaves are `0..n`, the cluster created by the
//! `t`-th merge is `n + t`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SieveError};
use crate::tensor::EmbeddingTable;

/// Two merge costs within `TIE_RTOL · min + TIE_ATOL_SCALE · scale` of the
/// minimum count as tied; `scale` is the largest singleton merge cost.
pub const TIE_RTOL: f64 = 1e-9;
pub const TIE_ATOL_SCALE: f64 = 1e-12;

/// Below this best silhouette a neuron is treated as a single cluster.
pub const MIN_SILHOUETTE: f64 = 0.10;

pub const DEFAULT_MAX_CLUSTERS: usize = 10;

/// Symmetric distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_matrix(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(SieveError::Validation(format!(
                "{n}x{n} matrix needs {} entries",
                n * n
            )));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(SieveError::Validation(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let v = d[i * n + j];
                if !(v >= 0.0 && v.is_finite()) || v != d[j * n + i] {
                    return Err(SieveError::Validation(format!(
                        "distance ({i},{j}) not symmetric, finite and non-negative"
                    )));
                }
            }
        }
        Ok(Self { n, d })
    }

    /// Euclidean distances between rows; each pair is computed once.
    pub fn from_points<R: AsRef<[f64]>>(points: &[R]) -> Self {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v = euclidean(points[i].as_ref(), points[j].as_ref());
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self { n, d }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn pairwise_euclidean(features: &EmbeddingTable) -> DistanceMatrix {
    let rows: Vec<Vec<f64>> = features
        .rows()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();
    DistanceMatrix::from_points(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Smaller cluster id.
    pub a: usize,
    pub b: usize,
    /// Ward variance increase.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster index per item, numbered by order of each cluster's smallest member.
    pub labels: Vec<usize>,
    pub m: usize,
    pub merge_trace: Vec<Merge>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == cluster)
            .collect()
    }
}

/// Lexicographically smallest id pair among `candidates` whose cost is tied
/// with the minimum.
pub(crate) fn pick_tied(
    candidates: &[(usize, usize, f64)],
    scale: f64,
) -> Option<(usize, usize, f64)> {
    let min = candidates.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let tol = TIE_RTOL * min.abs() + TIE_ATOL_SCALE * scale;
    candidates
        .iter()
        .filter(|c| c.2 <= min + tol)
        .min_by_key(|c| (c.0, c.1))
        .copied()
}

/// Full Ward merge sequence down to one cluster.
fn ward_trace(d: &DistanceMatrix) -> Vec<Merge> {
    let n = d.len();
    // Lance–Williams state on squared distances: w = 2·ΔESS.
    let mut w: Vec<f64> = d.d.iter().map(|v| v * v).collect();
    let scale = w.iter().copied().fold(0.0, f64::max) / 2.0;
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut trace = Vec::with_capacity(n.saturating_sub(1));
    let mut candidates = Vec::with_capacity(n * n / 2);

    for step in 0..n.saturating_sub(1) {
        candidates.clear();
        for p in (0..n).filter(|&p| alive[p]) {
            for q in (p + 1..n).filter(|&q| alive[q]) {
                let (a, b) = if ids[p] < ids[q] {
                    (ids[p], ids[q])
                } else {
                    (ids[q], ids[p])
                };
                candidates.push((a, b, w[p * n + q] / 2.0));
            }
        }
        let (a, b, cost) = pick_tied(&candidates, scale).expect("at least two clusters alive");
        let p = ids
            .iter()
            .position(|&id| id == a)
            .filter(|&s| alive[s])
            .expect("alive");
        let q = ids
            .iter()
            .position(|&id| id == b)
            .filter(|&s| alive[s])
            .expect("alive");
        let (np, nq) = (sizes[p] as f64, sizes[q] as f64);
        let wpq = w[p * n + q];
        for k in (0..n).filter(|&k| alive[k] && k != p && k != q) {
            let nk = sizes[k] as f64;
            let v =
                ((nk + np) * w[k * n + p] + (nk + nq) * w[k * n + q] - nk * wpq) / (nk + np + nq);
            let v = v.max(0.0);
            w[k * n + p] = v;
            w[p * n + k] = v;
        }
        alive[q] = false;
        sizes[p] += sizes[q];
        ids[p] = n + step;
        trace.push(Merge { a, b, cost });
    }
    trace
}

/// Replays the first `n - m` merges and labels the resulting clusters.
fn cut(n: usize, trace: &[Merge], m: usize) -> Vec<usize> {
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for merge in &trace[..n - m] {
        let mut joined = std::mem::take(&mut members[merge.a]);
        joined.append(&mut std::mem::take(&mut members[merge.b]));
        members.push(joined);
    }
    let mut clusters: Vec<Vec<usize>> = members.into_iter().filter(|c| !c.is_empty()).collect();
    clusters.sort_by_key(|c| *c.iter().min().expect("non-empty"));
    let mut labels = vec![0; n];
    for (label, cluster) in clusters.iter().enumerate() {
        for &i in cluster {
            labels[i] = label;
        }
    }
    labels
}

pub fn ward_agglomerate(d: &DistanceMatrix, target_m: usize) -> Result<ClusterAssignment> {
    let n = d.len();
    if target_m == 0 || target_m > n {
        return Err(SieveError::Range(format!(
            "target cluster count {target_m} not in 1..={n}"
        )));
    }
    let mut trace = ward_trace(d);
    trace.truncate(n - target_m);
    Ok(ClusterAssignment {
        labels: cut(n, &trace, target_m),
        m: target_m,
        merge_trace: trace,
    })
}

/// Mean silhouette over all points; points in singleton clusters score 0.
pub fn silhouette(d: &DistanceMatrix, labels: &[usize]) -> Result<f64> {
    let n = d.len();
    if labels.len() != n {
        return Err(SieveError::Validation(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    let m = labels.iter().max().map_or(0, |&l| l + 1);
    let mut sizes = vec![0usize; m];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.contains(&0) {
        return Err(SieveError::Validation(
            "cluster labels must occupy 0..m".into(),
        ));
    }
    if m < 2 {
        return Err(SieveError::Range(format!(
            "silhouette needs at least 2 clusters, got {m}"
        )));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; m];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += d.get(i, j);
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..m)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouettePoint {
    pub m: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterChoice {
    pub assignment: ClusterAssignment,
    /// Silhouette for each candidate count that was evaluated.
    pub curve: Vec<SilhouettePoint>,
}

/// Ward clustering with `m` chosen by silhouette over `2..=min(max_m, n-1)`.
/// Fewer than 4 points, or a best score under [`MIN_SILHOUETTE`], give `m = 1`.
pub fn choose_cluster_count(d: &DistanceMatrix, max_m: usize) -> Result<ClusterChoice> {
    let n = d.len();
    if n == 0 {
        return Err(SieveError::EmptyInput("no points to cluster"));
    }
    let trace = ward_trace(d);
    let assignment_for = |m: usize| ClusterAssignment {
        labels: cut(n, &trace, m),
        m,
        merge_trace: trace[..n - m].to_vec(),
    };
    let mut curve = Vec::new();
    if n >= 4 {
        for m in 2..=max_m.min(n - 1) {
            let labels = cut(n, &trace, m);
            curve.push(SilhouettePoint {
                m,
                score: silhouette(d, &labels)?,
            });
        }
    }
    // first maximum wins, so ties go to the smaller m
    let best = curve
        .iter()
        .fold(None::<&SilhouettePoint>, |best, p| match best {
            Some(b) if b.score >= p.score => Some(b),
            _ => Some(p),
        });
    let m = match best {
        Some(p) if p.score >= MIN_SILHOUETTE => p.m,
        _ => 1,
    };
    Ok(ClusterChoice {
        assignment: assignment_for(m),
        curve,
    })
}
