//! Partitioning the expert similarity graph into `r` groups.
//!
//! The objective rewards similarity inside a group and penalises similarity
//! across groups:
//!
//! ```text
//! Σ_i ( Σ_{j<k ∈ V_i} A[j][k]  −  Σ_{t≠i} Σ_{j∈V_i, k∈V_t} A[j][k] )
//! ```
//!
//! Every unordered cross pair is therefore subtracted twice, once from each
//! side.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::similarity::{Metric, SimilarityMatrix};

/// Largest graph the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_N: usize = 12;

const KMEANS_RESTARTS: usize = 50;
const KMEANS_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionAlgorithm {
    Greedy,
    Spectral,
    Brute,
}

/// Disjoint groups covering `0..n`, each sorted, ordered by smallest member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_value: Option<f64>,
}

impl Partition {
    /// Validates and canonicalises `groups` as a partition of `0..n`.
    pub fn new(mut groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for g in &mut groups {
            if g.is_empty() {
                return Err(Error::Partition("empty group".into()));
            }
            g.sort_unstable();
            for &i in g.iter() {
                if i >= n {
                    return Err(Error::Partition(format!("expert {i} out of range 0..{n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("expert {i} appears in two groups")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Partition(format!("expert {i} is not covered")));
        }
        groups.sort_by_key(|g| g[0]);
        Ok(Self {
            groups,
            objective_value: None,
        })
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            groups: (0..n).map(|i| vec![i]).collect(),
            objective_value: None,
        }
    }

    pub fn n(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn r(&self) -> usize {
        self.groups.len()
    }

    /// Group index of every expert.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.n()];
        for (g, members) in self.groups.iter().enumerate() {
            for &i in members {
                out[i] = g;
            }
        }
        out
    }

    pub fn check_protected(&self, protected: &BTreeSet<usize>) -> Result<()> {
        for g in &self.groups {
            if g.len() > 1 {
                if let Some(p) = g.iter().find(|i| protected.contains(i)) {
                    return Err(Error::Partition(format!(
                        "protected expert {p} shares a group with {g:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn with_objective<T: Scalar>(mut self, a: &Matrix<T>) -> Result<Self> {
        self.objective_value = Some(partition_objective(a, &self)?.to_f64_lossy());
        Ok(self)
    }
}

fn objective_unchecked<T: Scalar>(a: &Matrix<T>, groups: &[Vec<usize>], assignment: &[usize]) -> T {
    let n = a.rows();
    let mut total = T::zero();
    for (gi, members) in groups.iter().enumerate() {
        let mut intra = T::zero();
        let mut cross = T::zero();
        for (pos, &j) in members.iter().enumerate() {
            for &k in &members[pos + 1..] {
                intra += a[(j, k)];
            }
            for k in 0..n {
                if assignment[k] != gi {
                    cross += a[(j, k)];
                }
            }
        }
        total += intra - cross;
    }
    total
}

pub fn partition_objective<T: Scalar>(a: &Matrix<T>, p: &Partition) -> Result<T> {
    if a.rows() != a.cols() || p.n() != a.rows() {
        return Err(Error::Partition(format!(
            "partition covers {} experts, matrix is {:?}",
            p.n(),
            a.shape()
        )));
    }
    let canonical = Partition::new(p.groups.clone(), a.rows())?;
    Ok(objective_unchecked(a, &canonical.groups, &canonical.assignment()))
}

fn check_feasible(n: usize, r: usize, protected: &BTreeSet<usize>) -> Result<()> {
    if let Some(&p) = protected.iter().find(|&&p| p >= n) {
        return Err(Error::Config(format!("protected expert {p} out of range 0..{n}")));
    }
    let free = n - protected.len();
    let min_r = protected.len() + usize::from(free > 0);
    if r < min_r.max(1) || r > n {
        return Err(Error::Config(format!(
            "cannot form {r} groups from {n} experts with {} protected (feasible: {}..={n})",
            protected.len(),
            min_r.max(1)
        )));
    }
    Ok(())
}

/// Agglomerative merging with average linkage; protected experts stay singletons.
///
/// Ties go to the lexicographically smallest `(min of first cluster, min of
/// second cluster)`.
pub fn partition_greedy<T: Scalar>(a: &Matrix<T>, r: usize, protected: &BTreeSet<usize>) -> Result<Partition> {
    let n = a.rows();
    check_feasible(n, r, protected)?;
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > r {
        let mut best: Option<(usize, usize, T)> = None;
        for x in 0..clusters.len() {
            if clusters[x].len() == 1 && protected.contains(&clusters[x][0]) {
                continue;
            }
            for y in x + 1..clusters.len() {
                if clusters[y].len() == 1 && protected.contains(&clusters[y][0]) {
                    continue;
                }
                let mut sum = T::zero();
                for &j in &clusters[x] {
                    for &k in &clusters[y] {
                        sum += a[(j, k)];
                    }
                }
                let link = sum / T::from_usize(clusters[x].len() * clusters[y].len()).unwrap();
                if best.is_none_or(|(_, _, b)| link > b) {
                    best = Some((x, y, link));
                }
            }
        }
        let (x, y, _) = best.ok_or_else(|| Error::Config("no mergeable cluster pair left".into()))?;
        let moved = clusters.remove(y);
        clusters[x].extend(moved);
        clusters[x].sort_unstable();
    }
    Partition::new(clusters, n)?.with_objective(a)
}

/// Exhaustive search over all partitions into exactly `r` groups.
pub fn partition_bruteforce<T: Scalar>(a: &Matrix<T>, r: usize) -> Result<Partition> {
    partition_bruteforce_protected(a, r, &BTreeSet::new())
}

pub fn partition_bruteforce_protected<T: Scalar>(
    a: &Matrix<T>,
    r: usize,
    protected: &BTreeSet<usize>,
) -> Result<Partition> {
    let n = a.rows();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::Config(format!(
            "exhaustive partitioning is limited to {BRUTE_FORCE_MAX_N} experts, got {n}; use greedy"
        )));
    }
    check_feasible(n, r, protected)?;
    let mut best: Option<(T, Vec<Vec<usize>>)> = None;
    for_each_partition(n, r, &mut |labels| {
        let mut groups = vec![Vec::new(); r];
        for (i, &g) in labels.iter().enumerate() {
            groups[g].push(i);
        }
        if groups.iter().any(|g| g.len() > 1 && g.iter().any(|i| protected.contains(i))) {
            return;
        }
        let v = objective_unchecked(a, &groups, labels);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, groups));
        }
    });
    let (_, groups) = best.ok_or_else(|| Error::Config("no admissible partition".into()))?;
    Partition::new(groups, n)?.with_objective(a)
}

/// Visits every restricted growth string of length `n` using exactly `r`
/// labels, in lexicographic order.
pub fn for_each_partition(n: usize, r: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(i: usize, used: usize, n: usize, r: usize, labels: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if i == n {
            if used == r {
                visit(labels);
            }
            return;
        }
        // not enough elements left to open the missing blocks
        if r - used > n - i {
            return;
        }
        for g in 0..=used.min(r - 1) {
            labels[i] = g;
            rec(i + 1, used.max(g + 1), n, r, labels, visit);
        }
    }
    if r == 0 || r > n {
        return;
    }
    let mut labels = vec![0; n];
    rec(0, 0, n, r, &mut labels, visit);
}

fn kmeans<T: Scalar>(points: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = points.len();
    let dim = points[0].len();
    let dist = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum() };
    let mut best: Option<(T, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        // k-means++ seeding
        let mut centers: Vec<Vec<T>> = vec![points[rng.random_range(0..m)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| dist(p, c))
                        .fold(T::infinity(), T::min)
                        .to_f64_lossy()
                })
                .collect();
            let total: f64 = d.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = m - 1;
                for (i, &w) in d.iter().enumerate() {
                    if u < w {
                        idx = i;
                        break;
                    }
                    u -= w;
                }
                idx
            } else {
                rng.random_range(0..m)
            };
            centers.push(points[pick].clone());
        }
        let mut labels = vec![0usize; m];
        for _ in 0..KMEANS_ITERS {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bl = 0;
                let mut bd = T::infinity();
                for (c, center) in centers.iter().enumerate() {
                    let dd = dist(p, center);
                    if dd < bd {
                        bd = dd;
                        bl = c;
                    }
                }
                if labels[i] != bl {
                    labels[i] = bl;
                    changed = true;
                }
            }
            // refill empty clusters with the point farthest from its centre
            for c in 0..k {
                if labels.contains(&c) {
                    continue;
                }
                let mut sizes = vec![0usize; k];
                for &l in &labels {
                    sizes[l] += 1;
                }
                let far = (0..m)
                    .filter(|&i| sizes[labels[i]] > 1)
                    .max_by(|&i, &j| {
                        dist(&points[i], &centers[labels[i]])
                            .partial_cmp(&dist(&points[j], &centers[labels[j]]))
                            .unwrap()
                            .then(j.cmp(&i))
                    });
                if let Some(i) = far {
                    labels[i] = c;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<T>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let cnt = T::from_usize(members.len()).unwrap();
                *center = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<T>() / cnt).collect();
            }
            if !changed {
                break;
            }
        }
        let inertia: T = points.iter().zip(&labels).map(|(p, &l)| dist(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

/// Nonnegative affinity for spectral clustering. Negative-MSE scores are
/// shifted by their minimum first; everything is then clipped at zero.
pub fn spectral_affinity<T: Scalar>(sim: &SimilarityMatrix<T>) -> Matrix<T> {
    let s = &sim.scores;
    let shifted = if sim.metric == Metric::NegMse {
        let min = s.as_slice().iter().copied().fold(T::infinity(), T::min);
        s.map(|v| v - min)
    } else {
        s.clone()
    };
    shifted.map(|v| v.max(T::zero()))
}

/// Normalised spectral clustering on a nonnegative affinity.
///
/// Protected experts are removed beforehand and re-attached as singletons;
/// vertices without edges become their own clusters.
pub fn partition_spectral<T: Scalar>(
    affinity: &Matrix<T>,
    r: usize,
    protected: &BTreeSet<usize>,
    seed: u64,
) -> Result<Partition> {
    let n = affinity.rows();
    check_feasible(n, r, protected)?;
    let nodes: Vec<usize> = (0..n).filter(|i| !protected.contains(i)).collect();
    let mut groups: Vec<Vec<usize>> = protected.iter().map(|&p| vec![p]).collect();
    let weight = |i: usize, j: usize| if i == j { T::zero() } else { affinity[(i, j)].max(T::zero()) };

    let degree: Vec<T> = nodes.iter().map(|&i| nodes.iter().map(|&j| weight(i, j)).sum()).collect();
    let mut connected = Vec::new();
    for (&i, &d) in nodes.iter().zip(&degree) {
        if d > T::zero() {
            connected.push(i);
        } else {
            groups.push(vec![i]);
        }
    }
    if groups.len() > r || (groups.len() == r && !connected.is_empty()) {
        return Err(Error::Config(format!(
            "{} protected or isolated experts already exceed r = {r}",
            groups.len()
        )));
    }
    let k = r - groups.len();
    if k > connected.len() {
        return Err(Error::Config(format!(
            "cannot split {} connected experts into {k} clusters",
            connected.len()
        )));
    }
    if k == 1 {
        groups.push(connected);
    } else if k > 1 {
        let m = connected.len();
        let inv_sqrt: Vec<T> = connected
            .iter()
            .map(|&i| T::one() / connected.iter().map(|&j| weight(i, j)).sum::<T>().sqrt())
            .collect();
        let lap = Matrix::from_fn(m, m, |a, b| {
            let id = if a == b { T::one() } else { T::zero() };
            id - inv_sqrt[a] * weight(connected[a], connected[b]) * inv_sqrt[b]
        });
        let eig = symmetric_eigen(&lap)?;
        let points: Vec<Vec<T>> = (0..m)
            .map(|a| {
                let row: Vec<T> = (0..k).map(|c| eig.vectors[(a, c)]).collect();
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > T::zero() {
                    row.into_iter().map(|v| v / norm).collect()
                } else {
                    row
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = kmeans(&points, k, &mut rng);
        let mut clusters = vec![Vec::new(); k];
        for (a, &l) in labels.iter().enumerate() {
            clusters[l].push(connected[a]);
        }
        groups.extend(clusters);
    }
    Partition::new(groups, n)?.with_objective(affinity)
}

/// Random baseline: merges random disjoint pairs of unprotected experts until
/// `r` groups remain, falling back to merging random clusters.
pub fn partition_random(n: usize, r: usize, protected: &BTreeSet<usize>, seed: u64) -> Result<Partition> {
    check_feasible(n, r, protected)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free: Vec<usize> = (0..n).filter(|i| !protected.contains(i)).collect();
    free.shuffle(&mut rng);
    let mut clusters: Vec<Vec<usize>> = free.into_iter().map(|i| vec![i]).collect();
    let target = r - protected.len();
    let mut merges = clusters.len() - target;
    let mut paired = Vec::new();
    while merges > 0 && clusters.len() >= 2 && clusters[0].len() == 1 && clusters[1].len() == 1 {
        let a = clusters.remove(0);
        let b = clusters.remove(0);
        paired.push([a, b].concat());
        merges -= 1;
    }
    clusters.extend(paired);
    while merges > 0 {
        let x = rng.random_range(0..clusters.len());
        let moved = clusters.swap_remove(x);
        let y = rng.random_range(0..clusters.len());
        clusters[y].extend(moved);
        merges -= 1;
    }
    clusters.extend(protected.iter().map(|&p| vec![p]));
    Partition::new(clusters, n)
}

/// Partitions one layer's similarity graph; the reported objective is always
/// evaluated on the raw scores.
pub fn partition<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    algorithm: PartitionAlgorithm,
    r: usize,
    protected: &BTreeSet<usize>,
    seed: u64,
) -> Result<Partition> {
    let p = match algorithm {
        PartitionAlgorithm::Greedy => partition_greedy(&sim.scores, r, protected)?,
        PartitionAlgorithm::Brute => partition_bruteforce_protected(&sim.scores, r, protected)?,
        PartitionAlgorithm::Spectral => partition_spectral(&spectral_affinity(sim), r, protected, seed)?,
    };
    p.with_objective(&sim.scores)
}
