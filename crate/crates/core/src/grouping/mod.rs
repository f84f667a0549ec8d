//! Functional structure extraction: PCA, context clustering, the
//! cluster-neuron score matrix, shared-group retention, balanced assignment,
//! centroid distances, and the reweighting vectors.

mod assign;

pub use assign::{assign_groups, assign_groups_sized};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{eigh_topk, matmul, Matrix};

/// Token-context clusters in PCA space.
#[derive(Debug, Clone)]
pub struct ContextClusters {
    /// Cluster index per token column.
    pub labels: Vec<usize>,
    /// K x r centroid coordinates in the reduced space.
    pub centroids_pca: Matrix,
    /// Token count per cluster.
    pub counts: Vec<usize>,
}

/// Per-layer partition of FFN neurons into K functional groups plus one
/// shared group.
#[derive(Debug, Clone)]
pub struct NeuronGrouping {
    pub groups: Vec<Vec<usize>>,
    pub shared: Vec<usize>,
    /// K x K reweighting matrix, rows are probability vectors.
    pub alpha: Matrix,
    /// K x K centroid distance matrix.
    pub distances: Matrix,
}

impl NeuronGrouping {
    /// Verify the partition property against a neuron count.
    pub fn check_partition(&self, n_neurons: usize) -> Result<()> {
        let mut seen = vec![false; n_neurons];
        let mut mark = |idx: &[usize]| -> Result<()> {
            for &j in idx {
                if j >= n_neurons {
                    return Err(Error::Config(format!("neuron index {j} out of range")));
                }
                if seen[j] {
                    return Err(Error::Config(format!("neuron {j} appears in two sets")));
                }
                seen[j] = true;
            }
            Ok(())
        };
        mark(&self.shared)?;
        for g in &self.groups {
            mark(g)?;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Config("grouping does not cover all neurons".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "groups": self.groups,
            "shared": self.shared,
            "alpha": matrix_rows(&self.alpha),
            "distances": matrix_rows(&self.distances),
        })
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Project the columns of X onto the top-r principal axes of the centered
/// covariance. Returns the r x T reduced representation.
pub fn pca_reduce(x: &Matrix, r: usize) -> Result<Matrix> {
    let d = x.rows();
    let t = x.cols();
    if r > d.min(t) {
        return Err(Error::Dimension(format!(
            "pca dimension {r} exceeds min(d={d}, T={t})"
        )));
    }
    let mut centered = x.clone();
    for row in 0..d {
        let mean = x.row(row).iter().sum::<f64>() / t as f64;
        for c in 0..t {
            centered.set(row, c, centered.get(row, c) - mean);
        }
    }
    let cov = matmul(&centered, &centered.transpose())?.scale(1.0 / t as f64);
    let (_, vectors) = eigh_topk(&cov, r)?;
    matmul(&vectors.transpose(), &centered)
}

/// Lloyd's algorithm with k-means++ seeding. Columns of `xr` are points.
pub fn kmeans(xr: &Matrix, k: usize, seed: u64) -> Result<ContextClusters> {
    let t = xr.cols();
    let r = xr.rows();
    if t < k || k == 0 {
        return Err(Error::Input(format!("kmeans needs at least {k} points, got {t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |c: usize| xr.col(c);
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ initialization
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(point(rng.gen_range(0..t)));
    let mut d2: Vec<f64> = (0..t).map(|c| dist2(&point(c), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = t - 1;
            for (c, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = c;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..t)
        };
        centroids.push(point(pick));
        for c in 0..t {
            let nd = dist2(&point(c), centroids.last().unwrap());
            if nd < d2[c] {
                d2[c] = nd;
            }
        }
    }

    let mut labels = vec![0usize; t];
    for _iter in 0..100 {
        // assignment step, ties to the lower centroid index
        for c in 0..t {
            let p = point(c);
            let mut best = 0;
            let mut bestd = f64::INFINITY;
            for (ki, cent) in centroids.iter().enumerate() {
                let d = dist2(&p, cent);
                if d < bestd {
                    bestd = d;
                    best = ki;
                }
            }
            labels[c] = best;
        }
        // update step
        let mut sums = vec![vec![0.0; r]; k];
        let mut counts = vec![0usize; k];
        for c in 0..t {
            counts[labels[c]] += 1;
            let p = point(c);
            for (s, v) in sums[labels[c]].iter_mut().zip(&p) {
                *s += v;
            }
        }
        // empty-cluster repair: reseed to the point farthest from its centroid
        for ki in 0..k {
            if counts[ki] == 0 {
                let mut far = 0;
                let mut fard = -1.0;
                for c in 0..t {
                    let d = dist2(&point(c), &centroids[labels[c]]);
                    if d > fard {
                        fard = d;
                        far = c;
                    }
                }
                labels[far] = ki;
                counts[ki] = 1;
                sums[ki] = point(far);
                let donor = labels[far];
                let _ = donor;
            }
        }
        let mut shift: f64 = 0.0;
        for ki in 0..k {
            if counts[ki] == 0 {
                continue;
            }
            let mut moved = 0.0;
            for rr in 0..r {
                let nv = sums[ki][rr] / counts[ki] as f64;
                moved += (nv - centroids[ki][rr]).powi(2);
                centroids[ki][rr] = nv;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < 1e-4 {
            break;
        }
    }
    // final assignment against the converged centroids
    let mut counts = vec![0usize; k];
    for c in 0..t {
        let p = point(c);
        let mut best = 0;
        let mut bestd = f64::INFINITY;
        for (ki, cent) in centroids.iter().enumerate() {
            let d = dist2(&p, cent);
            if d < bestd {
                bestd = d;
                best = ki;
            }
        }
        labels[c] = best;
        counts[best] += 1;
    }
    // a converged solution can still strand a cluster; repair deterministically
    for ki in 0..k {
        if counts[ki] == 0 {
            let mut far = 0;
            let mut fard = -1.0;
            for c in 0..t {
                if counts[labels[c]] <= 1 {
                    continue;
                }
                let d = dist2(&point(c), &centroids[labels[c]]);
                if d > fard {
                    fard = d;
                    far = c;
                }
            }
            counts[labels[far]] -= 1;
            labels[far] = ki;
            counts[ki] = 1;
            centroids[ki] = point(far);
        }
    }
    let mut centroids_pca = Matrix::zeros(k, r);
    for (ki, cent) in centroids.iter().enumerate() {
        centroids_pca.row_mut(ki).copy_from_slice(cent);
    }
    Ok(ContextClusters {
        labels,
        centroids_pca,
        counts,
    })
}

/// Cluster-neuron sensitivity scores: S[k][j] is the mean over cluster-k
/// tokens of |h_j * dL/dh_j|.
pub fn score_matrix(hidden: &Matrix, grad: &Matrix, labels: &[usize], k: usize) -> Result<Matrix> {
    if hidden.rows() != grad.rows() || hidden.cols() != grad.cols() {
        return Err(Error::Dimension("hidden and grad shapes differ".into()));
    }
    if labels.len() != hidden.cols() {
        return Err(Error::Dimension("labels length != token count".into()));
    }
    let n = hidden.rows();
    let mut s = Matrix::zeros(k, n);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    for (t, &l) in labels.iter().enumerate() {
        for j in 0..n {
            let v = (hidden.get(j, t) * grad.get(j, t)).abs();
            s.set(l, j, s.get(l, j) + v);
        }
    }
    for ki in 0..k {
        if counts[ki] > 0 {
            let inv = 1.0 / counts[ki] as f64;
            for j in 0..n {
                s.set(ki, j, s.get(ki, j) * inv);
            }
        }
    }
    Ok(s)
}

fn top_m_by_row(s: &Matrix, k: usize, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.cols()).collect();
    idx.sort_by(|&a, &b| {
        s.get(k, b)
            .partial_cmp(&s.get(k, a))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    idx
}

/// Shared-group selection: per cluster take the top-m neurons by score,
/// rank multiply-selected neurons by selection frequency, and fill any
/// remaining slots by total score. Ties always break toward the lower index.
pub fn select_shared_group(s: &Matrix, m: usize) -> Result<Vec<usize>> {
    let n = s.cols();
    let k = s.rows();
    if m > n {
        return Err(Error::Input(format!("shared size {m} exceeds {n} neurons")));
    }
    let mut freq = vec![0usize; n];
    for ki in 0..k {
        for j in top_m_by_row(s, ki, m) {
            freq[j] += 1;
        }
    }
    let total_score = |j: usize| -> f64 { (0..k).map(|ki| s.get(ki, j)).sum() };
    let mut multi: Vec<usize> = (0..n).filter(|&j| freq[j] >= 2).collect();
    multi.sort_by(|&a, &b| {
        freq[b]
            .cmp(&freq[a])
            .then(total_score(b).partial_cmp(&total_score(a)).unwrap())
            .then(a.cmp(&b))
    });
    let mut shared: Vec<usize> = multi.into_iter().take(m).collect();
    if shared.len() < m {
        let chosen: std::collections::HashSet<usize> = shared.iter().copied().collect();
        let mut rest: Vec<usize> = (0..n).filter(|j| !chosen.contains(j)).collect();
        rest.sort_by(|&a, &b| {
            total_score(b)
                .partial_cmp(&total_score(a))
                .unwrap()
                .then(a.cmp(&b))
        });
        shared.extend(rest.into_iter().take(m - shared.len()));
    }
    shared.sort_unstable();
    Ok(shared)
}

/// Pairwise L2 distances between per-cluster means of the hidden
/// activations. Returns (D, centroids K x N_n).
pub fn centroid_distance_matrix(
    hidden: &Matrix,
    labels: &[usize],
    k: usize,
) -> Result<(Matrix, Matrix)> {
    let n = hidden.rows();
    let t = hidden.cols();
    let mut centroids = Matrix::zeros(k, n);
    let mut counts = vec![0usize; k];
    for (c, &l) in labels.iter().enumerate().take(t) {
        counts[l] += 1;
        for j in 0..n {
            centroids.set(l, j, centroids.get(l, j) + hidden.get(j, c));
        }
    }
    for ki in 0..k {
        if counts[ki] == 0 {
            return Err(Error::Data(format!("cluster {ki} is empty")));
        }
        let inv = 1.0 / counts[ki] as f64;
        for j in 0..n {
            centroids.set(ki, j, centroids.get(ki, j) * inv);
        }
    }
    let mut d = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a + 1..k {
            let dist = centroids
                .row(a)
                .iter()
                .zip(centroids.row(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            d.set(a, b, dist);
            d.set(b, a, dist);
        }
    }
    Ok((d, centroids))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    Ours,
    Reverse,
    Uniform,
    OnlyMatched,
}

impl std::str::FromStr for ReweightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(ReweightMode::Ours),
            "reverse" => Ok(ReweightMode::Reverse),
            "uniform" => Ok(ReweightMode::Uniform),
            "only_matched" => Ok(ReweightMode::OnlyMatched),
            other => Err(Error::Parameter(format!("unknown reweight mode {other:?}"))),
        }
    }
}

/// Row k is the weighting of every token cluster for neuron group k.
pub fn alpha_weights(d: &Matrix, tau: f64, mode: ReweightMode) -> Result<Matrix> {
    let k = d.rows();
    let mut alpha = Matrix::zeros(k, k);
    match mode {
        ReweightMode::Uniform => {
            let v = 1.0 / k as f64;
            for a in 0..k {
                for b in 0..k {
                    alpha.set(a, b, v);
                }
            }
        }
        ReweightMode::OnlyMatched => {
            for a in 0..k {
                alpha.set(a, a, 1.0);
            }
        }
        ReweightMode::Ours | ReweightMode::Reverse => {
            if tau <= 0.0 {
                return Err(Error::Parameter("tau must be positive".into()));
            }
            let sign = if mode == ReweightMode::Ours { -1.0 } else { 1.0 };
            for a in 0..k {
                let logits: Vec<f64> = (0..k).map(|b| sign * d.get(a, b) / tau).collect();
                let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|v| (v - maxv).exp()).sum();
                for b in 0..k {
                    alpha.set(a, b, (logits[b] - maxv).exp() / denom);
                }
            }
        }
    }
    Ok(alpha)
}

/// Ablation baseline: seeded uniform balanced partition into K+1 sets with
/// one set (plus any remainder) designated shared.
pub fn random_grouping(n_neurons: usize, k: usize, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if n_neurons < k + 1 {
        return Err(Error::Input(format!(
            "need at least {} neurons for {k} groups plus shared",
            k + 1
        )));
    }
    let m = n_neurons / (k + 1);
    let mut idx: Vec<usize> = (0..n_neurons).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let shared_slot = rng.gen_range(0..k + 1);
    let mut sets: Vec<Vec<usize>> = idx.chunks(m).take(k + 1).map(|c| c.to_vec()).collect();
    // remainder neurons join the shared set
    if n_neurons > (k + 1) * m {
        let extra = idx[(k + 1) * m..].to_vec();
        sets[shared_slot].extend(extra);
    }
    let mut shared = sets.remove(shared_slot);
    shared.sort_unstable();
    for g in &mut sets {
        g.sort_unstable();
    }
    Ok((sets, shared))
}
