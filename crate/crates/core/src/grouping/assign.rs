//! Balanced neuron-to-cluster assignment. The balanced maximization is
//! expanded into a square assignment problem (one row per group slot) and
//! solved exactly with the O(n^3) Hungarian algorithm; a greedy fallback
//! exists for very large layers.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Square min-cost assignment, potentials formulation. Returns for each row
/// the column assigned to it.
fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    let inf = f64::INFINITY;
    // 1-based arrays per the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Assign the non-shared neurons to K groups of exactly m, maximizing the
/// total score sum. `free` lists the assignable neuron indices. Exact by
/// default; `greedy` switches to the score-sorted fallback.
pub fn assign_groups(
    scores: &Matrix,
    free: &[usize],
    k_groups: usize,
    group_size: usize,
    greedy: bool,
) -> Result<Vec<Vec<usize>>> {
    assign_groups_sized(scores, free, &vec![group_size; k_groups], greedy)
}

/// Like [`assign_groups`] but with an explicit size per group, for layers
/// whose free neuron count is not a multiple of K.
pub fn assign_groups_sized(
    scores: &Matrix,
    free: &[usize],
    sizes: &[usize],
    greedy: bool,
) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if free.len() != total {
        return Err(Error::Config(format!(
            "assignment needs {} free neurons for group sizes {:?}, got {}",
            total,
            sizes,
            free.len()
        )));
    }
    if greedy {
        return Ok(assign_greedy(scores, free, sizes));
    }
    let n = free.len();
    // one assignment row per group slot
    let slot_group: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| std::iter::repeat(k).take(s))
        .collect();
    let mut cost = Matrix::zeros(n, n);
    for (slot, &k) in slot_group.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            cost.set(slot, c, -scores.get(k, j));
        }
    }
    let row_to_col = hungarian(&cost);
    let mut groups: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (slot, &c) in row_to_col.iter().enumerate() {
        groups[slot_group[slot]].push(free[c]);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

fn assign_greedy(scores: &Matrix, free: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let k_groups = sizes.len();
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k_groups * free.len());
    for k in 0..k_groups {
        for &j in free {
            pairs.push((k, j));
        }
    }
    pairs.sort_by(|&(ka, ja), &(kb, jb)| {
        scores
            .get(kb, jb)
            .partial_cmp(&scores.get(ka, ja))
            .unwrap()
            .then(ja.cmp(&jb))
            .then(ka.cmp(&kb))
    });
    let mut groups: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut taken = std::collections::HashSet::new();
    for (k, j) in pairs {
        if groups[k].len() < sizes[k] && !taken.contains(&j) {
            groups[k].push(j);
            taken.insert(j);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

#[cfg(test)]
pub(crate) fn assignment_objective(scores: &Matrix, groups: &[Vec<usize>]) -> f64 {
    groups
        .iter()
        .enumerate()
        .map(|(k, g)| g.iter().map(|&j| scores.get(k, j)).sum::<f64>())
        .sum()
}
