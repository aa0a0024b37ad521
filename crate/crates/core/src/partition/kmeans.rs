// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::RngStream;

/// Default cap on Lloyd iterations.
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    /// Distance between two vectors; cosine distance is `1 - cos` and 1 when
    /// either side has zero norm.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => sq_dist(a, b).sqrt(),
            Metric::Cosine => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (1.0 - dot / (na * nb)).max(0.0)
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster of each row, labelled in order of first appearance.
    pub assignment: Vec<usize>,
    /// `[k, dim]` member means.
    pub centers: Vec<f64>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squared Euclidean distances after each update.
    pub sse_trace: Vec<f64>,
    pub repairs: usize,
    pub converged: bool,
}

struct Rows<'a> {
    data: &'a [f64],
    dim: usize,
}

impl Rows<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// k-means over the rows of a `[n, dim]` matrix.
///
/// Rows are processed in a canonical (lexicographic) order, so the result
/// as a set of sets does not depend on the order rows are given in.
pub fn kmeans(
    data: &[f64],
    dim: usize,
    k: usize,
    metric: Metric,
    rng: &RngStream,
    max_iters: usize,
) -> Result<KMeansResult> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(dim_err!("{} values do not form rows of width {}", data.len(), dim));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(contract_err!("cannot form {} clusters from {} rows", k, n));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(contract_err!("rows contain non-finite values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&data[a * dim..(a + 1) * dim], &data[b * dim..(b + 1) * dim]);
        ra.iter()
            .zip(rb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<f64> = order
        .iter()
        .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    let rows = Rows { data: &sorted, dim };
    let mut res = lloyd(&rows, k, metric, rng, max_iters);
    let mut assignment = vec![0; n];
    for (s, &orig) in order.iter().enumerate() {
        assignment[orig] = res.assignment[s];
    }
    res.assignment = assignment;
    relabel(&mut res, dim);
    Ok(res)
}

/// Renames clusters by their lowest member row.
fn relabel(res: &mut KMeansResult, dim: usize) {
    let k = res.sizes.len();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &c in &res.assignment {
        if map[c] == usize::MAX {
            map[c] = next;
            next += 1;
        }
    }
    let mut centers = vec![0.0; res.centers.len()];
    let mut sizes = vec![0; k];
    for old in 0..k {
        let new = map[old];
        centers[new * dim..(new + 1) * dim].copy_from_slice(&res.centers[old * dim..(old + 1) * dim]);
        sizes[new] = res.sizes[old];
    }
    for c in res.assignment.iter_mut() {
        *c = map[*c];
    }
    res.centers = centers;
    res.sizes = sizes;
}

fn lloyd(rows: &Rows, k: usize, metric: Metric, rng: &RngStream, max_iters: usize) -> KMeansResult {
    let pinned: Vec<bool> = (0..rows.len())
        .map(|i| metric == Metric::Cosine && norm(rows.get(i)) == 0.0)
        .collect();
    let zero_rows = pinned.iter().filter(|&&p| p).count();
    if zero_rows > 0 {
        log::warn!(
            "{} zero-norm rows assigned to cluster 0 under the cosine metric",
            zero_rows
        );
    }
    let mut centers = seed_centers(rows, k, metric, &mut rng.clone());
    let mut assignment = assign(rows, &centers, k, metric, &pinned);
    let mut repairs = repair_empty(rows, &mut assignment, &mut centers, k, metric, &pinned);
    let mut sse_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        centers = means(rows, &assignment, k);
        sse_trace.push(sse(rows, &assignment, &centers));
        iterations += 1;
        let mut next = assign(rows, &centers, k, metric, &pinned);
        repairs += repair_empty(rows, &mut next, &mut centers, k, metric, &pinned);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    if !converged {
        centers = means(rows, &assignment, k);
        sse_trace.push(sse(rows, &assignment, &centers));
    }
    let mut sizes = vec![0; k];
    for &c in &assignment {
        sizes[c] += 1;
    }
    KMeansResult {
        assignment,
        centers,
        sizes,
        iterations,
        sse_trace,
        repairs,
        converged,
    }
}

/// Greedy k-means++: each new center is the best of several candidates
/// drawn with probability proportional to the squared distance.
fn seed_centers(rows: &Rows, k: usize, metric: Metric, rng: &mut RngStream) -> Vec<f64> {
    let n = rows.len();
    let dim = rows.dim;
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut centers = rows.get(first).to_vec();
    let mut closest: Vec<f64> = (0..n)
        .map(|i| metric.distance(rows.get(i), rows.get(first)).powi(2))
        .collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    if d > 0.0 && target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                while closest[pick] == 0.0 && pick > 0 {
                    pick -= 1;
                }
                pick
            } else {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            };
            let updated: Vec<f64> = (0..n)
                .map(|i| closest[i].min(metric.distance(rows.get(i), rows.get(cand)).powi(2)))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(_, p, _)| potential < *p) {
                best = Some((cand, potential, updated));
            }
        }
        let (cand, _, updated) = best.expect("at least one trial");
        chosen.push(cand);
        centers.extend_from_slice(rows.get(cand));
        closest = updated;
    }
    debug_assert_eq!(centers.len(), k * dim);
    centers
}

fn nearest(row: &[f64], centers: &[f64], k: usize, metric: Metric) -> (usize, f64) {
    let dim = row.len();
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let d = metric.distance(row, &centers[c * dim..(c + 1) * dim]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(rows: &Rows, centers: &[f64], k: usize, metric: Metric, pinned: &[bool]) -> Vec<usize> {
    (0..rows.len())
        .map(|i| {
            if pinned[i] {
                0
            } else {
                nearest(rows.get(i), centers, k, metric).0
            }
        })
        .collect()
}

/// Incremental member means; a cluster of identical rows reproduces the
/// row exactly.
fn means(rows: &Rows, assignment: &[usize], k: usize) -> Vec<f64> {
    let dim = rows.dim;
    let mut centers = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        let inv = 1.0 / counts[c] as f64;
        for (m, v) in centers[c * dim..(c + 1) * dim].iter_mut().zip(rows.get(i)) {
            *m += (v - *m) * inv;
        }
    }
    centers
}

fn sse(rows: &Rows, assignment: &[usize], centers: &[f64]) -> f64 {
    let dim = rows.dim;
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(rows.get(i), &centers[c * dim..(c + 1) * dim]))
        .sum()
}

/// Reseeds every empty cluster with the row farthest from its own center,
/// taken from a cluster that keeps at least one member. Returns the number
/// of clusters reseeded.
fn repair_empty(
    rows_data: &Rows,
    assignment: &mut [usize],
    centers: &mut [f64],
    k: usize,
    metric: Metric,
    pinned: &[bool],
) -> usize {
    let dim = rows_data.dim;
    let mut sizes = vec![0usize; k];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    let mut repaired = 0;
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &c) in assignment.iter().enumerate() {
            if sizes[c] < 2 || pinned[i] {
                continue;
            }
            let d = metric.distance(rows_data.get(i), &centers[c * dim..(c + 1) * dim]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((row, _)) = far else { break };
        sizes[assignment[row]] -= 1;
        assignment[row] = empty;
        sizes[empty] = 1;
        centers[empty * dim..(empty + 1) * dim].copy_from_slice(rows_data.get(row));
        repaired += 1;
    }
    repaired
}
