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
//! Student generation from a weight chain.
//!
//! A student is assembled purely by indexing: every student row copies one
//! chain row, its input columns are summed over the teacher dimensions the
//! previous layer's student rows stand for, and normalization entries are
//! averaged over the teacher rows each student row stands for.

mod apportion;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::netgraph::{LayerParams, Model, NormParams, RunningStats};
use crate::numerics::{kernels, Scalar, Tensor};
use crate::partition::RowPartition;
use crate::weightchain::WeightChain;

pub use apportion::apportion;

/// Student rows of one unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitMatcher {
    /// Copies per cluster.
    pub counts: Vec<usize>,
    /// Source chain row of every student row.
    pub src: Vec<usize>,
    /// Teacher rows every student row stands for.
    pub groups: Vec<Vec<usize>>,
}

impl UnitMatcher {
    pub fn width(&self) -> usize {
        self.src.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    pub units: Vec<UnitMatcher>,
}

impl Matcher {
    pub fn widths(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.width()).collect()
    }
}

/// Splits ascending `rows` into `parts` contiguous runs, longer runs first.
pub fn contiguous_split(rows: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (rows.len() / parts, rows.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(rows[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Assigns `widths[unit]` student rows per unit.
pub fn build_matcher(partition: &RowPartition, widths: &[usize]) -> Result<Matcher> {
    if widths.len() != partition.units.len() {
        return Err(contract_err!(
            "{} widths for {} units",
            widths.len(),
            partition.units.len()
        ));
    }
    let units = partition
        .units
        .iter()
        .zip(widths)
        .map(|(unit, &c)| {
            let counts = apportion(&unit.sizes, c)?;
            let mut src = Vec::with_capacity(c);
            let mut groups = Vec::with_capacity(c);
            for (j, rows) in unit.members_of().iter().enumerate() {
                for part in contiguous_split(rows, counts[j]) {
                    src.push(j);
                    groups.push(part);
                }
            }
            Ok(UnitMatcher { counts, src, groups })
        })
        .collect::<Result<_>>()?;
    Ok(Matcher { units })
}

/// Per-unit widths `clamp(round(ratio * N), M, N)`.
pub fn widths_for_ratio(partition: &RowPartition, ratio: f64) -> Vec<usize> {
    partition
        .units
        .iter()
        .map(|u| ((ratio * u.rows() as f64).round() as usize).clamp(u.clusters(), u.rows()))
        .collect()
}

fn average_norm<T: Scalar>(n: &NormParams<T>, groups: &[Vec<usize>]) -> NormParams<T> {
    let avg = |t: &Tensor<T>| {
        Tensor::new(&[groups.len()], kernels::segment_mean(t.data(), groups)).expect("one value per group")
    };
    NormParams {
        gamma: avg(&n.gamma),
        beta: avg(&n.beta),
        running: n.running.as_ref().map(|r| RunningStats {
            mean: avg(&r.mean),
            var: avg(&r.var),
            momentum: r.momentum,
        }),
    }
}

/// Merges columns of a `[classes, N]` head over student row groups.
pub fn sum_head_columns<T: Scalar>(head: &Tensor<T>, groups: &[Vec<usize>]) -> Tensor<T> {
    let [classes, n] = head.shape()[..] else {
        panic!("head must be two-dimensional");
    };
    let src: Vec<usize> = (0..classes).collect();
    let data = kernels::column_sum(head.data(), n, 1, &src, groups);
    Tensor::new(&[classes, groups.len()], data).expect("column sum shape")
}

/// Builds the student selected by `matcher` without any training.
///
/// Weighted layers come from the chain; normalization layers and the head
/// come from the teacher.
pub fn expand<T: Scalar>(chain: &WeightChain<T>, teacher: &Model<T>, matcher: &Matcher) -> Result<Model<T>> {
    chain.check_against(teacher)?;
    let topo = teacher.spec.topology()?;
    if matcher.units.len() != topo.units.len() {
        return Err(contract_err!(
            "matcher has {} units, teacher {}",
            matcher.units.len(),
            topo.units.len()
        ));
    }
    for (u, (m, p)) in matcher.units.iter().zip(&chain.partition.units).enumerate() {
        let mut covered: Vec<usize> = m.groups.iter().flatten().copied().collect();
        covered.sort_unstable();
        let consistent = m.src.len() == m.groups.len()
            && covered == (0..p.rows()).collect::<Vec<_>>()
            && m.src
                .iter()
                .zip(&m.groups)
                .all(|(&j, g)| !g.is_empty() && g.iter().all(|&r| p.assignment[r] == j));
        if !consistent {
            return Err(contract_err!("matcher unit {} does not refine the chain partition", u));
        }
    }
    let spec = teacher.spec.with_unit_widths(&matcher.widths())?;
    let mut layers = Vec::with_capacity(teacher.layers.len());
    for (l, params) in teacher.layers.iter().enumerate() {
        let out = match params {
            LayerParams::Empty => LayerParams::Empty,
            LayerParams::Weighted { .. } => {
                let u = topo.unit_of[l].expect("weighted layer has a unit");
                let link = chain.layer(l)?;
                let [_, n_in, ops] = link.rows.shape()[..] else {
                    unreachable!()
                };
                let identity: Vec<Vec<usize>>;
                let cols = match topo.input_unit[l] {
                    Some(v) => &matcher.units[v].groups,
                    None => {
                        identity = (0..n_in).map(|d| vec![d]).collect();
                        &identity
                    }
                };
                let src = &matcher.units[u].src;
                let data = kernels::column_sum(link.rows.data(), n_in, ops, src, cols);
                let shape = spec.layers[l].weight_shape().expect("weighted");
                LayerParams::Weighted {
                    weight: Tensor::new(&shape, data)?,
                    bias: Tensor::new(&[src.len()], kernels::gather_rows(link.bias.data(), 1, src))?,
                }
            }
            LayerParams::Norm(n) => match topo.unit_of[l] {
                Some(u) => LayerParams::Norm(average_norm(n, &matcher.units[u].groups)),
                None => LayerParams::Norm(n.clone()),
            },
        };
        layers.push(out);
    }
    let head = teacher
        .head
        .as_ref()
        .map(|h| sum_head_columns(h, &matcher.units[topo.feature_unit].groups));
    Ok(Model { spec, layers, head })
}

/// Widths of `chains` weight chains spaced geometrically from `min` to `max`.
///
/// With `x = (max/min)^(1/chains)`, chain `i` has width `round(min * x^i)`
/// and serves targets up to the next chain's width (`max` for the last).
pub fn chain_width_schedule(min: usize, max: usize, chains: usize) -> Result<Vec<usize>> {
    if min == 0 || min > max || chains == 0 {
        return Err(contract_err!(
            "schedule needs 0 < a <= b and s >= 1, got ({}, {}, {})",
            min,
            max,
            chains
        ));
    }
    let x = (max as f64 / min as f64).powf(1.0 / chains as f64);
    Ok((0..chains)
        .map(|i| (min as f64 * x.powi(i as i32)).round() as usize)
        .collect())
}

/// Index of the chain whose range `[w_i, w_{i+1}]` covers `target`.
pub fn covering_chain(schedule: &[usize], max: usize, target: usize) -> Option<usize> {
    (0..schedule.len()).rev().find(|&i| {
        let upper = schedule.get(i + 1).copied().unwrap_or(max);
        schedule[i] <= target && target <= upper
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(contiguous_split(&[4, 7, 9], 2), vec![vec![4, 7], vec![9]]);
        assert_eq!(contiguous_split(&[4, 7, 9], 3), vec![vec![4], vec![7], vec![9]]);
        assert_eq!(contiguous_split(&[4, 7, 9], 1), vec![vec![4, 7, 9]]);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(chain_width_schedule(8, 64, 3).unwrap(), vec![8, 16, 32]);
        assert_eq!(chain_width_schedule(5, 40, 1).unwrap(), vec![5]);
        assert_eq!(chain_width_schedule(6, 6, 4).unwrap(), vec![6; 4]);
        assert_eq!(chain_width_schedule(2, 32, 4).unwrap(), vec![2, 4, 8, 16]);
        assert!(chain_width_schedule(9, 8, 2).is_err());
    }

    #[test]
    fn covering() {
        let s = [8, 16, 32];
        assert_eq!(covering_chain(&s, 64, 8), Some(0));
        assert_eq!(covering_chain(&s, 64, 20), Some(1));
        assert_eq!(covering_chain(&s, 64, 64), Some(2));
        assert_eq!(covering_chain(&s, 64, 4), None);
    }

    #[test]
    fn head_columns() {
        let h = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = sum_head_columns(&h, &[vec![0, 2], vec![1]]);
        assert_eq!(s.data(), &[4.0, 2.0, 10.0, 5.0]);
    }
}
