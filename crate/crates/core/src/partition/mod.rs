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
//! Row clustering of a teacher, one partition per unit.

mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::netgraph::{Family, Model};
use crate::numerics::{RngStream, Scalar, Tensor};
use crate::parallel::*;

pub use kmeans::{kmeans, KMeansResult, Metric, DEFAULT_MAX_ITERS};

impl Metric {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::CnnLike => Metric::Euclidean,
            Family::MlpLike => Metric::Cosine,
        }
    }
}

/// Cluster centers of one weighted layer, split back out of the
/// concatenated unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCenters {
    pub layer: usize,
    /// `[M, N_in, O]`.
    pub rows: Tensor<f64>,
    /// `[M]`.
    pub bias: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitPartition {
    /// Weighted layers sharing this assignment.
    pub members: Vec<usize>,
    /// Cluster of every teacher row.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
    pub sse_trace: Vec<f64>,
    #[serde(skip)]
    pub centers: Vec<LayerCenters>,
}

impl UnitPartition {
    pub fn rows(&self) -> usize {
        self.assignment.len()
    }

    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }

    /// Teacher rows of every cluster, ascending.
    pub fn members_of(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters()];
        for (row, &c) in self.assignment.iter().enumerate() {
            out[c].push(row);
        }
        out
    }

    /// Builds a partition from a given assignment, without centers.
    pub fn from_assignment(members: Vec<usize>, assignment: Vec<usize>) -> Result<Self> {
        let k = assignment.iter().max().map_or(0, |&m| m + 1);
        let mut sizes = vec![0; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        if sizes.contains(&0) {
            return Err(contract_err!("assignment leaves a cluster empty"));
        }
        Ok(Self {
            members,
            assignment,
            sizes,
            iterations: 0,
            sse_trace: Vec::new(),
            centers: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowPartition {
    pub metric: Metric,
    /// Indexed like the teacher topology's units.
    pub units: Vec<UnitPartition>,
}

impl RowPartition {
    pub fn widths(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.clusters()).collect()
    }

    /// Partition of the unit owning weighted layer `l`.
    pub fn unit_of_layer(&self, l: usize) -> Option<&UnitPartition> {
        self.units.iter().find(|u| u.members.contains(&l))
    }
}

/// Concatenated `[N, Σ(N_in·O + 1)]` rows of a unit, bias last per member.
pub fn unit_rows<T: Scalar>(teacher: &Model<T>, members: &[usize]) -> Result<(Vec<f64>, usize)> {
    let mut views = Vec::new();
    for &l in members {
        views.push((teacher.rows_view(l)?, teacher.bias(l)?));
    }
    let n = views[0].0.shape()[0];
    let dim: usize = views.iter().map(|(v, _)| v.shape()[1] * v.shape()[2] + 1).sum();
    let mut data = Vec::with_capacity(n * dim);
    for r in 0..n {
        for (v, b) in &views {
            data.extend(v.row(r).iter().map(|x| x.as_f64()));
            data.push(b.data()[r].as_f64());
        }
    }
    Ok((data, dim))
}

/// Clusters the rows of every unit of `teacher` into `widths[unit]` clusters.
///
/// Units are clustered independently, each from its own derived stream.
pub fn cluster_model<T: Scalar>(
    teacher: &Model<T>,
    widths: &[usize],
    metric: Metric,
    rng: &RngStream,
    max_iters: usize,
) -> Result<RowPartition> {
    let topo = teacher.spec.topology()?;
    if widths.len() != topo.units.len() {
        return Err(contract_err!(
            "{} chain widths for {} units",
            widths.len(),
            topo.units.len()
        ));
    }
    for (u, (unit, &m)) in topo.units.iter().zip(widths).enumerate() {
        if m == 0 || m > unit.rows {
            return Err(contract_err!(
                "unit {} has {} rows, cannot hold {} clusters",
                u,
                unit.rows,
                m
            ));
        }
    }
    let units: Vec<Result<UnitPartition>> = topo
        .units
        .par_iter()
        .zip(widths.par_iter())
        .enumerate()
        .map(|(u, (unit, &m))| {
            let (data, dim) = unit_rows(teacher, &unit.members)?;
            let res = kmeans(&data, dim, m, metric, &rng.derive(u as u64), max_iters)?;
            let mut centers = Vec::new();
            let mut offset = 0;
            for &l in &unit.members {
                let [_, n_in, ops] = teacher.rows_view(l)?.shape();
                let w = n_in * ops;
                let mut rows = Vec::with_capacity(m * w);
                let mut bias = Vec::with_capacity(m);
                for c in 0..m {
                    let center = &res.centers[c * dim..(c + 1) * dim];
                    rows.extend_from_slice(&center[offset..offset + w]);
                    bias.push(center[offset + w]);
                }
                centers.push(LayerCenters {
                    layer: l,
                    rows: Tensor::new(&[m, n_in, ops], rows)?,
                    bias: Tensor::new(&[m], bias)?,
                });
                offset += w + 1;
            }
            Ok(UnitPartition {
                members: unit.members.clone(),
                assignment: res.assignment,
                sizes: res.sizes,
                iterations: res.iterations,
                sse_trace: res.sse_trace,
                centers,
            })
        })
        .collect();
    Ok(RowPartition {
        metric,
        units: units.into_iter().collect::<Result<_>>()?,
    })
}
