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
//! The weight chain: clustered rows refined jointly with the teacher.
//!
//! A chain stores only weighted rows. Normalization parameters are read
//! from the teacher it was built from whenever a student or the S-Student
//! is assembled, so both always see the teacher's current values.

mod refine;

use std::collections::BTreeMap;

use crate::error::{contract_err, dim_err, Result};
use crate::expansion::{build_matcher, expand, Matcher};
use crate::netgraph::{BoundLayer, BoundModel, Family, LayerParams, Model, ModelSpec, RunningStats, Topology};
use crate::numerics::{kernels, Graph, Scalar, Tensor, Var};
use crate::partition::RowPartition;

pub use refine::{
    alpha, check_objective_gradients, objective, refine, AlphaMode, LossRecord, ObjectiveVars, RefineHyper,
};

/// Refined rows of one weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainLayer<T: Scalar = f32> {
    pub layer: usize,
    /// `[M, N_in, O]`.
    pub rows: Tensor<T>,
    /// `[M]`.
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightChain<T: Scalar = f32> {
    pub family: Family,
    pub partition: RowPartition,
    /// One entry per weighted layer, in layer order.
    pub layers: Vec<ChainLayer<T>>,
    /// S-Student head, `[classes, M]` of the feature unit.
    pub head: Option<Tensor<T>>,
    /// S-Student batch-norm running statistics, by layer index.
    pub running: BTreeMap<usize, RunningStats<T>>,
}

/// Chain parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct ChainVars {
    pub rows: Vec<Var>,
    pub bias: Vec<Var>,
    pub head: Option<Var>,
}

impl ChainVars {
    /// In the order of [`WeightChain::params_mut`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (r, b) in self.rows.iter().zip(&self.bias) {
            out.extend([*r, *b]);
        }
        out.extend(self.head);
        out
    }
}

impl<T: Scalar> WeightChain<T> {
    pub fn widths(&self) -> Vec<usize> {
        self.partition.widths()
    }

    pub fn layer(&self, l: usize) -> Result<&ChainLayer<T>> {
        self.layers
            .iter()
            .find(|c| c.layer == l)
            .ok_or_else(|| contract_err!("chain has no rows for layer {}", l))
    }

    /// Matcher with one student row per cluster.
    pub fn s_matcher(&self) -> Result<Matcher> {
        build_matcher(&self.partition, &self.widths())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in self.layers.iter_mut() {
            out.push(&mut c.rows);
            out.push(&mut c.bias);
        }
        if let Some(h) = self.head.as_mut() {
            out.push(h);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> ChainVars {
        ChainVars {
            rows: self
                .layers
                .iter()
                .map(|c| g.leaf(c.rows.clone(), requires_grad))
                .collect(),
            bias: self
                .layers
                .iter()
                .map(|c| g.leaf(c.bias.clone(), requires_grad))
                .collect(),
            head: self.head.as_ref().map(|h| g.leaf(h.clone(), requires_grad)),
        }
    }

    /// Verifies the chain was built for this teacher's architecture.
    pub fn check_against(&self, teacher: &Model<T>) -> Result<()> {
        let topo = teacher.spec.topology()?;
        check_partition(&self.partition, &topo)?;
        let weighted: Vec<usize> = topo.weighted_layers().collect();
        if weighted != self.layers.iter().map(|c| c.layer).collect::<Vec<_>>() {
            return Err(contract_err!("chain layers do not match the teacher's weighted layers"));
        }
        for c in &self.layers {
            let unit = self.partition.unit_of_layer(c.layer).expect("checked partition");
            let [_, n_in, ops] = teacher.rows_view(c.layer)?.shape();
            if c.rows.shape() != [unit.clusters(), n_in, ops] || c.bias.shape() != [unit.clusters()] {
                return Err(dim_err!(
                    "chain rows of layer {} have shape {:?}",
                    c.layer,
                    c.rows.shape()
                ));
            }
        }
        Ok(())
    }

    /// Tensors keyed by stable names, for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for c in &self.layers {
            out.push((format!("layers.{}.rows", c.layer), &c.rows));
            out.push((format!("layers.{}.bias", c.layer), &c.bias));
        }
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        for (l, r) in &self.running {
            out.push((format!("running.{l}.mean"), &r.mean));
            out.push((format!("running.{l}.var"), &r.var));
        }
        out
    }

    /// Inverse of [`WeightChain::named_tensors`], shaped after `teacher`.
    pub fn from_named(
        teacher: &Model<T>,
        partition: RowPartition,
        tensors: &BTreeMap<String, Tensor<T>>,
        prefix: &str,
    ) -> Result<Self> {
        let mut chain = init_chain(teacher, &partition)?;
        let get = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| contract_err!("missing tensor {}", key))?;
            if t.shape() != shape {
                return Err(dim_err!(
                    "tensor {} has shape {:?}, expected {:?}",
                    key,
                    t.shape(),
                    shape
                ));
            }
            Ok(t.clone())
        };
        for c in chain.layers.iter_mut() {
            c.rows = get(format!("layers.{}.rows", c.layer), &c.rows.shape().to_vec())?;
            c.bias = get(format!("layers.{}.bias", c.layer), &c.bias.shape().to_vec())?;
        }
        if let Some(h) = chain.head.as_mut() {
            *h = get("head".into(), &h.shape().to_vec())?;
        }
        for (l, r) in chain.running.iter_mut() {
            r.mean = get(format!("running.{l}.mean"), &r.mean.shape().to_vec())?;
            r.var = get(format!("running.{l}.var"), &r.var.shape().to_vec())?;
        }
        Ok(chain)
    }
}

fn check_partition(partition: &RowPartition, topo: &Topology) -> Result<()> {
    if partition.units.len() != topo.units.len() {
        return Err(contract_err!(
            "partition has {} units, teacher {}",
            partition.units.len(),
            topo.units.len()
        ));
    }
    for (u, (p, unit)) in partition.units.iter().zip(&topo.units).enumerate() {
        let sizes_ok = p.sizes.len() >= 1
            && p.sizes.iter().all(|&s| s >= 1)
            && p.sizes.iter().sum::<usize>() == unit.rows
            && p.assignment.iter().all(|&c| c < p.sizes.len());
        if p.members != unit.members || p.assignment.len() != unit.rows || !sizes_ok {
            return Err(contract_err!("partition unit {} does not match the teacher", u));
        }
    }
    Ok(())
}

/// Chain rows initialized to the cluster means of the teacher's rows.
pub fn init_chain<T: Scalar>(teacher: &Model<T>, partition: &RowPartition) -> Result<WeightChain<T>> {
    let topo = teacher.spec.topology()?;
    check_partition(partition, &topo)?;
    let mut layers = Vec::new();
    for l in topo.weighted_layers() {
        let unit = partition.unit_of_layer(l).expect("checked partition");
        let view = teacher.rows_view(l)?;
        let [_, n_in, ops] = view.shape();
        let bias = teacher.bias(l)?;
        let w = n_in * ops;
        let m = unit.clusters();
        let mut rows = vec![0.0f64; m * w];
        let mut b = vec![0.0f64; m];
        let mut seen = vec![0usize; m];
        for (r, &c) in unit.assignment.iter().enumerate() {
            seen[c] += 1;
            let inv = 1.0 / seen[c] as f64;
            for (acc, v) in rows[c * w..(c + 1) * w].iter_mut().zip(view.row(r)) {
                *acc += (v.as_f64() - *acc) * inv;
            }
            b[c] += (bias.data()[r].as_f64() - b[c]) * inv;
        }
        layers.push(ChainLayer {
            layer: l,
            rows: Tensor::<f64>::new(&[m, n_in, ops], rows)?.cast(),
            bias: Tensor::<f64>::new(&[m], b)?.cast(),
        });
    }
    let feature_groups = partition.units[topo.feature_unit].members_of();
    let head = teacher
        .head
        .as_ref()
        .map(|h| crate::expansion::sum_head_columns(h, &feature_groups));
    let mut running = BTreeMap::new();
    for (l, p) in teacher.layers.iter().enumerate() {
        if let (LayerParams::Norm(n), Some(u)) = (p, topo.unit_of[l]) {
            if let Some(r) = &n.running {
                let groups = partition.units[u].members_of();
                let avg = |t: &Tensor<T>| Tensor::new(&[groups.len()], kernels::segment_mean(t.data(), &groups));
                running.insert(
                    l,
                    RunningStats {
                        mean: avg(&r.mean)?,
                        var: avg(&r.var)?,
                        momentum: r.momentum,
                    },
                );
            }
        }
    }
    Ok(WeightChain {
        family: teacher.spec.family,
        partition: partition.clone(),
        layers,
        head,
        running,
    })
}

/// Fixed structure of the S-Student of a chain.
#[derive(Clone, Debug)]
pub struct SStudentPlan {
    pub spec: ModelSpec,
    pub teacher_topology: Topology,
    pub matcher: Matcher,
}

impl SStudentPlan {
    pub fn new<T: Scalar>(chain: &WeightChain<T>, teacher: &Model<T>) -> Result<Self> {
        chain.check_against(teacher)?;
        Ok(Self {
            spec: teacher.spec.with_unit_widths(&chain.widths())?,
            teacher_topology: teacher.spec.topology()?,
            matcher: chain.s_matcher()?,
        })
    }

    /// S-Student parameters as differentiable functions of the chain rows
    /// and the teacher's normalization parameters.
    pub fn bind<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        teacher: &BoundModel<T>,
        chain: &WeightChain<T>,
        vars: &ChainVars,
    ) -> Result<BoundModel<T>> {
        let topo = &self.teacher_topology;
        let mut layers = Vec::with_capacity(teacher.layers.len());
        let mut next = 0;
        for (l, bound) in teacher.layers.iter().enumerate() {
            let out = match bound {
                BoundLayer::Empty => BoundLayer::Empty,
                BoundLayer::Weighted { .. } => {
                    let (rows, bias) = (vars.rows[next], vars.bias[next]);
                    next += 1;
                    let u = topo.unit_of[l].expect("weighted layer has a unit");
                    let src = &self.matcher.units[u].src;
                    let merged = match topo.input_unit[l] {
                        Some(v) => g.column_sum(rows, src, &self.matcher.units[v].groups)?,
                        None => g.gather_rows(rows, src)?,
                    };
                    let shape = self.spec.layers[l].weight_shape().expect("weighted");
                    BoundLayer::Weighted {
                        weight: g.reshape(merged, &shape)?,
                        bias: g.gather_rows(bias, src)?,
                    }
                }
                BoundLayer::Norm { gamma, beta, running } => match topo.unit_of[l] {
                    Some(u) => {
                        let groups = &self.matcher.units[u].groups;
                        BoundLayer::Norm {
                            gamma: g.segment_mean(*gamma, groups)?,
                            beta: g.segment_mean(*beta, groups)?,
                            running: chain.running.get(&l).cloned(),
                        }
                    }
                    None => BoundLayer::Norm {
                        gamma: *gamma,
                        beta: *beta,
                        running: running.clone(),
                    },
                },
            };
            layers.push(out);
        }
        Ok(BoundModel {
            layers,
            head: vars.head,
        })
    }
}

/// The S-Student as a standalone model (eval view).
pub fn build_s_student<T: Scalar>(chain: &WeightChain<T>, teacher: &Model<T>) -> Result<Model<T>> {
    let mut s = expand(chain, teacher, &chain.s_matcher()?)?;
    s.head = chain.head.clone();
    for (l, r) in &chain.running {
        if let LayerParams::Norm(n) = &mut s.layers[*l] {
            n.running = Some(r.clone());
        }
    }
    Ok(s)
}

/// Clustering loss: mean over layers of the per-cluster-normalized squared
/// distance between teacher rows (bias included) and their chain row.
pub fn refine_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &BoundModel<T>,
    chain: &WeightChain<T>,
    vars: &ChainVars,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(chain.layers.len());
    for (i, c) in chain.layers.iter().enumerate() {
        let BoundLayer::Weighted { weight, bias } = teacher.layers[c.layer] else {
            return Err(contract_err!("layer {} is not weighted in the teacher", c.layer));
        };
        let unit = chain
            .partition
            .unit_of_layer(c.layer)
            .ok_or_else(|| contract_err!("layer {} has no partition", c.layer))?;
        let mut shape = c.rows.shape().to_vec();
        shape[0] = unit.rows();
        let t_rows = g.reshape(weight, &shape)?;
        let c_rows = g.gather_rows(vars.rows[i], &unit.assignment)?;
        let d = g.sub(t_rows, c_rows)?;
        let d = g.square(d);
        let sw = g.sum(d);
        let c_bias = g.gather_rows(vars.bias[i], &unit.assignment)?;
        let db = g.sub(bias, c_bias)?;
        let db = g.square(db);
        let sb = g.sum(db);
        let layer = g.add(sw, sb)?;
        terms.push(g.scale(layer, T::lit(1.0 / unit.clusters() as f64)));
    }
    let mut total = *terms.first().ok_or_else(|| contract_err!("chain has no layers"))?;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, T::lit(1.0 / terms.len() as f64)))
}

/// [`refine_loss`] evaluated without gradient tracking.
pub fn refine_loss_value<T: Scalar>(teacher: &Model<T>, chain: &WeightChain<T>) -> Result<f64> {
    let mut g = Graph::new();
    let tb = teacher.bind(&mut g, false);
    let cv = chain.bind(&mut g, false);
    let l = refine_loss(&mut g, &tb, chain, &cv)?;
    Ok(g.value(l).item().as_f64())
}
