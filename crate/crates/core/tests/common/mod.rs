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
#![allow(dead_code)]

use oskt_core::netgraph::{reference_teacher, tie_rows, Family, LayerParams, Model, TeacherConfig};
use oskt_core::{RngStream, Scalar, Tensor};
use rand::Rng;

pub fn cnn_cfg(width: usize, blocks: usize, classes: usize) -> TeacherConfig {
    TeacherConfig::new(Family::CnnLike, width, blocks, classes, vec![3, 8, 8])
}

pub fn mlp_cfg(width: usize, blocks: usize, classes: usize) -> TeacherConfig {
    TeacherConfig::new(Family::MlpLike, width, blocks, classes, vec![12])
}

/// Random assignment of `rows` rows into exactly `k` nonempty clusters.
pub fn random_assignment(rows: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut a: Vec<usize> = (0..rows)
        .map(|r| if r < k { r } else { rng.random_range(0..k) })
        .collect();
    for i in (1..rows).rev() {
        a.swap(i, rng.random_range(0..=i));
    }
    a
}

/// Gives every norm layer random affine pairs and running statistics.
pub fn randomize_norms<T: Scalar>(model: &mut Model<T>, rng: &RngStream) {
    for (l, p) in model.layers.iter_mut().enumerate() {
        if let LayerParams::Norm(n) = p {
            let mut r = rng.derive(l as u64);
            let d = n.gamma.len();
            n.gamma = Tensor::<T>::randn(&[d], 0.3, &mut r).map(|v| v + T::one());
            n.beta = Tensor::randn(&[d], 0.3, &mut r);
            if let Some(run) = n.running.as_mut() {
                run.mean = Tensor::randn(&[d], 0.3, &mut r);
                run.var = Tensor::<T>::randn(&[d], 0.3, &mut r).map(|v| v.abs() + T::lit(0.5));
            }
        }
    }
}

/// Gives every bias random values.
pub fn randomize_biases<T: Scalar>(model: &mut Model<T>, rng: &RngStream) {
    for (l, p) in model.layers.iter_mut().enumerate() {
        if let LayerParams::Weighted { bias, .. } = p {
            *bias = Tensor::randn(bias.shape(), 0.1, &mut rng.derive(1000 + l as u64));
        }
    }
}

/// A teacher whose units hold `k[u]` groups of identical rows.
pub fn planted_teacher<T: Scalar>(cfg: &TeacherConfig, k: &[usize], seed: u64) -> (Model<T>, Vec<Vec<usize>>) {
    let rng = RngStream::new(seed);
    let mut m: Model<T> = reference_teacher(cfg, &rng).unwrap();
    randomize_norms(&mut m, &rng.derive(1));
    randomize_biases(&mut m, &rng.derive(2));
    let topo = m.spec.topology().unwrap();
    let mut r = rng.derive(3);
    let assign: Vec<Vec<usize>> = topo
        .units
        .iter()
        .zip(k)
        .map(|(u, &k)| random_assignment(u.rows, k, &mut r))
        .collect();
    tie_rows(&mut m, &assign).unwrap();
    (m, assign)
}

/// True when two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}
