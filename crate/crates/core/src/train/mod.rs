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
//! Supervised training with identity and triplet losses.

use serde::{Deserialize, Serialize};

use crate::error::{numeric_err, Result};
use crate::netgraph::{forward, id_loss, triplet_hard_loss, Mode, Model};
use crate::numerics::{Adam, AdamConfig, Gradients, Graph, Scalar, Tensor, Var};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.3;

/// A stream of labelled training batches.
pub trait BatchSource<T: Scalar> {
    fn next_batch(&mut self) -> Result<(Tensor<T>, Vec<usize>)>;

    fn batches_per_epoch(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub margin: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            adam: AdamConfig::default(),
            margin: DEFAULT_MARGIN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Takes the gradient of every var in order; vars that were not reached
/// get zeros of the given shapes.
pub(crate) fn collect_grads<T: Scalar>(
    grads: &mut Gradients<T>,
    vars: &[Var],
    shapes: &[Vec<usize>],
) -> Vec<Tensor<T>> {
    vars.iter()
        .zip(shapes)
        .map(|(&v, s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(s)))
        .collect()
}

/// ID plus triplet loss of one forward output.
pub(crate) fn reid_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    logits: Option<Var>,
    labels: &[usize],
    margin: f64,
) -> Result<(Var, f64, f64)> {
    let tri = triplet_hard_loss(g, features, labels, margin)?;
    let tri_v = g.value(tri).item().as_f64();
    match logits {
        Some(p) => {
            let id = id_loss(g, p, labels)?;
            let id_v = g.value(id).item().as_f64();
            Ok((g.add(id, tri)?, id_v, tri_v))
        }
        None => Ok((tri, 0.0, tri_v)),
    }
}

/// Trains every parameter of `model` for `hyper.epochs` epochs.
pub fn train_supervised<T: Scalar, S: BatchSource<T>>(
    model: &mut Model<T>,
    source: &mut S,
    hyper: &TrainHyper,
) -> Result<Vec<EpochRecord>> {
    let mut opt = Adam::new(hyper.adam.clone());
    let mut history = Vec::with_capacity(hyper.epochs);
    let steps = source.batches_per_epoch().max(1);
    for epoch in 0..hyper.epochs {
        let (mut id_sum, mut tri_sum) = (0.0, 0.0);
        for step in 0..steps {
            let (x, labels) = source.next_batch()?;
            let mut g = Graph::new();
            let mut bound = model.bind(&mut g, true);
            let xv = g.constant(x);
            let out = forward(&mut g, &model.spec, &mut bound, xv, Mode::Train)?;
            let (loss, id, tri) = reid_loss(&mut g, out.features, out.logits, &labels, hyper.margin)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(numeric_err!(
                    "non-finite training loss at epoch {} step {}",
                    epoch,
                    step
                ));
            }
            let mut grads = g.backward(loss)?;
            let vars = bound.params();
            let mut params = model.params_mut();
            let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
            let gs = collect_grads(&mut grads, &vars, &shapes);
            opt.step(&mut params, &gs)?;
            model.absorb_running(&bound);
            id_sum += id;
            tri_sum += tri;
        }
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            id: id_sum / n,
            triplet: tri_sum / n,
            total: (id_sum + tri_sum) / n,
        };
        log::debug!("epoch {} id {:.4} triplet {:.4}", epoch, rec.id, rec.triplet);
        history.push(rec);
    }
    Ok(history)
}
