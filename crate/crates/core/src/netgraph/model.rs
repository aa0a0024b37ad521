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
use std::collections::BTreeMap;

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{Graph, RngStream, Scalar, Tensor, Var};

use super::spec::{Activation, LayerKind, ModelSpec, NormKind, BN_EPS, BN_MOMENTUM, LN_EPS};

/// Standard deviation of the freshly initialized head.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn fresh(dims: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[dims]),
            var: Tensor::ones(&[dims]),
            momentum: BN_MOMENTUM,
        }
    }

    /// Folds one batch's statistics in.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Affine pair of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Present for batch norm only.
    pub running: Option<RunningStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Scalar = f32> {
    Empty,
    Weighted { weight: Tensor<T>, bias: Tensor<T> },
    Norm(NormParams<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A network description together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams<T>>,
    /// `[classes, embedding_dim]`, no bias.
    pub head: Option<Tensor<T>>,
}

/// Borrowed `[rows, in_dims, ops]` view of a weighted layer.
#[derive(Clone, Copy, Debug)]
pub struct RowsView<'a, T: Scalar> {
    data: &'a [T],
    rows: usize,
    in_dims: usize,
    ops: usize,
}

impl<'a, T: Scalar> RowsView<'a, T> {
    pub fn shape(&self) -> [usize; 3] {
        [self.rows, self.in_dims, self.ops]
    }

    pub fn row(&self, i: usize) -> &'a [T] {
        let w = self.in_dims * self.ops;
        &self.data[i * w..(i + 1) * w]
    }

    pub fn data(&self) -> &'a [T] {
        self.data
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&self.shape(), self.data.to_vec()).expect("view shape matches storage")
    }
}

/// Borrowed view of input dimension `d` across all rows of a layer.
#[derive(Clone, Copy, Debug)]
pub struct ColsView<'a, T: Scalar> {
    rows: RowsView<'a, T>,
    d: usize,
}

impl<T: Scalar> ColsView<'_, T> {
    /// `[rows, ops]`.
    pub fn shape(&self) -> [usize; 2] {
        [self.rows.rows, self.rows.ops]
    }

    pub fn get(&self, row: usize, op: usize) -> T {
        self.rows.row(row)[self.d * self.rows.ops + op]
    }

    pub fn to_vec(&self) -> Vec<T> {
        (0..self.rows.rows)
            .flat_map(|r| (0..self.rows.ops).map(move |o| (r, o)))
            .map(|(r, o)| self.get(r, o))
            .collect()
    }
}

/// Parameters of a model placed on a graph.
#[derive(Clone, Debug)]
pub enum BoundLayer<T: Scalar = f32> {
    Empty,
    Weighted {
        weight: Var,
        bias: Var,
    },
    Norm {
        gamma: Var,
        beta: Var,
        running: Option<RunningStats<T>>,
    },
}

#[derive(Clone, Debug)]
pub struct BoundModel<T: Scalar = f32> {
    pub layers: Vec<BoundLayer<T>>,
    pub head: Option<Var>,
}

impl<T: Scalar> BoundModel<T> {
    /// Parameter vars in the order of [`Model::params_mut`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                BoundLayer::Empty => {}
                BoundLayer::Weighted { weight, bias } => out.extend([*weight, *bias]),
                BoundLayer::Norm { gamma, beta, .. } => out.extend([*gamma, *beta]),
            }
        }
        out.extend(self.head);
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub logits: Option<Var>,
}

impl<T: Scalar> Model<T> {
    /// He-normal weights, zero biases, unit scales, zero shifts.
    pub fn init(spec: ModelSpec, rng: &RngStream) -> Result<Self> {
        let topo = spec.topology()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, layer) in spec.layers.iter().enumerate() {
            let params = match &layer.kind {
                LayerKind::Dense { .. } | LayerKind::Conv { .. } => {
                    let shape = layer.weight_shape().expect("weighted");
                    let fan_in = layer.in_dims().unwrap() * layer.op_params().unwrap();
                    let mut r = rng.derive(l as u64);
                    LayerParams::Weighted {
                        weight: Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut r),
                        bias: Tensor::zeros(&[layer.out_rows().unwrap()]),
                    }
                }
                LayerKind::Norm { norm, dims } => LayerParams::Norm(NormParams {
                    gamma: Tensor::ones(&[*dims]),
                    beta: Tensor::zeros(&[*dims]),
                    running: (*norm == NormKind::Batch).then(|| RunningStats::fresh(*dims)),
                }),
                _ => LayerParams::Empty,
            };
            layers.push(params);
        }
        let head = spec.num_classes.map(|c| {
            let emb = topo.units[topo.feature_unit].rows;
            Tensor::randn(&[c, emb], HEAD_INIT_STD, &mut rng.derive(spec.layers.len() as u64))
        });
        Ok(Self { spec, layers, head })
    }

    fn weighted(&self, l: usize) -> Result<(&Tensor<T>, &Tensor<T>)> {
        match self.layers.get(l) {
            Some(LayerParams::Weighted { weight, bias }) => Ok((weight, bias)),
            _ => Err(contract_err!("layer {} is not a weighted layer", l)),
        }
    }

    pub fn weight(&self, l: usize) -> Result<&Tensor<T>> {
        self.weighted(l).map(|(w, _)| w)
    }

    pub fn bias(&self, l: usize) -> Result<&Tensor<T>> {
        self.weighted(l).map(|(_, b)| b)
    }

    pub fn weighted_mut(&mut self, l: usize) -> Result<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self.layers.get_mut(l) {
            Some(LayerParams::Weighted { weight, bias }) => Ok((weight, bias)),
            _ => Err(contract_err!("layer {} is not a weighted layer", l)),
        }
    }

    pub fn norm(&self, l: usize) -> Result<&NormParams<T>> {
        match self.layers.get(l) {
            Some(LayerParams::Norm(p)) => Ok(p),
            _ => Err(contract_err!("layer {} is not a normalization layer", l)),
        }
    }

    pub fn norm_mut(&mut self, l: usize) -> Result<&mut NormParams<T>> {
        match self.layers.get_mut(l) {
            Some(LayerParams::Norm(p)) => Ok(p),
            _ => Err(contract_err!("layer {} is not a normalization layer", l)),
        }
    }

    /// Layer `l` as `[N_l, N_{l-1}, O_l]`.
    pub fn rows_view(&self, l: usize) -> Result<RowsView<'_, T>> {
        let (w, _) = self.weighted(l)?;
        let layer = &self.spec.layers[l];
        Ok(RowsView {
            data: w.data(),
            rows: layer.out_rows().unwrap(),
            in_dims: layer.in_dims().unwrap(),
            ops: layer.op_params().unwrap(),
        })
    }

    /// Input dimension `d` of layer `l` across its rows.
    pub fn cols_view(&self, l: usize, d: usize) -> Result<ColsView<'_, T>> {
        let rows = self.rows_view(l)?;
        if d >= rows.in_dims {
            return Err(dim_err!("column {} of layer {} with {} inputs", d, l, rows.in_dims));
        }
        Ok(ColsView { rows, d })
    }

    /// Mutable parameters, in the order of [`BoundModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                LayerParams::Empty => {}
                LayerParams::Weighted { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::Norm(p) => {
                    out.push(&mut p.gamma);
                    out.push(&mut p.beta);
                }
            }
        }
        if let Some(h) = self.head.as_mut() {
            out.push(h);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.head.as_ref().map_or(0, |h| h.len());
        for layer in &self.layers {
            n += match layer {
                LayerParams::Empty => 0,
                LayerParams::Weighted { weight, bias } => weight.len() + bias.len(),
                LayerParams::Norm(p) => p.gamma.len() + p.beta.len(),
            };
        }
        n
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundModel<T> {
        let layers = self
            .layers
            .iter()
            .map(|p| match p {
                LayerParams::Empty => BoundLayer::Empty,
                LayerParams::Weighted { weight, bias } => BoundLayer::Weighted {
                    weight: g.leaf(weight.clone(), requires_grad),
                    bias: g.leaf(bias.clone(), requires_grad),
                },
                LayerParams::Norm(n) => BoundLayer::Norm {
                    gamma: g.leaf(n.gamma.clone(), requires_grad),
                    beta: g.leaf(n.beta.clone(), requires_grad),
                    running: n.running.clone(),
                },
            })
            .collect();
        let head = self.head.as_ref().map(|h| g.leaf(h.clone(), requires_grad));
        BoundModel { layers, head }
    }

    /// Copies running statistics tracked by a bound forward back into the model.
    pub fn absorb_running(&mut self, bound: &BoundModel<T>) {
        for (p, b) in self.layers.iter_mut().zip(&bound.layers) {
            if let (LayerParams::Norm(n), BoundLayer::Norm { running: Some(r), .. }) = (p, b) {
                n.running = Some(r.clone());
            }
        }
    }

    /// Eval-mode forward on a graph without gradient tracking.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &self.spec, &mut bound, xv, Mode::Eval)?;
        let logits = out.logits.map(|v| g.value(v).clone());
        Ok((g.value(out.features).clone(), logits))
    }

    /// Eval-mode embeddings, in chunks of `chunk` samples.
    pub fn embed(&self, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = x.shape().first().copied().unwrap_or(0);
        let width = x.row_width();
        let mut data = Vec::new();
        let mut dim = 0;
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(&shape, x.data()[start * width..end * width].to_vec())?;
            let (f, _) = self.forward_eval(&part)?;
            dim = f.shape()[1];
            data.extend_from_slice(f.data());
        }
        Tensor::new(&[n, dim], data)
    }

    /// Tensors keyed by stable names, for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            match p {
                LayerParams::Empty => {}
                LayerParams::Weighted { weight, bias } => {
                    out.push((format!("layers.{l}.weight"), weight));
                    out.push((format!("layers.{l}.bias"), bias));
                }
                LayerParams::Norm(n) => {
                    out.push((format!("layers.{l}.gamma"), &n.gamma));
                    out.push((format!("layers.{l}.beta"), &n.beta));
                    if let Some(r) = &n.running {
                        out.push((format!("layers.{l}.running_mean"), &r.mean));
                        out.push((format!("layers.{l}.running_var"), &r.var));
                    }
                }
            }
        }
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Inverse of [`Model::named_tensors`]; names under other prefixes are ignored.
    pub fn from_named(spec: ModelSpec, tensors: &BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<Self> {
        let template = Model::<T>::init(spec, &RngStream::new(0))?;
        let mut model = template.clone();
        let names: Vec<(String, Vec<usize>)> = template
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| contract_err!("missing tensor {}", key))?;
            if t.shape() != shape.as_slice() {
                return Err(dim_err!(
                    "tensor {} has shape {:?}, expected {:?}",
                    key,
                    t.shape(),
                    shape
                ));
            }
            *model.named_slot(&name).expect("name from template") = t.clone();
        }
        Ok(model)
    }

    fn named_slot(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if name == "head" {
            return self.head.as_mut();
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, field) = rest.split_once('.')?;
        let l: usize = idx.parse().ok()?;
        match (self.layers.get_mut(l)?, field) {
            (LayerParams::Weighted { weight, .. }, "weight") => Some(weight),
            (LayerParams::Weighted { bias, .. }, "bias") => Some(bias),
            (LayerParams::Norm(n), "gamma") => Some(&mut n.gamma),
            (LayerParams::Norm(n), "beta") => Some(&mut n.beta),
            (LayerParams::Norm(n), "running_mean") => n.running.as_mut().map(|r| &mut r.mean),
            (LayerParams::Norm(n), "running_var") => n.running.as_mut().map(|r| &mut r.var),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cast_norm = |n: &NormParams<T>| NormParams {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
            running: n.running.as_ref().map(|r| RunningStats {
                mean: r.mean.cast(),
                var: r.var.cast(),
                momentum: r.momentum,
            }),
        };
        Model {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|p| match p {
                    LayerParams::Empty => LayerParams::Empty,
                    LayerParams::Weighted { weight, bias } => LayerParams::Weighted {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    LayerParams::Norm(n) => LayerParams::Norm(cast_norm(n)),
                })
                .collect(),
            head: self.head.as_ref().map(|h| h.cast()),
        }
    }
}

/// Runs the network described by `spec` with bound parameters.
///
/// In train mode batch-norm layers use batch statistics and fold them into
/// the running statistics held by `bound`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    bound: &mut BoundModel<T>,
    x: Var,
    mode: Mode,
) -> Result<ForwardOutput> {
    let xs = g.shape(x);
    if xs.len() != spec.input_shape.len() + 1 || xs[1..] != spec.input_shape[..] {
        return Err(dim_err!("batch {:?} for input shape {:?}", xs, spec.input_shape));
    }
    if bound.layers.len() != spec.layers.len() {
        return Err(contract_err!(
            "{} bound layers for {} spec layers",
            bound.layers.len(),
            spec.layers.len()
        ));
    }
    let mut cur = x;
    let mut saved = Vec::new();
    for (layer, params) in spec.layers.iter().zip(bound.layers.iter_mut()) {
        cur = match (&layer.kind, params) {
            (LayerKind::Dense { .. }, BoundLayer::Weighted { weight, bias }) => g.linear(cur, *weight, Some(*bias))?,
            (LayerKind::Conv { stride, pad, .. }, BoundLayer::Weighted { weight, bias }) => {
                g.conv2d(cur, *weight, Some(*bias), *stride, *pad)?
            }
            (
                LayerKind::Norm {
                    norm: NormKind::Layer, ..
                },
                BoundLayer::Norm { gamma, beta, .. },
            ) => g.layer_norm(cur, *gamma, *beta, LN_EPS)?,
            (
                LayerKind::Norm {
                    norm: NormKind::Batch, ..
                },
                BoundLayer::Norm { gamma, beta, running },
            ) => {
                let running = running
                    .as_mut()
                    .ok_or_else(|| contract_err!("batch norm {} has no running statistics", layer.name))?;
                match mode {
                    Mode::Train => {
                        let (y, bm, bv) = g.batch_norm_train(cur, *gamma, *beta, BN_EPS)?;
                        running.update(&bm, &bv);
                        y
                    }
                    Mode::Eval => {
                        g.batch_norm_eval(cur, *gamma, *beta, running.mean.data(), running.var.data(), BN_EPS)?
                    }
                }
            }
            (LayerKind::Activation { act: Activation::Relu }, _) => g.relu(cur),
            (LayerKind::Activation { act: Activation::Gelu }, _) => g.gelu(cur),
            (LayerKind::Save, _) => {
                saved.push(cur);
                cur
            }
            (LayerKind::ResidualAdd, _) => {
                let skip = saved
                    .pop()
                    .ok_or_else(|| contract_err!("{}: residual add without saved branch", layer.name))?;
                g.add(skip, cur)?
            }
            (LayerKind::GlobalPool, _) => g.global_avg_pool(cur)?,
            _ => return Err(contract_err!("layer {} bound to mismatched parameters", layer.name)),
        };
    }
    let logits = match bound.head {
        Some(h) => Some(g.linear(cur, h, None)?),
        None => None,
    };
    Ok(ForwardOutput { features: cur, logits })
}

/// Mean softmax cross-entropy.
pub fn id_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn triplet_hard_loss<T: Scalar>(g: &mut Graph<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    g.triplet_hard(features, labels, margin)
}
