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
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};

/// Batch-norm running-statistic momentum.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CnnLike,
    MlpLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_dims: usize,
        out_rows: usize,
    },
    Conv {
        in_dims: usize,
        out_rows: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Norm {
        norm: NormKind,
        dims: usize,
    },
    Activation {
        act: Activation,
    },
    /// Marks the current activation as the skip input of the next
    /// `ResidualAdd`.
    Save,
    ResidualAdd,
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Layers whose outputs are summed into one residual stream share a group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_group: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            residual_group: None,
        }
    }

    pub fn in_group(mut self, group: usize) -> Self {
        self.residual_group = Some(group);
        self
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }

    /// `N_l`: rows (output feature dimensions) of a weighted layer.
    pub fn out_rows(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { out_rows, .. } | LayerKind::Conv { out_rows, .. } => Some(out_rows),
            _ => None,
        }
    }

    /// `N_{l-1}`: input feature dimensions of a weighted layer.
    pub fn in_dims(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { in_dims, .. } | LayerKind::Conv { in_dims, .. } => Some(in_dims),
            _ => None,
        }
    }

    /// `O_l`: parameters per (row, column) pair, 1 for dense and `K²` for conv.
    pub fn op_params(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { .. } => Some(1),
            LayerKind::Conv { kernel, .. } => Some(kernel * kernel),
            _ => None,
        }
    }

    /// Shape of the stored weight tensor.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Dense { in_dims, out_rows } => Some(vec![out_rows, in_dims]),
            LayerKind::Conv {
                in_dims,
                out_rows,
                kernel,
                ..
            } => Some(vec![out_rows, in_dims, kernel, kernel]),
            _ => None,
        }
    }
}

/// Ordered network description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Per-sample input shape: `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Classes of the linear head on the embedding, if any.
    pub num_classes: Option<usize>,
}

/// A set of weighted layers clustered together.
///
/// A residual group forms one unit; every other weighted layer is its own
/// unit. All members have the same row count and share one partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unit {
    pub members: Vec<usize>,
    pub rows: usize,
    pub group: Option<usize>,
}

/// How feature dimensions flow between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub units: Vec<Unit>,
    /// Unit that produced the features a weighted or norm layer sees in its
    /// row space; `None` for non-weighted/non-norm layers and for norms on
    /// raw input.
    pub unit_of: Vec<Option<usize>>,
    /// For weighted layers, the unit whose rows are this layer's columns;
    /// `None` means the raw input.
    pub input_unit: Vec<Option<usize>>,
    /// Unit producing the embedding (the head's columns).
    pub feature_unit: usize,
}

impl Topology {
    /// Weighted layer indices in order.
    pub fn weighted_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.units
            .iter()
            .flat_map(|u| u.members.iter().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
    }

    pub fn unit_widths(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.rows).collect()
    }
}

impl ModelSpec {
    /// Validates dimension flow and derives units.
    pub fn topology(&self) -> Result<Topology> {
        let n = self.layers.len();
        let mut units: Vec<Unit> = Vec::new();
        let mut unit_of = vec![None; n];
        let mut input_unit = vec![None; n];
        let (mut dims, mut spatial) = match self.input_shape.as_slice() {
            [c, h, w] => (*c, Some((*h, *w))),
            [d] => (*d, None),
            other => return Err(dim_err!("input shape {:?} must be [C,H,W] or [D]", other)),
        };
        let mut cur_unit: Option<usize> = None;
        let mut saved: Vec<(usize, Option<(usize, usize)>, Option<usize>)> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let ctx = || format!("layer {} ({})", l, layer.name);
            match &layer.kind {
                LayerKind::Dense { in_dims, out_rows } | LayerKind::Conv { in_dims, out_rows, .. } => {
                    if *in_dims != dims {
                        return Err(dim_err!("{}: expects {} inputs, receives {}", ctx(), in_dims, dims));
                    }
                    if *out_rows == 0 {
                        return Err(dim_err!("{}: zero rows", ctx()));
                    }
                    match (&layer.kind, spatial) {
                        (LayerKind::Dense { .. }, Some(_)) => {
                            return Err(dim_err!("{}: dense layer on a spatial map", ctx()))
                        }
                        (
                            LayerKind::Conv {
                                kernel, stride, pad, ..
                            },
                            Some((h, w)),
                        ) => {
                            if *stride == 0 || *kernel == 0 || *kernel > h + 2 * pad || *kernel > w + 2 * pad {
                                return Err(dim_err!("{}: invalid conv geometry on {}x{}", ctx(), h, w));
                            }
                            spatial = Some(((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1));
                        }
                        (LayerKind::Conv { .. }, None) => {
                            return Err(dim_err!("{}: conv layer on a flat input", ctx()))
                        }
                        _ => {}
                    }
                    let existing = layer
                        .residual_group
                        .and_then(|g| units.iter().position(|u| u.group == Some(g)));
                    let u = match existing {
                        Some(u) => {
                            if units[u].rows != *out_rows {
                                return Err(contract_err!(
                                    "{}: residual group {:?} mixes {} and {} rows",
                                    ctx(),
                                    layer.residual_group,
                                    units[u].rows,
                                    out_rows
                                ));
                            }
                            units[u].members.push(l);
                            u
                        }
                        None => {
                            units.push(Unit {
                                members: vec![l],
                                rows: *out_rows,
                                group: layer.residual_group,
                            });
                            units.len() - 1
                        }
                    };
                    unit_of[l] = Some(u);
                    input_unit[l] = cur_unit;
                    dims = *out_rows;
                    cur_unit = Some(u);
                }
                LayerKind::Norm { norm, dims: d } => {
                    if *d != dims {
                        return Err(dim_err!("{}: normalizes {} features, receives {}", ctx(), d, dims));
                    }
                    if *norm == NormKind::Layer && spatial.is_some() {
                        return Err(dim_err!("{}: layer norm on a spatial map", ctx()));
                    }
                    unit_of[l] = cur_unit;
                }
                LayerKind::Activation { .. } => {}
                LayerKind::Save => saved.push((dims, spatial, cur_unit)),
                LayerKind::ResidualAdd => {
                    let Some((sd, ss, su)) = saved.pop() else {
                        return Err(contract_err!("{}: residual add without a saved branch", ctx()));
                    };
                    if sd != dims || ss != spatial {
                        return Err(dim_err!(
                            "{}: residual operands {}/{:?} vs {}/{:?}",
                            ctx(),
                            sd,
                            ss,
                            dims,
                            spatial
                        ));
                    }
                    if su != cur_unit {
                        return Err(contract_err!(
                            "{}: residual operands come from different residual groups",
                            ctx()
                        ));
                    }
                }
                LayerKind::GlobalPool => {
                    if spatial.is_none() {
                        return Err(dim_err!("{}: global pool on a flat input", ctx()));
                    }
                    spatial = None;
                }
            }
        }
        if spatial.is_some() {
            return Err(dim_err!("network output is still spatial"));
        }
        let feature_unit = cur_unit.ok_or_else(|| contract_err!("network has no weighted layer"))?;
        Ok(Topology {
            units,
            unit_of,
            input_unit,
            feature_unit,
        })
    }

    /// Output dimension of the network body.
    pub fn embedding_dim(&self) -> Result<usize> {
        let t = self.topology()?;
        Ok(t.units[t.feature_unit].rows)
    }

    /// The same architecture with every unit resized to `widths[unit]`.
    pub fn with_unit_widths(&self, widths: &[usize]) -> Result<ModelSpec> {
        let topo = self.topology()?;
        if widths.len() != topo.units.len() {
            return Err(contract_err!("{} widths for {} units", widths.len(), topo.units.len()));
        }
        let mut spec = self.clone();
        for (l, layer) in spec.layers.iter_mut().enumerate() {
            let input = topo.input_unit[l].map(|u| widths[u]);
            match &mut layer.kind {
                LayerKind::Dense { in_dims, out_rows } | LayerKind::Conv { in_dims, out_rows, .. } => {
                    *out_rows = widths[topo.unit_of[l].expect("weighted layer has a unit")];
                    if let Some(w) = input {
                        *in_dims = w;
                    }
                }
                LayerKind::Norm { dims, .. } => {
                    if let Some(u) = topo.unit_of[l] {
                        *dims = widths[u];
                    }
                }
                _ => {}
            }
        }
        spec.topology()?;
        Ok(spec)
    }

    /// Spec with every normalization layer removed.
    pub fn without_norms(&self) -> ModelSpec {
        let mut spec = self.clone();
        spec.layers.retain(|l| !matches!(l.kind, LayerKind::Norm { .. }));
        spec
    }
}
