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

use crate::error::{contract_err, Result};
use crate::numerics::{RngStream, Scalar, Tensor};

use super::model::{LayerParams, Model};
use super::spec::{Activation, Family, LayerKind, LayerSpec, ModelSpec, NormKind};

/// Residual group shared by the stem and every block output.
pub const TRUNK_GROUP: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub family: Family,
    pub width: usize,
    pub blocks: usize,
    pub num_classes: Option<usize>,
    /// `[C, H, W]` for cnn_like, `[D]` for mlp_like.
    pub input_shape: Vec<usize>,
    /// Include normalization layers.
    #[serde(default = "yes")]
    pub norm: bool,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
}

fn yes() -> bool {
    true
}

fn default_stem_stride() -> usize {
    2
}

impl TeacherConfig {
    pub fn new(family: Family, width: usize, blocks: usize, num_classes: usize, input_shape: Vec<usize>) -> Self {
        Self {
            family,
            width,
            blocks,
            num_classes: Some(num_classes),
            input_shape,
            norm: true,
            stem_stride: default_stem_stride(),
        }
    }
}

/// Architecture of a reference teacher.
///
/// cnn_like: conv stem, `blocks` two-conv residual blocks with batch norm
/// and relu, global pooling, a dense embedding with a batch-norm neck.
/// mlp_like: dense stem, `blocks` pre-norm residual dense blocks with gelu,
/// a final layer norm, a dense embedding with a layer-norm neck. Every
/// weighted layer is followed by a normalization layer when `norm` is set.
pub fn reference_spec(cfg: &TeacherConfig) -> Result<ModelSpec> {
    if cfg.width < 4 {
        return Err(contract_err!("teacher width {} below 4", cfg.width));
    }
    if cfg.blocks < 1 {
        return Err(contract_err!("teacher needs at least one block"));
    }
    let w = cfg.width;
    let mut layers = Vec::new();
    let mut push = |spec: LayerSpec| layers.push(spec);
    let norm = |name: String, kind: NormKind| LayerSpec::new(name, LayerKind::Norm { norm: kind, dims: w });
    match cfg.family {
        Family::CnnLike => {
            let [c, _, _] = cfg.input_shape[..] else {
                return Err(contract_err!(
                    "cnn_like input shape {:?} is not [C,H,W]",
                    cfg.input_shape
                ));
            };
            let conv = |name: &str, in_dims: usize, stride: usize| {
                LayerSpec::new(
                    name,
                    LayerKind::Conv {
                        in_dims,
                        out_rows: w,
                        kernel: 3,
                        stride,
                        pad: 1,
                    },
                )
            };
            let relu = |name: String| LayerSpec::new(name, LayerKind::Activation { act: Activation::Relu });
            push(conv("stem", c, cfg.stem_stride).in_group(TRUNK_GROUP));
            if cfg.norm {
                push(norm("stem.bn".into(), NormKind::Batch));
            }
            push(relu("stem.relu".into()));
            for b in 0..cfg.blocks {
                push(LayerSpec::new(format!("block{b}.save"), LayerKind::Save));
                push(conv(&format!("block{b}.conv1"), w, 1));
                if cfg.norm {
                    push(norm(format!("block{b}.bn1"), NormKind::Batch));
                }
                push(relu(format!("block{b}.relu1")));
                push(conv(&format!("block{b}.conv2"), w, 1).in_group(TRUNK_GROUP));
                if cfg.norm {
                    push(norm(format!("block{b}.bn2"), NormKind::Batch));
                }
                push(LayerSpec::new(format!("block{b}.add"), LayerKind::ResidualAdd));
                push(relu(format!("block{b}.relu2")));
            }
            push(LayerSpec::new("pool", LayerKind::GlobalPool));
            push(LayerSpec::new(
                "embed",
                LayerKind::Dense {
                    in_dims: w,
                    out_rows: w,
                },
            ));
            if cfg.norm {
                push(norm("neck".into(), NormKind::Batch));
            }
        }
        Family::MlpLike => {
            let [d] = cfg.input_shape[..] else {
                return Err(contract_err!("mlp_like input shape {:?} is not [D]", cfg.input_shape));
            };
            let dense = |name: String, in_dims: usize| LayerSpec::new(name, LayerKind::Dense { in_dims, out_rows: w });
            push(dense("stem".into(), d).in_group(TRUNK_GROUP));
            for b in 0..cfg.blocks {
                push(LayerSpec::new(format!("block{b}.save"), LayerKind::Save));
                if cfg.norm {
                    push(norm(format!("block{b}.ln_pre"), NormKind::Layer));
                }
                push(dense(format!("block{b}.fc1"), w));
                if cfg.norm {
                    push(norm(format!("block{b}.ln_inner"), NormKind::Layer));
                }
                push(LayerSpec::new(
                    format!("block{b}.gelu"),
                    LayerKind::Activation { act: Activation::Gelu },
                ));
                push(dense(format!("block{b}.fc2"), w).in_group(TRUNK_GROUP));
                push(LayerSpec::new(format!("block{b}.add"), LayerKind::ResidualAdd));
            }
            if cfg.norm {
                push(norm("ln_final".into(), NormKind::Layer));
            }
            push(dense("embed".into(), w));
            if cfg.norm {
                push(norm("neck".into(), NormKind::Layer));
            }
        }
    }
    let spec = ModelSpec {
        family: cfg.family,
        input_shape: cfg.input_shape.clone(),
        layers,
        num_classes: cfg.num_classes,
    };
    spec.topology()?;
    Ok(spec)
}

/// A freshly initialized reference teacher.
pub fn reference_teacher<T: Scalar>(cfg: &TeacherConfig, rng: &RngStream) -> Result<Model<T>> {
    Model::init(reference_spec(cfg)?, rng)
}

/// Makes rows cluster-wise identical.
///
/// `assignments[u][row]` is the cluster of each row of unit `u`. Every
/// row (with its bias) and every normalization entry it feeds is replaced by
/// the one of the lowest-indexed row in its cluster.
pub fn tie_rows<T: Scalar>(model: &mut Model<T>, assignments: &[Vec<usize>]) -> Result<()> {
    let topo = model.spec.topology()?;
    if assignments.len() != topo.units.len() {
        return Err(contract_err!(
            "{} assignments for {} units",
            assignments.len(),
            topo.units.len()
        ));
    }
    let leaders: Vec<Vec<usize>> = assignments
        .iter()
        .zip(&topo.units)
        .map(|(a, unit)| {
            if a.len() != unit.rows {
                return Err(contract_err!(
                    "assignment of {} rows for a {}-row unit",
                    a.len(),
                    unit.rows
                ));
            }
            Ok(a.iter()
                .map(|&c| a.iter().position(|&o| o == c).expect("own cluster"))
                .collect())
        })
        .collect::<Result<_>>()?;
    let copy_rows = |t: &mut Tensor<T>, lead: &[usize]| {
        let width = t.row_width();
        let src = t.data().to_vec();
        for (i, &j) in lead.iter().enumerate() {
            t.data_mut()[i * width..(i + 1) * width].copy_from_slice(&src[j * width..(j + 1) * width]);
        }
    };
    for (l, params) in model.layers.iter_mut().enumerate() {
        let Some(u) = topo.unit_of[l] else { continue };
        let lead = &leaders[u];
        match params {
            LayerParams::Weighted { weight, bias } => {
                copy_rows(weight, lead);
                copy_rows(bias, lead);
            }
            LayerParams::Norm(n) => {
                copy_rows(&mut n.gamma, lead);
                copy_rows(&mut n.beta, lead);
                if let Some(r) = n.running.as_mut() {
                    copy_rows(&mut r.mean, lead);
                    copy_rows(&mut r.var, lead);
                }
            }
            LayerParams::Empty => {}
        }
    }
    Ok(())
}
