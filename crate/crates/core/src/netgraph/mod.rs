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
//! Network description, parameters and forward pass.
//!
//! Every weighted layer is viewed as a stack of rows `[N_l, N_{l-1}, O_l]`.
//! Weighted layers whose outputs meet in a residual sum form one *unit* and
//! always share a row partition.

mod model;
mod spec;
mod teacher;

pub use model::{
    forward, id_loss, triplet_hard_loss, BoundLayer, BoundModel, ColsView, ForwardOutput, LayerParams, Mode, Model,
    NormParams, RowsView, RunningStats, HEAD_INIT_STD,
};
pub use spec::{
    Activation, Family, LayerKind, LayerSpec, ModelSpec, NormKind, Topology, Unit, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use teacher::{reference_spec, reference_teacher, tie_rows, TeacherConfig, TRUNK_GROUP};
