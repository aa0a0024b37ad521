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

//! One-shot knowledge transfer through a weight chain.
//!
//! A trained teacher network is compressed into a *weight chain*: per layer,
//! a small set of refined rows obtained by clustering the teacher's rows and
//! training them jointly with the teacher. Students of any width between the
//! chain's and the teacher's are then produced by stacking chain rows,
//! summing the matching input columns of the following layer, and averaging
//! the normalization affine pairs. No optimization is involved in that last
//! step.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: tensors, seeded random streams, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`netgraph`]: the row/column network description, forward passes,
//!   losses and the two reference teacher families.
//! - [`partition`]: k-means over weight rows, jointly across residual groups.
//! - [`weightchain`]: chain initialization, the S-Student view, the
//!   refinement loss and the joint training loop.
//! - [`expansion`]: apportionment, matchers, student construction and the
//!   geometric chain-width schedule.
//! - [`train`]: supervised ReID training of a single model.
//! - [`benchdata`]: the synthetic retrieval benchmark, PK sampling and
//!   CMC/mAP evaluation.

pub mod benchdata;
mod error;
pub mod expansion;
pub mod netgraph;
pub mod numerics;
pub mod parallel;
pub mod partition;
pub mod train;
pub mod weightchain;

pub use error::{Error, Result};
pub use numerics::{Graph, RngStream, Scalar, Tensor, Var};
