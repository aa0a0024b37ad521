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
//! Dense tensors, seeded randomness and reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{backward_count, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
