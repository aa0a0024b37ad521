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
//! Command-line pipeline around `oskt-core`: experiment configs, the OSKC
//! weight container, and the stage functions behind each verb.

pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod pipeline;

pub use config::{ExperimentConfig, Precision};
pub use container::{Container, StoredTensor};
pub use error::{CliError, Result};
