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
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// `(parameter, coordinate)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares tape gradients against central differences.
///
/// `f` rebuilds the scalar objective on a fresh graph from the given
/// parameter leaves; it must be deterministic. Each coordinate's error is
/// `|tape − fd| / max(|tape|, |fd|, 1e-8)`.
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let tape = grads.get(*var).expect("every parameter has a gradient slot");
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = tape.data()[ci];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}
