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

use crate::error::{contract_err, numeric_err, Result};
use crate::netgraph::{forward, BoundModel, Mode, Model};
use crate::numerics::{Adam, AdamConfig, GradCheckReport, Graph, Scalar, Tensor, Var};
use crate::train::{collect_grads, reid_loss, BatchSource, DEFAULT_MARGIN};

use super::{refine_loss, ChainVars, SStudentPlan, WeightChain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Fixed,
    Progressive,
}

/// Weight of the clustering loss at iteration `iter` of `n_iter`.
pub fn alpha(iter: usize, n_iter: usize, mode: AlphaMode, fixed_value: f64) -> f64 {
    match mode {
        AlphaMode::Fixed => fixed_value,
        AlphaMode::Progressive if n_iter == 0 => 0.0,
        AlphaMode::Progressive => iter as f64 / n_iter as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineHyper {
    pub n_iter: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_value: f64,
    pub adam: AdamConfig,
    pub margin: f64,
}

impl Default for RefineHyper {
    fn default() -> Self {
        Self {
            n_iter: 500,
            alpha_mode: AlphaMode::Fixed,
            alpha_value: 1.0,
            adam: AdamConfig::default(),
            margin: DEFAULT_MARGIN,
        }
    }
}

impl RefineHyper {
    /// Fixed weight 1 for cnn_like, linear ramp for mlp_like.
    pub fn alpha_mode_for(family: crate::netgraph::Family) -> AlphaMode {
        match family {
            crate::netgraph::Family::CnnLike => AlphaMode::Fixed,
            crate::netgraph::Family::MlpLike => AlphaMode::Progressive,
        }
    }
}

/// One row of the refinement trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l_t: f64,
    pub l_s: f64,
    pub l_ref: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Terms of the joint objective on one batch, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub l_t: Var,
    pub l_s: Var,
    pub l_ref: Var,
    pub total: Var,
}

/// Builds `L_T + L_S + alpha * L_ref` for one batch on `g`.
///
/// Returns the terms and the bound S-Student, whose norm layers carry the
/// updated running statistics when `mode` is `Train`.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    plan: &SStudentPlan,
    teacher: &Model<T>,
    tb: &mut BoundModel<T>,
    chain: &WeightChain<T>,
    cv: &ChainVars,
    x: Var,
    labels: &[usize],
    alpha: f64,
    margin: f64,
    mode: Mode,
) -> Result<(ObjectiveVars, BoundModel<T>)> {
    let t_out = forward(g, &teacher.spec, tb, x, mode)?;
    let (l_t, _, _) = reid_loss(g, t_out.features, t_out.logits, labels, margin)?;
    let mut sb = plan.bind(g, tb, chain, cv)?;
    let s_out = forward(g, &plan.spec, &mut sb, x, mode)?;
    let (l_s, _, _) = reid_loss(g, s_out.features, s_out.logits, labels, margin)?;
    let l_ref = refine_loss(g, tb, chain, cv)?;
    let weighted = g.scale(l_ref, T::lit(alpha));
    let sum = g.add(l_t, l_s)?;
    let total = g.add(sum, weighted)?;
    Ok((ObjectiveVars { l_t, l_s, l_ref, total }, sb))
}

/// Central-difference check of the joint objective against the tape.
///
/// Every teacher and chain coordinate is probed, or every `stride`-th one
/// when `stride > 1`. Train-mode normalization is used, so the probe sees
/// batch statistics exactly as refinement does.
pub fn check_objective_gradients(
    teacher: &Model<f64>,
    chain: &WeightChain<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    alpha: f64,
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let plan = SStudentPlan::new(chain, teacher)?;
    let eval = |teacher: &Model<f64>, chain: &WeightChain<f64>, grads: bool| {
        let mut g = Graph::new();
        let mut tb = teacher.bind(&mut g, grads);
        let cv = chain.bind(&mut g, grads);
        let xv = g.constant(x.clone());
        let (o, _) = objective(
            &mut g,
            &plan,
            teacher,
            &mut tb,
            chain,
            &cv,
            xv,
            labels,
            alpha,
            DEFAULT_MARGIN,
            Mode::Train,
        )?;
        let value = g.value(o.total).item();
        if !value.is_finite() {
            return Err(numeric_err!("objective evaluated to {}", value));
        }
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut gr = g.backward(o.total)?;
        let mut vars = tb.params();
        vars.extend(cv.params());
        let mut t = teacher.clone();
        let mut c = chain.clone();
        let mut ps = t.params_mut();
        ps.extend(c.params_mut());
        let shapes: Vec<Vec<usize>> = ps.iter().map(|p| p.shape().to_vec()).collect();
        Ok((value, collect_grads(&mut gr, &vars, &shapes)))
    };
    let (_, tape) = eval(teacher, chain, true)?;
    let stride = stride.max(1);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut flat = 0usize;
    for (pi, grad) in tape.iter().enumerate() {
        for ci in 0..grad.len() {
            flat += 1;
            if (flat - 1) % stride != 0 {
                continue;
            }
            let mut fd = [0.0; 2];
            for (slot, delta) in [eps, -eps].into_iter().enumerate() {
                let (mut tp, mut cp) = (teacher.clone(), chain.clone());
                nth_param(&mut tp, &mut cp, pi).data_mut()[ci] += delta;
                fd[slot] = eval(&tp, &cp, false)?.0;
            }
            let fd = (fd[0] - fd[1]) / (2.0 * eps);
            let an = grad.data()[ci];
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

fn nth_param<'a>(t: &'a mut Model<f64>, c: &'a mut WeightChain<f64>, i: usize) -> &'a mut Tensor<f64> {
    let mut ps = t.params_mut();
    ps.extend(c.params_mut());
    ps.swap_remove(i)
}

/// Jointly trains teacher, chain rows and S-Student head.
///
/// Each iteration minimizes `L_T + L_S + alpha * L_ref` on one batch with a
/// single optimizer over all three parameter sets. The partition stays
/// fixed. `observer` sees every trace record as it is produced.
pub fn refine<T: Scalar, S: BatchSource<T>>(
    teacher: &mut Model<T>,
    chain: &mut WeightChain<T>,
    source: &mut S,
    hyper: &RefineHyper,
    mut observer: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if hyper.alpha_value < 0.0 || !hyper.alpha_value.is_finite() {
        return Err(contract_err!(
            "alpha value {} must be finite and non-negative",
            hyper.alpha_value
        ));
    }
    let plan = SStudentPlan::new(chain, teacher)?;
    let mut opt = Adam::new(hyper.adam.clone());
    let mut trace = Vec::with_capacity(hyper.n_iter);
    for iter in 0..hyper.n_iter {
        let (x, labels) = source.next_batch()?;
        let mut g = Graph::new();
        let mut tb = teacher.bind(&mut g, true);
        let cv = chain.bind(&mut g, true);
        let xv = g.constant(x);

        let a = alpha(iter, hyper.n_iter, hyper.alpha_mode, hyper.alpha_value);
        let (o, sb) = objective(
            &mut g,
            &plan,
            teacher,
            &mut tb,
            chain,
            &cv,
            xv,
            &labels,
            a,
            hyper.margin,
            Mode::Train,
        )?;
        let ObjectiveVars { l_t, l_s, l_ref, total } = o;
        let value = |v| g.value(v).item().as_f64();
        let rec = LossRecord {
            iter,
            l_t: value(l_t),
            l_s: value(l_s),
            l_ref: value(l_ref),
            alpha: a,
            total: value(total),
        };
        if ![rec.l_t, rec.l_s, rec.l_ref, rec.total].iter().all(|v| v.is_finite()) {
            return Err(numeric_err!(
                "non-finite refinement loss at iteration {} (L_T {}, L_S {}, L_ref {})",
                iter,
                rec.l_t,
                rec.l_s,
                rec.l_ref
            ));
        }

        let mut grads = g.backward(total)?;
        let mut vars = tb.params();
        vars.extend(cv.params());
        let mut params = teacher.params_mut();
        params.extend(chain.params_mut());
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        let gs: Vec<Tensor<T>> = collect_grads(&mut grads, &vars, &shapes);
        opt.step(&mut params, &gs)?;
        teacher.absorb_running(&tb);
        for (l, layer) in sb.layers.iter().enumerate() {
            if let crate::netgraph::BoundLayer::Norm { running: Some(r), .. } = layer {
                if let Some(slot) = chain.running.get_mut(&l) {
                    *slot = r.clone();
                }
            }
        }
        observer(&rec);
        trace.push(rec);
    }
    Ok(trace)
}
