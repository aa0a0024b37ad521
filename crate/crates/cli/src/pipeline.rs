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
//! The end-to-end pipeline as plain functions: teacher pretraining, chain
//! refinement, expansion, fine-tuning and the scratch baseline.

use std::time::{Duration, Instant};

use oskt_core::benchdata::{evaluate, generate, EvalReport, PkSampler, ToyReIDDataset};
use oskt_core::expansion::{build_matcher, expand, Matcher};
use oskt_core::netgraph::{reference_teacher, Model, HEAD_INIT_STD};
use oskt_core::numerics::backward_count;
use oskt_core::partition::cluster_model;
use oskt_core::train::{train_supervised, EpochRecord, TrainHyper};
use oskt_core::weightchain::{init_chain, refine, LossRecord, RefineHyper, WeightChain};
use oskt_core::{Error, RngStream, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Optim};
use crate::error::{CliError, Result};

/// Independent random stream per pipeline stage, all derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    TeacherInit = 1,
    PretrainData,
    TeacherBatches,
    Clustering,
    RefineBatches,
    DownstreamData,
    FinetuneBatches,
    FinetuneHead,
    ScratchInit,
    ScratchBatches,
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    RngStream::new(seed).derive(stage as u64).next_word()
}

fn stage_rng(seed: u64, stage: Stage, sub: u64) -> RngStream {
    RngStream::new(stage_seed(seed, stage)).derive(sub)
}

pub fn pretrain_data<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<ToyReIDDataset<T>> {
    Ok(generate(&cfg.data, stage_seed(seed, Stage::PretrainData))?)
}

/// Fresh identities from the downstream settings.
pub fn downstream_data<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<ToyReIDDataset<T>> {
    Ok(generate(cfg.downstream(), stage_seed(seed, Stage::DownstreamData))?)
}

fn train_hyper(epochs: usize, optim: Optim, margin: f64) -> TrainHyper {
    TrainHyper {
        epochs,
        adam: optim.adam(),
        margin,
    }
}

#[derive(Clone, Debug)]
pub struct TeacherRun<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub report: EvalReport,
}

/// Trains the reference teacher on the pretraining scene.
pub fn train_teacher<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<TeacherRun<T>> {
    let data = pretrain_data::<T>(cfg, seed)?;
    let tc = cfg.teacher_config(cfg.teacher.width, &cfg.data);
    let mut model = reference_teacher::<T>(&tc, &stage_rng(seed, Stage::TeacherInit, 0))?;
    let o = cfg.teacher.optim();
    let mut sampler = PkSampler::new(&data, o.p, o.k, stage_seed(seed, Stage::TeacherBatches))?;
    let history = train_supervised(
        &mut model,
        &mut sampler,
        &train_hyper(cfg.teacher.epochs, o, cfg.refine.margin),
    )?;
    let report = evaluate(&model, &data)?;
    log::info!(
        "teacher seed {seed}: mAP {:.4} rank-1 {:.4}",
        report.map,
        report.rank(1).unwrap_or(0.0)
    );
    Ok(TeacherRun { model, history, report })
}

pub fn refine_hyper(cfg: &ExperimentConfig) -> RefineHyper {
    RefineHyper {
        n_iter: cfg.refine.n_iter,
        alpha_mode: cfg.alpha_mode(),
        alpha_value: cfg.refine.alpha_value,
        adam: cfg.refine.optim().adam(),
        margin: cfg.refine.margin,
    }
}

/// A refined chain together with the teacher it was refined against.
#[derive(Clone, Debug)]
pub struct ChainRun<T: Scalar> {
    pub chain: WeightChain<T>,
    pub teacher: Model<T>,
    pub trace: Vec<LossRecord>,
}

/// Clusters the teacher's rows into the \`index\`-th configured chain and
/// refines chain and a copy of the teacher jointly on the pretraining
/// scene.
pub fn refine_chain<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    index: usize,
    teacher: &Model<T>,
) -> Result<ChainRun<T>> {
    let plans = cfg.chain_plans()?;
    let widths = plans
        .get(index)
        .ok_or_else(|| CliError::Config(format!("chain {index} of {} requested", plans.len())))?;
    let data = pretrain_data::<T>(cfg, seed)?;
    let mut teacher = teacher.clone();
    let partition = cluster_model(
        &teacher,
        widths,
        cfg.metric(),
        &stage_rng(seed, Stage::Clustering, index as u64),
        cfg.chain.max_iters,
    )?;
    let mut chain = init_chain(&teacher, &partition)?;
    let o = cfg.refine.optim();
    let batches = RngStream::new(stage_seed(seed, Stage::RefineBatches))
        .derive(index as u64)
        .next_word();
    let mut sampler = PkSampler::new(&data, o.p, o.k, batches)?;
    let every = (cfg.refine.n_iter / 10).max(1);
    let trace = refine(&mut teacher, &mut chain, &mut sampler, &refine_hyper(cfg), |r| {
        if r.iter % every == 0 {
            log::debug!(
                "refine {}: L_T {:.4} L_S {:.4} L_ref {:.5} total {:.4}",
                r.iter,
                r.l_t,
                r.l_s,
                r.l_ref,
                r.total
            );
        }
    })?;
    Ok(ChainRun { chain, teacher, trace })
}

#[derive(Clone, Debug)]
pub struct Student<T: Scalar> {
    pub width: usize,
    pub model: Model<T>,
    pub matcher: Matcher,
    pub elapsed: Duration,
}

/// Builds one student per uniform width. No gradients are computed; a
/// backward pass during expansion is reported as a contract violation.
pub fn expand_students<T: Scalar>(
    chain: &WeightChain<T>,
    teacher: &Model<T>,
    widths: &[usize],
) -> Result<Vec<Student<T>>> {
    let units = chain.partition.units.len();
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let before = backward_count();
        let start = Instant::now();
        let matcher = build_matcher(&chain.partition, &vec![w; units])?;
        let model = expand(chain, teacher, &matcher)?;
        let elapsed = start.elapsed();
        if backward_count() != before {
            return Err(Error::Contract("expansion ran a backward pass".into()).into());
        }
        log::info!("expanded width {w} in {:.3} ms", elapsed.as_secs_f64() * 1e3);
        out.push(Student {
            width: w,
            model,
            matcher,
            elapsed,
        });
    }
    Ok(out)
}

/// Replaces the classifier with a fresh one sized for `classes`.
pub fn reset_head<T: Scalar>(model: &mut Model<T>, classes: usize, rng: &mut RngStream) -> Result<()> {
    let dim = model.spec.embedding_dim()?;
    model.spec.num_classes = Some(classes);
    model.head = Some(Tensor::randn(&[classes, dim], HEAD_INIT_STD, rng));
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Tuned<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub report: EvalReport,
}

/// Fine-tunes on the downstream training split and evaluates on its
/// query/gallery split. The classifier is re-initialized for the new
/// identities; with zero epochs this is a pure evaluation.
pub fn finetune<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    mut model: Model<T>,
    data: &ToyReIDDataset<T>,
) -> Result<Tuned<T>> {
    let width = model.spec.embedding_dim()? as u64;
    if cfg.finetune.epochs > 0 {
        reset_head(
            &mut model,
            data.config.train_ids(),
            &mut stage_rng(seed, Stage::FinetuneHead, width),
        )?;
    }
    let o = cfg.finetune.optim();
    let mut sampler = PkSampler::new(data, o.p, o.k, stage_seed(seed, Stage::FinetuneBatches))?;
    let history = train_supervised(
        &mut model,
        &mut sampler,
        &train_hyper(cfg.finetune.epochs, o, cfg.refine.margin),
    )?;
    let report = evaluate(&model, data)?;
    Ok(Tuned { model, history, report })
}

/// A randomly initialized model of `width` trained with the fine-tuning
/// budget on the downstream scene.
pub fn scratch<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    width: usize,
    data: &ToyReIDDataset<T>,
) -> Result<Tuned<T>> {
    let tc = cfg.teacher_config(width, &data.config);
    let mut model = reference_teacher::<T>(&tc, &stage_rng(seed, Stage::ScratchInit, width as u64))?;
    let o = cfg.finetune.optim();
    let mut sampler = PkSampler::new(data, o.p, o.k, stage_seed(seed, Stage::ScratchBatches))?;
    let history = train_supervised(
        &mut model,
        &mut sampler,
        &train_hyper(cfg.finetune.epochs, o, cfg.refine.margin),
    )?;
    let report = evaluate(&model, data)?;
    Ok(Tuned { model, history, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oskt,
    Scratch,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Oskt => "oskt",
            Method::Scratch => "scratch",
        })
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub width: usize,
    pub method: Method,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
}

fn row(width: usize, method: Method, seed: u64, report: &EvalReport) -> CompareRow {
    CompareRow {
        width,
        method,
        seed,
        map: report.map,
        rank1: report.rank(1).unwrap_or(0.0),
    }
}

/// Everything one seed of the comparison produced.
#[derive(Clone, Debug)]
pub struct SeedRun<T: Scalar> {
    pub teacher: TeacherRun<T>,
    pub chains: Vec<ChainRun<T>>,
    pub students: Vec<Student<T>>,
    pub rows: Vec<CompareRow>,
}

/// Expands every configured student width from the chain that serves it.
pub fn expand_configured<T: Scalar>(cfg: &ExperimentConfig, chains: &[ChainRun<T>]) -> Result<Vec<Student<T>>> {
    let mut out = Vec::with_capacity(cfg.students.widths.len());
    for &w in &cfg.students.widths {
        let c = chains
            .get(cfg.chain_for_width(w)?)
            .ok_or_else(|| CliError::Config(format!("no refined chain for width {w}")))?;
        out.extend(expand_students(&c.chain, &c.teacher, &[w])?);
    }
    Ok(out)
}

/// OSKT students against scratch students for every configured width, on
/// one seed.
pub fn compare_seed<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun<T>> {
    let teacher = train_teacher::<T>(cfg, seed)?;
    let chains = (0..cfg.chain_plans()?.len())
        .map(|i| refine_chain(cfg, seed, i, &teacher.model))
        .collect::<Result<Vec<_>>>()?;
    let students = expand_configured(cfg, &chains)?;
    let data = downstream_data::<T>(cfg, seed)?;
    let mut rows = Vec::new();
    for s in &students {
        let tuned = finetune(cfg, seed, s.model.clone(), &data)?;
        let base = scratch(cfg, seed, s.width, &data)?;
        log::info!(
            "seed {seed} width {}: oskt mAP {:.4}, scratch mAP {:.4}",
            s.width,
            tuned.report.map,
            base.report.map
        );
        rows.push(row(s.width, Method::Oskt, seed, &tuned.report));
        rows.push(row(s.width, Method::Scratch, seed, &base.report));
    }
    Ok(SeedRun {
        teacher,
        chains,
        students,
        rows,
    })
}

pub fn compare<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(compare_seed::<T>(cfg, seed)?.rows);
    }
    Ok(rows)
}
