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
//! One function per CLI verb, plus conversions between models and
//! containers.

use std::path::{Path, PathBuf};

use oskt_core::benchdata::{evaluate, EvalReport};
use oskt_core::expansion::{build_matcher, expand, widths_for_ratio, Matcher};
use oskt_core::netgraph::{Model, ModelSpec};
use oskt_core::partition::RowPartition;
use oskt_core::weightchain::{LossRecord, RefineHyper, WeightChain};
use oskt_core::{Error, Scalar};
use serde::Serialize;

use crate::config::{ExperimentConfig, Precision};
use crate::container::Container;
use crate::error::{CliError, Result};
use crate::pipeline::{self, CompareRow};

pub const KIND_TEACHER: &str = "teacher";
pub const KIND_CHAIN: &str = "chain";
pub const KIND_STUDENT: &str = "student";

const TEACHER_PREFIX: &str = "teacher.";
const CHAIN_PREFIX: &str = "chain.";
const MODEL_PREFIX: &str = "model.";

/// Settings shared by every verb after command-line overrides.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    /// Applies the `--seed`, `--out` and `--precision` overrides, then
    /// writes the resolved config into the output directory.
    pub fn new(
        mut config: ExperimentConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
        precision: Option<Precision>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            config.seeds = vec![s];
        }
        if let Some(o) = out {
            config.out_dir = o;
        }
        if let Some(p) = precision {
            config.precision = p;
        }
        config.validate()?;
        let out = config.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(format!("creating {}", out.display()), e))?;
        write_text(&out.join("config.resolved.toml"), &config.to_toml())?;
        Ok(Self { config, out })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.config.seeds
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Format(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// The config as stored in containers. The output directory is left out so
/// that identical runs produce identical bytes wherever they write.
fn config_value(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg).map_err(|e| CliError::Format(e.to_string()))?;
    if let Some(m) = v.as_object_mut() {
        m.remove("out_dir");
    }
    Ok(v)
}

fn model_container<T: Scalar>(kind: &str, model: &Model<T>, prefix: &str) -> Result<Container> {
    let mut c = Container::new();
    c.set_section("kind", &kind)?;
    c.set_section("model_spec", &model.spec)?;
    c.insert_all(prefix, model.named_tensors());
    Ok(c)
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    let found: String = c.section("kind")?;
    if found != kind {
        return Err(CliError::Format(format!("expected a {kind} container, found {found}")));
    }
    Ok(())
}

fn model_from<T: Scalar>(c: &Container, prefix: &str) -> Result<Model<T>> {
    let spec: ModelSpec = c.section("model_spec")?;
    Model::from_named(spec, &c.tensor_map(prefix), prefix).map_err(|e| CliError::Format(e.to_string()))
}

pub fn teacher_to_container<T: Scalar>(
    run: &pipeline::TeacherRun<T>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Container> {
    let mut c = model_container(KIND_TEACHER, &run.model, TEACHER_PREFIX)?;
    c.set_section("seed", &seed)?;
    c.set_section("report", &run.report)?;
    c.set_section("config", &config_value(cfg)?)?;
    Ok(c)
}

pub fn load_teacher<T: Scalar>(c: &Container) -> Result<Model<T>> {
    expect_kind(c, KIND_TEACHER)?;
    model_from(c, TEACHER_PREFIX)
}

/// A chain container bundles the refined teacher, whose columns and
/// normalization parameters expansion reads.
pub fn chain_to_container<T: Scalar>(run: &pipeline::ChainRun<T>, hyper: &RefineHyper, seed: u64) -> Result<Container> {
    let mut c = model_container(KIND_CHAIN, &run.teacher, TEACHER_PREFIX)?;
    c.insert_all(CHAIN_PREFIX, run.chain.named_tensors());
    c.set_section("partition", &run.chain.partition)?;
    c.set_section("hyperparameters", hyper)?;
    c.set_section("seed", &seed)?;
    Ok(c)
}

pub fn load_chain<T: Scalar>(c: &Container) -> Result<(WeightChain<T>, Model<T>)> {
    expect_kind(c, KIND_CHAIN)?;
    let teacher = model_from::<T>(c, TEACHER_PREFIX)?;
    let partition: RowPartition = c.section("partition")?;
    let chain = WeightChain::from_named(&teacher, partition, &c.tensor_map(CHAIN_PREFIX), CHAIN_PREFIX)
        .map_err(|e| CliError::Format(e.to_string()))?;
    Ok((chain, teacher))
}

pub fn student_to_container<T: Scalar>(model: &Model<T>, matcher: Option<&Matcher>) -> Result<Container> {
    let mut c = model_container(KIND_STUDENT, model, MODEL_PREFIX)?;
    if let Some(m) = matcher {
        c.set_section("matcher", m)?;
    }
    Ok(c)
}

pub fn load_student<T: Scalar>(c: &Container) -> Result<Model<T>> {
    match c.section::<String>("kind")?.as_str() {
        KIND_STUDENT => model_from(c, MODEL_PREFIX),
        KIND_TEACHER => model_from(c, TEACHER_PREFIX),
        other => Err(CliError::Format(format!("a {other} container holds no single model"))),
    }
}

pub fn train_teacher<T: Scalar>(run: &Run) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &seed in run.seeds() {
        let t = pipeline::train_teacher::<T>(&run.config, seed)?;
        let path = run.out.join(format!("teacher_s{seed}.oskc"));
        teacher_to_container(&t, &run.config, seed)?.save(&path)?;
        write_json(&run.out.join(format!("teacher_s{seed}_report.json")), &t.report)?;
        write_csv(&run.out.join(format!("teacher_s{seed}_history.csv")), &t.history)?;
        written.push(path);
    }
    Ok(written)
}

/// Refines every configured chain from the given teacher container.
pub fn refine<T: Scalar>(run: &Run, teacher_path: &Path) -> Result<Vec<PathBuf>> {
    let teacher = load_teacher::<T>(&Container::load(teacher_path)?)?;
    let hyper = pipeline::refine_hyper(&run.config);
    let mut written = Vec::new();
    for &seed in run.seeds() {
        for i in 0..run.config.chain_plans()?.len() {
            let c = pipeline::refine_chain(&run.config, seed, i, &teacher)?;
            let path = run.out.join(format!("chain_s{seed}_c{i}.oskc"));
            chain_to_container(&c, &hyper, seed)?.save(&path)?;
            write_csv::<LossRecord>(&run.out.join(format!("chain_s{seed}_c{i}_trace.csv")), &c.trace)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Target widths for `expand`: uniform widths or one ratio of the teacher.
#[derive(Clone, Debug)]
pub enum Targets {
    Widths(Vec<usize>),
    Ratio(f64),
}

pub fn expand_chain<T: Scalar>(chain_path: &Path, targets: &Targets, out: &Path) -> Result<Vec<PathBuf>> {
    let (chain, teacher) = load_chain::<T>(&Container::load(chain_path)?)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("creating {}", out.display()), e))?;
    let mut written = Vec::new();
    match targets {
        Targets::Widths(ws) => {
            for s in pipeline::expand_students(&chain, &teacher, ws)? {
                let path = out.join(format!("student_w{}.oskc", s.width));
                student_to_container(&s.model, Some(&s.matcher))?.save(&path)?;
                written.push(path);
            }
        }
        Targets::Ratio(r) => {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::Contract(format!("ratio {r} outside (0, 1]")).into());
            }
            let before = oskt_core::numerics::backward_count();
            let matcher = build_matcher(&chain.partition, &widths_for_ratio(&chain.partition, *r))?;
            let model = expand(&chain, &teacher, &matcher)?;
            if oskt_core::numerics::backward_count() != before {
                return Err(Error::Contract("expansion ran a backward pass".into()).into());
            }
            let path = out.join(format!("student_r{r}.oskc"));
            student_to_container(&model, Some(&matcher))?.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn finetune<T: Scalar>(run: &Run, student_path: &Path) -> Result<Vec<PathBuf>> {
    let student = load_student::<T>(&Container::load(student_path)?)?;
    let stem = student_path.file_stem().and_then(|s| s.to_str()).unwrap_or("student");
    let mut written = Vec::new();
    for &seed in run.seeds() {
        let data = pipeline::downstream_data::<T>(&run.config, seed)?;
        let tuned = pipeline::finetune(&run.config, seed, student.clone(), &data)?;
        let mut c = student_to_container(&tuned.model, None)?;
        c.set_section("report", &tuned.report)?;
        c.set_section("seed", &seed)?;
        let path = run.out.join(format!("{stem}_tuned_s{seed}.oskc"));
        c.save(&path)?;
        write_json(
            &run.out.join(format!("{stem}_tuned_s{seed}_report.json")),
            &tuned.report,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Evaluates a single-model container on the downstream scene.
pub fn eval<T: Scalar>(run: &Run, model_path: &Path) -> Result<Vec<(u64, EvalReport)>> {
    let model = load_student::<T>(&Container::load(model_path)?)?;
    run.seeds()
        .iter()
        .map(|&seed| {
            let data = pipeline::downstream_data::<T>(&run.config, seed)?;
            Ok((seed, evaluate(&model, &data)?))
        })
        .collect()
}

/// Width, method, seed and mAP, the columns a plot needs.
#[derive(Serialize)]
struct PlotRow {
    width: usize,
    method: pipeline::Method,
    seed: u64,
    #[serde(rename = "mAP")]
    map: f64,
}

pub fn compare<T: Scalar>(run: &Run) -> Result<Vec<CompareRow>> {
    let rows = pipeline::compare::<T>(&run.config)?;
    write_csv(&run.out.join("compare.csv"), &rows)?;
    let plot: Vec<PlotRow> = rows
        .iter()
        .map(|r| PlotRow {
            width: r.width,
            method: r.method,
            seed: r.seed,
            map: r.map,
        })
        .collect();
    write_csv(&run.out.join("compare_plot.csv"), &plot)?;
    Ok(rows)
}

/// Human-readable summary of a container.
pub fn inspect(path: &Path) -> Result<String> {
    let c = Container::load(path)?;
    let mut s = format!("{}: {} tensors\n", path.display(), c.len());
    for (name, t) in c.tensors() {
        s.push_str(&format!("  {name:<32} {} {:?}\n", t.dtype().name(), t.shape()));
    }
    for (key, v) in c.sections() {
        let shown = match v {
            serde_json::Value::String(text) => text.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Object(m) => format!("{{{} keys}}", m.len()),
            serde_json::Value::Array(a) => format!("[{} items]", a.len()),
            other => other.to_string(),
        };
        s.push_str(&format!("  section {key}: {shown}\n"));
    }
    Ok(s)
}
