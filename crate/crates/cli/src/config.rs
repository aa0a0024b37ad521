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
//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use oskt_core::benchdata::DatasetConfig;
use oskt_core::expansion::{chain_width_schedule, covering_chain};
use oskt_core::netgraph::{reference_spec, Family, TeacherConfig};
use oskt_core::numerics::AdamConfig;
use oskt_core::partition::Metric;
use oskt_core::train::DEFAULT_MARGIN;
use oskt_core::weightchain::AlphaMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// Optimizer and PK-batch settings shared by every training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optim {
    pub lr: f64,
    pub weight_decay: f64,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
}

macro_rules! optim_of {
    ($($section:ty),*) => {$(
        impl $section {
            pub fn optim(&self) -> Optim {
                Optim {
                    lr: self.lr,
                    weight_decay: self.weight_decay,
                    p: self.p,
                    k: self.k,
                }
            }
        }
    )*};
}

optim_of!(TeacherSection, RefineSection, FinetuneSection);

impl Optim {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn validate(&self, what: &str, data: &DatasetConfig) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return config_err(format!("{what}.lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return config_err(format!("{what}.weight_decay must be finite and non-negative"));
        }
        if self.p < 2 || self.p > data.train_ids() {
            return config_err(format!("{what}.p = {} must lie in [2, {}]", self.p, data.train_ids()));
        }
        let per_id = data.views * data.samples_per_id_view;
        if self.k < 2 || self.k > per_id {
            return config_err(format!("{what}.k = {} must lie in [2, {per_id}]", self.k));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub width: usize,
    pub blocks: usize,
    #[serde(default = "yes")]
    pub norm: bool,
    #[serde(default = "two")]
    pub stem_stride: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
}

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

/// Geometric family of chain widths from \`min\` towards \`max\`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub min: usize,
    pub max: usize,
    pub count: usize,
}

/// Chain widths in one of three forms: explicit per-unit widths, a
/// fraction of the teacher's width, or a schedule of several chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    /// Overrides the family default.
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default = "hundred")]
    pub max_iters: usize,
}

fn hundred() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub n_iter: usize,
    /// Overrides the family default.
    #[serde(default)]
    pub alpha_mode: Option<AlphaMode>,
    #[serde(default = "one")]
    pub alpha_value: f64,
    #[serde(default = "margin")]
    pub margin: f64,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
}

fn one() -> f64 {
    1.0
}

fn margin() -> f64 {
    DEFAULT_MARGIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentsSection {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    #[serde(default)]
    pub precision: Precision,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub teacher: TeacherSection,
    pub chain: ChainSection,
    pub refine: RefineSection,
    pub students: StudentsSection,
    pub finetune: FinetuneSection,
    /// Pretraining scene: teacher training and refinement.
    pub data: DatasetConfig,
    /// Downstream scene for fine-tuning and evaluation. Defaults to the
    /// pretraining settings; its identities are always freshly drawn.
    #[serde(default)]
    pub downstream: Option<DatasetConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn config_err<T>(msg: String) -> Result<T> {
    Err(CliError::Config(msg))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn downstream(&self) -> &DatasetConfig {
        self.downstream.as_ref().unwrap_or(&self.data)
    }

    pub fn metric(&self) -> Metric {
        self.chain.metric.unwrap_or(Metric::default_for(self.family))
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        self.refine
            .alpha_mode
            .unwrap_or(oskt_core::weightchain::RefineHyper::alpha_mode_for(self.family))
    }

    /// Architecture of a reference model of this family at `width`.
    pub fn teacher_config(&self, width: usize, data: &DatasetConfig) -> TeacherConfig {
        TeacherConfig {
            norm: self.teacher.norm,
            stem_stride: self.teacher.stem_stride,
            ..TeacherConfig::new(
                self.family,
                width,
                self.teacher.blocks,
                data.train_ids(),
                data.sample_shape.clone(),
            )
        }
    }

    /// Number of row units of the teacher architecture.
    pub fn units(&self) -> Result<usize> {
        let spec = reference_spec(&self.teacher_config(self.teacher.width, &self.data))
            .map_err(|e| CliError::Config(format!("teacher: {e}")))?;
        Ok(spec.topology()?.units.len())
    }

    /// Per-unit widths of every chain to build, narrowest first.
    pub fn chain_plans(&self) -> Result<Vec<Vec<usize>>> {
        let units = self.units()?;
        let n = self.teacher.width;
        let c = &self.chain;
        match (&c.widths, c.ratio, c.schedule) {
            (Some(w), None, None) => {
                if w.len() != units {
                    return config_err(format!("chain.widths lists {} widths for {units} units", w.len()));
                }
                if let Some(bad) = w.iter().find(|&&m| m < 1 || m > n) {
                    return config_err(format!("chain width {bad} outside [1, {n}]"));
                }
                Ok(vec![w.clone()])
            }
            (None, Some(r), None) => {
                if !(r > 0.0 && r <= 1.0) {
                    return config_err(format!("chain.ratio {r} outside (0, 1]"));
                }
                Ok(vec![vec![((r * n as f64).round() as usize).clamp(1, n); units]])
            }
            (None, None, Some(s)) => {
                if s.max > n {
                    return config_err(format!("chain.schedule.max {} exceeds the teacher width {n}", s.max));
                }
                let widths = chain_width_schedule(s.min, s.max, s.count)
                    .map_err(|e| CliError::Config(format!("chain.schedule: {e}")))?;
                if widths.windows(2).any(|p| p[0] >= p[1]) {
                    return config_err(format!("chain.schedule yields repeated widths {widths:?}"));
                }
                Ok(widths.into_iter().map(|m| vec![m; units]).collect())
            }
            _ => config_err("chain needs exactly one of widths, ratio or schedule".into()),
        }
    }

    /// Index into [\`chain_plans\`](Self::chain_plans) of the chain that
    /// serves a uniform student width.
    pub fn chain_for_width(&self, width: usize) -> Result<usize> {
        let plans = self.chain_plans()?;
        let tops: Vec<usize> = plans.iter().map(|p| p.iter().copied().max().unwrap_or(1)).collect();
        covering_chain(&tops, self.teacher.width, width)
            .ok_or_else(|| CliError::Config(format!("no chain serves student width {width} (chains {tops:?})")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return config_err("seeds must not be empty".into());
        }
        for (name, d) in [("data", &self.data), ("downstream", self.downstream())] {
            d.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            let rank_ok = match self.family {
                Family::CnnLike => d.sample_shape.len() == 3,
                Family::MlpLike => d.sample_shape.len() == 1,
            };
            if !rank_ok {
                return config_err(format!(
                    "{name}.sample_shape {:?} does not suit {:?}",
                    d.sample_shape, self.family
                ));
            }
        }
        if self.downstream().sample_shape != self.data.sample_shape {
            return config_err("downstream.sample_shape must match data.sample_shape".into());
        }
        self.teacher.optim().validate("teacher", &self.data)?;
        self.refine.optim().validate("refine", &self.data)?;
        self.finetune.optim().validate("finetune", self.downstream())?;
        if !(self.refine.alpha_value.is_finite() && self.refine.alpha_value >= 0.0) {
            return config_err(format!(
                "refine.alpha_value {} must be finite and non-negative",
                self.refine.alpha_value
            ));
        }
        if !(self.refine.margin.is_finite() && self.refine.margin >= 0.0) {
            return config_err("refine.margin must be finite and non-negative".into());
        }
        if self.students.widths.is_empty() {
            return config_err("students.widths must not be empty".into());
        }
        for &w in &self.students.widths {
            if w > self.teacher.width {
                return config_err(format!(
                    "student width {w} exceeds the teacher width {}",
                    self.teacher.width
                ));
            }
            self.chain_for_width(w)?;
            if w < 4 {
                return config_err(format!("student width {w} below the architecture minimum of 4"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
family = "cnn_like"
seeds = [0]

[teacher]
width = 16
blocks = 1
epochs = 1
lr = 1e-3
p = 4
k = 4

[chain]
ratio = 0.25

[refine]
n_iter = 2
lr = 1e-3
p = 4
k = 4

[students]
widths = [4, 8, 16]

[finetune]
epochs = 1
lr = 1e-3
p = 4
k = 4

[data]
num_ids = 12
test_ids = 4
"#;

    #[test]
    fn sample_parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.chain_plans().unwrap(), vec![vec![4; cfg.units().unwrap()]]);
        assert_eq!(cfg.chain_for_width(16).unwrap(), 0);
        assert_eq!(cfg.metric(), Metric::Euclidean);
        assert_eq!(cfg.alpha_mode(), AlphaMode::Fixed);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn schedule_assigns_covering_chains() {
        let text = SAMPLE.replace("ratio = 0.25", "schedule = { min = 4, max = 16, count = 2 }");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let tops: Vec<usize> = cfg.chain_plans().unwrap().iter().map(|p| p[0]).collect();
        assert_eq!(tops, vec![4, 8]);
        let served: Vec<usize> = [4, 8, 16].iter().map(|&w| cfg.chain_for_width(w).unwrap()).collect();
        assert_eq!(served, vec![0, 1, 1]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let text = SAMPLE.replace("blocks = 1", "blocks = 1\nwidht = 3");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
        let text = SAMPLE.replace("test_ids = 4", "test_ids = 4\nnoise = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn bounds_are_checked() {
        for (from, to) in [
            ("widths = [4, 8, 16]", "widths = [2, 8]"),
            ("widths = [4, 8, 16]", "widths = [32]"),
            ("ratio = 0.25", "ratio = 1.5"),
            ("ratio = 0.25", "widths = [4]"),
            ("ratio = 0.25", "ratio = 0.5"),
            ("ratio = 0.25", "schedule = { min = 4, max = 32, count = 2 }"),
            (
                "ratio = 0.25",
                "ratio = 0.25\nschedule = { min = 4, max = 16, count = 2 }",
            ),
            ("seeds = [0]", "seeds = []"),
            ("[data]\n", "[data]\nsample_shape = [12]\n"),
        ] {
            let text = SAMPLE.replacen(from, to, 1);
            assert!(
                matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))),
                "{to}"
            );
        }
    }
}
