//! TOML experiment configuration and its validation.
//!
//! Every section except `[experiment]` may be omitted, and so may any field
//! with a default.

use std::path::{Path, PathBuf};

use denn_core::bvp::Rect;
use denn_core::generality::XTenths;
use denn_core::svcca::SampleSpec;
use denn_core::trainer::{derive_seed, AdamParams};
use denn_core::{BvpSpec, LossNorm, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `output.root`.
pub const OUT_ENV: &str = "DENN_OUT";

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    /// Dotted field path, or the file name for whole-file problems.
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: &str, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub svcca: SvccaSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub components: ComponentsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub widths: Vec<usize>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Seeds per source position.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub x_grid: XGrid,
}

fn default_depth() -> usize {
    4
}

fn default_seeds() -> u64 {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Default for XGrid {
    fn default() -> Self {
        XGrid {
            start: 0.0,
            step: 0.1,
            count: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub y_source: f64,
    pub r: f64,
    pub eta: f64,
    /// `[x0, x1, y0, y1]`.
    pub domain: [f64; 4],
}

impl Default for TaskSection {
    fn default() -> Self {
        let d = BvpSpec::default();
        TaskSection {
            y_source: d.y_source,
            r: d.r,
            eta: d.eta,
            domain: [d.domain.x0, d.domain.x1, d.domain.y0, d.domain.y1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub resample_every: u64,
    pub eval_every: u64,
    pub patience: u32,
    pub max_epochs: u64,
    pub n_interior: usize,
    pub n_per_edge: usize,
    pub test_scale: usize,
    /// `"l2"` or `"l1"`.
    pub norm: String,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            resample_every: c.resample_every,
            eval_every: c.eval_every,
            patience: c.patience,
            max_epochs: c.max_epochs,
            n_interior: c.n_interior,
            n_per_edge: c.n_per_edge,
            test_scale: c.test_scale,
            norm: norm_name(c.norm).to_string(),
            step_size: c.adam.step_size,
            beta1: c.adam.beta1,
            beta2: c.adam.beta2,
            epsilon: c.adam.epsilon,
        }
    }
}

fn norm_name(norm: LossNorm) -> &'static str {
    match norm {
        LossNorm::L2 => "l2",
        LossNorm::L1 => "l1",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvccaSection {
    /// Sample grid nodes per side.
    pub grid: usize,
    /// Variance fraction kept before CCA; absent means plain CCA.
    pub threshold: Option<f64>,
}

impl Default for SvccaSection {
    fn default() -> Self {
        SvccaSection {
            grid: 100,
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub width: usize,
    pub x_a: f64,
    pub x_b: f64,
    pub n: Vec<usize>,
    /// Donors are base runs with seeds `0..donor_seeds`.
    pub donor_seeds: u64,
    pub recipients: u64,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            width: 16,
            x_a: 0.0,
            x_b: 0.6,
            n: vec![1, 2, 3, 4],
            donor_seeds: 2,
            recipients: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Finite-difference nodes per side.
    pub n: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { n: 129 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentsSection {
    pub grid: usize,
    pub count: usize,
    pub layer: usize,
}

impl Default for ComponentsSection {
    fn default() -> Self {
        ComponentsSection {
            grid: 100,
            count: 9,
            layer: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub root: PathBuf,
    pub jobs: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            root: PathBuf::from("denn-out"),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::at("<config>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().message().to_string();
            ConfigError::at(if path == "." { "<config>" } else { &path }, message)
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(&path.display().to_string(), format!("cannot read: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field against the preconditions of the stage that uses
    /// it and resolves the typed plan.
    pub fn resolve(&self) -> Result<Plan, ConfigError> {
        let e = &self.experiment;
        if e.widths.is_empty() {
            return Err(ConfigError::at("experiment.widths", "must list at least one width"));
        }
        if let Some(w) = e.widths.iter().find(|&&w| w == 0) {
            return Err(ConfigError::at("experiment.widths", format!("width {w} must be positive")));
        }
        let mut sorted = e.widths.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != e.widths.len() {
            return Err(ConfigError::at("experiment.widths", "widths must be distinct"));
        }
        if e.depth == 0 {
            return Err(ConfigError::at("experiment.depth", "must be at least 1"));
        }
        if e.seeds == 0 {
            return Err(ConfigError::at("experiment.seeds", "must be at least 1"));
        }
        if e.x_grid.count == 0 {
            return Err(ConfigError::at("experiment.x_grid.count", "must be at least 1"));
        }
        if !e.x_grid.step.is_finite() || (e.x_grid.count > 1 && e.x_grid.step <= 0.0) {
            return Err(ConfigError::at("experiment.x_grid.step", "must be positive"));
        }
        let start = XTenths::from_f64(e.x_grid.start)
            .map_err(|_| ConfigError::at("experiment.x_grid.start", "must be a multiple of 0.1"))?;
        let step = XTenths::from_f64(e.x_grid.step)
            .map_err(|_| ConfigError::at("experiment.x_grid.step", "must be a multiple of 0.1"))?;
        let positions: Vec<XTenths> = (0..e.x_grid.count as i64).map(|k| XTenths(start.0 + k * step.0)).collect();

        let t = &self.task;
        let domain = Rect::new(t.domain[0], t.domain[1], t.domain[2], t.domain[3])
            .map_err(|err| ConfigError::at("task.domain", err.to_string()))?;
        let base = BvpSpec {
            x_source: positions[0].value(),
            y_source: t.y_source,
            r: t.r,
            eta: t.eta,
            domain,
        };
        if !(t.r.is_finite() && t.r > 0.0) {
            return Err(ConfigError::at("task.r", "must be positive"));
        }
        if !(t.eta.is_finite() && t.eta >= 0.0) {
            return Err(ConfigError::at("task.eta", "must be non-negative"));
        }
        if !(domain.y0..=domain.y1).contains(&t.y_source) {
            return Err(ConfigError::at("task.y_source", "lies outside task.domain"));
        }
        for x in &positions {
            if !(domain.x0..=domain.x1).contains(&x.value()) {
                return Err(ConfigError::at("experiment.x_grid", format!("x' = {x} lies outside task.domain")));
            }
        }

        let train = self.train_config()?;

        let s = &self.svcca;
        let max_width = *sorted.last().expect("non-empty");
        if s.grid < 2 || s.grid * s.grid <= max_width {
            return Err(ConfigError::at(
                "svcca.grid",
                format!("a {0}x{0} grid needs more points than the widest layer ({max_width})", s.grid),
            ));
        }
        if let Some(f) = s.threshold {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ConfigError::at("svcca.threshold", "must lie in (0, 1]"));
            }
        }
        let sample = SampleSpec { n: s.grid, domain };

        let tr = &self.transfer;
        if !e.widths.contains(&tr.width) {
            return Err(ConfigError::at("transfer.width", format!("{} is not in experiment.widths", tr.width)));
        }
        let x_a = XTenths::from_f64(tr.x_a).map_err(|_| ConfigError::at("transfer.x_a", "must be a multiple of 0.1"))?;
        if !positions.contains(&x_a) {
            return Err(ConfigError::at("transfer.x_a", "donors are base runs, so x_a must be on experiment.x_grid"));
        }
        let x_b = XTenths::from_f64(tr.x_b).map_err(|_| ConfigError::at("transfer.x_b", "must be a multiple of 0.1"))?;
        if !(domain.x0..=domain.x1).contains(&x_b.value()) {
            return Err(ConfigError::at("transfer.x_b", "lies outside task.domain"));
        }
        if tr.n.is_empty() {
            return Err(ConfigError::at("transfer.n", "must list at least one layer count"));
        }
        if let Some(n) = tr.n.iter().find(|&&n| n == 0 || n > e.depth) {
            return Err(ConfigError::at("transfer.n", format!("{n} is outside 1..={}", e.depth)));
        }
        if tr.donor_seeds == 0 || tr.donor_seeds > e.seeds {
            return Err(ConfigError::at("transfer.donor_seeds", format!("must lie in 1..={}", e.seeds)));
        }
        if tr.recipients == 0 {
            return Err(ConfigError::at("transfer.recipients", "must be at least 1"));
        }
        if tr.recipients >= 1000 {
            return Err(ConfigError::at("transfer.recipients", "must be below 1000"));
        }

        if self.oracle.n < 3 {
            return Err(ConfigError::at("oracle.n", "must be at least 3"));
        }
        let c = &self.components;
        if c.grid < 2 {
            return Err(ConfigError::at("components.grid", "must be at least 2"));
        }
        if c.count == 0 {
            return Err(ConfigError::at("components.count", "must be at least 1"));
        }
        if c.layer == 0 || c.layer > e.depth {
            return Err(ConfigError::at("components.layer", format!("must lie in 1..={}", e.depth)));
        }
        if self.output.jobs == 0 {
            return Err(ConfigError::at("output.jobs", "must be at least 1"));
        }

        Ok(Plan {
            widths: e.widths.clone(),
            depth: e.depth,
            seeds: e.seeds,
            positions,
            base,
            train,
            sample,
            threshold: s.threshold,
            transfer: TransferPlan {
                width: tr.width,
                x_a,
                x_b,
                ns: tr.n.clone(),
                donor_seeds: (0..tr.donor_seeds).collect(),
                recipients: tr.recipients,
            },
            oracle_n: self.oracle.n,
            components: *c,
        })
    }

    fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        if t.resample_every == 0 {
            return Err(ConfigError::at("train.resample_every", "must be positive"));
        }
        if t.eval_every == 0 || t.eval_every % t.resample_every != 0 {
            return Err(ConfigError::at("train.eval_every", "must be a positive multiple of train.resample_every"));
        }
        if t.patience == 0 {
            return Err(ConfigError::at("train.patience", "must be at least 1"));
        }
        if t.max_epochs == 0 {
            return Err(ConfigError::at("train.max_epochs", "must be at least 1"));
        }
        if t.n_interior == 0 {
            return Err(ConfigError::at("train.n_interior", "must be positive"));
        }
        if t.n_per_edge == 0 {
            return Err(ConfigError::at("train.n_per_edge", "must be positive"));
        }
        if t.test_scale == 0 {
            return Err(ConfigError::at("train.test_scale", "must be positive"));
        }
        let norm = match t.norm.as_str() {
            "l2" => LossNorm::L2,
            "l1" => LossNorm::L1,
            other => return Err(ConfigError::at("train.norm", format!("`{other}` is neither \"l2\" nor \"l1\""))),
        };
        if !(t.step_size.is_finite() && t.step_size > 0.0) {
            return Err(ConfigError::at("train.step_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) {
            return Err(ConfigError::at("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&t.beta2) {
            return Err(ConfigError::at("train.beta2", "must lie in [0, 1)"));
        }
        if !(t.epsilon.is_finite() && t.epsilon > 0.0) {
            return Err(ConfigError::at("train.epsilon", "must be positive"));
        }
        let config = TrainConfig {
            resample_every: t.resample_every,
            eval_every: t.eval_every,
            patience: t.patience,
            adam: AdamParams {
                step_size: t.step_size,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            n_interior: t.n_interior,
            n_per_edge: t.n_per_edge,
            test_scale: t.test_scale,
            norm,
            max_epochs: t.max_epochs,
            seed: 0,
        };
        config.validate().map_err(|err| ConfigError::at("train", err.to_string()))?;
        Ok(config)
    }
}

/// Validated, typed view of a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub seeds: u64,
    pub positions: Vec<XTenths>,
    /// Task parameters; `x_source` is overridden per run.
    pub base: BvpSpec,
    /// Seed is overridden per run.
    pub train: TrainConfig,
    pub sample: SampleSpec,
    pub threshold: Option<f64>,
    pub transfer: TransferPlan,
    pub oracle_n: usize,
    pub components: ComponentsSection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferPlan {
    pub width: usize,
    pub x_a: XTenths,
    pub x_b: XTenths,
    pub ns: Vec<usize>,
    pub donor_seeds: Vec<u64>,
    pub recipients: u64,
}

/// One base training: width, source position and seed ordinal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunId {
    pub width: usize,
    pub x: XTenths,
    pub seed: u64,
}

impl std::fmt::Display for RunId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}/x{}/s{}", self.width, self.x, self.seed)
    }
}

impl Plan {
    pub fn full_widths(&self, width: usize) -> Vec<usize> {
        denn_core::net::uniform_widths(width, self.depth)
    }

    pub fn spec_at(&self, x: XTenths) -> BvpSpec {
        BvpSpec {
            x_source: x.value(),
            ..self.base
        }
    }

    pub fn run_seed(&self, run: &RunId) -> u64 {
        derive_seed(run.x.0, 0, self.depth as u64, run.width as u64, run.seed)
    }

    pub fn run_config(&self, run: &RunId) -> TrainConfig {
        self.train.with_seed(self.run_seed(run))
    }

    /// Every base run, ordered by width, then position, then seed.
    pub fn runs(&self) -> Vec<RunId> {
        let mut out = Vec::new();
        for &width in &self.widths {
            for &x in &self.positions {
                for seed in 0..self.seeds {
                    out.push(RunId { width, x, seed });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nwidths = [8, 16]\n";

    #[test]
    fn defaults_resolve() {
        let config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let plan = config.resolve().unwrap();
        assert_eq!(plan.positions, (0..7).map(XTenths).collect::<Vec<_>>());
        assert_eq!(plan.runs().len(), 2 * 7 * 4);
        assert_eq!(plan.transfer.ns, [1, 2, 3, 4]);
        assert_eq!(plan.train, TrainConfig::default());
        assert_eq!(plan.sample.n, 100);
    }

    #[test]
    fn round_trips_through_toml() {
        let config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(config, again);
    }

    #[test]
    fn type_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[experiment]\nwidths = [8]\n[train]\npatience = \"five\"\n").unwrap_err();
        assert_eq!(err.path, "train.patience");
        let err = ExperimentConfig::from_toml("[experiment]\nwidths = [8]\nx_grid = { start = 0.0, step = 0.1, cnt = 3 }\n")
            .unwrap_err();
        assert!(err.path.starts_with("experiment.x_grid"), "{err}");
    }

    #[test]
    fn missing_section_is_reported() {
        let err = ExperimentConfig::from_toml("[train]\npatience = 3\n").unwrap_err();
        assert!(err.message.contains("experiment"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let cases = [
            ("[experiment]\nwidths = []\n", "experiment.widths"),
            ("[experiment]\nwidths = [8]\n[train]\neval_every = 150\n", "train.eval_every"),
            ("[experiment]\nwidths = [8]\n[train]\nnorm = \"l3\"\n", "train.norm"),
            ("[experiment]\nwidths = [8]\n[transfer]\nwidth = 8\nx_a = 0.9\n", "transfer.x_a"),
            ("[experiment]\nwidths = [8]\n", "transfer.width"),
            ("[experiment]\nwidths = [16]\n[transfer]\nn = [5]\n", "transfer.n"),
            ("[experiment]\nwidths = [16]\nx_grid = { start = 0.05, step = 0.1, count = 2 }\n", "experiment.x_grid.start"),
            ("[experiment]\nwidths = [16]\nx_grid = { start = 0.0, step = 0.4, count = 4 }\n", "experiment.x_grid"),
            ("[experiment]\nwidths = [16]\n[svcca]\nthreshold = 1.5\n", "svcca.threshold"),
            ("[experiment]\nwidths = [16]\n[svcca]\ngrid = 4\n", "svcca.grid"),
            ("[experiment]\nwidths = [16]\n[output]\njobs = 0\n", "output.jobs"),
        ];
        for (text, path) in cases {
            let err = ExperimentConfig::from_toml(text).unwrap().resolve().unwrap_err();
            assert_eq!(err.path, path, "{text}: {err}");
        }
    }

    #[test]
    fn run_seeds_are_distinct() {
        let plan = ExperimentConfig::from_toml(MINIMAL).unwrap().resolve().unwrap();
        let mut seeds: Vec<u64> = plan.runs().iter().map(|r| plan.run_seed(r)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), plan.runs().len());
    }
}
