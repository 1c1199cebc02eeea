//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! [run]
//! out = "runs/default"
//! seed = 1337
//! l = 4
//!
//! [data]
//! inputs = []            # empty: the bundled corpus
//!
//! [model]
//! n_layer = 4
//! n_head = 4
//! emb_dim = 128
//! block_size = 64
//!
//! [train]
//! max_iters = 2000
//!
//! [refine]
//! k = 15
//! w = 0.05
//!
//! [eval]
//! samples = 5000
//! runs = 10
//! ```
//!
//! Every key is optional. Keys the schema does not know are rejected, all
//! of them listed at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agr::RefineConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::oracle::{RefinerKind, DEFAULT_BUDGET};
use crate::permute::Objective;
use crate::tokenizer::Scheme;
use crate::train::{NanPolicy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out: PathBuf,
    pub seed: u64,
    /// Permutation block length, shared by training and refinement.
    pub l: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out: PathBuf::from("runs/default"), seed: 1337, l: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Text files to tokenize; the bundled corpus when empty.
    pub inputs: Vec<PathBuf>,
    pub scheme: Scheme,
    /// Prepared dataset to use instead of `<out>/dataset.bin`.
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_max: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub grad_clip: f64,
    pub warmup_from_floor: bool,
    pub nan_policy: NanPolicy,
    pub adamw: AdamWConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr_max: t.lr_max,
            warmup_iters: t.warmup_iters,
            max_iters: t.max_iters,
            batch_size: t.batch_size,
            eval_interval: t.eval_interval,
            eval_batches: t.eval_batches,
            grad_clip: t.grad_clip,
            warmup_from_floor: t.warmup_from_floor,
            nan_policy: t.nan_policy,
            adamw: t.adamw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub k: usize,
    pub w: f64,
    /// Write one row per sample from `agr`.
    pub traces: bool,
}

impl Default for RefineSection {
    fn default() -> Self {
        let r = RefineConfig::default();
        RefineSection { k: r.k, w: r.w, traces: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub runs: usize,
    /// `[[k, w], ...]` cells; empty evaluates only `refine.k`, `refine.w`.
    pub grid: Vec<(usize, f64)>,
    pub dataset_label: String,
    /// Split used by `agr`.
    pub agr_split: crate::dataset::Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection { samples: e.samples, runs: e.runs, grid: e.grid, dataset_label: e.dataset_label, agr_split: crate::dataset::Split::Val }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleOp {
    /// Locality gap at context length `t`.
    #[default]
    Locality,
    /// Exact accuracy sweep over `ws` and `epsilons`.
    Sweep,
    /// Next-token distribution after `context`.
    Next,
    /// Distribution of the second-to-last token of `context`.
    SecondToLast,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    #[default]
    Random,
    Uniform,
    Copy,
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub op: OracleOp,
    pub source: SourceKind,
    pub vocab: usize,
    pub order: usize,
    pub concentration: f64,
    /// Seed of the first source; `sources` consecutive seeds are used.
    pub seed: u64,
    pub sources: usize,
    /// JSON file with an explicit source, overriding `source`.
    pub table: Option<PathBuf>,
    pub t: usize,
    pub k: usize,
    pub ws: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub refiner: RefinerKind,
    pub context: Vec<u32>,
    pub budget: u64,
    pub pointwise: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            op: OracleOp::Locality,
            source: SourceKind::Random,
            vocab: 5,
            order: 1,
            concentration: 1.0,
            seed: 0,
            sources: 1,
            table: None,
            t: 4,
            k: 3,
            ws: vec![0.0, 0.01, 0.05, 0.1, 0.5],
            epsilons: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            refiner: RefinerKind::Ideal,
            context: Vec::new(),
            budget: DEFAULT_BUDGET as u64,
            pointwise: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub refine: RefineSection,
    pub eval: EvalSection,
    pub oracle: OracleSection,
}

// Values whose inner keys depend on a variant and are left to serde.
const OPAQUE: &[&str] = &["data.scheme"];

fn schema() -> toml::Table {
    let mut c = Config::default();
    c.data.dataset = Some(PathBuf::new());
    c.oracle.table = Some(PathBuf::new());
    toml::Table::try_from(&c).expect("config serializes")
}

fn unknown_keys(schema: &toml::Table, given: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (schema.get(key), value) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(s)), toml::Value::Table(g)) if !OPAQUE.contains(&path.as_str()) => unknown_keys(s, g, &path, out),
            _ => {}
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&schema(), &table, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown));
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data.dataset.clone().unwrap_or_else(|| self.run.out.join("dataset.bin"))
    }

    /// Training settings for one objective. The two models get different
    /// seeds derived from the run seed.
    pub fn train_config(&self, objective: Objective, vocab_size: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr_max: t.lr_max,
            warmup_iters: t.warmup_iters,
            max_iters: t.max_iters,
            batch_size: t.batch_size,
            eval_interval: t.eval_interval,
            eval_batches: t.eval_batches,
            seed: self.model_seed(objective),
            objective,
            l: self.run.l,
            grad_clip: t.grad_clip,
            warmup_from_floor: t.warmup_from_floor,
            nan_policy: t.nan_policy,
            adamw: t.adamw,
            model: ModelConfig { vocab_size, ..self.model },
        }
    }

    pub fn model_seed(&self, objective: Objective) -> u64 {
        match objective {
            Objective::NextToken => self.run.seed,
            Objective::SecondToLast => self.run.seed.wrapping_add(1),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.run.seed.wrapping_add(1000)
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig { k: self.refine.k, w: self.refine.w, l: self.run.l, ..Default::default() }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            samples: self.eval.samples,
            runs: self.eval.runs,
            seed: self.eval_seed(),
            refine: self.refine_config(),
            grid: self.eval.grid.clone(),
            dataset_label: self.eval.dataset_label.clone(),
        }
    }
}

/// Command-line values that replace file values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub w: Option<f64>,
    pub l: Option<usize>,
    pub samples: Option<usize>,
    pub runs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Applies the overrides and returns them as `key=value` strings.
    pub fn apply(&self, cfg: &mut Config) -> Vec<String> {
        let mut log = Vec::new();
        let mut note = |k: &str, v: String| log.push(format!("{k}={v}"));
        if let Some(x) = self.seed {
            cfg.run.seed = x;
            note("run.seed", x.to_string());
        }
        if let Some(x) = self.k {
            cfg.refine.k = x;
            note("refine.k", x.to_string());
        }
        if let Some(x) = self.w {
            cfg.refine.w = x;
            note("refine.w", x.to_string());
        }
        if let Some(x) = self.l {
            cfg.run.l = x;
            note("run.l", x.to_string());
        }
        if let Some(x) = self.samples {
            cfg.eval.samples = x;
            note("eval.samples", x.to_string());
        }
        if let Some(x) = self.runs {
            cfg.eval.runs = x;
            note("eval.runs", x.to_string());
        }
        if let Some(x) = &self.out {
            cfg.run.out = x.clone();
            note("run.out", x.display().to_string());
        }
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = Config::from_toml("[model]\nn_layer = 2\n[train.adamw]\nweight_decay = 0.0\n").unwrap();
        assert_eq!(c.model.n_layer, 2);
        assert_eq!(c.model.emb_dim, 128);
        assert_eq!(c.train.adamw.weight_decay, 0.0);
        assert_eq!(c.train.adamw.beta1, 0.9);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = Config::from_toml("colour = 1\n[model]\nn_layers = 2\n[train.adamw]\nbeta3 = 0.5\n").unwrap_err();
        match err {
            Error::UnknownConfigKeys(keys) => {
                assert_eq!(keys, vec!["colour", "model.n_layers", "train.adamw.beta3"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::default();
        c.data.scheme = Scheme::SimpleBpe { merges: 50 };
        c.eval.grid = vec![(2, 0.01), (15, 0.1)];
        c.oracle.table = Some("src.json".into());
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn overrides_win_and_are_logged() {
        let mut c = Config::default();
        let log = Overrides { w: Some(0.0), runs: Some(3), ..Default::default() }.apply(&mut c);
        assert_eq!(c.refine.w, 0.0);
        assert_eq!(c.eval.runs, 3);
        assert_eq!(log, vec!["refine.w=0", "eval.runs=3"]);
    }
}
