//! Run configuration: defaults, TOML file, then dotted `--a.b` overrides.

use std::path::Path;

use ktd_core::datakit::{LongitudinalConfig, SplitSpec, TriageSynthConfig};
use ktd_core::evalkit::SweepGrid;
use ktd_core::losses::DistillConfig;
use ktd_core::pipeline::{ArchConfig, TrainConfig};
use ktd_core::trajectory::{AggregationScheme, TrajClassifierConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Split and training seed of every stage; also names the run directory.
    pub seed: u64,
    /// Parent of all run directories; empty means `$KTD_OUTPUT_ROOT`, then `runs`.
    pub output_root: String,
    pub inputs: Inputs,
    pub data: DataConfig,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub pretrain: StageTrain,
    pub finetune: FinetuneConfig,
    pub distill: DistillStage,
    pub traj: TrajStage,
    pub eval: EvalStage,
    pub sweep: SweepStage,
}

/// Upstream artifacts. Empty paths are discovered under the output root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Directory written by `ktd synth`.
    pub data: String,
    pub ap: String,
    pub rf: String,
    pub ms: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub triage: TriageSynthConfig,
    pub pretrain: TriageSynthConfig,
    pub longitudinal: LongitudinalConfig,
    /// train / validation / test
    pub triage_split: [f64; 3],
    pub pretrain_split: [f64; 3],
    pub traj_split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            triage: TriageSynthConfig::triage(290, 0),
            pretrain: TriageSynthConfig::pretrain(150, 1),
            longitudinal: LongitudinalConfig::default(),
            // 600 / 90 / 180 images
            triage_split: [20.0 / 29.0, 3.0 / 29.0, 6.0 / 29.0],
            pretrain_split: [0.8, 0.1, 0.1],
            traj_split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTrain {
    pub train: TrainConfig,
}

impl Default for StageTrain {
    fn default() -> Self {
        StageTrain {
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Copy the pre-trained trunk; otherwise only heads are transferred.
    pub copy_trunk: bool,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            copy_trunk: true,
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillStage {
    /// Train the student alone (alpha = 0); no teacher checkpoint needed.
    pub baseline: bool,
    pub loss: DistillConfig,
    pub train: TrainConfig,
}

impl Default for DistillStage {
    fn default() -> Self {
        DistillStage {
            baseline: false,
            loss: DistillConfig::default(),
            train: TrainConfig::student(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajStage {
    pub schemes: Vec<AggregationScheme>,
    pub classifier: TrajClassifierConfig,
}

impl Default for TrajStage {
    fn default() -> Self {
        TrajStage {
            schemes: vec![AggregationScheme::Difference, AggregationScheme::Concatenation],
            classifier: TrajClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Rf,
    Ms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub checkpoint: Checkpoint,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            checkpoint: Checkpoint::Ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepStage {
    pub grid: SweepGrid,
    /// Cells trained concurrently.
    pub jobs: usize,
    pub train: TrainConfig,
}

impl Default for SweepStage {
    fn default() -> Self {
        SweepStage {
            grid: SweepGrid::default(),
            jobs: 1,
            train: TrainConfig::student(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_root: String::new(),
            inputs: Inputs::default(),
            data: DataConfig::default(),
            teacher: ArchConfig::teacher(),
            student: ArchConfig::student(),
            pretrain: StageTrain::default(),
            finetune: FinetuneConfig::default(),
            distill: DistillStage::default(),
            traj: TrajStage::default(),
            eval: EvalStage::default(),
            sweep: SweepStage::default(),
        }
    }
}

/// Per-stage training seeds are driven by the global `seed`.
const SEED_PATHS: [&str; 5] = [
    "pretrain.train.seed",
    "finetune.train.seed",
    "distill.train.seed",
    "traj.classifier.train.seed",
    "sweep.train.seed",
];

impl RunConfig {
    pub fn validate(&self) -> ktd_core::Result<()> {
        self.data.triage.validate()?;
        self.data.pretrain.validate()?;
        self.data.longitudinal.validate()?;
        for ratios in [self.data.triage_split, self.data.pretrain_split, self.data.traj_split] {
            SplitSpec::new(ratios, self.seed)?;
        }
        for train in [
            &self.pretrain.train,
            &self.finetune.train,
            &self.distill.train,
            &self.traj.classifier.train,
            &self.sweep.train,
        ] {
            train.validate()?;
        }
        for arch in [&self.teacher, &self.student] {
            arch.build("check", self.data.triage.image_size, &self.data.triage.classes)?;
        }
        let sizes = [self.data.triage.image_size, self.data.pretrain.image_size, self.data.longitudinal.image_size];
        if sizes.iter().any(|s| *s != sizes[0]) {
            return Err(ktd_core::KtdError::InvalidArgument(format!(
                "data.triage, data.pretrain and data.longitudinal must share one image_size, got {sizes:?}"
            )));
        }
        self.distill.loss.validate()?;
        self.traj.classifier.validate()?;
        self.sweep.grid.validate()?;
        if self.sweep.jobs == 0 {
            return Err(ktd_core::KtdError::InvalidArgument("sweep.jobs must be >= 1".into()));
        }
        if self.traj.schemes.is_empty() {
            return Err(ktd_core::KtdError::InvalidArgument("traj.schemes must not be empty".into()));
        }
        Ok(())
    }

    fn apply_seed(&mut self) {
        for train in [
            &mut self.pretrain.train,
            &mut self.finetune.train,
            &mut self.distill.train,
            &mut self.traj.classifier.train,
            &mut self.sweep.train,
        ] {
            train.seed = self.seed;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn default_table() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

/// Every overridable key with its default, in dotted form.
pub fn leaf_keys() -> Vec<(String, Value)> {
    fn walk(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
        for (k, v) in table {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(t) => walk(&path, t, out),
                _ if SEED_PATHS.contains(&path.as_str()) => {}
                _ => out.push((path, v.clone())),
            }
        }
    }
    let mut out = Vec::new();
    walk("", &default_table(), &mut out);
    out
}

/// Parse a flag value as a TOML literal, falling back to a bare string.
/// Integers given for float keys are widened.
fn parse_value(raw: &str, default: &Value) -> Value {
    let parsed = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    match (parsed, default) {
        (Value::Integer(i), Value::Float(_)) => Value::Float(i as f64),
        (p, _) => p,
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("table");
    }
    cur.insert(last.to_string(), value);
}

fn find_path(table: &Table, path: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

/// Defaults, then the optional file, then `overrides` (dotted key, raw value).
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut user = Table::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        user = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    let defaults = leaf_keys();
    for (key, raw) in overrides {
        let default = defaults
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| CliError::Config(format!("unknown key '{key}'")))?;
        set_path(&mut user, key, parse_value(raw, default));
    }
    for path in SEED_PATHS {
        if find_path(&user, path) {
            return Err(CliError::Config(format!("'{path}' is set from the top-level 'seed'; set that instead")));
        }
    }
    let mut merged = default_table();
    merge(&mut merged, user);
    let mut cfg: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().replace('\n', " ")))?;
    cfg.apply_seed();
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}
