use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{evaluate, BinaryTask, ConfigEcho, EvalReport};
use crate::datakit::Dataset;
use crate::error::{ensure, Result};
use crate::losses::{ArcFaceConfig, DistillConfig, PcConfig, StudentLossKind};
use crate::nets::{NetworkSpec, WeightBundle};
use crate::pipeline::{distill_ms, StageData, TrainConfig};

/// A student loss column: kind plus its one tuning value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossVariant {
    Softmax,
    Pc { xi: f64 },
    Arcface { scale_s: f64, margin_m: f64 },
}

impl LossVariant {
    pub fn label(&self) -> String {
        match self {
            LossVariant::Softmax => "SM".into(),
            LossVariant::Pc { xi } => format!("PC xi={xi}"),
            LossVariant::Arcface { margin_m, .. } => format!("ArcFace m={margin_m}"),
        }
    }

    pub fn kind(&self) -> StudentLossKind {
        match self {
            LossVariant::Softmax => StudentLossKind::Softmax,
            LossVariant::Pc { .. } => StudentLossKind::Pc,
            LossVariant::Arcface { .. } => StudentLossKind::Arcface,
        }
    }

    pub fn distill_config(&self, alpha: f64, temperature: f64) -> DistillConfig {
        let mut c = DistillConfig {
            alpha,
            temperature,
            student_loss: self.kind(),
            pc: PcConfig::default(),
            arcface: ArcFaceConfig::default(),
        };
        match *self {
            LossVariant::Pc { xi } => c.pc = PcConfig { xi },
            LossVariant::Arcface { scale_s, margin_m } => c.arcface = ArcFaceConfig { scale_s, margin_m },
            LossVariant::Softmax => {}
        }
        c
    }
}

/// Which (alpha, T) pairs of the axes are run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SweepLayout {
    /// Every combination.
    Full,
    /// Every alpha at `temperature`, plus every temperature at `alpha`.
    Blocks { alpha: f64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub losses: Vec<LossVariant>,
    pub seeds: Vec<u64>,
    pub layout: SweepLayout,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            alphas: vec![0.2, 0.4, 0.6, 0.8],
            temperatures: vec![1.0, 5.0, 10.0],
            losses: vec![
                LossVariant::Pc { xi: 0.8 },
                LossVariant::Pc { xi: 0.995 },
                LossVariant::Arcface {
                    scale_s: ArcFaceConfig::default().scale_s,
                    margin_m: ArcFaceConfig::default().margin_m,
                },
                LossVariant::Softmax,
            ],
            seeds: vec![0, 1, 2, 3, 4],
            layout: SweepLayout::Blocks {
                alpha: 0.8,
                temperature: 5.0,
            },
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub alpha: f64,
    pub temperature: f64,
    pub loss: LossVariant,
    pub seed: u64,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.alphas.is_empty(), "sweep needs at least one alpha");
        ensure!(!self.temperatures.is_empty(), "sweep needs at least one temperature");
        ensure!(!self.losses.is_empty(), "sweep needs at least one loss");
        ensure!(!self.seeds.is_empty(), "sweep needs at least one seed");
        for loss in &self.losses {
            loss.distill_config(self.alphas[0], self.temperatures[0]).validate()?;
        }
        for &a in &self.alphas {
            for &t in &self.temperatures {
                DistillConfig {
                    alpha: a,
                    temperature: t,
                    ..DistillConfig::default()
                }
                .validate()?;
            }
        }
        Ok(())
    }

    /// (alpha, T) pairs in alpha-major order, without duplicates.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &a in &self.alphas {
            for &t in &self.temperatures {
                let keep = match self.layout {
                    SweepLayout::Full => true,
                    SweepLayout::Blocks { alpha, temperature } => t == temperature || a == alpha,
                };
                if keep && !out.contains(&(a, t)) {
                    out.push((a, t));
                }
            }
        }
        out
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for seed in &self.seeds {
            for (alpha, temperature) in self.pairs() {
                for loss in &self.losses {
                    out.push(CellKey {
                        alpha,
                        temperature,
                        loss: *loss,
                        seed: *seed,
                    });
                }
            }
        }
        out
    }
}

/// Data and per-seed teachers shared by every cell.
pub struct SweepInputs<'a> {
    pub rf_spec: &'a NetworkSpec,
    /// Teacher bundle for each seed of the grid.
    pub teachers: &'a BTreeMap<u64, WeightBundle>,
    /// Student network with linear heads; ArcFace cells switch to cosine heads.
    pub ms_spec: &'a NetworkSpec,
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: &'a Dataset,
    pub tasks: &'a [BinaryTask],
    /// Per-cell training settings; the seed is replaced by the cell seed.
    pub train_config: &'a TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub key: CellKey,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub cells: Vec<SweepCell>,
}

/// Student network used for a given loss.
pub fn student_spec_for(ms_spec: &NetworkSpec, loss: &LossVariant) -> NetworkSpec {
    match loss {
        LossVariant::Arcface { scale_s, .. } => ms_spec.clone().with_cosine_heads(*scale_s),
        _ => ms_spec.clone(),
    }
}

/// Distil and evaluate a single cell.
pub fn run_cell(key: &CellKey, inputs: &SweepInputs<'_>) -> Result<EvalReport> {
    let teacher = inputs
        .teachers
        .get(&key.seed)
        .ok_or_else(|| crate::KtdError::invalid(format!("no teacher for seed {}", key.seed)))?;
    let dconfig = key.loss.distill_config(key.alpha, key.temperature);
    let spec = student_spec_for(inputs.ms_spec, &key.loss);
    let tconfig = TrainConfig {
        seed: key.seed,
        ..inputs.train_config.clone()
    };
    let outcome = distill_ms(
        teacher,
        inputs.rf_spec,
        &spec,
        StageData::new(inputs.train, inputs.val),
        &dconfig,
        &tconfig,
    )?;
    evaluate(&spec, &outcome.bundle, inputs.test, inputs.tasks, Some(ConfigEcho::new(&dconfig, key.seed)))
}

/// Run every cell, at most `jobs` at a time. A failing cell is recorded and
/// does not stop the others.
pub fn run_sweep(grid: &SweepGrid, inputs: &SweepInputs<'_>, jobs: usize) -> Result<SweepResult> {
    grid.validate()?;
    ensure!(jobs >= 1, "jobs must be >= 1");
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| crate::KtdError::state(format!("thread pool: {e}")))?;
    let results: Vec<SweepCell> = pool.install(|| {
        cells
            .par_iter()
            .map(|key| match run_cell(key, inputs) {
                Ok(report) => SweepCell {
                    key: *key,
                    report: Some(report),
                    error: None,
                },
                Err(e) => SweepCell {
                    key: *key,
                    report: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    Ok(SweepResult {
        grid: grid.clone(),
        cells: results,
    })
}

/// Which number a table shows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Auroc(String),
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Accuracy => "accuracy".into(),
            Metric::Auroc(task) => format!("AUROC {task}"),
        }
    }

    fn of(&self, report: &EvalReport) -> Option<f64> {
        match self {
            Metric::Accuracy => Some(report.accuracy),
            Metric::Auroc(task) => report.auroc.get(task).copied(),
        }
    }
}

/// Per-seed values and their mean for one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub per_seed: Vec<(u64, f64)>,
    pub failed_seeds: Vec<u64>,
    pub mean: Option<f64>,
}

/// Rows are one axis value each, columns are the grid losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub title: String,
    pub row_axis: String,
    pub rows: Vec<f64>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<TableCell>>,
}

impl SweepResult {
    fn cell(&self, alpha: f64, temperature: f64, loss: &LossVariant, metric: &Metric) -> TableCell {
        let mut per_seed = Vec::new();
        let mut failed = Vec::new();
        for c in &self.cells {
            if c.key.alpha == alpha && c.key.temperature == temperature && c.key.loss == *loss {
                match c.report.as_ref().and_then(|r| metric.of(r)) {
                    Some(v) => per_seed.push((c.key.seed, v)),
                    None => failed.push(c.key.seed),
                }
            }
        }
        per_seed.sort_by_key(|(s, _)| *s);
        failed.sort_unstable();
        let mean = (!per_seed.is_empty()).then(|| per_seed.iter().map(|(_, v)| v).sum::<f64>() / per_seed.len() as f64);
        TableCell {
            per_seed,
            failed_seeds: failed,
            mean,
        }
    }

    /// The alpha-by-loss block at a fixed temperature and the
    /// temperature-by-loss block at a fixed alpha. A block is omitted when
    /// its fixed value is not on the grid.
    pub fn tables(&self, metric: &Metric) -> Vec<SweepTable> {
        let (fix_alpha, fix_t) = match self.grid.layout {
            SweepLayout::Blocks { alpha, temperature } => (alpha, temperature),
            SweepLayout::Full => (
                *self.grid.alphas.last().expect("validated grid"),
                if self.grid.temperatures.contains(&5.0) {
                    5.0
                } else {
                    self.grid.temperatures[0]
                },
            ),
        };
        let columns: Vec<String> = self.grid.losses.iter().map(LossVariant::label).collect();
        let mut out = Vec::new();
        if self.grid.temperatures.contains(&fix_t) {
            out.push(SweepTable {
                title: format!("{} by alpha at T={fix_t}", metric.name()),
                row_axis: "alpha".into(),
                rows: self.grid.alphas.clone(),
                columns: columns.clone(),
                cells: self
                    .grid
                    .alphas
                    .iter()
                    .map(|&a| self.grid.losses.iter().map(|l| self.cell(a, fix_t, l, metric)).collect())
                    .collect(),
            });
        }
        if self.grid.alphas.contains(&fix_alpha) {
            out.push(SweepTable {
                title: format!("{} by T at alpha={fix_alpha}", metric.name()),
                row_axis: "T".into(),
                rows: self.grid.temperatures.clone(),
                columns,
                cells: self
                    .grid
                    .temperatures
                    .iter()
                    .map(|&t| self.grid.losses.iter().map(|l| self.cell(fix_alpha, t, l, metric)).collect())
                    .collect(),
            });
        }
        out
    }

    /// Metrics found in the cell reports: accuracy, then every AUROC task.
    pub fn metrics(&self) -> Vec<Metric> {
        let mut tasks = std::collections::BTreeSet::new();
        for c in &self.cells {
            if let Some(r) = &c.report {
                tasks.extend(r.auroc.keys().cloned());
            }
        }
        std::iter::once(Metric::Accuracy)
            .chain(tasks.into_iter().map(Metric::Auroc))
            .collect()
    }

    /// Text report: every table of means, then per-seed values.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for metric in self.metrics() {
            for table in self.tables(&metric) {
                out.push_str(&render_table(&table));
                out.push('\n');
            }
        }
        let failed: Vec<&SweepCell> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        if !failed.is_empty() {
            out.push_str("failed cells\n");
            for c in failed {
                let _ = writeln!(
                    out,
                    "  alpha={} T={} loss={} seed={}: {}",
                    c.key.alpha,
                    c.key.temperature,
                    c.key.loss.label(),
                    c.key.seed,
                    c.error.as_deref().unwrap_or("")
                );
            }
        }
        out
    }

    /// One CSV row per cell and metric.
    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("alpha,temperature,loss,seed,metric,value\n");
        let metrics = self.metrics();
        for c in &self.cells {
            for m in &metrics {
                let value = c
                    .report
                    .as_ref()
                    .and_then(|r| m.of(r))
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "failed".into());
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    c.key.alpha,
                    c.key.temperature,
                    c.key.loss.label(),
                    c.key.seed,
                    m.name(),
                    value
                );
            }
        }
        out
    }
}

pub fn render_table(table: &SweepTable) -> String {
    let width = 14;
    let mut out = format!("{}\n", table.title);
    let _ = write!(out, "{:<8}", table.row_axis);
    for c in &table.columns {
        let _ = write!(out, "{c:>width$}");
    }
    out.push('\n');
    for (row, cells) in table.rows.iter().zip(&table.cells) {
        let _ = write!(out, "{:<8}", row);
        for cell in cells {
            let text = match cell.mean {
                Some(m) if cell.failed_seeds.is_empty() => format!("{m:.4}"),
                Some(m) => format!("{m:.4}*"),
                None => "failed".into(),
            };
            let _ = write!(out, "{text:>width$}");
        }
        out.push('\n');
    }
    out
}
