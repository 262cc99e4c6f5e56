use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, auroc, roc_points};
use crate::datakit::Dataset;
use crate::error::{ensure, Result};
use crate::losses::{argmax, softmax_raw, DistillConfig, StudentLossKind};
use crate::nets::{NetworkSpec, WeightBundle};
use crate::pipeline::{dataset_inputs, predict_logits};

/// One class against a set of others.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryTask {
    pub positive_class: String,
    pub negative_classes: BTreeSet<String>,
}

impl BinaryTask {
    pub fn new(positive: &str, negatives: &[&str]) -> Result<Self> {
        ensure!(!negatives.is_empty(), "a binary task needs negative classes");
        ensure!(
            !negatives.contains(&positive),
            "'{positive}' cannot be both positive and negative"
        );
        Ok(BinaryTask {
            positive_class: positive.to_string(),
            negative_classes: negatives.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// `covid_vs_normal+pneumonia`
    pub fn name(&self) -> String {
        let neg: Vec<&str> = self.negative_classes.iter().map(String::as_str).collect();
        format!("{}_vs_{}", self.positive_class, neg.join("+"))
    }
}

/// covid vs normal, covid vs pneumonia, covid vs both.
pub fn default_tasks() -> Vec<BinaryTask> {
    vec![
        BinaryTask::new("covid", &["normal"]).expect("valid task"),
        BinaryTask::new("covid", &["pneumonia"]).expect("valid task"),
        BinaryTask::new("covid", &["normal", "pneumonia"]).expect("valid task"),
    ]
}

/// Softmax probability of the positive class for every item whose class
/// belongs to the task, with its binary label.
pub fn task_scores(
    bundle: &WeightBundle,
    spec: &NetworkSpec,
    dataset: &Dataset,
    task: &BinaryTask,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let logits = predict_logits(spec, bundle, &dataset_inputs(dataset, spec)?)?;
    scores_from_logits(&logits, dataset, task)
}

pub(crate) fn scores_from_logits(
    logits: &[Vec<f64>],
    dataset: &Dataset,
    task: &BinaryTask,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let pos = dataset
        .class_index(&task.positive_class)
        .ok_or_else(|| crate::KtdError::invalid(format!("class '{}' is not in the dataset", task.positive_class)))?;
    let mut negs = BTreeSet::new();
    for n in &task.negative_classes {
        negs.insert(
            dataset
                .class_index(n)
                .ok_or_else(|| crate::KtdError::invalid(format!("class '{n}' is not in the dataset")))?,
        );
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, z) in logits.iter().enumerate() {
        let y = dataset.label_of(i);
        if y == pos || negs.contains(&y) {
            scores.push(softmax_raw(z, 1.0)[pos]);
            labels.push(u8::from(y == pos));
        }
    }
    Ok((scores, labels))
}

/// Hyperparameters and seed that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub alpha: f64,
    pub temperature: f64,
    pub student_loss: StudentLossKind,
    pub xi: Option<f64>,
    pub arcface_scale: Option<f64>,
    pub arcface_margin: Option<f64>,
    pub seed: u64,
}

impl ConfigEcho {
    pub fn new(config: &DistillConfig, seed: u64) -> Self {
        let arc = config.student_loss == StudentLossKind::Arcface;
        ConfigEcho {
            alpha: config.alpha,
            temperature: config.temperature,
            student_loss: config.student_loss,
            xi: (config.student_loss == StudentLossKind::Pc).then_some(config.pc.xi),
            arcface_scale: arc.then_some(config.arcface.scale_s),
            arcface_margin: arc.then_some(config.arcface.margin_m),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Task name to AUROC.
    pub auroc: BTreeMap<String, f64>,
    /// Task name to ROC points (false-positive rate, true-positive rate).
    pub roc: BTreeMap<String, Vec<(f64, f64)>>,
    pub config: Option<ConfigEcho>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Accuracy over all items plus AUROC and ROC points for each task.
pub fn evaluate(
    spec: &NetworkSpec,
    bundle: &WeightBundle,
    dataset: &Dataset,
    tasks: &[BinaryTask],
    config: Option<ConfigEcho>,
) -> Result<EvalReport> {
    ensure!(!dataset.is_empty(), "cannot evaluate on an empty dataset");
    ensure!(
        dataset.class_names == spec.head_names(),
        "dataset classes do not match the network heads"
    );
    let logits = predict_logits(spec, bundle, &dataset_inputs(dataset, spec)?)?;
    let predictions: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let acc = accuracy(&predictions, &dataset.labels())?;
    let mut auc = BTreeMap::new();
    let mut roc = BTreeMap::new();
    for task in tasks {
        let (scores, labels) = scores_from_logits(&logits, dataset, task)?;
        auc.insert(task.name(), auroc(&scores, &labels)?);
        roc.insert(task.name(), roc_points(&scores, &labels)?);
    }
    Ok(EvalReport {
        accuracy: acc,
        auroc: auc,
        roc,
        config,
    })
}
