use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{predict_logits, train, Objective, Targets, TrainOutcome, TrainSet, ValSet};
use crate::datakit::Dataset;
use crate::error::{ensure, Result};
use crate::losses::{DistillConfig, StudentLossKind};
use crate::nets::{init_weights, transfer_weights, HeadMapping, NetworkSpec, WeightBundle};

/// Training split plus an optional validation split for best-epoch selection.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
}

impl<'a> StageData<'a> {
    pub fn new(train: &'a Dataset, val: Option<&'a Dataset>) -> Self {
        StageData { train, val }
    }
}

/// How the teacher is initialised from the pre-trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub head_mapping: HeadMapping,
    /// Copy backbone and shared head; `false` re-initialises them.
    pub copy_trunk: bool,
}

/// Flattened pixel vectors, checked against the network input.
pub fn dataset_inputs(dataset: &Dataset, spec: &NetworkSpec) -> Result<Vec<Vec<f64>>> {
    let expected = spec.input.len();
    dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            ensure!(
                item.pixels.pixels.len() == expected,
                "item {i} has {} pixels, network '{}' expects {}",
                item.pixels.pixels.len(),
                spec.name,
                expected
            );
            Ok(item.pixels.pixels.clone())
        })
        .collect()
}

fn check_classes(dataset: &Dataset, spec: &NetworkSpec) -> Result<()> {
    ensure!(
        dataset.class_names == spec.head_names(),
        "dataset classes [{}] do not match the heads of '{}' [{}]",
        dataset.class_names.join(", "),
        spec.name,
        spec.head_names().join(", ")
    );
    Ok(())
}

fn val_set(data: &StageData<'_>, spec: &NetworkSpec) -> Result<Option<ValSet>> {
    data.val
        .map(|v| {
            check_classes(v, spec)?;
            Ok(ValSet {
                inputs: dataset_inputs(v, spec)?,
                labels: v.labels(),
            })
        })
        .transpose()
}

fn labelled_set(dataset: &Dataset, spec: &NetworkSpec) -> Result<TrainSet> {
    check_classes(dataset, spec)?;
    Ok(TrainSet {
        inputs: dataset_inputs(dataset, spec)?,
        targets: Targets::Labels(dataset.labels()),
        teacher_logits: None,
    })
}

/// Softmax cross-entropy, the loss used for the teacher networks.
pub fn softmax_objective() -> Objective {
    Objective::Classify(DistillConfig {
        student_loss: StudentLossKind::Softmax,
        ..DistillConfig::default()
    })
}

/// Multi-label pre-training of the multi-head network with per-head
/// binary cross-entropy. Validation accuracy scores the primary label.
pub fn pretrain_ap(spec: &NetworkSpec, data: StageData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_classes(data.train, spec)?;
    let set = TrainSet {
        inputs: dataset_inputs(data.train, spec)?,
        targets: Targets::MultiHot((0..data.train.len()).map(|i| data.train.multi_hot(i)).collect()),
        teacher_logits: None,
    };
    let val = val_set(&data, spec)?;
    let init = init_weights(spec, config.seed)?;
    train(spec, init, &Objective::MultiLabelBce, &set, val.as_ref(), config)
}

/// Transfer pre-trained weights into the teacher and fine-tune all of it
/// (or only the heads with `freeze_trunk`) with softmax cross-entropy.
pub fn finetune_rf(
    ap_bundle: &WeightBundle,
    ap_spec: &NetworkSpec,
    rf_spec: &NetworkSpec,
    data: StageData<'_>,
    plan: &TransferPlan,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let set = labelled_set(data.train, rf_spec)?;
    let val = val_set(&data, rf_spec)?;
    let init = transfer_weights(ap_bundle, ap_spec, rf_spec, &plan.head_mapping, plan.copy_trunk, config.seed)?;
    train(rf_spec, init, &softmax_objective(), &set, val.as_ref(), config)
}

/// Teacher trained from a fresh initialisation.
pub fn train_from_scratch(spec: &NetworkSpec, data: StageData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let set = labelled_set(data.train, spec)?;
    let val = val_set(&data, spec)?;
    train(spec, init_weights(spec, config.seed)?, &softmax_objective(), &set, val.as_ref(), config)
}

/// Teacher logits for every item, in evaluation mode.
pub fn teacher_logits(rf_spec: &NetworkSpec, rf_bundle: &WeightBundle, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    predict_logits(rf_spec, rf_bundle, &dataset_inputs(dataset, rf_spec)?)
}

/// Train the student against the frozen teacher with the distillation objective.
pub fn distill_ms(
    rf_bundle: &WeightBundle,
    rf_spec: &NetworkSpec,
    ms_spec: &NetworkSpec,
    data: StageData<'_>,
    dconfig: &DistillConfig,
    tconfig: &TrainConfig,
) -> Result<TrainOutcome> {
    dconfig.validate()?;
    tconfig.validate()?;
    ensure!(
        rf_spec.logit_count() == ms_spec.logit_count(),
        "teacher has {} classes but student has {}",
        rf_spec.logit_count(),
        ms_spec.logit_count()
    );
    let mut set = labelled_set(data.train, ms_spec)?;
    set.teacher_logits = Some(teacher_logits(rf_spec, rf_bundle, data.train)?);
    let val = val_set(&data, ms_spec)?;
    let init = init_weights(ms_spec, tconfig.seed)?;
    train(ms_spec, init, &Objective::Distill(*dconfig), &set, val.as_ref(), tconfig)
}

/// The student alone, trained with its classification loss.
pub fn train_plain(
    ms_spec: &NetworkSpec,
    data: StageData<'_>,
    loss: &DistillConfig,
    tconfig: &TrainConfig,
) -> Result<TrainOutcome> {
    loss.validate()?;
    tconfig.validate()?;
    let set = labelled_set(data.train, ms_spec)?;
    let val = val_set(&data, ms_spec)?;
    let init = init_weights(ms_spec, tconfig.seed)?;
    train(ms_spec, init, &Objective::Classify(loss.without_teacher()), &set, val.as_ref(), tconfig)
}
