use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::OptimizerState;
use crate::error::{ensure, KtdError, Result};
use crate::losses::{
    argmax, kd_with_grad, multilabel_bce_with_grad, student_loss_with_grad, DistillConfig,
};
use crate::nets::{
    derive_seed, ensure_same_keys, strip_prefix, Archive, Gradients, HeadMode, Mode, Network,
    NetworkSpec, ParamArray, WeightBundle,
};

/// What the network is trained to minimise.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Mean per-head binary cross-entropy against multi-hot targets.
    MultiLabelBce,
    /// The configured student classification loss (the `alpha` field is ignored).
    Classify(DistillConfig),
    /// The full distillation objective against precomputed teacher logits.
    Distill(DistillConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    MultiHot(Vec<Vec<f64>>),
}

/// Flattened training inputs with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
    /// Teacher logits per input, required by [`Objective::Distill`].
    pub teacher_logits: Option<Vec<Vec<f64>>>,
}

/// Held-out inputs scored by argmax accuracy after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ValSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self, spec: &NetworkSpec, objective: &Objective) -> Result<()> {
        ensure!(!self.inputs.is_empty(), "training set is empty");
        let k = spec.logit_count();
        let n = self.inputs.len();
        match &self.targets {
            Targets::Labels(l) => {
                ensure!(l.len() == n, "{} labels for {n} inputs", l.len());
                ensure!(l.iter().all(|y| *y < k), "label outside the {k} network outputs");
            }
            Targets::MultiHot(t) => {
                ensure!(t.len() == n, "{} targets for {n} inputs", t.len());
                ensure!(t.iter().all(|r| r.len() == k), "multi-hot width differs from {k} outputs");
            }
        }
        match objective {
            Objective::MultiLabelBce => ensure!(
                matches!(self.targets, Targets::MultiHot(_)),
                "binary cross-entropy needs multi-hot targets"
            ),
            Objective::Classify(c) | Objective::Distill(c) => {
                c.validate()?;
                ensure!(
                    matches!(self.targets, Targets::Labels(_)),
                    "classification needs class-index targets"
                );
                if c.student_loss == crate::losses::StudentLossKind::Arcface {
                    ensure!(
                        spec.head_mode == (HeadMode::Cosine { scale: c.arcface.scale_s }),
                        "an ArcFace student needs cosine heads with scale {}",
                        c.arcface.scale_s
                    );
                }
            }
        }
        if let Objective::Distill(_) = objective {
            let t = self
                .teacher_logits
                .as_ref()
                .ok_or_else(|| KtdError::invalid("distillation needs teacher logits"))?;
            ensure!(t.len() == n, "{} teacher rows for {n} inputs", t.len());
            ensure!(t.iter().all(|r| r.len() == k), "teacher has a different class count than the student");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    /// Not persisted in training checkpoints.
    pub wall_seconds: f64,
}

/// Render logs as a tab-separated table.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_accuracy\twall_seconds\n");
    for e in log {
        let acc = e.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{}\t{:.6}\t{}\t{:.3}\n", e.epoch, e.train_loss, acc, e.wall_seconds));
    }
    out
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub weights: WeightBundle,
    pub optimizer: OptimizerState,
    /// (epoch, validation accuracy, weights) of the best epoch so far.
    pub best: Option<(usize, f64, WeightBundle)>,
    pub log: Vec<EpochLog>,
}

const ARCHIVE_KIND: &str = "train-state";

impl TrainState {
    pub fn new(init: WeightBundle) -> Self {
        TrainState {
            epoch: 0,
            optimizer: OptimizerState::new(&init),
            weights: init,
            best: None,
            log: Vec::new(),
        }
    }

    fn to_archive(&self) -> Result<Archive> {
        let mut entries = BTreeMap::new();
        let add = |entries: &mut BTreeMap<String, ParamArray>, prefix: &str, src: &BTreeMap<String, Vec<f64>>| {
            for (k, v) in src {
                let shape = self.weights.entries[k].shape.clone();
                entries.insert(format!("{prefix}{k}"), ParamArray { shape, data: v.clone() });
            }
        };
        for (k, v) in &self.weights.entries {
            entries.insert(format!("w/{k}"), v.clone());
        }
        add(&mut entries, "m/", &self.optimizer.m);
        add(&mut entries, "v/", &self.optimizer.v);
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), ARCHIVE_KIND.into());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.optimizer.step.to_string());
        if let Some((epoch, acc, best)) = &self.best {
            meta.insert("best_epoch".into(), epoch.to_string());
            meta.insert("best_accuracy_bits".into(), acc.to_bits().to_string());
            for (k, v) in &best.entries {
                entries.insert(format!("best/{k}"), v.clone());
            }
        }
        let log: Vec<EpochLog> = self
            .log
            .iter()
            .map(|e| EpochLog {
                wall_seconds: 0.0,
                ..e.clone()
            })
            .collect();
        meta.insert("log".into(), serde_json::to_string(&log)?);
        Ok(Archive {
            fingerprint: self.weights.spec_fingerprint.clone(),
            seed: self.weights.seed,
            meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Load a state written by [`TrainState::save`] for `spec`.
    pub fn load(path: &Path, spec: &NetworkSpec) -> Result<Self> {
        let archive = Archive::load(path)?;
        let bad = |m: &str| KtdError::Format(format!("{}: {m}", path.display()));
        if archive.meta.get("kind").map(String::as_str) != Some(ARCHIVE_KIND) {
            return Err(bad("not a training state"));
        }
        let num = |key: &str| -> Result<u64> {
            archive
                .meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("missing '{key}'")))
        };
        let bundle = |prefix: &str| WeightBundle {
            entries: strip_prefix(&archive.entries, prefix),
            spec_fingerprint: archive.fingerprint.clone(),
            seed: archive.seed,
        };
        let weights = bundle("w/");
        weights.check_against(spec)?;
        let m = strip_prefix(&archive.entries, "m/");
        let v = strip_prefix(&archive.entries, "v/");
        ensure_same_keys(&weights.entries, &m)?;
        ensure_same_keys(&weights.entries, &v)?;
        let best = match archive.meta.get("best_epoch") {
            Some(_) => {
                let b = bundle("best/");
                b.check_against(spec)?;
                Some((num("best_epoch")? as usize, f64::from_bits(num("best_accuracy_bits")?), b))
            }
            None => None,
        };
        let log = serde_json::from_str(archive.meta.get("log").ok_or_else(|| bad("missing log"))?)?;
        let unwrap = |src: BTreeMap<String, ParamArray>| src.into_iter().map(|(k, a)| (k, a.data)).collect();
        Ok(TrainState {
            epoch: num("epoch")? as usize,
            optimizer: OptimizerState {
                step: num("step")?,
                m: unwrap(m),
                v: unwrap(v),
            },
            weights,
            best,
            log,
        })
    }
}

/// Result of a finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights of the selected epoch (best validation accuracy, or the last
    /// epoch without validation data).
    pub bundle: WeightBundle,
    /// Weights after the last epoch.
    pub last: WeightBundle,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn into_outcome(self) -> TrainOutcome {
        match self.best {
            Some((epoch, acc, bundle)) => TrainOutcome {
                bundle,
                last: self.weights,
                best_epoch: epoch,
                best_val_accuracy: Some(acc),
                log: self.log,
            },
            None => TrainOutcome {
                bundle: self.weights.clone(),
                last: self.weights,
                best_epoch: self.epoch,
                best_val_accuracy: None,
                log: self.log,
            },
        }
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

fn sample_loss(
    objective: &Objective,
    set: &TrainSet,
    i: usize,
    logits: &[f64],
) -> (f64, Vec<f64>) {
    match (objective, &set.targets) {
        (Objective::MultiLabelBce, Targets::MultiHot(t)) => multilabel_bce_with_grad(logits, &t[i]),
        (Objective::Classify(c), Targets::Labels(l)) => student_loss_with_grad(logits, l[i], c),
        (Objective::Distill(c), Targets::Labels(l)) => {
            let teacher = &set.teacher_logits.as_ref().expect("validated")[i];
            kd_with_grad(logits, teacher, l[i], c)
        }
        _ => unreachable!("validated objective/target pairing"),
    }
}

/// Logits for every input in evaluation mode.
pub fn predict_logits(spec: &NetworkSpec, bundle: &WeightBundle, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let net = Network::new(spec, bundle)?;
    inputs
        .iter()
        .map(|x| net.forward(x, Mode::Eval).map(|o| o.logits))
        .collect()
}

/// Argmax accuracy (lowest index wins ties).
pub fn logit_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, y)| argmax(z) == **y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Run epochs `state.epoch + 1 ..= until` (clamped to `config.epochs`).
pub fn train_epochs(
    state: &mut TrainState,
    spec: &NetworkSpec,
    objective: &Objective,
    set: &TrainSet,
    val: Option<&ValSet>,
    config: &TrainConfig,
    until: usize,
) -> Result<()> {
    config.validate()?;
    spec.validate()?;
    set.validate(spec, objective)?;
    state.weights.check_against(spec)?;
    if let Some(v) = val {
        ensure!(v.inputs.len() == v.labels.len(), "validation inputs and labels differ in length");
        ensure!(!v.inputs.is_empty(), "validation set is empty");
    }
    let until = until.min(config.epochs);
    let mut grads = Gradients::zeros_like(&state.weights);
    let mut order: Vec<usize> = (0..set.len()).collect();
    while state.epoch < until {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("epoch/{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            {
                let net = Network::new(spec, &state.weights)?;
                for &i in batch {
                    let trace = net.forward_traced(
                        &set.inputs[i],
                        Mode::Train {
                            rng: &mut rng,
                            feature_dropout: config.dropout_rate,
                        },
                    )?;
                    let (loss, d_logits) = sample_loss(objective, set, i, &trace.output.logits);
                    total += loss;
                    net.backward(&trace, &d_logits, None, &mut grads);
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            let freeze = config.freeze_trunk;
            state
                .optimizer
                .apply(&mut state.weights, &grads, config, |name| !freeze || is_head(name));
        }
        let train_loss = total / set.len() as f64;
        if !train_loss.is_finite() {
            return Err(KtdError::state(format!("training diverged at epoch {epoch}")));
        }
        let val_accuracy = match val {
            Some(v) => {
                let logits = predict_logits(spec, &state.weights, &v.inputs)?;
                Some(logit_accuracy(&logits, &v.labels))
            }
            None => None,
        };
        if let Some(acc) = val_accuracy {
            // earliest epoch wins ties
            if state.best.as_ref().is_none_or(|(_, best, _)| acc > *best) {
                state.best = Some((epoch, acc, state.weights.clone()));
            }
        }
        state.epoch = epoch;
        state.log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Train from `init` for `config.epochs` epochs.
pub fn train(
    spec: &NetworkSpec,
    init: WeightBundle,
    objective: &Objective,
    set: &TrainSet,
    val: Option<&ValSet>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(init);
    train_epochs(&mut state, spec, objective, set, val, config, config.epochs)?;
    Ok(state.into_outcome())
}
