//! Follow-up prediction: score-difference labels, windowed image sequences,
//! feature aggregation and sequence classifiers over frozen student features.

use serde::{Deserialize, Serialize};

use crate::datakit::LabeledImage;
use crate::error::{ensure, KtdError, Result};
use crate::losses::{softmax_raw, ProbVector};
use crate::nets::{HeadMode, Mode, Network, NetworkSpec, WeightBundle};
use crate::pipeline::{softmax_objective, train, EpochLog, Targets, TrainConfig, TrainSet, ValSet};

/// Score change beyond which a step counts as worse or improved.
pub const SCORE_THRESHOLD: f64 = 0.3;
/// Longest window kept by [`build_sequences`].
pub const MAX_SEQUENCE_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrajectoryLabel {
    Worse,
    Stable,
    Improved,
}

impl TrajectoryLabel {
    pub const ALL: [TrajectoryLabel; 3] = [TrajectoryLabel::Worse, TrajectoryLabel::Stable, TrajectoryLabel::Improved];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryLabel::Worse => "worse",
            TrajectoryLabel::Stable => "stable",
            TrajectoryLabel::Improved => "improved",
        }
    }

    pub fn class_names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

/// Worse above +0.3, Improved below -0.3, Stable otherwise (boundaries included).
pub fn label_from_scores(s_prev: f64, s_last: f64) -> Result<TrajectoryLabel> {
    ensure!(
        s_prev.is_finite() && s_last.is_finite(),
        "opacity scores must be finite, got {s_prev} and {s_last}"
    );
    let d = s_last - s_prev;
    Ok(if d > SCORE_THRESHOLD {
        TrajectoryLabel::Worse
    } else if d < -SCORE_THRESHOLD {
        TrajectoryLabel::Improved
    } else {
        TrajectoryLabel::Stable
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub image: LabeledImage,
    pub opacity_score: f64,
    pub timepoint: i64,
}

impl ScoredImage {
    pub fn new(image: LabeledImage, opacity_score: f64, timepoint: i64) -> Result<Self> {
        ensure!(opacity_score.is_finite(), "opacity score must be finite");
        Ok(ScoredImage {
            image,
            opacity_score,
            timepoint,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySequence {
    pub patient_id: String,
    /// Chronological, at most [`MAX_SEQUENCE_LEN`] images.
    pub images: Vec<ScoredImage>,
    pub label: TrajectoryLabel,
}

/// One window per timepoint `t_2 .. t_n`, each holding the latest (up to
/// four) images and labelled from its last two scores.
pub fn build_sequences(patient_images: &[ScoredImage]) -> Result<Vec<TrajectorySequence>> {
    ensure!(!patient_images.is_empty(), "a patient needs at least one image");
    let mut images = patient_images.to_vec();
    images.sort_by_key(|s| s.timepoint);
    for pair in images.windows(2) {
        ensure!(
            pair[0].timepoint != pair[1].timepoint,
            "duplicate timepoint {} for patient '{}'",
            pair[0].timepoint,
            pair[0].image.patient_id
        );
    }
    let patient_id = images[0].image.patient_id.clone();
    let mut out = Vec::with_capacity(images.len().saturating_sub(1));
    for end in 1..images.len() {
        let start = (end + 1).saturating_sub(MAX_SEQUENCE_LEN);
        let window = images[start..=end].to_vec();
        let label = label_from_scores(images[end - 1].opacity_score, images[end].opacity_score)?;
        out.push(TrajectorySequence {
            patient_id: patient_id.clone(),
            images: window,
            label,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScheme {
    /// Last feature minus the second-last.
    Difference,
    /// Four chronological slots, missing leading slots zero-filled.
    Concatenation,
}

impl AggregationScheme {
    pub fn width(self, feature_width: usize) -> usize {
        match self {
            AggregationScheme::Difference => feature_width,
            AggregationScheme::Concatenation => MAX_SEQUENCE_LEN * feature_width,
        }
    }
}

impl std::str::FromStr for AggregationScheme {
    type Err = KtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "difference" | "diff" => Ok(AggregationScheme::Difference),
            "concatenation" | "concat" => Ok(AggregationScheme::Concatenation),
            other => Err(KtdError::invalid(format!("unknown aggregation scheme '{other}'"))),
        }
    }
}

pub fn aggregate_features(features: &[Vec<f64>], scheme: AggregationScheme) -> Result<Vec<f64>> {
    ensure!(
        features.len() <= MAX_SEQUENCE_LEN,
        "at most {MAX_SEQUENCE_LEN} features can be aggregated, got {}",
        features.len()
    );
    let d = features.first().map(Vec::len).unwrap_or(0);
    ensure!(
        features.iter().all(|f| f.len() == d),
        "features of one sequence must share a width"
    );
    match scheme {
        AggregationScheme::Difference => {
            ensure!(features.len() >= 2, "difference needs at least two features, got {}", features.len());
            let (a, b) = (&features[features.len() - 2], &features[features.len() - 1]);
            Ok(b.iter().zip(a).map(|(x, y)| x - y).collect())
        }
        AggregationScheme::Concatenation => {
            ensure!(!features.is_empty(), "concatenation needs at least one feature");
            let mut out = vec![0.0; (MAX_SEQUENCE_LEN - features.len()) * d];
            for f in features {
                out.extend_from_slice(f);
            }
            Ok(out)
        }
    }
}

/// Shared features of `images` under the frozen student, in evaluation mode.
pub fn extract_features(spec: &NetworkSpec, bundle: &WeightBundle, images: &[&LabeledImage]) -> Result<Vec<Vec<f64>>> {
    let net = Network::new(spec, bundle)?;
    images
        .iter()
        .map(|img| net.forward(&img.pixels.pixels, Mode::Eval).map(|o| o.feature))
        .collect()
}

fn sequence_features(spec: &NetworkSpec, bundle: &WeightBundle, seq: &TrajectorySequence) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&LabeledImage> = seq.images.iter().map(|s| &s.image).collect();
    extract_features(spec, bundle, &images)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajClassifierKind {
    /// Two fully connected layers trained with softmax loss.
    Fc2,
    /// Multinomial logistic regression.
    Logistic,
}

impl std::str::FromStr for TrajClassifierKind {
    type Err = KtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc2" => Ok(TrajClassifierKind::Fc2),
            "logistic" => Ok(TrajClassifierKind::Logistic),
            other => Err(KtdError::invalid(format!("unknown trajectory classifier '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajClassifierConfig {
    pub kind: TrajClassifierKind,
    pub hidden: usize,
    /// Dropout on the hidden layer of `fc2`.
    pub dropout_rate: f64,
    pub train: TrainConfig,
}

impl Default for TrajClassifierConfig {
    fn default() -> Self {
        TrajClassifierConfig {
            kind: TrajClassifierKind::Fc2,
            hidden: 32,
            dropout_rate: 0.5,
            train: TrainConfig {
                epochs: 50,
                batch_size: 10,
                ..TrainConfig::default()
            },
        }
    }
}

impl TrajClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.kind != TrajClassifierKind::Fc2 || self.hidden >= 1,
            "fc2 hidden width must be >= 1"
        );
        ensure!((0.0..1.0).contains(&self.dropout_rate), "dropout rate must lie in [0, 1)");
        self.train.validate()
    }
}

/// Anything that maps an aggregated feature vector to three class
/// probabilities. Externally trained models plug in through this trait.
pub trait TrajectoryModel {
    fn scheme(&self) -> AggregationScheme;
    fn input_width(&self) -> usize;
    /// Fingerprint of the feature extractor the model was trained against.
    fn extractor_fingerprint(&self) -> &str;
    fn predict_proba(&self, aggregated: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajClassifier {
    pub scheme: AggregationScheme,
    pub spec: NetworkSpec,
    pub bundle: WeightBundle,
    /// Multiplier applied to aggregated features; a scale keeps zero slots zero.
    pub feature_scale: f64,
    pub extractor_fingerprint: String,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrajectoryModel for TrajClassifier {
    fn scheme(&self) -> AggregationScheme {
        self.scheme
    }

    fn input_width(&self) -> usize {
        self.spec.input.len()
    }

    fn extractor_fingerprint(&self) -> &str {
        &self.extractor_fingerprint
    }

    fn predict_proba(&self, aggregated: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f64> = aggregated.iter().map(|v| v * self.feature_scale).collect();
        let net = Network::new(&self.spec, &self.bundle)?;
        let logits = net.forward(&x, Mode::Eval)?.logits;
        Ok(softmax_raw(&logits, 1.0))
    }
}

fn aggregated_inputs(
    ms_spec: &NetworkSpec,
    ms_bundle: &WeightBundle,
    sequences: &[TrajectorySequence],
    scheme: AggregationScheme,
) -> Result<Vec<Vec<f64>>> {
    sequences
        .iter()
        .map(|s| aggregate_features(&sequence_features(ms_spec, ms_bundle, s)?, scheme))
        .collect()
}

/// Train a sequence classifier on features of the frozen student.
pub fn train_traj_classifier(
    ms_spec: &NetworkSpec,
    ms_bundle: &WeightBundle,
    sequences: &[TrajectorySequence],
    val: Option<&[TrajectorySequence]>,
    scheme: AggregationScheme,
    config: &TrajClassifierConfig,
) -> Result<TrajClassifier> {
    config.validate()?;
    ensure!(!sequences.is_empty(), "no training sequences");
    ms_bundle.check_against(ms_spec)?;
    let d = ms_spec.feature_width()?;
    let width = scheme.width(d);
    let mut inputs = aggregated_inputs(ms_spec, ms_bundle, sequences, scheme)?;

    let count = inputs.iter().map(Vec::len).sum::<usize>().max(1);
    let rms = (inputs.iter().flatten().map(|v| v * v).sum::<f64>() / count as f64).sqrt();
    let feature_scale = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
    for row in &mut inputs {
        for v in row.iter_mut() {
            *v *= feature_scale;
        }
    }
    let names = TrajectoryLabel::class_names();
    let (spec, dropout) = match config.kind {
        TrajClassifierKind::Fc2 => (
            NetworkSpec::mlp(&format!("traj-fc2-{width}"), width, config.hidden, &names)?,
            config.dropout_rate,
        ),
        TrajClassifierKind::Logistic => (NetworkSpec::linear(&format!("traj-logistic-{width}"), width, &names)?, 0.0),
    };
    debug_assert_eq!(spec.head_mode, HeadMode::Linear);
    let set = TrainSet {
        inputs,
        targets: Targets::Labels(sequences.iter().map(|s| s.label.index()).collect()),
        teacher_logits: None,
    };
    let val_set = match val {
        Some(v) if !v.is_empty() => {
            let mut x = aggregated_inputs(ms_spec, ms_bundle, v, scheme)?;
            for row in &mut x {
                for e in row.iter_mut() {
                    *e *= feature_scale;
                }
            }
            Some(ValSet {
                inputs: x,
                labels: v.iter().map(|s| s.label.index()).collect(),
            })
        }
        _ => None,
    };
    let tconfig = TrainConfig {
        dropout_rate: dropout,
        ..config.train.clone()
    };
    let init = crate::nets::init_weights(&spec, tconfig.seed)?;
    let outcome = train(&spec, init, &softmax_objective(), &set, val_set.as_ref(), &tconfig)?;
    Ok(TrajClassifier {
        scheme,
        spec,
        bundle: outcome.bundle,
        feature_scale,
        extractor_fingerprint: ms_spec.fingerprint(),
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

/// Most likely label (lowest index on ties) and the class probabilities.
pub fn predict_trajectory(
    model: &dyn TrajectoryModel,
    ms_spec: &NetworkSpec,
    ms_bundle: &WeightBundle,
    sequence: &TrajectorySequence,
) -> Result<(TrajectoryLabel, ProbVector)> {
    if model.extractor_fingerprint() != ms_spec.fingerprint() {
        return Err(KtdError::state("classifier was trained on a different feature extractor"));
    }
    let width = model.scheme().width(ms_spec.feature_width()?);
    if width != model.input_width() {
        return Err(KtdError::state(format!(
            "classifier expects {} inputs but the {:?} scheme yields {width}",
            model.input_width(),
            model.scheme()
        )));
    }
    let x = aggregate_features(&sequence_features(ms_spec, ms_bundle, sequence)?, model.scheme())?;
    let probs = ProbVector::new(model.predict_proba(&x)?)?;
    ensure!(probs.len() == 3, "trajectory models must emit three probabilities");
    Ok((TrajectoryLabel::ALL[probs.argmax()], probs))
}

/// Accuracy of `model` over labelled sequences.
pub fn trajectory_accuracy(
    model: &dyn TrajectoryModel,
    ms_spec: &NetworkSpec,
    ms_bundle: &WeightBundle,
    sequences: &[TrajectorySequence],
) -> Result<f64> {
    ensure!(!sequences.is_empty(), "no sequences to score");
    let mut hits = 0;
    for s in sequences {
        if predict_trajectory(model, ms_spec, ms_bundle, s)?.0 == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / sequences.len() as f64)
}
