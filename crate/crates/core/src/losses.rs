//! Loss and activation functions used by every training stage.
//!
//! All functions are pure. Each trainable loss has a `*_with_grad` companion
//! that returns the loss together with its gradient with respect to the raw
//! network outputs, which is what the trainer back-propagates.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, KtdError, Result};

/// Floor applied to probabilities before taking logarithms in CE and KL.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance for a vector to count as a point on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Raw class scores, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), "logits must be non-empty");
        ensure!(
            values.iter().all(|v| v.is_finite()),
            "logits must be finite"
        );
        Ok(Logits(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), "probability vector must be non-empty");
        ensure!(
            values.iter().all(|p| (0.0..=1.0).contains(p)),
            "probabilities must lie in [0, 1]"
        );
        let total: f64 = values.iter().sum();
        ensure!(
            (total - 1.0).abs() <= SIMPLEX_TOL,
            "probabilities sum to {total}, expected 1"
        );
        Ok(ProbVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Probability margin of the probabilistically compact loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcConfig {
    pub xi: f64,
}

impl PcConfig {
    pub fn new(xi: f64) -> Result<Self> {
        let cfg = PcConfig { xi };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.xi > 0.0 && self.xi <= 1.0,
            "PC margin xi must be in (0, 1], got {}",
            self.xi
        );
        Ok(())
    }
}

impl Default for PcConfig {
    fn default() -> Self {
        PcConfig { xi: 0.8 }
    }
}

/// Scale and additive angular margin (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcFaceConfig {
    pub scale_s: f64,
    pub margin_m: f64,
}

impl ArcFaceConfig {
    pub fn new(scale_s: f64, margin_m: f64) -> Result<Self> {
        let cfg = ArcFaceConfig { scale_s, margin_m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.scale_s > 0.0 && self.scale_s.is_finite(),
            "ArcFace scale must be positive, got {}",
            self.scale_s
        );
        ensure!(
            self.margin_m >= 0.0 && self.margin_m < std::f64::consts::FRAC_PI_2,
            "ArcFace margin must be in [0, pi/2), got {}",
            self.margin_m
        );
        Ok(())
    }
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        ArcFaceConfig {
            scale_s: 30.0,
            margin_m: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentLossKind {
    Softmax,
    Pc,
    Arcface,
}

impl std::fmt::Display for StudentLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            StudentLossKind::Softmax => "softmax",
            StudentLossKind::Pc => "pc",
            StudentLossKind::Arcface => "arcface",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for StudentLossKind {
    type Err = KtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" | "sm" => Ok(StudentLossKind::Softmax),
            "pc" => Ok(StudentLossKind::Pc),
            "arcface" => Ok(StudentLossKind::Arcface),
            other => Err(KtdError::invalid(format!("unknown student loss '{other}'"))),
        }
    }
}

/// Every tuning knob of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub student_loss: StudentLossKind,
    pub pc: PcConfig,
    pub arcface: ArcFaceConfig,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            "alpha must be in [0, 1], got {}",
            self.alpha
        );
        ensure!(
            self.temperature >= 1.0 && self.temperature.is_finite(),
            "temperature must be >= 1, got {}",
            self.temperature
        );
        self.pc.validate()?;
        self.arcface.validate()
    }

    /// Same settings with the distillation term switched off.
    pub fn without_teacher(&self) -> Self {
        DistillConfig { alpha: 0.0, ..*self }
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.8,
            temperature: 5.0,
            student_loss: StudentLossKind::Pc,
            pc: PcConfig::default(),
            arcface: ArcFaceConfig::default(),
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// [`softmax`] on a plain slice, without validation.
pub fn softmax_raw(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Temperature softmax `exp(z_i/T) / sum_j exp(z_j/T)`.
pub fn softmax(logits: &Logits, temperature: f64) -> Result<ProbVector> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        "temperature must be positive, got {temperature}"
    );
    Ok(ProbVector(softmax_raw(logits.as_slice(), temperature)))
}

/// Shannon entropy in nats.
pub fn entropy(probs: &ProbVector) -> f64 {
    probs
        .as_slice()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// `-ln(probs[label])` with the argument floored at [`LOG_FLOOR`].
pub fn cross_entropy(probs: &ProbVector, label: usize) -> Result<f64> {
    check_label(label, probs.len())?;
    Ok(-probs.as_slice()[label].max(LOG_FLOOR).ln())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    ensure!(
        label < classes,
        "label {label} out of range for {classes} classes"
    );
    Ok(())
}

fn pc_sample(probs: &[f64], label: usize, xi: f64) -> f64 {
    let target = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, p)| (p + xi - target).max(0.0))
        .sum()
}

/// Probabilistically compact loss: the batch mean of
/// `sum_{j != y} max(0, f_j + xi - f_y)` over predicted probabilities.
pub fn pc_loss(batch_probs: &[ProbVector], labels: &[usize], config: &PcConfig) -> Result<f64> {
    config.validate()?;
    ensure!(!batch_probs.is_empty(), "PC loss needs a non-empty batch");
    ensure!(
        batch_probs.len() == labels.len(),
        "batch has {} probability vectors but {} labels",
        batch_probs.len(),
        labels.len()
    );
    let mut total = 0.0;
    for (probs, &label) in batch_probs.iter().zip(labels) {
        check_label(label, probs.len())?;
        total += pc_sample(probs.as_slice(), label, config.xi);
    }
    Ok(total / batch_probs.len() as f64)
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(
        (norm - 1.0).abs() <= 1e-6,
        "{what} must be L2-normalized (norm {norm})"
    );
    Ok(())
}

fn margined_cosine(cos: f64, margin: f64) -> f64 {
    let theta = cos.clamp(-1.0, 1.0).acos().clamp(0.0, std::f64::consts::PI);
    (theta + margin).cos()
}

/// Additive angular margin logits: `s * cos(theta_k + m * [k == label])`
/// where `cos theta_k` is the dot product of the unit feature and unit row k.
pub fn arcface_logits(
    feature: &[f64],
    class_weights: &[Vec<f64>],
    label: usize,
    config: &ArcFaceConfig,
) -> Result<Logits> {
    config.validate()?;
    ensure!(!class_weights.is_empty(), "need at least one class weight row");
    check_label(label, class_weights.len())?;
    check_unit(feature, "feature")?;
    let mut out = Vec::with_capacity(class_weights.len());
    for (k, row) in class_weights.iter().enumerate() {
        ensure!(
            row.len() == feature.len(),
            "class weight row {k} has width {} but feature has {}",
            row.len(),
            feature.len()
        );
        check_unit(row, "class weight row")?;
        let cos: f64 = row.iter().zip(feature).map(|(w, f)| w * f).sum();
        let margin = if k == label { config.margin_m } else { 0.0 };
        out.push(config.scale_s * margined_cosine(cos, margin));
    }
    Ok(Logits(out))
}

fn kl_floored(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi.max(LOG_FLOOR).ln() - pi.max(LOG_FLOOR).ln()))
        .sum()
}

/// Distillation objective
/// `alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T)) + (1 - alpha) * l`,
/// where `l` is the configured student classification loss at temperature 1.
///
/// For an ArcFace student the logits are the scaled cosines `s * cos theta_k`
/// the network emits; the margin is applied to the target inside `l` only.
pub fn kd_loss(
    student_logits: &Logits,
    teacher_logits: &Logits,
    label: usize,
    config: &DistillConfig,
) -> Result<f64> {
    config.validate()?;
    ensure!(
        student_logits.len() == teacher_logits.len(),
        "student has {} logits but teacher has {}",
        student_logits.len(),
        teacher_logits.len()
    );
    check_label(label, student_logits.len())?;
    Ok(kd_with_grad(student_logits.as_slice(), teacher_logits.as_slice(), label, config).0)
}

/// The KL part of [`kd_loss`] without the `alpha * T^2` factor.
pub fn distillation_kl(student_logits: &Logits, teacher_logits: &Logits, temperature: f64) -> Result<f64> {
    ensure!(
        student_logits.len() == teacher_logits.len(),
        "student has {} logits but teacher has {}",
        student_logits.len(),
        teacher_logits.len()
    );
    ensure!(temperature > 0.0, "temperature must be positive");
    let q = softmax_raw(teacher_logits.as_slice(), temperature);
    let p = softmax_raw(student_logits.as_slice(), temperature);
    Ok(kl_floored(&q, &p))
}

// ---------------------------------------------------------------------------
// Gradients with respect to raw network outputs.

/// Pull a gradient on `p = softmax(z / T)` back to `z`.
pub fn softmax_backward(p: &[f64], dp: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(dp)
        .map(|(pi, gi)| pi * (gi - dot) / temperature)
        .collect()
}

pub fn ce_with_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax_raw(logits, 1.0);
    let loss = -p[label].max(LOG_FLOOR).ln();
    let mut dp = vec![0.0; p.len()];
    if p[label] > LOG_FLOOR {
        dp[label] = -1.0 / p[label];
    }
    (loss, softmax_backward(&p, &dp, 1.0))
}

pub fn pc_with_grad(logits: &[f64], label: usize, xi: f64) -> (f64, Vec<f64>) {
    let p = softmax_raw(logits, 1.0);
    let mut loss = 0.0;
    let mut dp = vec![0.0; p.len()];
    for j in 0..p.len() {
        if j == label {
            continue;
        }
        let slack = p[j] + xi - p[label];
        // subgradient 0 at the kink
        if slack > 0.0 {
            loss += slack;
            dp[j] += 1.0;
            dp[label] -= 1.0;
        }
    }
    (loss, softmax_backward(&p, &dp, 1.0))
}

/// ArcFace cross-entropy on scaled cosines `u_k = s * cos theta_k`.
pub fn arcface_ce_with_grad(
    scaled_cos: &[f64],
    label: usize,
    config: &ArcFaceConfig,
) -> (f64, Vec<f64>) {
    let s = config.scale_s;
    let cos = (scaled_cos[label] / s).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let mut z = scaled_cos.to_vec();
    z[label] = s * (theta + config.margin_m).cos();
    let (loss, dz) = ce_with_grad(&z, label);
    let mut du = dz;
    // d/du [s cos(acos(u/s) + m)] = sin(theta + m) / sin(theta)
    let sin_theta = theta.sin().max(1e-6);
    du[label] *= (theta + config.margin_m).sin() / sin_theta;
    (loss, du)
}

pub fn student_loss_with_grad(
    logits: &[f64],
    label: usize,
    config: &DistillConfig,
) -> (f64, Vec<f64>) {
    match config.student_loss {
        StudentLossKind::Softmax => ce_with_grad(logits, label),
        StudentLossKind::Pc => pc_with_grad(logits, label, config.pc.xi),
        StudentLossKind::Arcface => arcface_ce_with_grad(logits, label, &config.arcface),
    }
}

pub fn kd_with_grad(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    config: &DistillConfig,
) -> (f64, Vec<f64>) {
    let (cls_loss, cls_grad) = student_loss_with_grad(student, label, config);
    if config.alpha == 0.0 {
        return (cls_loss, cls_grad);
    }
    let alpha = config.alpha;
    let t = config.temperature;
    let q = softmax_raw(teacher, t);
    let p = softmax_raw(student, t);
    let kl = kl_floored(&q, &p);
    let dp: Vec<f64> = q
        .iter()
        .zip(&p)
        .map(|(qi, pi)| if *pi > LOG_FLOOR { -qi / pi } else { 0.0 })
        .collect();
    let dkl = softmax_backward(&p, &dp, t);
    let kd_weight = alpha * t * t;
    let loss = kd_weight * kl + (1.0 - alpha) * cls_loss;
    let grad = dkl
        .iter()
        .zip(&cls_grad)
        .map(|(a, b)| kd_weight * a + (1.0 - alpha) * b)
        .collect();
    (loss, grad)
}

/// Mean binary cross-entropy over independent sigmoid heads.
pub fn multilabel_bce_with_grad(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let k = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(targets) {
        // log(1 + e^z) - y z, written to stay finite for large |z|
        let softplus = if *z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        loss += softplus - y * z;
        let sig = 1.0 / (1.0 + (-z).exp());
        grad.push((sig - y) / k);
    }
    (loss / k, grad)
}
