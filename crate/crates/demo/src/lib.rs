//! Browser bindings: temperature-scaled softmax, loss curves for the
//! compact and distillation objectives, and ROC analysis of pasted scores.

use ktd_core::evalkit::{auroc, roc_points};
use ktd_core::losses::{kd_loss, pc_loss, softmax, DistillConfig, Logits, PcConfig, ProbVector, StudentLossKind};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Softmax of `logits` at temperature `t`.
#[wasm_bindgen]
pub fn softmax_at(logits: Vec<f64>, t: f64) -> Result<Vec<f64>, JsError> {
    let z = Logits::new(logits).map_err(js_err)?;
    Ok(softmax(&z, t).map_err(js_err)?.as_slice().to_vec())
}

/// Losses of a student whose true-class logit is swept over `[-8, 8]`
/// while the other logits stay fixed. Returns interleaved
/// `[x, pc, kd, x, pc, kd, ...]`.
#[wasm_bindgen]
pub fn loss_curves(
    student: Vec<f64>,
    teacher: Vec<f64>,
    label: usize,
    xi: f64,
    alpha: f64,
    t: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    curve_values(&student, &teacher, label, xi, alpha, t, points).map_err(|e| JsError::new(&e))
}

/// Parse `score label` lines (comma, tab or space separated; `#` comments)
/// and return JSON `{"auroc": a, "points": [[fpr, tpr], ...], "n": n}`.
#[wasm_bindgen]
pub fn roc_from_text(text: &str) -> Result<String, JsError> {
    roc_json(text).map_err(|e| JsError::new(&e))
}

pub fn curve_values(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    xi: f64,
    alpha: f64,
    t: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    let text = |e: ktd_core::KtdError| e.to_string();
    if student.len() != teacher.len() || label >= student.len() {
        return Err("student and teacher need the same class count and a valid label".into());
    }
    let pc = PcConfig::new(xi).map_err(text)?;
    let cfg = DistillConfig {
        alpha,
        temperature: t,
        student_loss: StudentLossKind::Pc,
        pc,
        ..DistillConfig::default()
    };
    cfg.validate().map_err(text)?;
    let teacher = Logits::new(teacher.to_vec()).map_err(text)?;
    let n = points.clamp(2, 2000);
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let x = -8.0 + 16.0 * i as f64 / (n - 1) as f64;
        let mut z = student.to_vec();
        z[label] = x;
        let logits = Logits::new(z).map_err(text)?;
        let probs: ProbVector = softmax(&logits, 1.0).map_err(text)?;
        let pc_value = pc_loss(&[probs], &[label], &pc).map_err(text)?;
        let kd_value = kd_loss(&logits, &teacher, label, &cfg).map_err(text)?;
        out.extend([x, pc_value, kd_value]);
    }
    Ok(out)
}

pub fn roc_json(text: &str) -> Result<String, String> {
    let (scores, labels) = parse_scores(text)?;
    let auc = auroc(&scores, &labels).map_err(|e| e.to_string())?;
    let points = roc_points(&scores, &labels).map_err(|e| e.to_string())?;
    Ok(serde_json::json!({ "auroc": auc, "points": points, "n": scores.len() }).to_string())
}

pub fn parse_scores(text: &str) -> Result<(Vec<f64>, Vec<u8>), String> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        let [score, label] = fields[..] else {
            return Err(format!("line {}: expected `score label`", i + 1));
        };
        let score: f64 = score.parse().map_err(|_| format!("line {}: bad score '{score}'", i + 1))?;
        let label = match label {
            "1" | "pos" | "true" => 1,
            "0" | "neg" | "false" => 0,
            other => return Err(format!("line {}: label must be 0 or 1, got '{other}'", i + 1)),
        };
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}
