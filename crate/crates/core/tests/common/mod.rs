//! Independent reference implementations shared by the integration tests.
//! They favour the most literal formula over numerical care.
#![allow(dead_code)]

pub mod gradcheck;

pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    let v = if p[label] < 1e-12 { 1e-12 } else { p[label] };
    -v.ln()
}

pub fn pc(batch: &[Vec<f64>], labels: &[usize], xi: f64) -> f64 {
    let mut total = 0.0;
    for (p, &y) in batch.iter().zip(labels) {
        for j in 0..p.len() {
            if j != y {
                let slack = p[j] + xi - p[y];
                if slack > 0.0 {
                    total += slack;
                }
            }
        }
    }
    total / batch.len() as f64
}

pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        if q[i] > 0.0 {
            total += q[i] * (q[i].max(1e-12) / p[i].max(1e-12)).ln();
        }
    }
    total
}

/// `s cos(theta + m)` expanded as `s (cos theta cos m - sin theta sin m)`.
pub fn arcface_target_logit(cos: f64, s: f64, m: f64) -> f64 {
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    s * (cos * m.cos() - sin * m.sin())
}

pub fn arcface_logits(feature: &[f64], rows: &[Vec<f64>], label: usize, s: f64, m: f64) -> Vec<f64> {
    rows.iter()
        .enumerate()
        .map(|(k, w)| {
            let cos: f64 = w.iter().zip(feature).map(|(a, b)| a * b).sum();
            if k == label {
                arcface_target_logit(cos, s, m)
            } else {
                s * cos
            }
        })
        .collect()
}

/// Student classification loss on raw logits, by kind name.
pub fn student_loss(z: &[f64], label: usize, kind: &str, xi: f64, s: f64, m: f64) -> f64 {
    match kind {
        "softmax" => cross_entropy(&softmax(z, 1.0), label),
        "pc" => pc(&[softmax(z, 1.0)], &[label], xi),
        "arcface" => {
            let mut margined = z.to_vec();
            margined[label] = arcface_target_logit(z[label] / s, s, m);
            cross_entropy(&softmax(&margined, 1.0), label)
        }
        _ => unreachable!(),
    }
}

pub fn kd(student: &[f64], teacher: &[f64], alpha: f64, t: f64, cls: f64) -> f64 {
    alpha * t * t * kl(&softmax(teacher, t), &softmax(student, t)) + (1.0 - alpha) * cls
}

/// O(P * N) pairwise AUROC with ties counted as one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
