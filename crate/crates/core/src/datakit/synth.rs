//! Synthetic "hard sample" images.
//!
//! Every image shares one structured chest-like background. Class identity
//! lives only in a small lesion patch (the ROI) whose shape depends on the
//! class and whose position jitters inside one of the two lung fields. Pixel
//! noise is added on top, so a classifier has to find a faint local pattern
//! inside a large, shared foreground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{Dataset, ImageGrid, LabeledImage, Position};
use super::split::apportion;
use crate::error::{ensure, KtdError, Result};
use crate::nets::derive_seed;
use crate::trajectory::{label_from_scores, ScoredImage, TrajectoryLabel};

/// Class names of the three-way triage task, in canonical order.
pub const TRIAGE_CLASSES: [&str; 3] = ["covid", "normal", "pneumonia"];

/// The eight findings of the multi-label pre-training task.
pub const PRETRAIN_FINDINGS: [&str; 8] = [
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
];

/// Reference window size of a lesion; pattern radii scale with `roi_size / 9`.
const REFERENCE_ROI: f64 = 9.0;

pub fn triage_class_names() -> Vec<String> {
    TRIAGE_CLASSES.iter().map(|s| s.to_string()).collect()
}

pub fn pretrain_class_names() -> Vec<String> {
    PRETRAIN_FINDINGS.iter().map(|s| s.to_string()).collect()
}

/// Lesion intensity at offset `(dx, dy)` from the ROI centre, before
/// amplitude scaling. Returns `None` for unknown class names.
fn lesion(class: &str, dx: f64, dy: f64, unit: f64) -> Option<f64> {
    let (dx, dy) = (dx / unit, dy / unit);
    let r2 = dx * dx + dy * dy;
    let r = r2.sqrt();
    let gauss = |d2: f64, s: f64| (-d2 / (2.0 * s * s)).exp();
    let window = |d: f64, half: f64| 1.0 / (1.0 + ((d.abs() - half) * 3.0).exp());
    Some(match class {
        "normal" => 0.0,
        "pneumonia" => gauss(r2, 1.4),
        "covid" => gauss((r - 2.6).powi(2), 0.6),
        "atelectasis" => gauss(dy * dy, 0.6) * window(dx, 3.5),
        "cardiomegaly" => 0.6 * window(r, 4.0),
        "effusion" => gauss(dx * dx, 0.6) * window(dy, 3.5),
        "infiltration" => gauss((dx - dy).powi(2) / 2.0, 0.6) * window(dx, 3.0),
        "mass" => gauss(r2, 2.2),
        "nodule" => 1.3 * gauss(r2, 0.7),
        "pneumothorax" => -0.8 * window(dx, 2.5) * window(dy, 2.5),
        _ => return None,
    })
}

/// Noise-free chest-like background shared by every image of a given size.
pub fn background_template(size: usize) -> Vec<f64> {
    let s = size as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let soft = |d: f64| 1.0 / (1.0 + (d * 18.0).exp());
            let body = soft(((u - 0.5) / 0.46).powi(2) + ((v - 0.52) / 0.5).powi(2) - 1.0);
            let lung = |cx: f64| soft(((u - cx) / 0.16).powi(2) + ((v - 0.47) / 0.3).powi(2) - 1.0);
            let lungs = lung(0.32).max(lung(0.68));
            let ribs = 0.05 * (v * std::f64::consts::PI * 11.0).sin().powi(2) * lungs;
            let spine = 0.18 * (-((u - 0.5) / 0.05).powi(2)).exp();
            let heart = 0.12 * soft(((u - 0.56) / 0.13).powi(2) + ((v - 0.66) / 0.1).powi(2) - 1.0);
            let value = 0.08 + 0.42 * body - 0.24 * lungs + ribs + spine + heart;
            out[y * size + x] = value.clamp(0.0, 1.0);
        }
    }
    out
}

fn lung_centre(size: usize, right: bool) -> (f64, f64) {
    let s = size as f64;
    (if right { 0.68 * s } else { 0.32 * s }, 0.47 * s)
}

fn stamp(pixels: &mut [f64], size: usize, class: &str, cx: f64, cy: f64, amp: f64, unit: f64) {
    let reach = (REFERENCE_ROI / 2.0 + 2.0) * unit;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(size - 1);
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = lesion(class, x as f64 - cx, y as f64 - cy, unit).unwrap_or(0.0);
            pixels[y * size + x] += amp * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageSynthConfig {
    pub classes: Vec<String>,
    pub images_per_class: usize,
    pub image_size: usize,
    pub roi_size: usize,
    /// Peak lesion intensity.
    pub contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum ROI centre displacement in pixels.
    pub jitter: f64,
    /// Probability that an image carries one extra finding (multi-label data).
    pub findings_rate: f64,
    /// Largest number of images one patient contributes to a class.
    pub max_images_per_patient: usize,
    pub seed: u64,
}

impl TriageSynthConfig {
    /// Three-way triage task.
    pub fn triage(images_per_class: usize, seed: u64) -> Self {
        TriageSynthConfig {
            classes: triage_class_names(),
            images_per_class,
            image_size: 32,
            roi_size: 9,
            contrast: 0.3,
            noise: 0.05,
            jitter: 3.0,
            findings_rate: 0.0,
            max_images_per_patient: 1,
            seed,
        }
    }

    /// Eight-finding multi-label pre-training task.
    pub fn pretrain(images_per_class: usize, seed: u64) -> Self {
        TriageSynthConfig {
            classes: pretrain_class_names(),
            findings_rate: 0.2,
            ..TriageSynthConfig::triage(images_per_class, seed)
        }
    }

    /// First `k` names of the triage list followed by the pre-training findings.
    pub fn with_class_count(k: usize, images_per_class: usize, seed: u64) -> Result<Self> {
        let mut names: Vec<String> = triage_class_names();
        for f in PRETRAIN_FINDINGS {
            if !names.iter().any(|n| n == f) {
                names.push(f.to_string());
            }
        }
        ensure!(
            k >= 1 && k <= names.len(),
            "class count must be in 1..={}, got {k}",
            names.len()
        );
        names.truncate(k);
        Ok(TriageSynthConfig {
            classes: names,
            ..TriageSynthConfig::triage(images_per_class, seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.classes.is_empty(), "need at least one class");
        ensure!(self.images_per_class >= 1, "images per class must be >= 1");
        ensure!(self.roi_size >= 1, "ROI size must be >= 1");
        ensure!(
            self.image_size >= self.roi_size,
            "image size {} is smaller than the ROI {}",
            self.image_size,
            self.roi_size
        );
        ensure!(self.noise >= 0.0 && self.contrast >= 0.0, "noise and contrast must be >= 0");
        ensure!(self.jitter >= 0.0, "jitter must be >= 0");
        ensure!((0.0..=1.0).contains(&self.findings_rate), "findings rate must be in [0, 1]");
        ensure!(self.max_images_per_patient >= 1, "max images per patient must be >= 1");
        for c in &self.classes {
            ensure!(
                lesion(c, 0.0, 0.0, 1.0).is_some(),
                "no lesion pattern for class '{c}'"
            );
        }
        Ok(())
    }
}

/// Render one image: template, lesion(s), then clamped noise.
fn render(
    template: &[f64],
    size: usize,
    lesions: &[(&str, bool)],
    cfg: &TriageSynthConfig,
    rng: &mut ChaCha8Rng,
) -> ImageGrid {
    let unit = cfg.roi_size as f64 / REFERENCE_ROI * size as f64 / 32.0;
    let mut pixels = template.to_vec();
    for (class, right) in lesions {
        let (cx, cy) = lung_centre(size, *right);
        let jx = rng.random_range(-1.0..=1.0) * cfg.jitter;
        let jy = rng.random_range(-1.0..=1.0) * cfg.jitter;
        let amp = cfg.contrast * rng.random_range(0.8..1.2);
        stamp(&mut pixels, size, class, cx + jx, cy + jy, amp, unit.max(0.25));
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("finite noise");
        for p in &mut pixels {
            *p += normal.sample(rng);
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    ImageGrid {
        width: size,
        height: size,
        pixels,
    }
}

/// Generate `images_per_class` images for every configured class.
pub fn synth_triage(cfg: &TriageSynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let size = cfg.image_size;
    let template = background_template(size);
    let findings: Vec<&str> = cfg
        .classes
        .iter()
        .map(String::as_str)
        .filter(|c| *c != "normal")
        .collect();
    let mut items = Vec::with_capacity(cfg.classes.len() * cfg.images_per_class);
    for class in &cfg.classes {
        let mut patient_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("patients/{class}")));
        let mut patient = 0usize;
        let mut left_in_patient = 0usize;
        for i in 0..cfg.images_per_class {
            if left_in_patient == 0 {
                patient += 1;
                left_in_patient = patient_rng.random_range(1..=cfg.max_images_per_patient);
            }
            left_in_patient -= 1;

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("triage/{class}/{i}")));
            let right = rng.random_bool(0.5);
            let position = if rng.random_bool(0.5) { Position::Pa } else { Position::Ap };
            let mut lesions = vec![(class.as_str(), right)];
            let mut extra = Vec::new();
            if cfg.findings_rate > 0.0 && rng.random::<f64>() < cfg.findings_rate {
                let others: Vec<&str> = findings.iter().copied().filter(|f| f != class).collect();
                if !others.is_empty() {
                    let f = others[rng.random_range(0..others.len())];
                    lesions.push((f, !right));
                    extra.push(f.to_string());
                }
            }
            let pixels = render(&template, size, &lesions, cfg, &mut rng);
            items.push(LabeledImage {
                pixels,
                class_label: class.clone(),
                findings: extra,
                patient_id: format!("{class}-{patient:04}"),
                position,
                timepoint: None,
                opacity_score: None,
            });
        }
    }
    Dataset::new(items, cfg.classes.clone())
}

/// How many timepoints each synthetic patient gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimepointPlan {
    /// Every patient has this many timepoints.
    Fixed(usize),
    /// 56% / 29% / 15% of patients with 2 / 3 / 4 timepoints, which yields
    /// 159 windows for 100 patients.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongitudinalConfig {
    pub patients: usize,
    pub timepoints: TimepointPlan,
    /// Relative weights of Worse / Stable / Improved steps.
    pub trend_mix: [f64; 3],
    /// Chance that a patient's trend changes at a given step.
    pub reversal_rate: f64,
    pub image_size: usize,
    pub contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        LongitudinalConfig {
            patients: 100,
            timepoints: TimepointPlan::Reference,
            trend_mix: [80.0, 28.0, 51.0],
            reversal_rate: 0.15,
            image_size: 32,
            contrast: 0.5,
            noise: 0.04,
            seed: 0,
        }
    }
}

/// Upper end of the synthetic opacity score scale.
pub const MAX_OPACITY_SCORE: f64 = 8.0;

impl LongitudinalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.patients >= 1, "need at least one patient");
        if let TimepointPlan::Fixed(n) = self.timepoints {
            ensure!((2..=16).contains(&n), "timepoints per patient must be in 2..=16, got {n}");
        }
        ensure!(
            self.trend_mix.iter().all(|w| *w >= 0.0 && w.is_finite())
                && self.trend_mix.iter().sum::<f64>() > 0.0,
            "trend mix must be non-negative with a positive total"
        );
        ensure!((0.0..=1.0).contains(&self.reversal_rate), "reversal rate must be in [0, 1]");
        ensure!(self.image_size >= 16, "longitudinal images need at least 16x16 pixels");
        ensure!(self.noise >= 0.0 && self.contrast > 0.0, "bad noise/contrast");
        Ok(())
    }

    fn timepoint_counts(&self) -> Vec<usize> {
        match self.timepoints {
            TimepointPlan::Fixed(n) => vec![n; self.patients],
            TimepointPlan::Reference => {
                let split = apportion(self.patients, &[0.56, 0.29, 0.15]);
                let mut out = Vec::with_capacity(self.patients);
                for (k, n) in split.iter().enumerate() {
                    out.extend(std::iter::repeat_n(k + 2, *n));
                }
                out
            }
        }
    }
}

/// One synthetic patient: chronological images and the step labels the
/// generator planned for consecutive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientHistory {
    pub patient_id: String,
    pub images: Vec<ScoredImage>,
    pub planned: Vec<TrajectoryLabel>,
    pub roi_centre: (f64, f64),
}

/// Ring radius (pixels at 32x32) of the tracked lesion for a score.
fn lesion_radius(score: f64) -> f64 {
    1.2 + 0.4 * score
}

fn lesion_amplitude(score: f64, contrast: f64) -> f64 {
    contrast * (0.25 + 0.15 * score)
}

impl PatientHistory {
    /// Pixel box `(x0, y0, x1, y1)` that contains the tracked lesion at every score.
    pub fn lesion_box(&self) -> (usize, usize, usize, usize) {
        let size = self.images[0].image.pixels.width;
        let (cx, cy) = self.roi_centre;
        let reach = (lesion_radius(MAX_OPACITY_SCORE) + 2.5) * size as f64 / 32.0;
        (
            (cx - reach).floor().max(0.0) as usize,
            (cy - reach).floor().max(0.0) as usize,
            ((cx + reach).ceil() as usize + 1).min(size),
            ((cy + reach).ceil() as usize + 1).min(size),
        )
    }
}

fn draw_steps(
    counts: &mut [usize; 3],
    steps: usize,
    reversal_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<TrajectoryLabel> {
    // weighted draw from the remaining pool, avoiding `avoid` when possible
    fn pick(counts: &[usize; 3], avoid: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
        let mut weights = *counts;
        if let Some(a) = avoid {
            if weights.iter().enumerate().any(|(k, w)| k != a && *w > 0) {
                weights[a] = 0;
            }
        }
        let total: usize = weights.iter().sum();
        let mut r = rng.random_range(0..total);
        for (k, w) in weights.iter().enumerate() {
            if r < *w {
                return k;
            }
            r -= w;
        }
        unreachable!("draw within total")
    }
    let mut out = Vec::with_capacity(steps);
    let mut current = pick(counts, None, rng);
    for step in 0..steps {
        if counts[current] == 0 || (step > 0 && rng.random::<f64>() < reversal_rate) {
            current = pick(counts, Some(current), rng);
        }
        counts[current] -= 1;
        out.push(TrajectoryLabel::ALL[current]);
    }
    out
}

/// Generate a longitudinal cohort. The tracked lesion grows in radius and
/// intensity with the opacity score, at a fixed per-patient position, over a
/// per-patient noise texture, so images of one patient differ only through
/// the lesion.
pub fn synth_longitudinal(cfg: &LongitudinalConfig) -> Result<Vec<PatientHistory>> {
    cfg.validate()?;
    let counts_per_patient = cfg.timepoint_counts();
    let total_steps: usize = counts_per_patient.iter().map(|n| n - 1).sum();
    let pool = apportion(total_steps, &cfg.trend_mix);
    let mut remaining = [pool[0], pool[1], pool[2]];

    let size = cfg.image_size;
    let scale = size as f64 / 32.0;
    let template = background_template(size);
    let mut plan_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "longitudinal/plan"));
    let mut order: Vec<usize> = (0..cfg.patients).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut plan_rng);
    let mut plans = vec![Vec::new(); cfg.patients];
    for p in order {
        plans[p] = draw_steps(&mut remaining, counts_per_patient[p] - 1, cfg.reversal_rate, &mut plan_rng);
    }
    debug_assert!(remaining.iter().all(|r| *r == 0));

    let mut out = Vec::with_capacity(cfg.patients);
    for (p, planned) in plans.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("longitudinal/{p}")));
        let steps = planned.len();
        let big = (MAX_OPACITY_SCORE - 0.5) / steps as f64;
        let hi = big.min(1.3);
        let mut path = vec![0.0];
        for label in &planned {
            let mag = match label {
                TrajectoryLabel::Worse => rng.random_range(0.45..hi),
                TrajectoryLabel::Improved => -rng.random_range(0.45..hi),
                TrajectoryLabel::Stable => {
                    let m = rng.random_range(0.02..0.2);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                }
            };
            path.push(path.last().expect("non-empty") + mag);
        }
        let lo = path.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_path = path.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = rng.random_range(-lo..=(MAX_OPACITY_SCORE - hi_path).max(-lo));
        let scores: Vec<f64> = path.iter().map(|c| c + start).collect();

        let right = rng.random_bool(0.5);
        let (lx, ly) = lung_centre(size, right);
        let centre = (
            lx + rng.random_range(-2.0..=2.0) * scale,
            ly + rng.random_range(-2.0..=2.0) * scale,
        );
        let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
        let texture: Vec<f64> = (0..size * size)
            .map(|_| if cfg.noise > 0.0 { normal.sample(&mut rng).clamp(-0.12, 0.12) } else { 0.0 })
            .collect();
        let position = if rng.random_bool(0.5) { Position::Pa } else { Position::Ap };
        let patient_id = format!("traj-{p:04}");

        let mut images = Vec::with_capacity(scores.len());
        for (t, score) in scores.iter().enumerate() {
            let radius = lesion_radius(*score) * scale;
            let amp = lesion_amplitude(*score, cfg.contrast);
            let width = 0.7 * scale;
            let mut pixels: Vec<f64> = template.iter().zip(&texture).map(|(a, b)| a + b).collect();
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - centre.0).powi(2) + (y as f64 - centre.1).powi(2)).sqrt();
                    // ring plus a faint filled core
                    let ring = (-(d - radius).powi(2) / (2.0 * width * width)).exp();
                    let core = 0.35 / (1.0 + ((d - radius) * 2.0 / scale).exp());
                    pixels[y * size + x] += amp * (ring + core);
                }
            }
            for v in &mut pixels {
                *v = v.clamp(0.0, 1.0);
            }
            let grid = ImageGrid {
                width: size,
                height: size,
                pixels,
            };
            let mut image = LabeledImage::new(grid, "covid", &patient_id);
            image.position = position;
            image.timepoint = Some(t as i64);
            image.opacity_score = Some(*score);
            images.push(ScoredImage::new(image, *score, t as i64)?);
        }
        for (k, label) in planned.iter().enumerate() {
            let rule = label_from_scores(scores[k], scores[k + 1])?;
            if rule != *label {
                return Err(KtdError::state(format!(
                    "generator produced {rule:?} for a planned {label:?} step"
                )));
            }
        }
        out.push(PatientHistory {
            patient_id,
            images,
            planned,
            roi_centre: centre,
        });
    }
    Ok(out)
}
