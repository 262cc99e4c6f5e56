use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, KtdError, Result};

/// Single-channel pixel grid, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        ensure!(
            pixels.len() == width * height,
            "{} pixels do not fill a {width}x{height} grid",
            pixels.len()
        );
        ensure!(
            pixels.iter().all(|p| (0.0..=1.0).contains(p)),
            "pixel values must lie in [0, 1]"
        );
        Ok(ImageGrid {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        ImageGrid {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Mean over the clipped box `[x0, x1) x [y0, y1)`.
    pub fn box_mean(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += self.at(x, y);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Position {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "AP")]
    Ap,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl Position {
    pub fn as_str(&self) -> &'static str {
        match self {
            Position::Pa => "PA",
            Position::Ap => "AP",
            Position::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Position {
    type Err = KtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PA" => Ok(Position::Pa),
            "AP" => Ok(Position::Ap),
            "" | "unknown" => Ok(Position::Unknown),
            other => Err(KtdError::invalid(format!("unknown position '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: ImageGrid,
    pub class_label: String,
    /// Further co-occurring findings for multi-label data; empty otherwise.
    pub findings: Vec<String>,
    pub patient_id: String,
    pub position: Position,
    pub timepoint: Option<i64>,
    pub opacity_score: Option<f64>,
}

impl LabeledImage {
    pub fn new(pixels: ImageGrid, class_label: &str, patient_id: &str) -> Self {
        LabeledImage {
            pixels,
            class_label: class_label.to_string(),
            findings: Vec::new(),
            patient_id: patient_id.to_string(),
            position: Position::Unknown,
            timepoint: None,
            opacity_score: None,
        }
    }

    /// Primary label followed by any findings.
    pub fn all_labels(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.class_label.as_str()).chain(self.findings.iter().map(String::as_str))
    }
}

/// Labeled images over an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(items: Vec<LabeledImage>, class_names: Vec<String>) -> Result<Self> {
        let ds = Dataset { items, class_names };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.class_names {
            ensure!(seen.insert(c), "duplicate class name '{c}'");
        }
        for (i, item) in self.items.iter().enumerate() {
            for label in item.all_labels() {
                ensure!(
                    self.class_index(label).is_some(),
                    "item {i} has label '{label}' outside the class list"
                );
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn label_of(&self, i: usize) -> usize {
        self.class_index(&self.items[i].class_label)
            .expect("validated dataset")
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.items.len()).map(|i| self.label_of(i)).collect()
    }

    /// Multi-hot target over the class list (primary label plus findings).
    pub fn multi_hot(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.class_names.len()];
        for label in self.items[i].all_labels() {
            out[self.class_index(label).expect("validated dataset")] = 1.0;
        }
        out
    }

    /// Item indices of each class, in class-list order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_names.len()];
        for i in 0..self.items.len() {
            out[self.label_of(i)].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> =
            self.class_names.iter().map(|c| (c.clone(), 0)).collect();
        for item in &self.items {
            *out.get_mut(&item.class_label).expect("validated dataset") += 1;
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}
