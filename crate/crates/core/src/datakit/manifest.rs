//! Manifest files: a `# classes:` declaration line, then CSV with the header
//! `path,class,patient_id,position,timepoint,score`. Image paths are relative
//! to the manifest's directory and point at 16-bit grayscale PNG files. Extra
//! findings of multi-label items follow the primary class, separated by `|`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::Serialize;

use super::image::{Dataset, ImageGrid, LabeledImage, Position};
use crate::error::{KtdError, Result};

pub const MANIFEST_COLUMNS: [&str; 6] = ["path", "class", "patient_id", "position", "timepoint", "score"];
const CLASSES_PREFIX: &str = "# classes:";

fn row_err(row: usize, message: impl Into<String>) -> KtdError {
    KtdError::ManifestRow {
        row,
        message: message.into(),
    }
}

/// Sidecar file that records how a dataset was produced.
pub fn provenance_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    manifest.with_file_name(name)
}

pub fn write_provenance<T: Serialize>(manifest: &Path, provenance: &T) -> Result<()> {
    let path = provenance_path(manifest);
    let text = serde_json::to_string_pretty(provenance)?;
    std::fs::write(&path, text + "\n").map_err(|e| KtdError::io(&path, e))
}

pub fn write_png(grid: &ImageGrid, path: &Path) -> Result<()> {
    let data: Vec<u16> = grid
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width as u32, grid.height as u32, data).ok_or_else(|| KtdError::Image {
            path: path.to_path_buf(),
            message: "pixel buffer does not match dimensions".into(),
        })?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| KtdError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn read_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| KtdError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let pixels = luma.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    ImageGrid::new(w as usize, h as usize, pixels)
}

/// Write every image under `images/` next to the manifest, then the manifest.
pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    for c in &dataset.class_names {
        if c.contains([',', '|']) || c.trim() != c || c.is_empty() {
            return Err(KtdError::invalid(format!("class name '{c}' cannot be written to a manifest")));
        }
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| KtdError::io(&image_dir, e))?;

    let file = std::fs::File::create(path).map_err(|e| KtdError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{CLASSES_PREFIX} {}", dataset.class_names.join(",")).map_err(|e| KtdError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| KtdError::io(path, std::io::Error::other(e));
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for (i, item) in dataset.items.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        write_png(&item.pixels, &dir.join(&rel))?;
        let class = item.all_labels().collect::<Vec<_>>().join("|");
        let timepoint = item.timepoint.map(|t| t.to_string()).unwrap_or_default();
        let score = item.opacity_score.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            rel.as_str(),
            &class,
            &item.patient_id,
            item.position.as_str(),
            &timepoint,
            &score,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| KtdError::io(path, e))
}

/// Load a manifest and its images. Errors in a data row carry its 0-based index.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| KtdError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| KtdError::io(path, e))?;
    let classes: Vec<String> = first
        .trim_end()
        .strip_prefix(CLASSES_PREFIX)
        .ok_or_else(|| KtdError::invalid(format!("{} does not start with '{CLASSES_PREFIX}'", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if classes.is_empty() {
        return Err(KtdError::invalid("manifest declares no classes"));
    }

    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = csv
        .headers()
        .map_err(|e| KtdError::invalid(format!("manifest header: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        return Err(KtdError::invalid(format!(
            "manifest header must be '{}', got '{}'",
            MANIFEST_COLUMNS.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut items = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(|e| row_err(row, format!("malformed row: {e}")))?;
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let mut labels = field(1).split('|').map(str::trim);
        let class = labels.next().unwrap_or("");
        let findings: Vec<String> = labels.map(str::to_string).collect();
        for label in std::iter::once(class).chain(findings.iter().map(String::as_str)) {
            if !classes.iter().any(|c| c == label) {
                return Err(row_err(row, format!("class '{label}' is not declared")));
            }
        }
        let patient = field(2);
        if patient.is_empty() {
            return Err(row_err(row, "missing patient_id"));
        }
        let position: Position = field(3).parse().map_err(|e: KtdError| row_err(row, e.to_string()))?;
        let timepoint = match field(4) {
            "" => None,
            t => Some(t.parse::<i64>().map_err(|_| row_err(row, format!("bad timepoint '{t}'")))?),
        };
        let score = match field(5) {
            "" => None,
            s => {
                let v = s.parse::<f64>().map_err(|_| row_err(row, format!("bad score '{s}'")))?;
                if !v.is_finite() {
                    return Err(row_err(row, format!("non-finite score '{s}'")));
                }
                Some(v)
            }
        };
        let rel = field(0);
        if rel.is_empty() {
            return Err(row_err(row, "missing path"));
        }
        let pixels = read_png(&dir.join(rel)).map_err(|e| row_err(row, e.to_string()))?;
        let mut item = LabeledImage::new(pixels, class, patient);
        item.findings = findings;
        item.position = position;
        item.timepoint = timepoint;
        item.opacity_score = score;
        items.push(item);
    }
    Dataset::new(items, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut a = LabeledImage::new(ImageGrid::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap(), "covid", "p1");
        a.position = Position::Ap;
        a.timepoint = Some(3);
        a.opacity_score = Some(2.1);
        a.findings.push("normal".into());
        let b = LabeledImage::new(ImageGrid::filled(2, 2, 0.75), "normal", "p2");
        Dataset::new(vec![a, b], vec!["covid".into(), "normal".into()]).unwrap()
    }

    #[test]
    fn round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let ds = sample();
        save_manifest(&ds, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        for (x, y) in ds.items.iter().zip(&back.items) {
            assert_eq!(x.class_label, y.class_label);
            assert_eq!(x.findings, y.findings);
            assert_eq!(x.patient_id, y.patient_id);
            assert_eq!(x.position, y.position);
            assert_eq!(x.timepoint, y.timepoint);
            assert_eq!(x.opacity_score, y.opacity_score);
            for (p, q) in x.pixels.pixels.iter().zip(&y.pixels.pixels) {
                assert!((p - q).abs() <= 0.5 / 65535.0);
            }
        }
    }

    #[test]
    fn unknown_class_names_its_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_manifest(&sample(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace(",normal,p2,", ",flu,p2,");
        std::fs::write(&path, text).unwrap();
        match load_manifest(&path) {
            Err(KtdError::ManifestRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_image_names_its_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_manifest(&sample(), &path).unwrap();
        std::fs::remove_file(dir.path().join("images/00000.png")).unwrap();
        assert!(matches!(load_manifest(&path), Err(KtdError::ManifestRow { row: 0, .. })));
    }
}
