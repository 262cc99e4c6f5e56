//! Datasets, manifests, patient-grouped splits and synthetic generators.

mod image;
mod manifest;
mod split;
mod synth;

pub use self::image::{Dataset, ImageGrid, LabeledImage, Position};
pub use manifest::{
    load_manifest, provenance_path, read_png, save_manifest, write_png, write_provenance, MANIFEST_COLUMNS,
};
pub use split::{apportion, patients, split_by_patient, split_keys, SplitKey, SplitSpec};
pub use synth::{
    background_template, pretrain_class_names, synth_longitudinal, synth_triage, triage_class_names,
    LongitudinalConfig, PatientHistory, TimepointPlan, TriageSynthConfig, MAX_OPACITY_SCORE, PRETRAIN_FINDINGS,
    TRIAGE_CLASSES,
};
