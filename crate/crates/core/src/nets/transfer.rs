use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use super::weights::{init_entry, WeightBundle};
use crate::error::{ensure, KtdError, Result};

/// Where a destination class head gets its initial weights from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSource {
    /// Copy the named source head.
    Copy(String),
    /// Fresh fan-in scaled initialization.
    Random,
}

/// Destination class name to head source.
pub type HeadMapping = BTreeMap<String, HeadSource>;

/// pneumonia <- pneumonia, every other destination head random.
pub fn default_head_mapping(dest_classes: &[String]) -> HeadMapping {
    dest_classes
        .iter()
        .map(|c| {
            let src = if c == "pneumonia" {
                HeadSource::Copy("pneumonia".into())
            } else {
                HeadSource::Random
            };
            (c.clone(), src)
        })
        .collect()
}

/// Build a destination bundle from a trained source bundle: backbone and
/// shared-head entries are copied exactly (when `copy_trunk`), mapped heads
/// are copied from the named source head, and `Random` heads are freshly
/// initialized from `seed`. The source bundle is not modified.
pub fn transfer_weights(
    src_bundle: &WeightBundle,
    src_spec: &NetworkSpec,
    dst_spec: &NetworkSpec,
    head_mapping: &HeadMapping,
    copy_trunk: bool,
    seed: u64,
) -> Result<WeightBundle> {
    src_bundle.check_against(src_spec)?;
    dst_spec.validate()?;
    if copy_trunk {
        ensure!(
            src_spec.input == dst_spec.input
                && src_spec.backbone == dst_spec.backbone
                && src_spec.shared_head == dst_spec.shared_head,
            "source '{}' and destination '{}' do not share backbone and shared-head shapes",
            src_spec.name,
            dst_spec.name
        );
    }
    for head in &dst_spec.class_heads {
        ensure!(
            head_mapping.contains_key(&head.name),
            "head mapping does not cover destination class '{}'",
            head.name
        );
    }
    for name in head_mapping.keys() {
        ensure!(
            dst_spec.class_heads.iter().any(|h| &h.name == name),
            "head mapping names unknown destination class '{name}'"
        );
    }

    let mut entries = BTreeMap::new();
    for (prefix, layer) in dst_spec.named_layers() {
        let (wshape, bshape) = layer.param_shapes().expect("named layers carry params");
        let mut names = vec![(format!("{prefix}.weight"), wshape)];
        if let Some(b) = bshape {
            names.push((format!("{prefix}.bias"), b));
        }

        let source_prefix = if let Some(class) = prefix.strip_prefix("head.") {
            match &head_mapping[class] {
                HeadSource::Copy(src) => {
                    let src_head = src_spec
                        .class_heads
                        .iter()
                        .find(|h| &h.name == src)
                        .ok_or_else(|| {
                            KtdError::invalid(format!("unknown source head '{src}'"))
                        })?;
                    let dst_head = &dst_spec.class_heads.iter().find(|h| h.name == class).expect("present").layer;
                    ensure!(
                        src_head.layer.param_shapes() == dst_head.param_shapes(),
                        "source head '{src}' and destination head '{class}' differ in shape"
                    );
                    Some(format!("head.{src}"))
                }
                HeadSource::Random => None,
            }
        } else if copy_trunk {
            Some(prefix.clone())
        } else {
            None
        };

        for (name, shape) in names {
            let value = match &source_prefix {
                Some(src_prefix) => {
                    let suffix = name.rsplit('.').next().expect("suffix");
                    let src_name = format!("{src_prefix}.{suffix}");
                    match src_bundle.entries.get(&src_name) {
                        Some(arr) if arr.shape == shape => arr.clone(),
                        // bias-free source head feeding a biased destination
                        None if suffix == "bias" => init_entry(seed, &name, &shape, layer.fan_in()),
                        _ => {
                            return Err(KtdError::invalid(format!(
                                "cannot copy '{src_name}' into '{name}' with shape {shape:?}"
                            )))
                        }
                    }
                }
                None => init_entry(seed, &name, &shape, layer.fan_in()),
            };
            entries.insert(name, value);
        }
    }
    Ok(WeightBundle {
        entries,
        spec_fingerprint: dst_spec.fingerprint(),
        seed,
    })
}
