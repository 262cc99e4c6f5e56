use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Dataset;
use crate::error::{ensure, Result};
use crate::nets::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// train / validation / test
    pub ratios: [f64; 3],
    pub seed: u64,
    pub group_by_patient: bool,
    /// Apportion each class separately.
    pub stratify: bool,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            ratios,
            seed,
            group_by_patient: true,
            stratify: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 7:1:2
    pub fn seven_one_two(seed: u64) -> Self {
        SplitSpec::new([0.7, 0.1, 0.2], seed).expect("valid ratios")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.ratios.iter().all(|r| *r > 0.0 && r.is_finite()),
            "split ratios must be positive"
        );
        let total: f64 = self.ratios.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9,
            "split ratios sum to {total}, expected 1"
        );
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` over `ratios`; ties in the
/// remainder go to the lower index.
pub fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let sum: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| total as f64 * r / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// One item to split: its group (patient) and stratum (class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitKey {
    pub group: String,
    pub stratum: usize,
}

/// Assign item indices to (train, val, test). Groups never straddle splits.
///
/// Strata are processed in order. Within a stratum, groups already placed by
/// an earlier stratum keep their split; the remaining groups are sorted by
/// name, shuffled with a stratum-specific stream and placed one at a time in
/// the split with the largest remaining deficit against the largest-remainder
/// targets.
pub fn split_keys(keys: &[SplitKey], spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k.stratum).or_default().push(i);
    }
    let mut placed: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out: [Vec<usize>; 3] = Default::default();

    for (&stratum, members) in &strata {
        let targets = apportion(members.len(), &spec.ratios);
        let mut current = [0usize; 3];
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in members {
            groups.entry(keys[i].group.as_str()).or_default().push(i);
        }
        let mut fresh = Vec::new();
        for (g, items) in &groups {
            match placed.get(g) {
                Some(&s) => {
                    current[s] += items.len();
                    out[s].extend(items);
                }
                None => fresh.push(*g),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("split/{stratum}")));
        fresh.shuffle(&mut rng);
        for g in fresh {
            let deficit = |s: usize| targets[s] as i64 - current[s] as i64;
            let best = (0..3)
                .max_by(|&a, &b| deficit(a).cmp(&deficit(b)).then(b.cmp(&a)))
                .expect("three splits");
            let items = &groups[g];
            current[best] += items.len();
            out[best].extend(items);
            placed.insert(g, best);
        }
    }
    Ok(out)
}

/// Patient-grouped split of a dataset into (train, val, test).
pub fn split_by_patient(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if spec.stratify {
        for (c, members) in dataset.indices_by_class().iter().enumerate() {
            ensure!(
                !members.is_empty(),
                "class '{}' has no items to split",
                dataset.class_names[c]
            );
        }
    } else {
        ensure!(!dataset.is_empty(), "cannot split an empty dataset");
    }
    let keys: Vec<SplitKey> = dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            ensure!(
                !spec.group_by_patient || !item.patient_id.is_empty(),
                "item {i} has no patient id"
            );
            Ok(SplitKey {
                group: if spec.group_by_patient {
                    item.patient_id.clone()
                } else {
                    format!("item-{i}")
                },
                stratum: if spec.stratify { dataset.label_of(i) } else { 0 },
            })
        })
        .collect::<Result<_>>()?;
    let [mut a, mut b, mut c] = split_keys(&keys, spec)?;
    for part in [&mut a, &mut b, &mut c] {
        part.sort_by(|&x, &y| {
            let (ix, iy) = (&dataset.items[x], &dataset.items[y]);
            (dataset.label_of(x), &ix.patient_id, ix.timepoint)
                .cmp(&(dataset.label_of(y), &iy.patient_id, iy.timepoint))
        });
    }
    Ok((dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)))
}

/// Patients present in a dataset.
pub fn patients(dataset: &Dataset) -> BTreeSet<String> {
    dataset.items.iter().map(|i| i.patient_id.clone()).collect()
}
