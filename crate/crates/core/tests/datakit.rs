use std::collections::BTreeSet;

use ktd_core::datakit::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random multi-image patients over three classes; a patient keeps one class.
fn cohort(sizes: &[(usize, usize)]) -> Dataset {
    let classes = ["a", "b", "c"];
    let mut items = Vec::new();
    for (p, (class, n)) in sizes.iter().enumerate() {
        for t in 0..*n {
            let mut item = LabeledImage::new(ImageGrid::filled(2, 2, 0.0), classes[*class], &format!("p{p:03}"));
            item.timepoint = Some(t as i64);
            items.push(item);
        }
    }
    Dataset::new(items, classes.iter().map(|s| s.to_string()).collect()).unwrap()
}

fn sizes() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..3, 1usize..5), 3..60).prop_map(|mut v| {
        // every class present
        v[0].0 = 0;
        v[1].0 = 1;
        v[2].0 = 2;
        v
    })
}

proptest! {
    #[test]
    fn splits_partition_items_without_patient_leakage(s in sizes(), seed in any::<u64>()) {
        let ds = cohort(&s);
        let (a, b, c) = split_by_patient(&ds, &SplitSpec::seven_one_two(seed)).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), ds.len());
        let (pa, pb, pc) = (patients(&a), patients(&b), patients(&c));
        prop_assert!(pa.is_disjoint(&pb) && pa.is_disjoint(&pc) && pb.is_disjoint(&pc));
        let all: BTreeSet<String> = pa.union(&pb).chain(pc.iter()).cloned().collect();
        prop_assert_eq!(all, patients(&ds));
    }

    #[test]
    fn split_does_not_depend_on_item_order(s in sizes(), seed in any::<u64>(), shuffle in any::<u64>()) {
        let ds = cohort(&s);
        let mut shuffled = ds.clone();
        shuffled.items.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let spec = SplitSpec::seven_one_two(seed);
        let x = split_by_patient(&ds, &spec).unwrap();
        let y = split_by_patient(&shuffled, &spec).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn apportion_sums_to_total(total in 0usize..10_000, w in prop::collection::vec(0.01..10.0f64, 1..6)) {
        let parts = apportion(total, &w);
        prop_assert_eq!(parts.iter().sum::<usize>(), total);
        let sum: f64 = w.iter().sum();
        for (p, r) in parts.iter().zip(&w) {
            prop_assert!((*p as f64 - total as f64 * r / sum).abs() < 1.0);
        }
    }
}

#[test]
fn reference_split_counts() {
    let singles = cohort(&(0..179).map(|i| (i % 3, 1)).collect::<Vec<_>>());
    let keys: Vec<SplitKey> = singles
        .items
        .iter()
        .map(|i| SplitKey { group: i.patient_id.clone(), stratum: 0 })
        .collect();
    let [a, b, c] = split_keys(&keys, &SplitSpec::seven_one_two(0)).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (125, 18, 36));
    assert_eq!(apportion(159, &[0.7, 0.1, 0.2]), vec![111, 16, 32]);
}

#[test]
fn generators_are_deterministic() {
    let cfg = TriageSynthConfig::triage(20, 5);
    assert_eq!(synth_triage(&cfg).unwrap(), synth_triage(&cfg).unwrap());
    let other = synth_triage(&TriageSynthConfig::triage(20, 6)).unwrap();
    assert_ne!(synth_triage(&cfg).unwrap(), other);
    let lc = LongitudinalConfig { patients: 12, seed: 3, ..LongitudinalConfig::default() };
    assert_eq!(synth_longitudinal(&lc).unwrap(), synth_longitudinal(&lc).unwrap());
}

#[test]
fn manifest_round_trip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_triage(&TriageSynthConfig::triage(4, 1)).unwrap();
    let path = dir.path().join("manifest.csv");
    save_manifest(&ds, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.labels(), ds.labels());
    for (x, y) in back.items.iter().zip(&ds.items) {
        assert_eq!(x.patient_id, y.patient_id);
        for (p, q) in x.pixels.pixels.iter().zip(&y.pixels.pixels) {
            assert!((p - q).abs() <= 1.0 / 65535.0);
        }
    }
}

/// The default task is learnable: a plain conv-block classifier trained
/// from scratch clears 0.90 test accuracy within the 50-epoch allowance.
#[test]
fn default_triage_task_is_learnable() {
    use ktd_core::evalkit::evaluate;
    use ktd_core::pipeline::{train_from_scratch, ArchConfig, StageData, TrainConfig};

    let ds = synth_triage(&TriageSynthConfig::triage(290, 0)).unwrap();
    let spec = SplitSpec::new([20.0 / 29.0, 3.0 / 29.0, 6.0 / 29.0], 0).unwrap();
    let (tr, va, te) = split_by_patient(&ds, &spec).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (600, 90, 180));
    let net = ArchConfig::teacher().build("plain", 32, &ds.class_names).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let out = train_from_scratch(&net, StageData::new(&tr, Some(&va)), &cfg).unwrap();
    let acc = evaluate(&net, &out.bundle, &te, &[], None).unwrap().accuracy;
    assert!(acc >= 0.90, "test accuracy {acc}");
}
