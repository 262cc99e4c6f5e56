use ktd_core::datakit::*;
use ktd_core::evalkit::*;
use ktd_core::losses::*;
use ktd_core::nets::*;
use ktd_core::pipeline::*;

/// A small, easy triage task on 16x16 images.
fn data() -> (Dataset, Dataset) {
    let cfg = TriageSynthConfig {
        image_size: 16,
        roi_size: 5,
        contrast: 0.5,
        noise: 0.03,
        jitter: 1.0,
        ..TriageSynthConfig::triage(24, 3)
    };
    let ds = synth_triage(&cfg).unwrap();
    let (tr, va, _) = split_by_patient(&ds, &SplitSpec::new([0.7, 0.2, 0.1], 1).unwrap()).unwrap();
    (tr, va)
}

fn student() -> NetworkSpec {
    NetworkSpec::conv_blocks("ms", 16, &[2, 4], 8, &triage_class_names()).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (tr, va) = data();
    let spec = student();
    let set = TrainSet {
        inputs: dataset_inputs(&tr, &spec).unwrap(),
        targets: Targets::Labels(tr.labels()),
        teacher_logits: None,
    };
    let val = ValSet {
        inputs: dataset_inputs(&va, &spec).unwrap(),
        labels: va.labels(),
    };
    let cfg = config(10);
    let objective = Objective::Classify(DistillConfig::default());
    let init = init_weights(&spec, cfg.seed).unwrap();

    let mut straight = TrainState::new(init.clone());
    train_epochs(&mut straight, &spec, &objective, &set, Some(&val), &cfg, 10).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ktdw");
    let mut first = TrainState::new(init);
    train_epochs(&mut first, &spec, &objective, &set, Some(&val), &cfg, 5).unwrap();
    first.save(&path).unwrap();
    let mut resumed = TrainState::load(&path, &spec).unwrap();
    train_epochs(&mut resumed, &spec, &objective, &set, Some(&val), &cfg, 10).unwrap();

    assert_eq!(resumed.epoch, 10);
    assert!(resumed.weights.bit_eq(&straight.weights));
    assert_eq!(resumed.optimizer, straight.optimizer);
    let (a, b) = (resumed.best.unwrap(), straight.best.unwrap());
    assert_eq!((a.0, a.1.to_bits()), (b.0, b.1.to_bits()));
    assert!(a.2.bit_eq(&b.2));
    let losses = |s: &[EpochLog]| s.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&resumed.log), losses(&straight.log));
}

#[test]
fn distilling_without_teacher_weight_is_plain_training() {
    let (tr, va) = data();
    let ms = student();
    let rf = NetworkSpec::conv_blocks("rf", 16, &[4, 4], 8, &triage_class_names()).unwrap();
    let teacher = init_weights(&rf, 9).unwrap();
    let before = teacher.clone();
    let dc = DistillConfig { alpha: 0.0, ..DistillConfig::default() };
    let cfg = config(3);
    let d = distill_ms(&teacher, &rf, &ms, StageData::new(&tr, Some(&va)), &dc, &cfg).unwrap();
    let p = train_plain(&ms, StageData::new(&tr, Some(&va)), &dc, &cfg).unwrap();
    assert!(d.bundle.bit_eq(&p.bundle));
    assert!(d.last.bit_eq(&p.last));
    assert!(teacher.bit_eq(&before));

    let kd = DistillConfig::default();
    distill_ms(&teacher, &rf, &ms, StageData::new(&tr, Some(&va)), &kd, &cfg).unwrap();
    assert!(teacher.bit_eq(&before));
}

#[test]
fn training_is_deterministic_and_learns() {
    let (tr, va) = data();
    let ms = student();
    let loss = DistillConfig { student_loss: StudentLossKind::Softmax, ..DistillConfig::default() };
    let cfg = TrainConfig { dropout_rate: 0.0, ..config(15) };
    let a = train_plain(&ms, StageData::new(&tr, Some(&va)), &loss, &cfg).unwrap();
    let b = train_plain(&ms, StageData::new(&tr, Some(&va)), &loss, &cfg).unwrap();
    assert!(a.bundle.bit_eq(&b.bundle));
    assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
    let pc = DistillConfig { student_loss: StudentLossKind::Pc, ..loss };
    let c = train_plain(&ms, StageData::new(&tr, Some(&va)), &pc, &cfg).unwrap();
    assert!(!c.last.bit_eq(&a.last));
}

#[test]
fn best_epoch_is_the_earliest_maximum() {
    let (tr, va) = data();
    let out = train_plain(&student(), StageData::new(&tr, Some(&va)), &DistillConfig::default(), &config(8)).unwrap();
    let accs: Vec<f64> = out.log.iter().map(|e| e.val_accuracy.unwrap()).collect();
    let max = accs.iter().copied().fold(f64::MIN, f64::max);
    assert_eq!(out.best_epoch, accs.iter().position(|a| *a == max).unwrap() + 1);
    assert_eq!(out.best_val_accuracy, Some(max));
}

#[test]
fn frozen_trunk_only_moves_heads() {
    let (tr, va) = data();
    let ms = student();
    let init = init_weights(&ms, 5).unwrap();
    let set = TrainSet {
        inputs: dataset_inputs(&tr, &ms).unwrap(),
        targets: Targets::Labels(tr.labels()),
        teacher_logits: None,
    };
    let cfg = TrainConfig { freeze_trunk: true, ..config(2) };
    let out = train(&ms, init.clone(), &softmax_objective(), &set, None, &cfg).unwrap();
    for (name, arr) in &init.entries {
        assert_eq!(out.last.entries[name].bit_eq(arr), !name.starts_with("head."), "{name}");
    }
    let _ = va;
}

#[test]
fn stage_errors_are_reported() {
    let (tr, va) = data();
    let ms = student();
    let wrong = NetworkSpec::conv_blocks("x", 16, &[2], 4, &["a".to_string(), "b".to_string()]).unwrap();
    assert!(train_plain(&wrong, StageData::new(&tr, None), &DistillConfig::default(), &config(1)).is_err());
    let bad = TrainConfig { epochs: 0, ..config(1) };
    assert!(train_plain(&ms, StageData::new(&tr, Some(&va)), &DistillConfig::default(), &bad).is_err());
    let arc = DistillConfig { student_loss: StudentLossKind::Arcface, ..DistillConfig::default() };
    // an angular-margin student needs cosine heads
    assert!(train_plain(&ms, StageData::new(&tr, None), &arc, &config(1)).is_err());
    let cos = ms.clone().with_cosine_heads(arc.arcface.scale_s);
    assert!(train_plain(&cos, StageData::new(&tr, None), &arc, &config(1)).is_ok());
}

#[test]
fn reports_round_trip_through_json() {
    let (tr, va) = data();
    let ms = student();
    let out = train_plain(&ms, StageData::new(&tr, None), &DistillConfig::default(), &config(2)).unwrap();
    let report = evaluate(&ms, &out.bundle, &va, &default_tasks(), Some(ConfigEcho::new(&DistillConfig::default(), 5))).unwrap();
    assert!((0.0..=1.0).contains(&report.accuracy));
    assert_eq!(report.auroc.len(), 3);
    let back = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    for (k, v) in &report.auroc {
        assert_eq!(back.auroc[k].to_bits(), v.to_bits());
    }
}
