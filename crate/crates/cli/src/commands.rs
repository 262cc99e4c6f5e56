//! One function per subcommand. Each writes only inside its run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ktd_core::datakit::{
    load_manifest, save_manifest, split_by_patient, split_keys, synth_longitudinal, synth_triage, write_provenance,
    Dataset, SplitKey, SplitSpec,
};
use ktd_core::evalkit::{default_tasks, evaluate, roc_to_text, run_sweep, ConfigEcho, SweepInputs};
use ktd_core::losses::StudentLossKind;
use ktd_core::nets::{count_macs, count_params, default_head_mapping, NetworkSpec, WeightBundle};
use ktd_core::pipeline::{distill_ms, finetune_rf, format_log, pretrain_ap, train_plain, StageData, TrainOutcome, TransferPlan};
use ktd_core::trajectory::{build_sequences, train_traj_classifier, trajectory_accuracy, ScoredImage, TrajectorySequence};
use serde::Serialize;

use crate::config::{Checkpoint, RunConfig};
use crate::error::CliError;
use crate::run::{locate, output_root, RunDir};

const TRIAGE: &str = "triage/manifest.csv";
const PRETRAIN: &str = "pretrain/manifest.csv";
const LONGITUDINAL: &str = "longitudinal/manifest.csv";

pub struct Context {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub run: RunDir,
    pub command: &'static str,
}

impl Context {
    /// Create the run directory and echo the resolved config before any work.
    pub fn new(cfg: RunConfig, command: &'static str) -> Result<Self, CliError> {
        let root = output_root(&cfg);
        let run = RunDir::create(&root, command, cfg.seed)?;
        run.write("config.toml", &cfg.to_toml())?;
        Ok(Context { cfg, root, run, command })
    }

    fn data(&self, artifact: &str) -> Result<Dataset, CliError> {
        let explicit = if self.cfg.inputs.data.is_empty() {
            String::new()
        } else {
            Path::new(&self.cfg.inputs.data).join(artifact).to_string_lossy().into_owned()
        };
        let path = locate(&explicit, &self.root, "synth", artifact, "synthetic data", self.command)?;
        Ok(load_manifest(&path)?)
    }

    fn split(&self, ds: &Dataset, ratios: [f64; 3]) -> Result<(Dataset, Dataset, Dataset), CliError> {
        Ok(split_by_patient(ds, &SplitSpec::new(ratios, self.cfg.seed)?)?)
    }

    fn checkpoint(&self, explicit: &str, stage: &str, producer: &str, what: &str) -> Result<(NetworkSpec, WeightBundle), CliError> {
        let path = locate(explicit, &self.root, producer, &format!("{stage}.ktdw"), what, self.command)?;
        let spec_path = path.with_extension("spec.json");
        let text = std::fs::read_to_string(&spec_path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", spec_path.display())))?;
        let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
        let bundle = WeightBundle::load(&path, &spec)?;
        self.run.log(&format!("using {} from {}", stage, path.display()))?;
        Ok((spec, bundle))
    }

    fn save_stage(&self, stage: &str, spec: &NetworkSpec, out: &TrainOutcome) -> Result<(), CliError> {
        out.bundle.save(&self.run.file(&format!("{stage}.ktdw")))?;
        let spec_json = serde_json::to_string_pretty(spec).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.run.write(&format!("{stage}.spec.json"), &(spec_json + "\n"))?;
        self.run.write(&format!("{stage}.log.txt"), &format_log(&out.log))?;
        let val = out.best_val_accuracy.map(|a| format!(", val accuracy {a:.4}")).unwrap_or_default();
        self.run.log(&format!("{stage}: best epoch {}{val}", out.best_epoch))
    }

    fn triage_splits(&self) -> Result<(Dataset, Dataset, Dataset), CliError> {
        let ds = self.data(TRIAGE)?;
        self.split(&ds, self.cfg.data.triage_split)
    }

    fn image_size(ds: &Dataset) -> usize {
        ds.items.first().map(|i| i.pixels.width).unwrap_or(0)
    }

    fn student_spec(&self, size: usize, classes: &[String]) -> Result<NetworkSpec, CliError> {
        let spec = self.cfg.student.build("ms", size, classes)?;
        Ok(match self.cfg.distill.loss.student_loss {
            StudentLossKind::Arcface => spec.with_cosine_heads(self.cfg.distill.loss.arcface.scale_s),
            _ => spec,
        })
    }
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let d = &ctx.cfg.data;
    for (artifact, cfg) in [(TRIAGE, &d.triage), (PRETRAIN, &d.pretrain)] {
        let ds = synth_triage(cfg)?;
        let path = ctx.run.file(artifact);
        save_manifest(&ds, &path)?;
        write_provenance(&path, cfg)?;
        ctx.run.log(&format!("{artifact}: {} images {:?}", ds.len(), ds.class_counts()))?;
    }
    let histories = synth_longitudinal(&d.longitudinal)?;
    let items = histories.into_iter().flat_map(|h| h.images.into_iter().map(|s| s.image)).collect();
    let ds = Dataset::new(items, vec!["covid".to_string()])?;
    let path = ctx.run.file(LONGITUDINAL);
    save_manifest(&ds, &path)?;
    write_provenance(&path, &d.longitudinal)?;
    ctx.run.log(&format!("{LONGITUDINAL}: {} images", ds.len()))
}

pub fn pretrain(ctx: &Context) -> Result<(), CliError> {
    let ds = ctx.data(PRETRAIN)?;
    let (tr, va, _) = ctx.split(&ds, ctx.cfg.data.pretrain_split)?;
    let spec = ctx.cfg.teacher.build("ap", Context::image_size(&ds), &ds.class_names)?;
    let out = pretrain_ap(&spec, StageData::new(&tr, Some(&va)), &ctx.cfg.pretrain.train)?;
    ctx.save_stage("ap", &spec, &out)
}

pub fn finetune(ctx: &Context) -> Result<(), CliError> {
    let (ap_spec, ap) = ctx.checkpoint(&ctx.cfg.inputs.ap, "ap", "pretrain", "a pre-trained AP checkpoint")?;
    let (tr, va, _) = ctx.triage_splits()?;
    let rf_spec = ap_spec.with_heads("rf", &tr.class_names)?;
    let plan = TransferPlan {
        head_mapping: default_head_mapping(&rf_spec.head_names()),
        copy_trunk: ctx.cfg.finetune.copy_trunk,
    };
    let out = finetune_rf(&ap, &ap_spec, &rf_spec, StageData::new(&tr, Some(&va)), &plan, &ctx.cfg.finetune.train)?;
    ctx.save_stage("rf", &rf_spec, &out)
}

pub fn distill(ctx: &Context) -> Result<(), CliError> {
    let stage = &ctx.cfg.distill;
    let teacher = if stage.baseline {
        None
    } else {
        Some(ctx.checkpoint(&ctx.cfg.inputs.rf, "rf", "finetune", "a fine-tuned RF checkpoint")?)
    };
    let (tr, va, _) = ctx.triage_splits()?;
    let ms_spec = ctx.student_spec(Context::image_size(&tr), &tr.class_names)?;
    let data = StageData::new(&tr, Some(&va));
    let out = match teacher {
        None => train_plain(&ms_spec, data, &stage.loss, &stage.train)?,
        Some((rf_spec, rf)) => distill_ms(&rf, &rf_spec, &ms_spec, data, &stage.loss, &stage.train)?,
    };
    ctx.save_stage("ms", &ms_spec, &out)
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let (spec, bundle, echo) = match ctx.cfg.eval.checkpoint {
        Checkpoint::Rf => {
            let (s, b) = ctx.checkpoint(&ctx.cfg.inputs.rf, "rf", "finetune", "a fine-tuned RF checkpoint")?;
            (s, b, None)
        }
        Checkpoint::Ms => {
            let (s, b) = ctx.checkpoint(&ctx.cfg.inputs.ms, "ms", "distill", "a student MS checkpoint")?;
            let loss = if ctx.cfg.distill.baseline {
                ctx.cfg.distill.loss.without_teacher()
            } else {
                ctx.cfg.distill.loss
            };
            (s, b, Some(ConfigEcho::new(&loss, ctx.cfg.seed)))
        }
    };
    let (_, _, te) = ctx.triage_splits()?;
    let report = evaluate(&spec, &bundle, &te, &default_tasks(), echo)?;
    ctx.run.write("report.json", &(report.to_json()? + "\n"))?;
    for (task, points) in &report.roc {
        ctx.run.write(&format!("roc/{task}.txt"), &roc_to_text(points))?;
    }
    ctx.run.log(&format!("test accuracy {:.4} on {} images", report.accuracy, te.len()))?;
    for (task, auc) in &report.auroc {
        ctx.run.log(&format!("AUROC {task} {auc:.4}"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrajResult {
    accuracy: f64,
    best_epoch: usize,
    train_sequences: usize,
    test_sequences: usize,
}

fn histories(ds: &Dataset) -> Result<Vec<TrajectorySequence>, CliError> {
    let mut by_patient: BTreeMap<&str, Vec<ScoredImage>> = BTreeMap::new();
    for (row, img) in ds.items.iter().enumerate() {
        let (Some(score), Some(t)) = (img.opacity_score, img.timepoint) else {
            return Err(CliError::Runtime(format!("longitudinal item {row} lacks a score or timepoint")));
        };
        by_patient
            .entry(img.patient_id.as_str())
            .or_default()
            .push(ScoredImage::new(img.clone(), score, t)?);
    }
    let mut out = Vec::new();
    for images in by_patient.values() {
        out.extend(build_sequences(images)?);
    }
    Ok(out)
}

pub fn traj(ctx: &Context) -> Result<(), CliError> {
    let (ms_spec, ms) = ctx.checkpoint(&ctx.cfg.inputs.ms, "ms", "distill", "a student MS checkpoint")?;
    let seqs = histories(&ctx.data(LONGITUDINAL)?)?;
    let keys: Vec<SplitKey> = seqs
        .iter()
        .map(|s| SplitKey {
            group: s.patient_id.clone(),
            stratum: s.label.index(),
        })
        .collect();
    let parts = split_keys(&keys, &SplitSpec::new(ctx.cfg.data.traj_split, ctx.cfg.seed)?)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>();
    let (tr, va, te) = (pick(&parts[0]), pick(&parts[1]), pick(&parts[2]));
    let mut results = BTreeMap::new();
    for &scheme in &ctx.cfg.traj.schemes {
        let val = (!va.is_empty()).then_some(va.as_slice());
        let model = train_traj_classifier(&ms_spec, &ms, &tr, val, scheme, &ctx.cfg.traj.classifier)?;
        let accuracy = trajectory_accuracy(&model, &ms_spec, &ms, &te)?;
        ctx.run.log(&format!("{scheme:?}: test accuracy {accuracy:.4} over {} sequences", te.len()))?;
        results.insert(
            format!("{scheme:?}").to_lowercase(),
            TrajResult {
                accuracy,
                best_epoch: model.best_epoch,
                train_sequences: tr.len(),
                test_sequences: te.len(),
            },
        );
    }
    let text = serde_json::to_string_pretty(&results).map_err(|e| CliError::Runtime(e.to_string()))?;
    ctx.run.write("traj_report.json", &(text + "\n"))
}

pub fn sweep(ctx: &Context) -> Result<(), CliError> {
    let (rf_spec, rf) = ctx.checkpoint(&ctx.cfg.inputs.rf, "rf", "finetune", "a fine-tuned RF checkpoint")?;
    let (tr, va, te) = ctx.triage_splits()?;
    let ms_spec = ctx.cfg.student.build("ms", Context::image_size(&tr), &tr.class_names)?;
    let grid = &ctx.cfg.sweep.grid;
    // one teacher serves every seed
    let teachers: BTreeMap<u64, WeightBundle> = grid.seeds.iter().map(|s| (*s, rf.clone())).collect();
    let tasks = default_tasks();
    let inputs = SweepInputs {
        rf_spec: &rf_spec,
        teachers: &teachers,
        ms_spec: &ms_spec,
        train: &tr,
        val: Some(&va),
        test: &te,
        tasks: &tasks,
        train_config: &ctx.cfg.sweep.train,
    };
    ctx.run.log(&format!("sweep: {} cells", grid.cells().len()))?;
    let result = run_sweep(grid, &inputs, ctx.cfg.sweep.jobs)?;
    let rendered = result.render();
    ctx.run.write("sweep.md", &rendered)?;
    ctx.run.write("per_seed.csv", &result.per_seed_csv())?;
    let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::Runtime(e.to_string()))?;
    ctx.run.write("sweep.json", &(json + "\n"))?;
    println!("{rendered}");
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} sweep cells failed; see sweep.json")));
    }
    Ok(())
}

#[derive(Serialize)]
struct Complexity {
    name: String,
    params: u64,
    macs: u64,
}

pub fn complexity(ctx: &Context) -> Result<(), CliError> {
    let d = &ctx.cfg.data;
    let size = d.triage.image_size;
    let ap = ctx.cfg.teacher.build("ap", d.pretrain.image_size, &d.pretrain.classes)?;
    let rf = ap.with_heads("rf", &d.triage.classes)?;
    let ms = ctx.student_spec(size, &d.triage.classes)?;
    let mut rows = Vec::new();
    for spec in [&ap, &rf, &ms] {
        rows.push(Complexity {
            name: spec.name.clone(),
            params: count_params(spec)?,
            macs: count_macs(spec, spec.input)?,
        });
    }
    let mut table = format!("{:<6}{:>12}{:>14}\n", "model", "params", "MACs");
    for r in &rows {
        table.push_str(&format!("{:<6}{:>12}{:>14}\n", r.name, r.params, r.macs));
    }
    let ratio = rows[1].params as f64 / rows[2].params as f64;
    table.push_str(&format!("rf/ms parameter ratio {ratio:.1}\n"));
    ctx.run.write("complexity.txt", &table)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    ctx.run.write("complexity.json", &(json + "\n"))?;
    print!("{table}");
    Ok(())
}
