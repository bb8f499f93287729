use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use volcls_core::data::{
    augment, generate_phantom_dataset, load_dataset, read_rvol, split_dataset, write_phantom_dataset, write_rvol,
    AugmentationSpec, DatasetSplit, Modality, PhantomConfig, Preprocess, RvolHeader, Sample,
};
use volcls_core::eval::{aggregate_segmentation, evaluate as eval_metrics, render_table, write_curves, FixedScorer, ModelScorer, Scorer};
use volcls_core::layers::count_layer_params;
use volcls_core::models::{build_plan, reference_target, search_widths as run_search, Architecture, Model, ModelConfig, SearchSpace};
use volcls_core::tensor::streams;
use volcls_core::train::{load_checkpoint, Partitions, Trainer, BEST_CHECKPOINT};
use volcls_core::{Error, Result, Rng};

use crate::config::{from_value, read_json, resolve, RunConfig};
use crate::output::{write_atomic, write_json, RunGuard};
use crate::{AugmentPreviewArgs, CountParamsArgs, DataArgs, EvaluateArgs, PredictArgs, SearchWidthsArgs, SynthArgs, TrainArgs};

const RUN_CONFIG: &str = "run_config.json";
const SPLIT_FILE: &str = "split.json";

fn geometry(values: &[usize], flag: &str) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(values)
        .map_err(|_| Error::Config(format!("{flag}: expected D,H,W, got {} values", values.len())))
}

pub fn synth(root: &Path, args: SynthArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| root.join("data"));
    let mut config = PhantomConfig::new(args.n, args.malignant_fraction, geometry(&args.geometry, "--geometry")?, args.seed);
    if let Some(noise) = args.noise {
        config.noise = noise;
    }
    let phantom = generate_phantom_dataset(&config)?;
    let guard = RunGuard::start(&out, "synth")?;
    write_phantom_dataset(&phantom, &out)?;
    write_json(&out.join("phantom_config.json"), &config)?;
    guard.finish()?;
    let positives = phantom.samples.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} studies ({} positive) to {}",
        phantom.samples.len(),
        positives,
        out.join("manifest.json").display()
    );
    Ok(())
}

fn train_overrides(args: &TrainArgs) -> Vec<(&'static str, Value)> {
    let mut o: Vec<(&'static str, Value)> = Vec::new();
    if let Some(p) = &args.manifest {
        o.push(("manifest", json!(p)));
    }
    if let Some(a) = args.arch {
        o.push(("model.architecture", json!(a)));
    }
    if let Some(v) = args.epochs {
        o.push(("train.epochs", json!(v)));
    }
    if let Some(v) = args.batch_size {
        o.push(("train.batch_size", json!(v)));
    }
    if let Some(v) = args.lr {
        o.push(("train.lr", json!(v)));
    }
    if let Some(v) = args.weight_decay {
        o.push(("train.weight_decay", json!(v)));
    }
    if let Some(v) = args.dropout {
        o.push(("train.dropout", json!(v)));
    }
    if let Some(v) = args.seed {
        o.push(("train.seed", json!(v)));
    }
    if let Some(v) = args.workers {
        o.push(("workers", json!(v)));
    }
    if let Some(v) = &args.crop {
        o.push(("preprocess.crop_size", json!(v)));
    }
    if args.no_augment {
        o.push(("augmentation", json!(AugmentationSpec::none())));
    }
    if let Some(p) = &args.out {
        o.push(("out_dir", json!(p)));
    }
    o
}

fn load_samples(manifest: &Path, preprocess: &Preprocess) -> Result<Vec<Sample>> {
    let dataset = load_dataset(manifest)?;
    for (id, why) in &dataset.excluded {
        eprintln!("excluded {id}: {why}");
    }
    preprocess.apply_all(&dataset.samples)
}

pub fn train(root: &Path, args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(args.config.as_deref(), train_overrides(&args))?;
    if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = root.join(format!("{}-seed{}", cfg.model.architecture, cfg.train.seed));
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let guard = RunGuard::start(&out, "train")?;
    write_json(&out.join(RUN_CONFIG), &cfg)?;

    let samples = load_samples(&cfg.manifest, &cfg.preprocess)?;
    let labels: Vec<(String, u8)> = samples.iter().map(|s| (s.study_id.clone(), s.label)).collect();
    let split = split_dataset(&labels, cfg.split.ratios, cfg.train.seed, cfg.split.stratified)?;
    write_json(&out.join(SPLIT_FILE), &split)?;
    let parts = Partitions::from_split(&samples, &split)?;

    let trainer = match &args.resume {
        Some(path) => resume(path, &cfg)?,
        None => {
            let model = Model::build(&cfg.model, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone(), cfg.augmentation.clone(), &parts.train)?
        }
    };
    let mut trainer = trainer.with_output(&out)?;
    let history = trainer.fit(&parts)?;

    let selected = history.selected();
    let test_at_selected = selected.and_then(|b| {
        history.records.iter().find(|r| r.epoch == b.epoch).and_then(|r| r.test.as_ref()).and_then(|m| m.auc_roc)
    });
    let summary = json!({
        "epochs": history.records.len(),
        "selected_epoch": selected.map(|b| b.epoch),
        "val_auc_roc": selected.map(|b| b.value),
        "test_auc_roc_at_selected": test_at_selected,
        "bookmarks": history.best,
    });
    write_json(&out.join("summary.json"), &summary)?;
    guard.finish()?;

    match selected {
        Some(b) => println!(
            "{} epochs; selected epoch {} (val AUC {:.4}, test AUC {}); run in {}",
            history.records.len(),
            b.epoch,
            b.value,
            test_at_selected.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            out.display()
        ),
        None => println!("{} epochs; no validation AUC available; run in {}", history.records.len(), out.display()),
    }
    Ok(())
}

/// Loads a checkpoint for continued training. Everything but the epoch
/// budget must match the resolved config.
fn resume(path: &Path, cfg: &RunConfig) -> Result<Trainer> {
    let mut trainer = Trainer::resume(path)?;
    if trainer.model.config() != &cfg.model {
        return Err(Error::Config(format!("--resume: {} was trained with a different model config", path.display())));
    }
    let mut saved = trainer.state.config.clone();
    saved.epochs = cfg.train.epochs;
    if saved != cfg.train || trainer.state.augmentation != cfg.augmentation {
        return Err(Error::Config(format!("--resume: {} was trained with a different train config", path.display())));
    }
    trainer.state.config.epochs = cfg.train.epochs;
    Ok(trainer)
}

/// Studies selected by `DataArgs`, with the partition name used.
struct Selection {
    samples: Vec<Sample>,
    partition: String,
}

fn select(data: &DataArgs) -> Result<Selection> {
    let run_file = |name: &str| data.run.as_ref().map(|d| d.join(name));
    let config_path = data.config.clone().or_else(|| run_file(RUN_CONFIG));
    let run_cfg: Option<RunConfig> = match &config_path {
        Some(p) => Some(from_value(read_json(p)?, &p.display().to_string())?),
        None => None,
    };
    let manifest = data
        .manifest
        .clone()
        .or_else(|| run_cfg.as_ref().map(|c| c.manifest.clone()))
        .ok_or_else(|| Error::Config("a manifest is required (--manifest, --config or --run)".into()))?;
    let preprocess = run_cfg.map(|c| c.preprocess).unwrap_or_default();
    let samples = load_samples(&manifest, &preprocess)?;

    let split_path = data.split.clone().or_else(|| run_file(SPLIT_FILE));
    let partition = data.partition.clone().unwrap_or_else(|| if split_path.is_some() { "test" } else { "all" }.into());
    if partition == "all" {
        return Ok(Selection { samples, partition });
    }
    let split_path = split_path
        .ok_or_else(|| Error::Config(format!("--partition {partition} needs a split (--split or --run)")))?;
    let split: DatasetSplit = from_value(read_json(&split_path)?, &split_path.display().to_string())?;
    let parts = Partitions::from_split(&samples, &split)?;
    let samples = match partition.as_str() {
        "train" => parts.train,
        "val" => parts.val,
        "test" => parts.test,
        other => return Err(Error::Config(format!("--partition: unknown partition '{other}'"))),
    };
    Ok(Selection { samples, partition })
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint::<f32>(path)?.0)
}

fn checkpoints_of(data: &DataArgs, given: &[PathBuf]) -> Vec<PathBuf> {
    match (&data.run, given.is_empty()) {
        (Some(run), true) => vec![run.join(BEST_CHECKPOINT)],
        _ => given.to_vec(),
    }
}

fn model_label(model: &Model<f32>, path: &Path) -> String {
    format!("{} ({})", model.config().architecture.display_name(), path.display())
}

pub fn evaluate(root: &Path, args: EvaluateArgs) -> Result<()> {
    let checkpoints = checkpoints_of(&args.data, &args.checkpoints);
    if checkpoints.is_empty() && args.maps.is_none() {
        return Err(Error::Config("nothing to evaluate: give --checkpoint, --run or --maps".into()));
    }
    let sel = select(&args.data)?;
    let out = args.out.unwrap_or_else(|| root.join("eval"));
    let guard = RunGuard::start(&out, "evaluate")?;

    let mut reports = Vec::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let mut model = load_model(path)?;
        let name = model_label(&model, path);
        let mut scorer = ModelScorer { name, model: &mut model };
        reports.push((format!("model{}", i + 1), eval_metrics(&mut scorer, &sel.samples, args.threshold, &sel.partition)?));
    }
    if let Some(dir) = &args.maps {
        let mut scores = BTreeMap::new();
        for s in &sel.samples {
            let path = dir.join(format!("{}.raw", s.study_id));
            let (map, _) = read_rvol(&path)?;
            let score = aggregate_segmentation(&map).map_err(|e| e.context(path.display().to_string()))?;
            scores.insert(s.study_id.clone(), score);
        }
        let mut scorer = FixedScorer { name: "Baseline (max-pooled maps)".into(), scores };
        reports.push(("baseline".into(), eval_metrics(&mut scorer, &sel.samples, args.threshold, &sel.partition)?));
    }

    for (stem, report) in &reports {
        write_json(&out.join(format!("{stem}_{}.json", sel.partition)), report)?;
        write_curves(report, &out, &format!("{stem}_{}", sel.partition))?;
    }
    let rows: Vec<_> = reports.iter().map(|(_, r)| r.row()).collect();
    let table = render_table(&rows);
    write_atomic(&out.join(format!("table_{}.txt", sel.partition)), table.as_bytes())?;
    guard.finish()?;
    println!("partition {} ({} studies)", sel.partition, sel.samples.len());
    print!("{table}");
    for (_, r) in &reports {
        let c = &r.confusion;
        println!("{}: confusion at {}: tp {} fp {} tn {} fn {}", r.model, r.threshold, c.tp, c.fp, c.tn, c.fn_);
    }
    Ok(())
}

pub fn predict(root: &Path, args: PredictArgs) -> Result<()> {
    let path = match (&args.checkpoint, &args.data.run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run.join(BEST_CHECKPOINT),
        (None, None) => return Err(Error::Config("a checkpoint is required (--checkpoint or --run)".into())),
    };
    let sel = select(&args.data)?;
    let mut model = load_model(&path)?;
    let mut scorer = ModelScorer { name: model_label(&model, &path), model: &mut model };
    let mut csv = String::from("study_id,label,score\n");
    for s in &sel.samples {
        let score = scorer.score(s).map_err(|e| e.context(format!("study '{}'", s.study_id)))?;
        writeln!(csv, "{},{},{}", s.study_id, s.label, score).expect("write to string");
    }
    let out = args.out.unwrap_or_else(|| root.join("predictions.csv"));
    write_atomic(&out, csv.as_bytes())?;
    println!("scored {} studies ({}) into {}", sel.samples.len(), sel.partition, out.display());
    Ok(())
}

fn model_config_for(arch: Option<Architecture>, file: Option<&Path>) -> Result<ModelConfig> {
    let Some(path) = file else {
        let arch = arch.ok_or_else(|| Error::Config("give --arch or --config".into()))?;
        return Ok(ModelConfig::reference(arch));
    };
    let mut value = read_json(path)?;
    if let Some(model) = value.get("model") {
        value = model.clone();
    }
    match (arch, value.get("architecture").and_then(Value::as_str)) {
        (Some(a), Some(s)) if s.parse::<Architecture>()? != a => {
            return Err(Error::Config(format!("--arch {a} contradicts architecture '{s}' in {}", path.display())))
        }
        (Some(a), None) => crate::config::set_path(&mut value, "architecture", json!(a)),
        _ => {}
    }
    from_value(value, &path.display().to_string())
}

pub fn count_params(args: CountParamsArgs) -> Result<()> {
    let config = model_config_for(args.arch, args.config.as_deref())?;
    let plan = build_plan(&config)?;
    let arch = config.architecture;
    println!("{} parameters", arch.display_name());
    let rows: Vec<(String, usize)> = if args.layers {
        plan.layers().iter().map(|(name, spec)| (format!("{name} [{}]", spec.kind_name()), count_layer_params(spec))).collect()
    } else {
        plan.stage_counts()
    };
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    for (name, n) in &rows {
        println!("  {name:<width$}  {n:>10}");
    }
    let total = plan.count_parameters();
    let target = reference_target(arch);
    let delta = total as i64 - target as i64;
    println!("  {:<width$}  {total:>10}", "total");
    println!("  {:<width$}  {target:>10}", "target");
    println!("  {:<width$}  {delta:>+10}", "delta");
    Ok(())
}

pub fn search_widths(args: SearchWidthsArgs) -> Result<()> {
    let target = args.target.unwrap_or_else(|| reference_target(args.arch));
    let report = run_search(&SearchSpace::default_for(args.arch), target)?;
    println!("{} target {} ({} candidates evaluated)", args.arch.display_name(), target, report.evaluated);
    match &report.exact {
        Some(c) => println!("exact match: widths {:?} stem {:?} head {:?}", c.config.widths, c.config.stem_width, c.config.head_hidden),
        None => println!("no exact match"),
    }
    for c in report.nearest.iter().take(args.top) {
        println!(
            "  widths {:?} stem {:?} head {:?}: {} parameters ({:+})",
            c.config.widths, c.config.stem_width, c.config.head_hidden, c.parameters, c.gap
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn augment_preview(root: &Path, args: AugmentPreviewArgs) -> Result<()> {
    let spec: AugmentationSpec = match &args.augmentation {
        Some(p) => from_value(read_json(p)?, &p.display().to_string())?,
        None => AugmentationSpec::default(),
    };
    spec.validate()?;
    let dataset = load_dataset(&args.manifest)?;
    let sample = dataset
        .get(&args.study)
        .ok_or_else(|| Error::Data(format!("study '{}' is not in {}", args.study, args.manifest.display())))?;
    let mut rng = Rng::for_item(args.seed, streams::AUGMENT, &sample.study_id, args.epoch);
    let after = augment(sample, &spec, &mut rng)?;

    let out = args.out.unwrap_or_else(|| root.join("preview").join(&args.study));
    let guard = RunGuard::start(&out, "augment-preview")?;
    for (tag, s) in [("before", sample), ("after", &after)] {
        let header = |modality| RvolHeader { shape: s.dims(), spacing_mm: s.spacing, modality, study_id: s.study_id.clone() };
        for (c, modality) in Modality::CHANNELS.into_iter().enumerate() {
            let file = out.join(format!("{tag}_{}.raw", format!("{modality:?}").to_lowercase()));
            write_rvol(&file, &s.image.index_axis0(c)?, &header(modality))?;
        }
        if let Some(mask) = &s.mask {
            write_rvol(&out.join(format!("{tag}_mask.raw")), mask, &header(Modality::MASK))?;
        }
    }
    write_json(&out.join("augmentation.json"), &json!({"seed": args.seed, "epoch": args.epoch, "spec": spec}))?;
    guard.finish()?;
    println!("wrote before/after volumes of {} to {}", args.study, out.display());
    Ok(())
}
