//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;

use lmad_core::autograd::Graph;
use lmad_core::config::{DataConfig, RunConfig, SplitName};
use lmad_core::e2e::text_prompt_string_for;
use lmad_core::eval::cot::{predicted_tags, run_scene, CoTPlan, ModelAnswerer};
use lmad_core::eval::report::{loss_curve_svg, metric_bars_svg, metric_table};
use lmad_core::eval::{evaluate, Judge};
use lmad_core::lm::Vocabulary;
use lmad_core::model::LmadModel;
use lmad_core::scene::dataset::generate_records;
use lmad_core::scene::{gen_qa, split_records, write_records, QARecord};
use lmad_core::training::{fit, FitObserver, LogEntry};
use lmad_core::{Group, LmadError, Result};

use crate::args::{Command, EvalArgs, GenDataArgs, InferArgs, InspectArgs, TrainArgs};
use crate::artifacts::{self, check_vocab, counts, create_run_dir, layered, required, Dataset, DatasetManifest};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn start(cfg: &mut RunConfig, command: &str) -> Result<PathBuf> {
    cfg.propagate_seed();
    cfg.validate()?;
    let dir = create_run_dir(cfg, command)?;
    cfg.dump(&dir)?;
    info!("run directory {}", dir.display());
    Ok(dir)
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = layered(&RunConfig::default(), args.common.config.as_deref())?;
    args.apply(&mut cfg);
    let dir = start(&mut cfg, "gen-data")?;
    let DataConfig { scenes, first_seed, split, ref gen, .. } = cfg.data;
    let records = generate_records(first_seed, scenes, gen)?;
    let parts = split_records(&records, split, cfg.seed)?;
    write_records(&dir.join(SplitName::Train.file_name()), &parts.train)?;
    write_records(&dir.join(SplitName::Val.file_name()), &parts.val)?;
    let vocab = Vocabulary::build(&records);
    vocab.save(&dir.join(artifacts::VOCAB_FILE))?;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        first_seed,
        scenes,
        split,
        gen: gen.clone(),
        vocab_hash: vocab.hash(),
        total: records.len(),
        train: parts.train.len(),
        val: parts.val.len(),
        counts: BTreeMap::from([("train".to_string(), counts(&parts.train)), ("val".to_string(), counts(&parts.val))]),
    };
    artifacts::write_json(&dir.join(artifacts::DATASET_MANIFEST), &manifest)?;
    println!(
        "wrote {} records ({} train, {} val) from {scenes} scenes to {}",
        manifest.total,
        manifest.train,
        manifest.val,
        dir.display()
    );
    Ok(())
}

struct TrainObserver<'a> {
    log: BufWriter<File>,
    log_path: PathBuf,
    ckpt_dir: PathBuf,
    cfg: &'a RunConfig,
    report_every: usize,
}

impl FitObserver for TrainObserver<'_> {
    fn on_step(&mut self, e: &LogEntry) -> Result<()> {
        let line = serde_json::to_string(e)?;
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(|err| LmadError::io(&self.log_path, err))?;
        if e.step % self.report_every == 0 {
            info!("step {} lr {:.2e} l_txt {:.4} l_e2e {:.4} total {:.4} acc {:.3}", e.step, e.lr, e.l_txt, e.l_e2e, e.total, e.token_acc);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, model: &LmadModel, step: usize) -> Result<()> {
        artifacts::save_checkpoint(&self.ckpt_dir, model, self.cfg, step)?;
        info!("checkpoint at step {step}");
        Ok(())
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = layered(&RunConfig::default(), args.common.config.as_deref())?;
    args.apply(&mut cfg);
    let dataset = Dataset::open(required(&cfg.paths.dataset, "--dataset", "paths.dataset")?)?;
    cfg.data.gen = dataset.manifest.gen.clone();
    cfg.data.scenes = dataset.manifest.scenes;
    cfg.data.first_seed = dataset.manifest.first_seed;
    cfg.data.split = dataset.manifest.split;
    let dir = start(&mut cfg, "train")?;

    let records = dataset.records(SplitName::Train)?;
    let mut model = LmadModel::new(cfg.model.clone(), dataset.vocab.clone(), cfg.data.gen.horizon)?;
    let samples = model.samples(&records, &cfg.data.gen)?;
    let total = cfg.train.total_steps(samples.len());
    info!("{} training samples, {total} steps, strategy {}", samples.len(), cfg.train.strategy);

    let log_path = dir.join(TRAIN_LOG);
    let file = File::create(&log_path).map_err(|e| LmadError::io(&log_path, e))?;
    let mut observer = TrainObserver {
        log: BufWriter::new(file),
        log_path,
        ckpt_dir: dir.join(CHECKPOINT_DIR),
        cfg: &cfg,
        report_every: (total / 10).max(1),
    };
    let summary = fit(&mut model, &samples, &cfg.train, &mut observer)?;
    artifacts::write(&dir.join("loss.svg"), loss_curve_svg(&summary.log))?;
    let last = summary.log.last();
    println!(
        "trained {} steps; final l_txt {:.4}, total {:.4}; checkpoint {}",
        summary.steps,
        last.map_or(f64::NAN, |e| e.l_txt),
        last.map_or(f64::NAN, |e| e.total),
        dir.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

/// Config for commands that read a checkpoint: defaults, then the
/// checkpoint's model and scene settings, then the file, then flags.
fn checkpoint_run_config(
    file: Option<&Path>,
    apply: &dyn Fn(&mut RunConfig),
) -> Result<(RunConfig, lmad_core::lm::checkpoint::Checkpoint)> {
    let mut probe = layered(&RunConfig::default(), file)?;
    apply(&mut probe);
    let path = required(&probe.paths.checkpoint, "--checkpoint", "paths.checkpoint")?;
    let (ckpt, trained) = artifacts::checkpoint_config(path)?;
    let base = RunConfig {
        model: trained.model.clone(),
        data: DataConfig { gen: trained.data.gen.clone(), ..DataConfig::default() },
        ..RunConfig::default()
    };
    let mut cfg = layered(&base, file)?;
    apply(&mut cfg);
    cfg.seed = trained.seed;
    Ok((cfg, ckpt))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (mut cfg, ckpt) = checkpoint_run_config(args.common.config.as_deref(), &|c| args.apply(c))?;
    let dataset = Dataset::open(required(&cfg.paths.dataset, "--dataset", "paths.dataset")?)?;
    cfg.data.gen = dataset.manifest.gen.clone();
    let model = artifacts::restore_model(&ckpt, &cfg)?;
    check_vocab(&dataset, &model)?;
    let dir = start(&mut cfg, "eval")?;

    let records = dataset.records(cfg.data.eval_split)?;
    let judge = Judge::new(cfg.judge.clone());
    let (report, items) = evaluate(&model, &records, &cfg.data.gen, &cfg.eval, &judge)?;
    artifacts::write_json(&dir.join("report.json"), &report)?;
    let mut lines = String::new();
    for it in &items {
        lines.push_str(&serde_json::to_string(it)?);
        lines.push('\n');
    }
    artifacts::write(&dir.join("items.jsonl"), lines)?;
    let table = metric_table(&report);
    artifacts::write(&dir.join("table.txt"), &table)?;
    artifacts::write(&dir.join("metrics.svg"), metric_bars_svg(&report))?;
    println!("{table}");
    println!("report {}", dir.join("report.json").display());
    Ok(())
}

#[derive(Serialize)]
struct TranscriptEntry {
    task: String,
    qtype: String,
    is_core: bool,
    question: String,
    question_asked: String,
    answer: String,
    gold: String,
    predicted_tags: Vec<String>,
    substitutions: Vec<(String, String)>,
}

#[derive(Serialize)]
struct Transcript {
    scene_seed: u64,
    objects: usize,
    instances: usize,
    vision_tokens: usize,
    e2e_tokens: usize,
    prompts: Vec<(String, String)>,
    entries: Vec<TranscriptEntry>,
}

fn infer(args: &InferArgs) -> Result<()> {
    let (mut cfg, ckpt) = checkpoint_run_config(args.common.config.as_deref(), &|c| args.apply(c))?;
    let model = artifacts::restore_model(&ckpt, &cfg)?;
    let dir = start(&mut cfg, "infer")?;
    let seed = cfg.infer.scene_seed;
    let data = Arc::new(model.scene_data(seed, &cfg.data.gen)?);
    let records = gen_qa(&data.scene)?;

    let mut prompts = Vec::new();
    for (slot, &i) in data.selection.real().collect::<Vec<_>>().iter().enumerate() {
        let inst = &data.backbone.instances[i];
        prompts.push((format!("det[{slot}]"), text_prompt_string_for(Group::Det, &data.backbone, Some(inst))?));
        prompts.push((format!("mot[{slot}]"), text_prompt_string_for(Group::Mot, &data.backbone, Some(inst))?));
    }
    prompts.push(("ego".into(), text_prompt_string_for(Group::Ego, &data.backbone, None)?));
    let mut g = Graph::new();
    let vision_var = model.vision_tokens(&mut g, &data.views)?;
    let vision = g.shape(vision_var).0;
    let e2e = if model.cfg.use_e2e { model.e2e_tokens(&mut g, &data)?.0.len() } else { 0 };

    let answerer = ModelAnswerer::new(&model, BTreeMap::from([(seed, data.clone())]), cfg.eval.max_new_tokens);
    let indexed: Vec<(usize, &QARecord)> = records.iter().enumerate().collect();
    let (answered, _) = run_scene(&indexed, &answerer, &CoTPlan::new(cfg.eval.cot))?;
    let mut order: Vec<usize> = (0..answered.len()).collect();
    let plan = CoTPlan::new(cfg.eval.cot);
    order.sort_by_key(|&k| {
        let r = &answered[k].record;
        (plan.stages.iter().position(|&t| t == r.task), !r.is_core, k)
    });

    println!("scene {seed}: {} objects, {} detected instances", data.scene.objects.len(), data.backbone.instances.len());
    if cfg.infer.dump_tokens {
        let n = model.cfg.bridge.n_ins;
        println!("tokens: vision {vision}, e2e {e2e} (det {n} + mot {n} + ego 1)");
    }
    println!("e2e text prompts:");
    for (k, p) in &prompts {
        println!("  {k}: {p}");
    }
    let mut entries = Vec::new();
    for k in order {
        let a = &answered[k];
        let r = &a.record;
        let core = if r.is_core { " core" } else { "" };
        println!("\n[{} {}{core}]", r.task, r.qtype);
        println!("Q: {}", a.question_asked);
        println!("A: {}", a.prediction);
        let (tags, _) = predicted_tags(&a.prediction);
        let tags: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
        if !tags.is_empty() {
            println!("predicted tags: {}", tags.join(" "));
        }
        if !a.substitutions.is_empty() {
            let subs: Vec<String> = a.substitutions.iter().map(|(g, p)| format!("{g} -> {p}")).collect();
            println!("substituted: {}", subs.join(", "));
        }
        entries.push(TranscriptEntry {
            task: r.task.to_string(),
            qtype: r.qtype.to_string(),
            is_core: r.is_core,
            question: r.question.clone(),
            question_asked: a.question_asked.clone(),
            answer: a.prediction.clone(),
            gold: r.answer.clone(),
            predicted_tags: tags,
            substitutions: a.substitutions.clone(),
        });
    }
    let transcript = Transcript {
        scene_seed: seed,
        objects: data.scene.objects.len(),
        instances: data.backbone.instances.len(),
        vision_tokens: vision,
        e2e_tokens: e2e,
        prompts,
        entries,
    };
    artifacts::write_json(&dir.join("transcript.json"), &transcript)
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let Some(path) = &args.path else {
        let cfg = layered(&RunConfig::default(), args.config.as_deref())?;
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    };
    if path.join(lmad_core::lm::checkpoint::MANIFEST_FILE).exists() {
        let (ckpt, trained) = artifacts::checkpoint_config(path)?;
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *groups.entry(group).or_default() += t.len();
        }
        let summary = serde_json::json!({
            "kind": "checkpoint",
            "step": ckpt.manifest.step,
            "plora_mode": ckpt.manifest.plora_mode,
            "branch_keys": ckpt.manifest.branch_keys,
            "vocab_size": ckpt.vocab.len(),
            "vocab_hash": ckpt.manifest.vocab_hash,
            "tensors": ckpt.tensors.len(),
            "parameters": groups.values().sum::<usize>(),
            "parameter_groups": groups,
            "strategy": trained.train.strategy,
            "model": trained.model,
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    if path.join(artifacts::DATASET_MANIFEST).exists() {
        let d = Dataset::open(path)?;
        println!("{}", serde_json::to_string_pretty(&d.manifest)?);
        return Ok(());
    }
    Err(LmadError::Input(format!("{} is neither a checkpoint nor a dataset directory", path.display())))
}
