//! Command-line flags. Each flag overrides one config-file key, named in its help text.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use lmad_core::config::{RunConfig, SplitName};
use lmad_core::lm::InjectionMode;
use lmad_core::pi_encoder::EncoderMode;
use lmad_core::plora::PLoRAMode;
use lmad_core::training::Strategy;

#[derive(Debug, Parser)]
#[command(name = "lmad", version, about = "Synthetic driving VQA: generate data, train, evaluate, infer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic QA dataset (train/val splits, vocabulary, manifest).
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the staged chain-of-thought pipeline.
    Eval(EvalArgs),
    /// Print a staged Q/A transcript for one scene.
    Infer(InferArgs),
    /// Describe a checkpoint or dataset directory, or print the effective config.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent of timestamped run directories [out_dir]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Exact run directory [paths.run_dir]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.out_dir, &self.out_dir);
        set_opt(&mut cfg.paths.run_dir, &self.run_dir);
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run seed, also used for the train/val shuffle [seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes [data.scenes]
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Seed of the first scene [data.first_seed]
    #[arg(long)]
    pub first_seed: Option<u64>,
    /// Fraction of records in the train split [data.split]
    #[arg(long)]
    pub split: Option<f64>,
    /// Minimum objects per scene [data.gen.objects_min]
    #[arg(long)]
    pub objects_min: Option<usize>,
    /// Maximum objects per scene [data.gen.objects_max]
    #[arg(long)]
    pub objects_max: Option<usize>,
}

/// Flags that change the end-to-end token path.
#[derive(Debug, Args)]
pub struct E2eFlags {
    /// Instance slots per det/mot group [model.bridge.n_ins]
    #[arg(long)]
    pub n_ins: Option<usize>,
    /// Noise scale of the synthetic driving backbone [model.bridge.noise]
    #[arg(long)]
    pub e2e_noise: Option<f64>,
    /// Stop gradients from the language loss into the backbone (true/false) [model.bridge.detach]
    #[arg(long)]
    pub detach: Option<bool>,
}

impl E2eFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.model.bridge.n_ins, &self.n_ins);
        set(&mut cfg.model.bridge.noise, &self.e2e_noise);
        set(&mut cfg.model.bridge.detach, &self.detach);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub e2e: E2eFlags,
    /// Dataset directory written by gen-data [paths.dataset]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run seed for model init and batch order [seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// frozen-e2e or joint [train.strategy]
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Weight of the driving loss under joint training [train.lambda]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// task, question or hierarchical [model.plora.mode]
    #[arg(long)]
    pub plora_mode: Option<PLoRAMode>,
    /// input-tokens or adapter [model.decoder.injection]
    #[arg(long)]
    pub injection: Option<InjectionMode>,
    /// qformer or direct [model.encoder.mode]
    #[arg(long)]
    pub encoder_mode: Option<EncoderMode>,
    /// Feed end-to-end tokens to the decoder (true/false) [model.use_e2e]
    #[arg(long)]
    pub use_e2e: Option<bool>,
    /// Peak learning rate [train.lr]
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW weight decay [train.weight_decay]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Optimizer steps; overrides epochs [train.steps]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Passes over the training split [train.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per step [train.batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint period in steps, 0 for the end only [train.checkpoint_every]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub e2e: E2eFlags,
    /// Checkpoint directory [paths.checkpoint]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory [paths.dataset]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Split to evaluate, train or val [data.eval_split]
    #[arg(long)]
    pub split: Option<SplitName>,
    /// Answer every question independently [eval.cot = false]
    #[arg(long)]
    pub no_cot: bool,
    /// "fallback" or a judge endpoint URL [judge.url]
    #[arg(long)]
    pub judge: Option<String>,
    /// Evaluate only the first N scenes [eval.subset]
    #[arg(long)]
    pub subset: Option<usize>,
    /// Generation budget per answer [eval.max_new_tokens]
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub e2e: E2eFlags,
    /// Checkpoint directory [paths.checkpoint]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene seed [infer.scene_seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print prefix token counts [infer.dump_tokens]
    #[arg(long)]
    pub dump_tokens: bool,
    /// Answer every question independently [eval.cot = false]
    #[arg(long)]
    pub no_cot: bool,
    /// Generation budget per answer [eval.max_new_tokens]
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// TOML config file merged over the defaults when no path is given
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint or dataset directory
    pub path: Option<PathBuf>,
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

impl GenDataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.data.scenes, &self.scenes);
        set(&mut cfg.data.first_seed, &self.first_seed);
        set(&mut cfg.data.split, &self.split);
        set(&mut cfg.data.gen.objects_min, &self.objects_min);
        set(&mut cfg.data.gen.objects_max, &self.objects_max);
    }
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        self.e2e.apply(cfg);
        set_opt(&mut cfg.paths.dataset, &self.dataset);
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.train.strategy, &self.strategy);
        set_opt(&mut cfg.train.lambda, &self.lambda);
        set(&mut cfg.model.plora.mode, &self.plora_mode);
        set(&mut cfg.model.decoder.injection, &self.injection);
        set(&mut cfg.model.encoder.mode, &self.encoder_mode);
        set(&mut cfg.model.use_e2e, &self.use_e2e);
        set(&mut cfg.train.lr, &self.lr);
        set(&mut cfg.train.weight_decay, &self.weight_decay);
        set_opt(&mut cfg.train.steps, &self.steps);
        set(&mut cfg.train.epochs, &self.epochs);
        set(&mut cfg.train.batch_size, &self.batch_size);
        set(&mut cfg.train.checkpoint_every, &self.checkpoint_every);
    }
}

fn apply_judge(cfg: &mut RunConfig, judge: &Option<String>) {
    match judge.as_deref() {
        None => {}
        Some("fallback") => cfg.judge.url = None,
        Some(url) => cfg.judge.url = Some(url.to_string()),
    }
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        self.e2e.apply(cfg);
        set_opt(&mut cfg.paths.checkpoint, &self.checkpoint);
        set_opt(&mut cfg.paths.dataset, &self.dataset);
        set(&mut cfg.data.eval_split, &self.split);
        if self.no_cot {
            cfg.eval.cot = false;
        }
        apply_judge(cfg, &self.judge);
        set_opt(&mut cfg.eval.subset, &self.subset);
        set(&mut cfg.eval.max_new_tokens, &self.max_new_tokens);
    }
}

impl InferArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.common.apply(cfg);
        self.e2e.apply(cfg);
        set_opt(&mut cfg.paths.checkpoint, &self.checkpoint);
        set(&mut cfg.infer.scene_seed, &self.seed);
        if self.dump_tokens {
            cfg.infer.dump_tokens = true;
        }
        if self.no_cot {
            cfg.eval.cot = false;
        }
        set(&mut cfg.eval.max_new_tokens, &self.max_new_tokens);
    }
}
