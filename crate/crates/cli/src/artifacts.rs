//! On-disk layout: layered configs, run directories, datasets and checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lmad_core::config::{RunConfig, SplitName};
use lmad_core::lm::checkpoint::{self, Manifest};
use lmad_core::lm::Vocabulary;
use lmad_core::model::LmadModel;
use lmad_core::scene::{read_records, GenConfig, QARecord};
use lmad_core::{LmadError, Result};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// `base` with the keys of the TOML file at `path` merged over it.
pub fn layered(base: &RunConfig, path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(base.clone()) };
    let text = std::fs::read_to_string(path).map_err(|e| LmadError::io(path, e))?;
    let overlay: toml::Table = toml::from_str(&text)?;
    let mut merged = toml::Table::try_from(base).map_err(|e| LmadError::Config(format!("cannot serialize config: {e}")))?;
    merge(&mut merged, overlay);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| LmadError::Config(format!("{}: {e}", path.display())))
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Creates the run directory: `paths.run_dir` when set, else
/// `out_dir/<command>-<UTC timestamp>` with a numeric suffix on collision.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = match &cfg.paths.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            let base = cfg.out_dir.join(format!("{command}-{stamp}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                k += 1;
                dir = PathBuf::from(format!("{}-{k}", base.display()));
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| LmadError::io(&dir, e))?;
    Ok(dir)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| LmadError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Record counts keyed by task, then question type.
pub type Counts = BTreeMap<String, BTreeMap<String, usize>>;

pub fn counts(records: &[QARecord]) -> Counts {
    let mut c = Counts::new();
    for r in records {
        *c.entry(r.task.to_string()).or_default().entry(r.qtype.to_string()).or_default() += 1;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub first_seed: u64,
    pub scenes: usize,
    pub split: f64,
    pub gen: GenConfig,
    pub vocab_hash: String,
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub counts: BTreeMap<String, Counts>,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join(DATASET_MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| LmadError::io(&p, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        Ok(Self { dir: dir.to_path_buf(), manifest, vocab })
    }

    pub fn records(&self, split: SplitName) -> Result<Vec<QARecord>> {
        read_records(&self.dir.join(split.file_name()))
    }
}

pub fn required<'a>(slot: &'a Option<PathBuf>, flag: &str, key: &str) -> Result<&'a Path> {
    slot.as_deref().ok_or_else(|| LmadError::Config(format!("{flag} is required (or set {key} in the config file)")))
}

pub fn save_checkpoint(dir: &Path, model: &LmadModel, cfg: &RunConfig, step: usize) -> Result<()> {
    let manifest = Manifest {
        vocab_hash: String::new(),
        plora_mode: model.cfg.plora.mode.to_string(),
        branch_keys: model.cfg.plora.mode.branch_keys().iter().map(|k| k.name()).collect(),
        step,
        config: serde_json::to_value(cfg)?,
        tensors: Vec::new(),
    };
    checkpoint::save(dir, &model.store, &model.vocab, manifest)
}

/// The configuration stored in a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<(checkpoint::Checkpoint, RunConfig)> {
    let ckpt = checkpoint::load(dir)?;
    let trained: RunConfig = serde_json::from_value(ckpt.manifest.config.clone())?;
    Ok((ckpt, trained))
}

/// Builds the model described by `cfg` and fills it from `ckpt`.
pub fn restore_model(ckpt: &checkpoint::Checkpoint, cfg: &RunConfig) -> Result<LmadModel> {
    let mut model = LmadModel::new(cfg.model.clone(), ckpt.vocab.clone(), cfg.data.gen.horizon)?;
    checkpoint::restore(&mut model.store, ckpt)?;
    Ok(model)
}

/// Rejects a dataset whose vocabulary differs from the checkpoint's.
pub fn check_vocab(dataset: &Dataset, model: &LmadModel) -> Result<()> {
    let (d, c) = (dataset.vocab.hash(), model.vocab.hash());
    if d != c {
        return Err(LmadError::Checkpoint(format!(
            "vocabulary mismatch: dataset {} has hash {d}, checkpoint has hash {c}",
            dataset.dir.display()
        )));
    }
    Ok(())
}
