//! Line-delimited JSON storage of QA records and the train/validation split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::generator::{gen_scene, GenConfig};
use super::qa::{gen_qa, QARecord};
use crate::error::{LmadError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<QARecord>,
    pub val: Vec<QARecord>,
}

/// Records for scenes `first_seed..first_seed + scenes`, generated in
/// parallel and returned in seed order.
pub fn generate_records(first_seed: u64, scenes: usize, cfg: &GenConfig) -> Result<Vec<QARecord>> {
    cfg.validate()?;
    let per_scene: Vec<Result<Vec<QARecord>>> = (0..scenes as u64)
        .into_par_iter()
        .map(|i| gen_scene(first_seed + i, cfg).and_then(|s| gen_qa(&s)))
        .collect();
    let mut out = Vec::new();
    for r in per_scene {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[QARecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| LmadError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| LmadError::io(path, e))?;
    }
    w.flush().map_err(|e| LmadError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<QARecord>> {
    let f = File::open(path).map_err(|e| LmadError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LmadError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| LmadError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Deterministic record-level split: a seeded shuffle picks the first
/// `round(train_fraction · n)` records for training; both halves keep the
/// original record order.
pub fn split_records(records: &[QARecord], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(LmadError::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let mut split = Split::default();
    for (r, t) in records.iter().zip(is_train) {
        if t {
            split.train.push(r.clone());
        } else {
            split.val.push(r.clone());
        }
    }
    Ok(split)
}
