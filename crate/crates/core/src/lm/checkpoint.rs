//! Checkpoint directories: `manifest.json`, `params.bin` (little-endian
//! `f32`) and `vocab.txt`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{LmadError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_hash: String,
    pub plora_mode: String,
    /// Branch keys present in the bank, e.g. `planning` or `perception.open`.
    pub branch_keys: Vec<String>,
    pub step: usize,
    /// Effective run configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
    pub vocab: Vocabulary,
}

pub fn save(dir: &Path, store: &ParamStore, vocab: &Vocabulary, mut manifest: Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LmadError::io(dir, e))?;
    let mut bytes = Vec::new();
    manifest.tensors.clear();
    manifest.vocab_hash = vocab.hash();
    for (_, name, t) in store.iter() {
        manifest.tensors.push(TensorEntry { name: name.to_string(), shape: [t.rows(), t.cols()], offset: bytes.len() });
        for &x in t.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let p = dir.join(PARAMS_FILE);
    std::fs::write(&p, bytes).map_err(|e| LmadError::io(&p, e))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| LmadError::io(&p, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| LmadError::io(&p, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(LmadError::Checkpoint(format!(
            "vocab.txt hash {} does not match manifest hash {}",
            vocab.hash(),
            manifest.vocab_hash
        )));
    }
    let p = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&p).map_err(|e| LmadError::io(&p, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset + 4 * n;
        let raw = bytes
            .get(e.offset..end)
            .ok_or_else(|| LmadError::Checkpoint(format!("{} extends past the end of {PARAMS_FILE}", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        tensors.push((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)));
    }
    Ok(Checkpoint { manifest, tensors, vocab })
}

/// Copies checkpoint values into `store`; every store parameter must be present with the same shape.
pub fn restore(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &Tensor> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = by_name.get(name.as_str()).ok_or_else(|| LmadError::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(LmadError::Checkpoint(format!(
                "parameter {name} has shape {:?} in the checkpoint, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, (*t).clone());
    }
    if ckpt.tensors.len() != store.len() {
        return Err(LmadError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.tensors.len(),
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_with_f32_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.randn("a", 3, 4, 1.0, &mut rng);
        store.randn("b", 1, 2, 1.0, &mut rng);
        let vocab = Vocabulary::build(std::iter::empty());
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            vocab_hash: String::new(),
            plora_mode: "task".into(),
            branch_keys: vec!["perception".into()],
            step: 3,
            config: serde_json::json!({"k": 1}),
            tensors: vec![],
        };
        save(dir.path(), &store, &vocab, m).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.manifest.tensors[1].offset, 48);
        let mut other = store.clone();
        other.set(other.id("a").unwrap(), Tensor::zeros(3, 4));
        restore(&mut other, &ck).unwrap();
        for (id, _, t) in store.iter() {
            let want = t.map(|x| x as f32 as f64);
            assert_eq!(other.get(id), &want);
        }

        let mut bigger = store.clone();
        bigger.zeros("c", 1, 1);
        assert!(restore(&mut bigger, &ck).is_err());
    }
}
