//! Cached reference optima `f*` keyed by a hash of the dataset and model.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use svrg_core::analysis;
use svrg_core::{LossKind, LossModel, SparseDataset};

pub const REFERENCE_TOL: f64 = 1e-12;
pub const REFERENCE_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub x: Vec<f64>,
}

/// Hex SHA-256 over the examples, loss and `λ`.
pub fn content_hash(ds: &SparseDataset, model: &LossModel) -> String {
    let mut h = Sha256::new();
    h.update((ds.n() as u64).to_le_bytes());
    h.update((ds.dim() as u64).to_le_bytes());
    for ex in ds.examples() {
        h.update(ex.label().to_le_bytes());
        h.update((ex.nnz() as u64).to_le_bytes());
        for (i, v) in ex.indices().iter().zip(ex.values()) {
            h.update((*i as u64).to_le_bytes());
            h.update(v.to_le_bytes());
        }
    }
    match model.kind() {
        LossKind::Logistic => h.update(b"logistic"),
        LossKind::Hsvm { epsilon } => {
            h.update(b"hsvm");
            h.update(epsilon.to_le_bytes());
        }
    }
    h.update(model.lambda().to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// In-memory cache, optionally backed by a directory of JSON files.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Reference>>,
}

impl ReferenceCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            memory: Mutex::new(HashMap::new()),
        }
    }

    /// Reference solution of the folded objective.
    pub fn get(&self, ds: &SparseDataset, model: &LossModel) -> Reference {
        let key = content_hash(ds, model);
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&key) {
            return hit.clone();
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        let on_disk = path
            .as_ref()
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|text| serde_json::from_str::<Reference>(&text).ok());
        let reference = on_disk.unwrap_or_else(|| {
            let sol = analysis::reference_solution(model, ds, REFERENCE_TOL, REFERENCE_MAX_ITER);
            let r = Reference {
                f_star: sol.f_star,
                grad_norm: sol.grad_norm,
                iterations: sol.iterations,
                x: sol.x,
            };
            if let Some(p) = &path {
                // a failed cache write only costs a recomputation later
                let _ = fs::create_dir_all(p.parent().expect("joined path"))
                    .and_then(|_| fs::write(p, serde_json::to_string(&r).expect("serializable")));
            }
            r
        });
        self.memory.lock().expect("cache lock").insert(key, reference.clone());
        reference
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use svrg_core::data::generate_synthetic;
    use svrg_core::Mode;

    #[test]
    fn hash_separates_models() {
        let ds = generate_synthetic(20, 3, 0.0, 1).unwrap();
        let a = LossModel::new(LossKind::Logistic, 0.1, Mode::Folded, &ds).unwrap();
        let b = LossModel::new(LossKind::Logistic, 0.2, Mode::Folded, &ds).unwrap();
        assert_ne!(content_hash(&ds, &a), content_hash(&ds, &b));
        assert_eq!(content_hash(&ds, &a), content_hash(&ds, &a.clone()));
    }

    #[test]
    fn disk_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(30, 3, 0.0, 2).unwrap();
        let model = LossModel::new(LossKind::Logistic, 0.1, Mode::Folded, &ds).unwrap();
        let first = ReferenceCache::new(Some(dir.path().into())).get(&ds, &model);
        assert!(first.grad_norm < REFERENCE_TOL);
        let second = ReferenceCache::new(Some(dir.path().into())).get(&ds, &model);
        assert_eq!(first, second);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
