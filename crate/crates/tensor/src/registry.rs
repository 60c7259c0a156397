//! Named parameters, the Adam optimizer and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Entry {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Learnable tensors keyed by dotted path, plus per-parameter Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: BTreeMap<String, Entry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(TensorError::DuplicateParam(path));
        }
        let n = value.len();
        self.entries.insert(
            path,
            Entry {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.value)
    }

    /// Mutable access to a parameter value. The shape cannot change.
    pub fn value_mut(&mut self, path: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(path).map(|e| e.value.data_mut())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn step_count(&self, path: &str) -> Option<u64> {
        self.entries.get(path).map(|e| e.step)
    }

    /// One bias-corrected Adam update for every path present in `grads`.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        for (path, g) in grads {
            let entry = self
                .entries
                .get(path)
                .ok_or_else(|| TensorError::UnknownParam(path.clone()))?;
            if entry.value.shape() != g.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!(
                        "gradient {:?} does not match parameter `{path}` {:?}",
                        g.shape(),
                        entry.value.shape()
                    ),
                ));
            }
        }
        for (path, g) in grads {
            let e = self.entries.get_mut(path).expect("checked above");
            e.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(e.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(e.step as i32);
            let value = e.value.data_mut();
            for (i, (x, &gi)) in value.iter_mut().zip(g.data()).enumerate() {
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * gi;
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Writes `<prefix>.idx.json` and `<prefix>.bin`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (idx_path, bin_path) = checkpoint_paths(prefix);
        let mut index = BTreeMap::new();
        let mut blob = Vec::with_capacity(self.numel() * 8);
        for (path, e) in &self.entries {
            index.insert(
                path.clone(),
                IndexEntry {
                    shape: e.value.shape().to_vec(),
                    offset: blob.len() as u64,
                },
            );
            for v in e.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&index).map_err(|e| TensorError::Checkpoint {
            path: idx_path.display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(&idx_path, json)?;
        fs::write(&bin_path, blob)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamRegistry::save`]. Adam state starts fresh.
    pub fn load(prefix: &Path) -> Result<Self> {
        let (idx_path, bin_path) = checkpoint_paths(prefix);
        let ck_err = |p: &Path, detail: String| TensorError::Checkpoint {
            path: p.display().to_string(),
            detail,
        };
        let idx_text =
            fs::read_to_string(&idx_path).map_err(|e| ck_err(&idx_path, e.to_string()))?;
        let index: BTreeMap<String, IndexEntry> =
            serde_json::from_str(&idx_text).map_err(|e| ck_err(&idx_path, e.to_string()))?;
        let blob = fs::read(&bin_path).map_err(|e| ck_err(&bin_path, e.to_string()))?;
        let mut reg = ParamRegistry::new();
        for (path, entry) in index {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(ck_err(
                    &bin_path,
                    format!(
                        "`{path}` needs bytes {start}..{end}, blob has {}",
                        blob.len()
                    ),
                ));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            reg.insert(path, Tensor::new(entry.shape, data)?)?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    shape: Vec<usize>,
    offset: u64,
}

/// `(<prefix>.idx.json, <prefix>.bin)`
pub fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let base = prefix.as_os_str().to_owned();
    let mut idx = base.clone();
    idx.push(".idx.json");
    let mut bin = base;
    bin.push(".bin");
    (PathBuf::from(idx), PathBuf::from(bin))
}

/// Step decay: `base_lr · decay^⌊step / interval⌋`.
pub fn lr_schedule(step: u64, base_lr: f64, decay: f64, interval: u64) -> f64 {
    assert!(interval > 0, "lr_schedule interval must be positive");
    base_lr * decay.powi((step / interval) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(path: &str, g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(path.to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        reg.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(reg.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr · g / (|g| + eps).
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        reg.adam_step(&grads("w", 1.0), &cfg).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert_eq!(reg.get("w").unwrap().item(), expected);
        assert!((reg.get("w").unwrap().item() - 0.9).abs() < 1e-8);
        assert_eq!(reg.step_count("w"), Some(1));
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut prev = 1.0;
        for _ in 0..2 {
            reg.adam_step(&grads("w", 1.0), &cfg).unwrap();
            let w = reg.get("w").unwrap().item();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let err = reg
            .adam_step(&grads("w", 1.0), &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("adam_step"));
        assert_eq!(reg.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            reg.insert("w", Tensor::scalar(2.0)),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_schedule(0, 1e-4, 0.7, 40), 1e-4);
        assert!((lr_schedule(40, 1e-4, 0.7, 40) - 7e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(39, 1e-4, 0.7, 40), 1e-4);
        for step in [0, 1, 77, 10_000] {
            assert_eq!(lr_schedule(step, 3e-3, 1.0, 5), 3e-3);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ParamRegistry::new();
        reg.insert(
            "a.w",
            Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, 3.25]).unwrap(),
        )
        .unwrap();
        reg.insert("b", Tensor::vector(vec![f64::MAX, 0.1]))
            .unwrap();
        let prefix = dir.path().join("ck");
        reg.save(&prefix).unwrap();
        assert!(dir.path().join("ck.idx.json").exists());
        assert!(dir.path().join("ck.bin").exists());
        let back = ParamRegistry::load(&prefix).unwrap();
        for (p, t) in reg.iter() {
            assert_eq!(back.get(p).unwrap(), t);
        }
        let idx: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("ck.idx.json")).unwrap())
                .unwrap();
        assert_eq!(idx["b"]["offset"], 32);
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let err = ParamRegistry::load(Path::new("/nonexistent/ck")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.idx.json"));
    }
}
