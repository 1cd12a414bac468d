//! Named parameter store and checkpoint directories.
//!
//! A checkpoint is a directory with one MELT file per tensor and a
//! `manifest.json` mapping names to files and shapes. Extra JSON metadata
//! (topology, gating table) can ride along in the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::tensor::{read_melt_file, write_melt_file, Gradients, Tape, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub tensors: BTreeMap<String, ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.map
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copy in which the parameters selected by `watch` are tracked on `tape`.
    pub fn watched(&self, tape: &Tape, watch: impl Fn(&str) -> bool) -> ParamStore {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let t = if watch(k) { tape.watch(v) } else { v.detach() };
                (k.clone(), t)
            })
            .collect();
        ParamStore { map }
    }

    /// Gradients of the tracked entries of a [`watched`](Self::watched) copy,
    /// keyed by name. Tracked parameters that the loss never reached get
    /// explicit zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .filter(|(_, t)| t.is_tracked())
            .map(|(k, t)| {
                let g = grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    /// FNV-1a over names, shapes and value bits of the selected parameters.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut bytes = Vec::new();
        for (k, t) in self.map.iter().filter(|(k, _)| select(k)) {
            bytes.extend_from_slice(k.as_bytes());
            for d in t.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.map.extend(other.map);
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.map {
            let file = format!("{name}.melt");
            write_melt_file(dir.join(&file), t)?;
            tensors.insert(
                name.clone(),
                ManifestEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        let manifest = Manifest {
            format: "melt-dir/1".into(),
            tensors,
            meta,
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<(ParamStore, Manifest)> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
        let mut store = ParamStore::new();
        for (name, entry) in &manifest.tensors {
            if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
                return Err(Error::Format(format!("manifest: unsafe file name `{}`", entry.file)));
            }
            let t = read_melt_file(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::mismatch("checkpoint", t.shape(), &entry.shape));
            }
            store.insert(name.clone(), t);
        }
        Ok((store, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        s.insert("b", Tensor::scalar(7.0));
        s.save_dir(dir.path(), serde_json::json!({"k": 1})).unwrap();
        let (back, manifest) = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(manifest.meta["k"], 1);
        assert_eq!(back.checksum(|_| true), s.checksum(|_| true));
    }

    #[test]
    fn checksum_sees_single_bit_changes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3]));
        let before = s.checksum(|_| true);
        s.insert("w", Tensor::zeros(&[3]).with_value(1, -0.0));
        assert_ne!(before, s.checksum(|_| true));
        assert_eq!(s.checksum(|n| n != "w"), ParamStore::new().checksum(|_| true));
    }

    #[test]
    fn watched_tracks_only_selected() {
        let mut s = ParamStore::new();
        s.insert("train.w", Tensor::ones(&[2]));
        s.insert("frozen.w", Tensor::ones(&[2]));
        let tape = Tape::new();
        let w = s.watched(&tape, |n| n.starts_with("train."));
        assert!(w.get("train.w").unwrap().is_tracked());
        assert!(!w.get("frozen.w").unwrap().is_tracked());
        let loss = w.get("train.w").unwrap().mul(w.get("frozen.w").unwrap()).unwrap().sum().unwrap();
        let g = w.gradients(&tape.backward(&loss).unwrap());
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["train.w"]);
    }
}
