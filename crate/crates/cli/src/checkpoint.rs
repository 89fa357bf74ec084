//! Checkpoints: a JSON manifest next to a blob of little-endian `f64`s.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use paranet_core::nn::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "paranet-checkpoint/1";
pub const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// What the tensors belong to, e.g. `teacher` or `dataset`.
    pub kind: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub step: u64,
    pub seed: u64,
    /// TOML snapshot of the run configuration.
    pub config: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, seed: u64, config: String) -> Self {
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                kind: kind.into(),
                blob: format!("{kind}.bin"),
                step,
                seed,
                config,
                meta: BTreeMap::new(),
                tensors: Vec::new(),
            },
            blob: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> CliResult<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CliError::data(format!("tensor {name}: {} values for shape {shape:?}", data.len())));
        }
        if self.manifest.tensors.iter().any(|t| t.name == name) {
            return Err(CliError::data(format!("duplicate tensor {name}")));
        }
        let offset = self.blob.len() as u64;
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.manifest.tensors.push(TensorEntry {
            name: name.into(),
            shape: shape.to_vec(),
            dtype: DTYPE.into(),
            offset,
            length: (data.len() * 8) as u64,
        });
        Ok(())
    }

    /// Every tensor of `model`, in visiting order.
    pub fn push_module<M: Module<f64>>(&mut self, model: &M) -> CliResult<()> {
        let mut res = Ok(());
        model.visit("", &mut |name, t| {
            if res.is_ok() {
                res = self.push(name, t.shape(), t.data());
            }
        });
        res
    }

    pub fn entry(&self, name: &str) -> CliResult<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::data(format!("checkpoint has no tensor {name}")))
    }

    pub fn tensor(&self, name: &str) -> CliResult<(Vec<usize>, Vec<f64>)> {
        let e = self.entry(name)?;
        let bytes = &self.blob[e.offset as usize..(e.offset + e.length) as usize];
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn tensor_data(&self, name: &str) -> CliResult<Vec<f64>> {
        Ok(self.tensor(name)?.1)
    }

    /// Overwrites every tensor of `model` with the stored value of the same
    /// name. Missing, surplus or reshaped tensors are errors.
    pub fn restore<M: Module<f64>>(&self, model: &mut M) -> CliResult<()> {
        let mut res: CliResult<()> = Ok(());
        let mut seen = 0;
        model.visit_mut("", &mut |name, t: &mut Tensor<f64>| {
            if res.is_err() {
                return;
            }
            res = (|| {
                let (shape, data) = self.tensor(name)?;
                if shape != t.shape() {
                    return Err(CliError::config(format!(
                        "tensor {name} has shape {shape:?} in the checkpoint, {:?} in the model",
                        t.shape()
                    )));
                }
                t.assign(data)?;
                Ok(())
            })();
            seen += 1;
        });
        res?;
        if seen != self.manifest.tensors.len() {
            return Err(CliError::config(format!(
                "checkpoint holds {} tensors, model has {seen}",
                self.manifest.tensors.len()
            )));
        }
        Ok(())
    }

    fn check(&self) -> CliResult<()> {
        if self.manifest.format != FORMAT {
            return Err(CliError::data(format!("unknown checkpoint format {:?}", self.manifest.format)));
        }
        let mut spans: Vec<(u64, u64, &str)> =
            self.manifest.tensors.iter().map(|t| (t.offset, t.offset + t.length, t.name.as_str())).collect();
        spans.sort();
        for t in &self.manifest.tensors {
            let n: usize = t.shape.iter().product();
            if t.dtype != DTYPE || t.length != (n * 8) as u64 {
                return Err(CliError::data(format!("tensor {}: bad dtype or length", t.name)));
            }
        }
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CliError::data(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        if let Some(&(_, end, name)) = spans.last() {
            if end > self.blob.len() as u64 {
                return Err(CliError::data(format!("tensor {name} runs past the end of the blob")));
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<kind>.json` and the blob beside it; returns the manifest path.
    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        self.save_as(dir, &self.manifest.kind)
    }

    pub fn save_as(&self, dir: &Path, stem: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = self.manifest.clone();
        manifest.blob = format!("{stem}.bin");
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(dir.join(&manifest.blob), &self.blob)?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    /// Reads only the manifest.
    pub fn read_manifest(path: &Path) -> CliResult<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("bad checkpoint manifest {}: {e}", path.display())))
    }

    /// Reads a manifest and the blob it names, checking the tensor layout.
    pub fn load(path: &Path) -> CliResult<Self> {
        let manifest = Self::read_manifest(path)?;
        let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = std::fs::read(&blob_path)
            .map_err(|e| CliError::data(format!("cannot read checkpoint blob {}: {e}", blob_path.display())))?;
        let ckpt = Self { manifest, blob };
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> CliResult<T> {
        let v = self
            .manifest
            .meta
            .get(key)
            .ok_or_else(|| CliError::data(format!("checkpoint metadata lacks {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| CliError::data(format!("checkpoint metadata {key}: {e}")))
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) {
        self.manifest.meta.insert(key.into(), serde_json::to_value(value).expect("metadata serializes"));
    }
}
