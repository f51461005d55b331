//! Checkpoint directories: `manifest.json` plus one raw little-endian file per tensor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsc_tensor::{AdamW, AdamWConfig, Moments, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::ControlMode;
use crate::error::{CoreError, Result};
use crate::params::{ParamStore, Partition};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    MetaTrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub config_hash: String,
    pub steps: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub partition: Partition,
    pub frozen: bool,
    pub params: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub model_hash: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_mode: Option<ControlMode>,
    pub provenance: Vec<StageRecord>,
    pub warnings: Vec<String>,
    pub tasks: Vec<String>,
    pub partitions: Vec<PartitionEntry>,
    pub total_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
}

impl Manifest {
    /// Short identifier derived from the manifest contents.
    pub fn id(&self) -> String {
        let v = serde_json::to_value(self).expect("manifest serializes");
        crate::config::hash_value(&v)[..16].to_string()
    }
}

/// Partitions that no stage after pretraining may modify.
pub fn frozen_after(stage: Stage, p: Partition) -> bool {
    match p {
        Partition::ImageEncoder => true,
        Partition::BackbonePhi => stage >= Stage::Pretrain,
        _ => false,
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub store: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

fn tensor_file(prefix: &str, name: &str) -> String {
    format!("{prefix}/{name}.bin")
}

fn write_tensor<T: Scalar>(root: &Path, file: &str, t: &Tensor<T>) -> Result<()> {
    let path = root.join(file);
    let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    std::fs::write(&path, bytes).map_err(|e| CoreError::io(path, e))
}

fn read_tensor<T: Scalar>(root: &Path, e: &TensorEntry) -> Result<Tensor<T>> {
    let path = root.join(&e.file);
    let bytes = std::fs::read(&path).map_err(|err| CoreError::io(&path, err))?;
    let n: usize = e.shape.iter().product();
    let data: Vec<T> = match e.dtype.as_str() {
        "f32" if bytes.len() == 4 * n => bytes.chunks_exact(4).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
        "f64" if bytes.len() == 8 * n => bytes.chunks_exact(8).map(|c| T::from_f64c(f64::read_le(c))).collect(),
        "f32" | "f64" => {
            return Err(CoreError::Data(format!(
                "{}: {} bytes for shape {:?} ({})",
                e.file,
                bytes.len(),
                e.shape,
                e.dtype
            )))
        }
        other => return Err(CoreError::Data(format!("{}: unsupported dtype `{other}`", e.file))),
    };
    Ok(Tensor::new(&e.shape, data)?)
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes atomically: everything goes to a sibling temp directory that is then renamed over `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        let m = &mut self.manifest;
        m.format_version = FORMAT_VERSION;
        m.tasks = self.store.task_ids();
        m.total_params = self.store.total();
        m.partitions = Partition::ALL
            .into_iter()
            .map(|p| PartitionEntry {
                partition: p,
                frozen: frozen_after(m.stage, p),
                params: self.store.count(p),
                tensors: self
                    .store
                    .partition(p)
                    .map(|(name, t)| TensorEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        dtype: T::DTYPE.to_string(),
                        file: tensor_file("tensors", name),
                    })
                    .collect(),
            })
            .collect();
        m.optimizer = self.optimizer.as_ref().map(|opt| OptimizerEntry {
            step: opt.step_count(),
            lr: opt.config.lr,
            weight_decay: opt.config.weight_decay,
            moments: opt
                .state()
                .iter()
                .flat_map(|(name, mo)| {
                    [("m", &mo.m), ("v", &mo.v)].map(|(k, t)| TensorEntry {
                        name: format!("{name}.{k}"),
                        shape: t.shape().to_vec(),
                        dtype: T::DTYPE.to_string(),
                        file: tensor_file("optimizer", &format!("{name}.{k}")),
                    })
                })
                .collect(),
        });

        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        let base = dir.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "checkpoint".into());
        let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
        }
        for sub in ["tensors", "optimizer"] {
            let p = tmp.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| CoreError::io(&p, e))?;
        }
        for (name, t) in self.store.iter() {
            write_tensor(&tmp, &tensor_file("tensors", name), t)?;
        }
        if let Some(opt) = &self.optimizer {
            for (name, mo) in opt.state() {
                write_tensor(&tmp, &tensor_file("optimizer", &format!("{name}.m")), &mo.m)?;
                write_tensor(&tmp, &tensor_file("optimizer", &format!("{name}.v")), &mo.v)?;
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let mpath = tmp.join(MANIFEST);
        std::fs::write(&mpath, text).map_err(|e| CoreError::io(&mpath, e))?;

        let old = parent.join(format!(".{base}.old-{}", std::process::id()));
        if dir.exists() {
            std::fs::rename(dir, &old).map_err(|e| CoreError::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| CoreError::io(dir, e))?;
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| CoreError::io(&old, e))?;
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(CoreError::Data(format!("unsupported checkpoint format {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint<T>> {
        let manifest = Self::read_manifest(dir)?;
        let mut store = ParamStore::new();
        let mut total = 0;
        for part in &manifest.partitions {
            for e in &part.tensors {
                if Partition::of(&e.name) != Some(part.partition) {
                    return Err(CoreError::Data(format!("tensor `{}` listed under {:?}", e.name, part.partition)));
                }
                let t = read_tensor::<T>(dir, e)?;
                total += t.numel();
                store.insert(e.name.clone(), t)?;
            }
        }
        if total != manifest.total_params {
            return Err(CoreError::Data(format!("manifest total {} but tensors hold {total}", manifest.total_params)));
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut state: BTreeMap<String, Moments<T>> = BTreeMap::new();
                for pair in o.moments.chunks(2) {
                    let [m, v] = pair else { return Err(CoreError::Data("unpaired optimizer moments".into())) };
                    let name =
                        m.name.strip_suffix(".m").ok_or_else(|| CoreError::Data(format!("bad moment `{}`", m.name)))?;
                    state.insert(name.to_string(), Moments { m: read_tensor(dir, m)?, v: read_tensor(dir, v)? });
                }
                let config = AdamWConfig { lr: o.lr, weight_decay: o.weight_decay, ..AdamWConfig::default() };
                Some(AdamW::with_state(config, o.step, state))
            }
        };
        Ok(Checkpoint { manifest, store, optimizer })
    }
}

/// Default checkpoint location for a stage under `root`.
pub fn stage_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}
