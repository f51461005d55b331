//! On-disk datasets: `manifest.json`, `images/<pool>/<seed>.ppm` and
//! `<task>/<pool>/<seed>.ppm` condition maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::image::{read_ppm, write_ppm};
use crate::tasks::{
    extract_condition, pool_seeds, Metric, Pair, PoolKind, Scene, ScenePool, SceneSpec, Split, SupportSet, TaskKind,
};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const POOLS: [PoolKind; 3] = [PoolKind::Train, PoolKind::Support, PoolKind::Eval];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub count: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskKind,
    pub split: Split,
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub pool: String,
    pub seed: u64,
    pub descriptor: usize,
    pub image: String,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub data_hash: String,
    pub dataset_seed: u64,
    pub image_size: usize,
    pub pools: BTreeMap<String, PoolRecord>,
    pub tasks: Vec<TaskRecord>,
    pub records: Vec<SampleRecord>,
}

pub fn file_name(seed: u64) -> String {
    format!("{seed:016x}.ppm")
}

pub fn image_path(pool: PoolKind, seed: u64) -> PathBuf {
    Path::new("images").join(pool.name()).join(file_name(seed))
}

pub fn condition_path(task: TaskKind, pool: PoolKind, seed: u64) -> PathBuf {
    Path::new(task.id()).join(pool.name()).join(file_name(seed))
}

fn pool_size(cfg: &RunConfig, pool: PoolKind) -> usize {
    match pool {
        PoolKind::Train => cfg.tasks.train_scenes,
        PoolKind::Support => cfg.tasks.support_scenes,
        PoolKind::Eval => cfg.tasks.eval_scenes,
    }
}

/// Renders every pool and every task's conditions under `out`.
pub fn write_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let size = cfg.backbone.image_size;
    let tasks = cfg.tasks.all();
    let mut pools = BTreeMap::new();
    let mut records = Vec::new();
    for pool in POOLS {
        let seeds = pool_seeds(cfg.tasks.dataset_seed, pool, pool_size(cfg, pool));
        let scenes = ScenePool::render(&seeds, size);
        for s in &scenes.scenes {
            let rel = image_path(pool, s.seed);
            write_ppm(&out.join(&rel), &s.image)?;
            for &task in &tasks {
                let cond = extract_condition(&s.image, &s.spec, task)?;
                write_ppm(&out.join(condition_path(task, pool, s.seed)), &cond)?;
            }
            records.push(SampleRecord {
                pool: pool.name().to_string(),
                seed: s.seed,
                descriptor: s.spec.descriptor(),
                image: rel.to_string_lossy().replace('\\', "/"),
                spec: s.spec.clone(),
            });
        }
        pools.insert(pool.name().to_string(), PoolRecord { count: seeds.len(), seeds });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config_hash: cfg.config_hash(),
        data_hash: cfg.data_hash(),
        dataset_seed: cfg.tasks.dataset_seed,
        image_size: size,
        pools,
        tasks: tasks.iter().map(|&t| TaskRecord { task: t, split: t.default_split(), metric: t.metric() }).collect(),
        records,
    };
    let path = out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CoreError::Data(format!("unsupported dataset format {}", m.format_version)));
    }
    Ok(m)
}

/// Rejects a dataset built from different data settings than `cfg`.
pub fn check_compatible(m: &DatasetManifest, cfg: &RunConfig) -> Result<()> {
    if m.data_hash != cfg.data_hash() {
        return Err(CoreError::Data(format!(
            "dataset was built with data hash {} but the config has {}",
            &m.data_hash[..12.min(m.data_hash.len())],
            &cfg.data_hash()[..12]
        )));
    }
    Ok(())
}

fn records(m: &DatasetManifest, pool: PoolKind) -> impl Iterator<Item = &SampleRecord> {
    m.records.iter().filter(move |r| r.pool == pool.name())
}

pub fn load_pool(dir: &Path, m: &DatasetManifest, pool: PoolKind) -> Result<ScenePool> {
    let scenes = records(m, pool)
        .map(|r| Ok(Scene { seed: r.seed, image: read_ppm(&dir.join(&r.image))?, spec: r.spec.clone() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenePool { scenes })
}

/// Image/condition pairs of one pool, in lexicographic file order.
pub fn load_pairs(dir: &Path, m: &DatasetManifest, task: TaskKind, pool: PoolKind) -> Result<Vec<Pair>> {
    let mut recs: Vec<&SampleRecord> = records(m, pool).collect();
    recs.sort_by_key(|r| file_name(r.seed));
    recs.into_iter()
        .map(|r| {
            Ok(Pair {
                seed: r.seed,
                image: read_ppm(&dir.join(&r.image))?,
                condition: read_ppm(&dir.join(condition_path(task, pool, r.seed)))?,
                descriptor: r.descriptor,
            })
        })
        .collect()
}

pub fn load_support(dir: &Path, m: &DatasetManifest, task: TaskKind, shots: usize) -> Result<SupportSet> {
    let mut pairs = load_pairs(dir, m, task, PoolKind::Support)?;
    if pairs.len() < shots {
        return Err(CoreError::SupportTooSmall { got: pairs.len(), need: shots });
    }
    pairs.truncate(shots);
    Ok(SupportSet { task, pairs })
}

/// Fails when the support and eval pools share a scene seed.
pub fn check_disjoint(support: &[u64], eval: &[u64]) -> Result<()> {
    let s: std::collections::BTreeSet<u64> = support.iter().copied().collect();
    match eval.iter().find(|e| s.contains(e)) {
        Some(seed) => Err(CoreError::Data(format!("seed {seed:#x} appears in both the support and eval pools"))),
        None => Ok(()),
    }
}
