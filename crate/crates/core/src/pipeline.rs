//! End-to-end operations shared by the command line and the tests:
//! checkpoint glue, guided generation, evaluation and ablation runs.

use std::collections::BTreeMap;
use std::path::Path;

use fsc_tensor::{AdamW, Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{ControlMode, MatchingCache};
use crate::backbone::NULL_DESCRIPTOR;
use crate::checkpoint::{frozen_after, Checkpoint, Manifest, Stage, StageRecord, FORMAT_VERSION};
use crate::config::{InferenceConfig, RunConfig};
use crate::encoders::{is_registered, register_task, task_bias_ratio, BACKBONE};
use crate::error::{CoreError, Result};
use crate::image::{grayscale, quantize};
use crate::metrics::{miou, mse, ssim, summarize};
use crate::params::{Binder, Partition, Scope};
use crate::sched::{sample_loop, Guidance};
use crate::tasks::{
    blob_map, depth_map, extract_condition, labels_from_seg, recover_scene, seg_labels, Background, Metric, Pair,
    ScenePool, SceneSpec, SupportSet, TaskKind, PALETTE,
};
use crate::trainer::{finetune, from_model, meta_train, optimizer, stack_images, Model, TrainReport};

/// Largest allowed ratio of one task's bias copy to the shared condition encoder.
pub const TASK_RATIO_CAP: f64 = 0.05;

/// Wraps a model's parameters for saving.
pub fn to_checkpoint<T: Scalar>(
    model: &Model<T>,
    stage: Stage,
    provenance: Vec<StageRecord>,
    warnings: Vec<String>,
    optimizer: Option<AdamW<T>>,
) -> Checkpoint<T> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: model.cfg.config_hash(),
        model_hash: model.cfg.model_hash(),
        stage,
        control_mode: model.has_adapter().then(|| model.adapter.mode()),
        provenance,
        warnings,
        tasks: Vec::new(),
        partitions: Vec::new(),
        total_params: 0,
        optimizer: None,
    };
    Checkpoint { manifest, store: model.store.clone(), optimizer }
}

/// Loads a checkpoint as a model under `cfg`, rejecting architecture mismatches.
pub fn load_model<T: Scalar>(dir: &Path, cfg: &RunConfig) -> Result<(Model<T>, Checkpoint<T>)> {
    let ck = Checkpoint::<T>::load(dir)?;
    if ck.manifest.model_hash != cfg.model_hash() {
        return Err(CoreError::config(
            "backbone/schedule/adapter",
            format!("checkpoint {} was built with a different model configuration", dir.display()),
        ));
    }
    let mode = ck.manifest.control_mode.unwrap_or_else(|| cfg.train.ablation.control_mode());
    let mut cfg = cfg.clone();
    cfg.train.ablation.no_matching = mode == ControlMode::Direct;
    let model = Model::from_store(cfg, mode, ck.store.clone())?;
    Ok((model, ck))
}

fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    seed.wrapping_add((chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Samples one image per query `(condition, descriptor)`.
///
/// With `control = Some((task, support))` the first `support_pairs_at_inference`
/// support pairs drive the adapter; with `None` only the backbone is used.
/// Returned images are in `[0, 1]`, quantized to 8 bits.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    control: Option<(&str, &SupportSet)>,
    queries: &[(&Tensor<f32>, usize)],
    inf: &InferenceConfig,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let bc = &model.cfg.backbone;
    let frozen = |_: &str| false;
    let backbone = Scope::new(BACKBONE);
    let mut out = Vec::with_capacity(queries.len());
    for (ci, chunk) in queries.chunks(inf.batch.max(1)).enumerate() {
        let n = chunk.len();
        let cache: Option<MatchingCache<T>> = match control {
            None => None,
            Some((task, support)) => {
                let k = inf.support_pairs_at_inference;
                if support.len() < k || k == 0 {
                    return Err(CoreError::SupportTooSmall { got: support.len(), need: k.max(1) });
                }
                let mut g = Graph::new();
                let mut b = Binder::new(&model.store, &frozen);
                let pairs = &support.pairs[..k];
                let si = g.constant(stack_images(&pairs.iter().map(|p| &p.image).collect::<Vec<_>>())?);
                let sc = g.constant(stack_images(&pairs.iter().map(|p| &p.condition).collect::<Vec<_>>())?);
                let enc = model.adapter.encode_support(&mut g, &mut b, task, si, sc)?;
                let qc = g.constant(stack_images(&chunk.iter().map(|q| q.0).collect::<Vec<_>>())?);
                Some(model.adapter.precompute(&mut g, &mut b, task, qc, &enc)?)
            }
        };
        let desc: Vec<usize> = chunk.iter().map(|q| q.1).collect();
        let nulls = vec![NULL_DESCRIPTOR; n];
        let denoise = |z: &Tensor<T>, t: usize, branch: Guidance| -> Result<Tensor<T>> {
            let mut g = Graph::new();
            let mut b = Binder::new(&model.store, &frozen);
            let ts = vec![t; n];
            let (d, use_control) = match branch {
                Guidance::Conditional => (&desc, true),
                Guidance::Unconditional => (&nulls, !inf.cfg_null_control),
            };
            let controls = match (&cache, use_control) {
                (Some(c), true) => Some(model.adapter.control_from_cache(&mut g, &mut b, c, &ts)?),
                _ => None,
            };
            let zv = g.constant(z.clone());
            let eps = model.unet.forward(&mut g, &mut b, &backbone, zv, &ts, d, controls.as_deref())?;
            Ok(g.value(eps).clone())
        };
        let shape = [n, bc.in_channels, bc.image_size, bc.image_size];
        let z = sample_loop(denoise, &shape, &model.sched, inf.steps, inf.cfg_scale, chunk_seed(seed, ci))?;
        for i in 0..n {
            out.push(quantize(&from_model(&z.index0(i)?)));
        }
    }
    Ok(out)
}

fn blank_spec() -> SceneSpec {
    SceneSpec { seed: 0, background: Background { direction: 0, from: [0.0; 3], to: [0.0; 3] }, shapes: Vec::new() }
}

fn first_channel(img: &Tensor<f32>) -> Vec<f32> {
    let [_, h, w] = img.shape() else { return Vec::new() };
    img.data()[..h * w].to_vec()
}

/// Task metric between the condition re-extracted from `generated` and `query`.
/// Mean squared errors are on `[0, 1]` maps, scaled by 100 for depth.
pub fn controllability(task: TaskKind, generated: &Tensor<f32>, query: &Tensor<f32>) -> Result<f64> {
    if generated.shape() != query.shape() {
        return Err(CoreError::Shape(format!("generated {:?} vs query {:?}", generated.shape(), query.shape())));
    }
    let h = generated.shape()[1];
    match task {
        TaskKind::Edge | TaskKind::InvEdge | TaskKind::DilatedEdge => {
            let re = extract_condition(generated, &blank_spec(), task)?;
            ssim(&grayscale(&re), &grayscale(query), h, h)
        }
        TaskKind::Seg => {
            let spec = recover_scene(generated)?;
            miou(&seg_labels(&spec, h), &labels_from_seg(query), PALETTE.len())
        }
        TaskKind::Depth => Ok(100.0 * mse(&depth_map(&recover_scene(generated)?, h), &first_channel(query))?),
        TaskKind::Blob => mse(&blob_map(&recover_scene(generated)?, h), &first_channel(query)),
    }
}

/// `+1` when larger metric values mean better control, `-1` otherwise.
pub fn orientation(metric: Metric) -> f64 {
    match metric {
        Metric::Ssim | Metric::Miou => 1.0,
        Metric::Mse => -1.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub metric: Metric,
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn new(task: TaskKind, per_sample: Vec<f64>, config_hash: String, checkpoint_id: String) -> Self {
        let s = summarize(&per_sample);
        EvalReport {
            task_id: task.id().to_string(),
            metric: task.metric(),
            n_samples: per_sample.len(),
            per_sample,
            mean: s.mean,
            std: s.std,
            config_hash,
            checkpoint_id,
        }
    }

    /// Mean oriented so that larger is better.
    pub fn controllability(&self) -> f64 {
        orientation(self.metric) * self.mean
    }
}

/// Generates for every eval query and scores it against its condition.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    task: TaskKind,
    support: Option<&SupportSet>,
    eval: &[Pair],
    inf: &InferenceConfig,
    seed: u64,
    checkpoint_id: &str,
) -> Result<(EvalReport, Vec<Tensor<f32>>)> {
    if let Some(s) = support {
        let support_seeds: Vec<u64> = s.pairs.iter().map(|p| p.seed).collect();
        let eval_seeds: Vec<u64> = eval.iter().map(|p| p.seed).collect();
        crate::dataset::check_disjoint(&support_seeds, &eval_seeds)?;
    }
    let queries: Vec<(&Tensor<f32>, usize)> = eval.iter().map(|p| (&p.condition, p.descriptor)).collect();
    let images = generate(model, support.map(|s| (task.id(), s)), &queries, inf, seed)?;
    let scores =
        images.iter().zip(eval).map(|(img, p)| controllability(task, img, &p.condition)).collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::new(task, scores, model.cfg.config_hash(), checkpoint_id.to_string()), images))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub partition: Partition,
    pub tensors: usize,
    pub params: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub stage: Stage,
    pub partitions: Vec<PartitionRow>,
    pub total: usize,
    /// Per registered task: its bias count over the shared condition encoder's.
    pub task_ratios: BTreeMap<String, f64>,
    pub ratio_cap: f64,
}

impl ParamReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:>8} {:>12}  frozen\n", "partition", "tensors", "params");
        for r in &self.partitions {
            s += &format!(
                "{:<20} {:>8} {:>12}  {}\n",
                r.partition.name(),
                r.tensors,
                r.params,
                if r.frozen { "yes" } else { "no" }
            );
        }
        s += &format!("{:<20} {:>8} {:>12}\n", "total", "", self.total);
        for (t, r) in &self.task_ratios {
            s += &format!("task {t}: bias ratio {r:.4} (cap {})\n", self.ratio_cap);
        }
        s
    }
}

/// Partition table for a loaded checkpoint; fails on inconsistent totals or oversized task biases.
pub fn param_report<T: Scalar>(ck: &Checkpoint<T>) -> Result<ParamReport> {
    let m = &ck.manifest;
    let partitions: Vec<PartitionRow> = Partition::ALL
        .into_iter()
        .map(|p| PartitionRow {
            partition: p,
            tensors: ck.store.partition(p).count(),
            params: ck.store.count(p),
            frozen: frozen_after(m.stage, p),
        })
        .collect();
    let sum: usize = partitions.iter().map(|r| r.params).sum();
    if sum != m.total_params {
        return Err(CoreError::Data(format!(
            "partitions hold {sum} parameters but the manifest says {}",
            m.total_params
        )));
    }
    let task_ratios: BTreeMap<String, f64> =
        ck.store.task_ids().into_iter().map(|t| (t.clone(), task_bias_ratio(&ck.store, &t))).collect();
    if let Some((t, r)) = task_ratios.iter().find(|(_, r)| **r >= TASK_RATIO_CAP) {
        return Err(CoreError::Data(format!("task `{t}` bias ratio {r:.4} exceeds {TASK_RATIO_CAP}")));
    }
    Ok(ParamReport { stage: m.stage, partitions, total: sum, task_ratios, ratio_cap: TASK_RATIO_CAP })
}

/// Clones the encoders from a pretrained backbone and meta-trains an adapter of the given kind.
pub fn meta_trained<T: Scalar>(
    pretrained: &Model<T>,
    mode: ControlMode,
    pool: &ScenePool,
    steps: usize,
    seed: u64,
    log: impl FnMut(usize, f64),
) -> Result<(Model<T>, TrainReport, Option<String>)> {
    let mut cfg = pretrained.cfg.clone();
    cfg.train.ablation.no_matching = mode == ControlMode::Direct;
    cfg.train.seed = seed;
    let mut backbone = crate::params::ParamStore::new();
    for (k, t) in pretrained.store.with_prefix(BACKBONE) {
        backbone.insert(k.clone(), t.clone())?;
    }
    let mut model = Model::from_store(cfg, mode, backbone)?;
    let warning = model.attach_adapter(true)?;
    let mut opt = optimizer(model.cfg.train.learning_rate, model.cfg.train.weight_decay);
    let report = meta_train(&mut model, pool, &mut opt, 0, steps, log)?;
    Ok((model, report, warning))
}

/// Ablation arms compared on a novel task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMatching,
    NoFinetune,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoMatching, Variant::NoFinetune];

    pub fn mode(self) -> ControlMode {
        match self {
            Variant::NoMatching => ControlMode::Direct,
            _ => ControlMode::Matching,
        }
    }

    pub fn finetunes(self) -> bool {
        self != Variant::NoFinetune
    }
}

/// Prepares a meta-trained model for a novel task: registers its biases and,
/// when `tune` is set, fine-tunes on the support set.
pub fn adapt<T: Scalar>(
    meta: &Model<T>,
    support: &SupportSet,
    tune: bool,
    seed: u64,
    log: impl FnMut(usize, f64),
) -> Result<(Model<T>, Option<TrainReport>)> {
    let mut model = meta.clone();
    let id = support.task.id();
    if tune {
        let fc = model.cfg.finetune.clone();
        let report = finetune(&mut model, support, &fc, seed, log)?;
        Ok((model, Some(report)))
    } else {
        if !is_registered(&model.store, id) {
            register_task(&mut model.store, &model.unet, id)?;
        }
        Ok((model, None))
    }
}
