//! Optimization stages: backbone pretraining, episodic meta-training of the
//! adapter, and few-shot fine-tuning on a novel task.

use std::time::Instant;

use fsc_tensor::{AdamW, AdamWConfig, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, ControlMode};
use crate::backbone::{UNet, NULL_DESCRIPTOR};
use crate::checkpoint::Stage;
use crate::config::{FinetuneConfig, RunConfig};
use crate::encoders::{clone_encoders, is_registered, register_task, BACKBONE};
use crate::error::{CoreError, Result};
use crate::params::{apply_updates, task_prefix, Binder, ParamStore, Partition, Scope};
use crate::sched::{q_sample, NoiseSchedule};
use crate::tasks::{make_finetune_split, sample_episode, Pair, ScenePool, Split, SupportSet};

/// Backbone, adapter, schedule and parameters for one run.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: RunConfig,
    pub unet: UNet,
    pub adapter: Adapter,
    pub sched: NoiseSchedule<T>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized backbone only.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let unet = UNet::new(cfg.backbone.clone())?;
        let adapter = Adapter::new(cfg.adapter.clone(), cfg.train.ablation.control_mode(), unet.clone())?;
        let sched = cfg.schedule.build()?;
        let mut store = ParamStore::new();
        let mut rng = step_rng(cfg.train.seed, Stream::Init, 0);
        unet.init_params(&mut store, BACKBONE, &mut rng)?;
        Ok(Model { cfg, unet, adapter, sched, store })
    }

    /// Wraps parameters loaded from a checkpoint.
    pub fn from_store(cfg: RunConfig, mode: ControlMode, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let unet = UNet::new(cfg.backbone.clone())?;
        let adapter = Adapter::new(cfg.adapter.clone(), mode, unet.clone())?;
        let sched = cfg.schedule.build()?;
        let model = Model { cfg, unet, adapter, sched, store };
        for spec in model.unet.param_specs() {
            let name = format!("{BACKBONE}{}", spec.name);
            if model.store.get(&name)?.shape() != spec.shape.as_slice() {
                return Err(CoreError::Data(format!("`{name}` does not match the configured backbone")));
            }
        }
        Ok(model)
    }

    /// Clones `f` and `g`, registers the meta-train tasks and initializes the adapter.
    /// Returns the provenance warning, if any.
    pub fn attach_adapter(&mut self, pretrained: bool) -> Result<Option<String>> {
        let warning = clone_encoders(&mut self.store, &self.unet, pretrained)?;
        for t in self.cfg.tasks.meta_train.clone() {
            register_task(&mut self.store, &self.unet, t.id())?;
        }
        let mut rng = step_rng(self.cfg.train.seed, Stream::Init, 1);
        self.adapter.init_params(&mut self.store, &mut rng)?;
        Ok(warning)
    }

    pub fn has_adapter(&self) -> bool {
        self.store.count(Partition::ProjectionsZ) > 0
    }
}

/// Independent random streams, so each stage and step reproduces on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Pretrain = 2,
    Meta = 3,
    Finetune = 4,
    Validation = 5,
    Split = 6,
}

pub fn step_rng(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ step);
    rng
}

/// Maps `[0, 1]` images to the model range `[-1, 1]`.
pub fn to_model<T: Scalar>(img: &Tensor<f32>) -> Tensor<T> {
    img.map(|v| v * 2.0 - 1.0).cast()
}

pub fn from_model<T: Scalar>(img: &Tensor<T>) -> Tensor<f32> {
    img.cast::<f32>().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Stacks `[3, H, W]` images into a model-range batch.
pub fn stack_images<T: Scalar>(imgs: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = imgs.iter().map(|i| to_model(i)).collect();
    Ok(Tensor::stack(&items)?)
}

/// Per-element diffusion noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps: Tensor<T>,
    /// Whether the descriptor is replaced by the null descriptor.
    pub drop: bool,
}

/// Noise for one batch element, a pure function of `(seed, key)` so the loss
/// does not depend on where the element sits in the batch.
pub fn draw_noise<T: Scalar>(seed: u64, key: u64, shape: &[usize], steps: usize, drop_prob: f64) -> NoiseDraw<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    let t = rng.gen_range(1..=steps);
    let drop = rng.gen::<f64>() < drop_prob;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(StandardNormal.sample(&mut rng))).collect();
    NoiseDraw { t, eps: Tensor::new(shape, data).expect("sized"), drop }
}

/// `(z_t, eps)` batches from clean images `z0: [B, ...]`.
pub fn noisy_batch<T: Scalar>(
    z0: &Tensor<T>,
    draws: &[NoiseDraw<T>],
    sched: &NoiseSchedule<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if z0.shape().first() != Some(&draws.len()) || draws.is_empty() {
        return Err(CoreError::Shape(format!("{} noise draws for batch {:?}", draws.len(), z0.shape())));
    }
    let mut zt = Vec::with_capacity(draws.len());
    let mut eps = Vec::with_capacity(draws.len());
    for (i, d) in draws.iter().enumerate() {
        zt.push(q_sample(&z0.index0(i)?, &d.eps, d.t, sched)?);
        eps.push(d.eps.clone());
    }
    Ok((Tensor::stack(&zt)?, Tensor::stack(&eps)?))
}

/// Mean squared error between the drawn noise and `model(z_t, t, dropped)`.
pub fn denoise_loss<T, F>(
    g: &mut Graph<T>,
    z0: &Tensor<T>,
    draws: &[NoiseDraw<T>],
    sched: &NoiseSchedule<T>,
    model: F,
) -> Result<Var>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, Var, &[usize], &[bool]) -> Result<Var>,
{
    let (zt, eps) = noisy_batch(z0, draws, sched)?;
    let t: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let dropped: Vec<bool> = draws.iter().map(|d| d.drop).collect();
    let zv = g.constant(zt);
    let pred = model(g, zv, &t, &dropped)?;
    let target = g.constant(eps);
    Ok(g.mse_loss(pred, target)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub allowed: Vec<Partition>,
    pub changed: Vec<Partition>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub task: String,
    /// `(step, validation loss)` at each evaluation.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_loss: f64,
    pub initial_loss: f64,
    pub stopped_early: bool,
}

fn audit<T: Scalar>(
    before: &ParamStore<T>,
    after: &ParamStore<T>,
    allowed: &[Partition],
    task_scope: Option<&[String]>,
) -> Result<Vec<Partition>> {
    let changed = after.changed_partitions(before);
    if let Some(p) = changed.iter().find(|p| !allowed.contains(p)) {
        let name = after.changed_names(before).into_iter().find(|n| Partition::of(n) == Some(*p)).unwrap_or_default();
        return Err(CoreError::FrozenMutation(name));
    }
    if let Some(tasks) = task_scope {
        let prefixes: Vec<String> = tasks.iter().map(|t| task_prefix(t)).collect();
        if let Some(n) = after
            .changed_names(before)
            .into_iter()
            .find(|n| n.starts_with("task.") && !prefixes.iter().any(|p| n.starts_with(p)))
        {
            return Err(CoreError::FrozenMutation(n));
        }
    }
    Ok(changed)
}

fn check_loss(stage: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numeric(format!("{stage} loss became {loss} at step {step}")))
    }
}

pub fn optimizer<T: Scalar>(lr: f64, weight_decay: f64) -> AdamW<T> {
    AdamW::new(AdamWConfig { lr, weight_decay, ..AdamWConfig::default() })
}

fn descriptors(pairs: &[&Pair], draws_dropped: impl Iterator<Item = bool>) -> Vec<usize> {
    pairs.iter().zip(draws_dropped).map(|(p, d)| if d { NULL_DESCRIPTOR } else { p.descriptor }).collect()
}

/// Trains every backbone parameter on unconditional / descriptor-conditioned denoising.
pub fn pretrain<T: Scalar>(
    model: &mut Model<T>,
    pool: &ScenePool,
    opt: &mut AdamW<T>,
    start_step: usize,
    steps: usize,
    mut log: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let started = Instant::now();
    let before = model.store.clone();
    let tc = model.cfg.train.clone();
    if pool.is_empty() {
        return Err(CoreError::Data("pretraining pool is empty".into()));
    }
    let shape = [model.cfg.backbone.in_channels, model.cfg.backbone.image_size, model.cfg.backbone.image_size];
    let mut losses = Vec::with_capacity(steps);
    let backbone = Scope::new(BACKBONE);
    for step in start_step..start_step + steps {
        let mut rng = step_rng(tc.seed, Stream::Pretrain, step as u64);
        let idx: Vec<usize> = (0..tc.pretrain_batch).map(|_| rng.gen_range(0..pool.len())).collect();
        let noise_seed: u64 = rng.gen();
        let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &pool.scenes[i].image).collect();
        let z0 = stack_images::<T>(&imgs)?;
        let draws: Vec<NoiseDraw<T>> = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                draw_noise(
                    noise_seed,
                    pool.scenes[i].seed ^ ((slot as u64) << 40),
                    &shape,
                    model.sched.steps(),
                    tc.cfg_drop_prob,
                )
            })
            .collect();
        let desc: Vec<usize> = idx
            .iter()
            .zip(&draws)
            .map(|(&i, d)| if d.drop { NULL_DESCRIPTOR } else { pool.scenes[i].spec.descriptor() })
            .collect();
        let trainable = |n: &str| n.starts_with(BACKBONE);
        let (loss, grads, bindings) = {
            let mut g = Graph::new();
            let mut b = Binder::new(&model.store, &trainable);
            let unet = &model.unet;
            let l = denoise_loss(&mut g, &z0, &draws, &model.sched, |g, z, t, _| {
                unet.forward(g, &mut b, &backbone, z, t, &desc, None)
            })?;
            let value = g.value(l).item().to_f64c();
            (value, g.backward(l)?, b.into_trainable())
        };
        check_loss("pretraining", step, loss)?;
        apply_updates(&mut model.store, opt, &grads, &bindings, &trainable)?;
        losses.push(loss);
        log(step, loss);
    }
    let allowed = vec![Partition::BackbonePhi];
    let changed = audit(&before, &model.store, &allowed, None)?;
    Ok(TrainReport {
        stage: Stage::Pretrain,
        steps,
        losses,
        allowed,
        changed,
        wall_seconds: started.elapsed().as_secs_f64(),
        finetune: None,
    })
}

/// Control residuals plus backbone prediction for a batch of queries.
#[allow(clippy::too_many_arguments)]
fn controlled_prediction<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    model: &Model<T>,
    task_id: &str,
    support: &SupportSet,
    queries: &[&Pair],
    z: Var,
    t: &[usize],
    desc: &[usize],
) -> Result<Var> {
    let simgs: Vec<&Tensor<f32>> = support.pairs.iter().map(|p| &p.image).collect();
    let sconds: Vec<&Tensor<f32>> = support.pairs.iter().map(|p| &p.condition).collect();
    let si = g.constant(stack_images(&simgs)?);
    let sc = g.constant(stack_images(&sconds)?);
    let enc = model.adapter.encode_support(g, b, task_id, si, sc)?;
    let qconds: Vec<&Tensor<f32>> = queries.iter().map(|p| &p.condition).collect();
    let qc = g.constant(stack_images(&qconds)?);
    let controls = model.adapter.build_control(g, b, task_id, qc, &enc, t)?;
    model.unet.forward(g, b, &Scope::new(BACKBONE), z, t, desc, Some(&controls))
}

fn meta_trainable(name: &str, tasks: &[String]) -> bool {
    name.starts_with("cond.")
        || name.starts_with("matching.")
        || name.starts_with("proj.")
        || tasks.iter().any(|t| name.starts_with(&task_prefix(t)))
}

/// Episodic training of the condition encoder, task biases, matching and projections.
pub fn meta_train<T: Scalar>(
    model: &mut Model<T>,
    pool: &ScenePool,
    opt: &mut AdamW<T>,
    start_step: usize,
    steps: usize,
    mut log: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let started = Instant::now();
    if !model.has_adapter() {
        return Err(CoreError::Data("meta-training needs an attached adapter".into()));
    }
    let before = model.store.clone();
    let tc = model.cfg.train.clone();
    let tasks = model.cfg.tasks.tasks(Split::MetaTrain).to_vec();
    for t in &tasks {
        if !is_registered(&model.store, t.id()) {
            return Err(CoreError::UnregisteredTask(t.id().to_string()));
        }
    }
    let shape = [model.cfg.backbone.in_channels, model.cfg.backbone.image_size, model.cfg.backbone.image_size];
    let mut losses = Vec::with_capacity(steps);
    for step in start_step..start_step + steps {
        let mut rng = step_rng(tc.seed, Stream::Meta, step as u64);
        let episodes = (0..tc.tasks_per_batch)
            .map(|_| sample_episode(&tasks, pool, &mut rng, tc.support_n, tc.queries_per_episode))
            .collect::<Result<Vec<_>>>()?;
        let noise_seed: u64 = rng.gen();
        let sampled: Vec<String> = episodes.iter().map(|e| e.task.id().to_string()).collect();
        let trainable = |n: &str| meta_trainable(n, &sampled);
        let (loss, grads, bindings) = {
            let mut g = Graph::new();
            let mut b = Binder::new(&model.store, &trainable);
            let mut total: Option<Var> = None;
            for (e, ep) in episodes.iter().enumerate() {
                let queries: Vec<&Pair> = ep.query.iter().collect();
                let imgs: Vec<&Tensor<f32>> = queries.iter().map(|p| &p.image).collect();
                let z0 = stack_images::<T>(&imgs)?;
                let draws: Vec<NoiseDraw<T>> = queries
                    .iter()
                    .map(|p| {
                        draw_noise(
                            noise_seed,
                            p.seed ^ ((e as u64) << 40),
                            &shape,
                            model.sched.steps(),
                            tc.cfg_drop_prob,
                        )
                    })
                    .collect();
                let desc = descriptors(&queries, draws.iter().map(|d| d.drop));
                let task_id = ep.task.id();
                let m: &Model<T> = model;
                let l = denoise_loss(&mut g, &z0, &draws, &m.sched, |g, z, t, _| {
                    controlled_prediction(g, &mut b, m, task_id, &ep.support, &queries, z, t, &desc)
                })?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let total = total.ok_or_else(|| CoreError::Data("no episodes".into()))?;
            let mean = g.scale(total, T::from_f64c(1.0 / episodes.len() as f64));
            let value = g.value(mean).item().to_f64c();
            (value, g.backward(mean)?, b.into_trainable())
        };
        check_loss("meta-training", step, loss)?;
        apply_updates(&mut model.store, opt, &grads, &bindings, &trainable)?;
        losses.push(loss);
        log(step, loss);
    }
    let allowed =
        vec![Partition::CondSharedTheta, Partition::TaskBiases, Partition::MatchingSigma, Partition::ProjectionsZ];
    let meta_ids: Vec<String> = tasks.iter().map(|t| t.id().to_string()).collect();
    let changed = audit(&before, &model.store, &allowed, Some(&meta_ids))?;
    Ok(TrainReport {
        stage: Stage::MetaTrain,
        steps,
        losses,
        allowed,
        changed,
        wall_seconds: started.elapsed().as_secs_f64(),
        finetune: None,
    })
}

/// Validation loss of one held-out pair under fixed noise draws.
fn validation_loss<T: Scalar>(
    model: &Model<T>,
    task_id: &str,
    support: &SupportSet,
    val: &Pair,
    draws: &[NoiseDraw<T>],
) -> Result<f64> {
    let frozen = |_: &str| false;
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store, &frozen);
    let queries: Vec<&Pair> = vec![val; draws.len()];
    let imgs: Vec<&Tensor<f32>> = queries.iter().map(|p| &p.image).collect();
    let z0 = stack_images::<T>(&imgs)?;
    let desc = descriptors(&queries, draws.iter().map(|d| d.drop));
    let l = denoise_loss(&mut g, &z0, draws, &model.sched, |g, z, t, _| {
        controlled_prediction(g, &mut b, model, task_id, support, &queries, z, t, &desc)
    })?;
    Ok(g.value(l).item().to_f64c())
}

/// Adapts task biases, matching and projections to a novel task from its support set.
/// Registers the task when needed and restores the best validated parameters.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    support: &SupportSet,
    fc: &FinetuneConfig,
    seed: u64,
    mut log: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let started = Instant::now();
    if !model.has_adapter() {
        return Err(CoreError::Data("fine-tuning needs a meta-trained adapter".into()));
    }
    let n = support.len();
    if n < 3 {
        return Err(CoreError::SupportTooSmall { got: n, need: 3 });
    }
    let task_id = support.task.id().to_string();
    if !is_registered(&model.store, &task_id) {
        register_task(&mut model.store, &model.unet, &task_id)?;
    }
    let before = model.store.clone();
    let shape = [model.cfg.backbone.in_channels, model.cfg.backbone.image_size, model.cfg.backbone.image_size];
    let steps_t = model.sched.steps();
    let prefix = task_prefix(&task_id);
    let trainable =
        |name: &str| name.starts_with(&prefix) || name.starts_with("matching.") || name.starts_with("proj.");
    let mut opt = optimizer::<T>(fc.learning_rate, model.cfg.train.weight_decay);

    let split0 = make_finetune_split(n, &mut step_rng(seed, Stream::Split, 0))?;
    let val_pair = &support.pairs[split0.validation];
    let val_support = support.subset(&split0.pseudo_support);
    let val_draws: Vec<NoiseDraw<T>> = (0..fc.val_draws)
        .map(|i| {
            let mut d = draw_noise::<T>(seed ^ 0x5eed, i as u64, &shape, steps_t, 0.0);
            // Stratified timesteps keep the validation estimate stable.
            d.t = 1 + ((i as f64 + 0.5) * steps_t as f64 / fc.val_draws as f64) as usize;
            d.t = d.t.min(steps_t);
            d
        })
        .collect();

    let mut validation = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Tensor<T>)>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut split = split0.clone();
    let mut step = 0usize;
    loop {
        if step.is_multiple_of(fc.eval_every) || step == fc.max_steps {
            let v = validation_loss(model, &task_id, &val_support, val_pair, &val_draws)?;
            check_loss("validation", step, v)?;
            validation.push((step, v));
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                let snap =
                    model.store.iter().filter(|(k, _)| trainable(k)).map(|(k, t)| (k.clone(), t.clone())).collect();
                best = Some((step, v, snap));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= fc.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        if step == fc.max_steps {
            break;
        }
        let mut rng = step_rng(seed, Stream::Finetune, step as u64);
        if fc.repartition_each_step && step > 0 {
            split = split.repartition(n, &mut rng);
        }
        let pool = &split.pseudo_query;
        let picks: Vec<usize> = if pool.len() >= fc.batch_size {
            rand::seq::index::sample(&mut rng, pool.len(), fc.batch_size).into_iter().map(|i| pool[i]).collect()
        } else {
            (0..fc.batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        let noise_seed: u64 = rng.gen();
        let s_tilde = support.subset(&split.pseudo_support);
        let queries: Vec<&Pair> = picks.iter().map(|&i| &support.pairs[i]).collect();
        let imgs: Vec<&Tensor<f32>> = queries.iter().map(|p| &p.image).collect();
        let z0 = stack_images::<T>(&imgs)?;
        let draws: Vec<NoiseDraw<T>> = queries
            .iter()
            .enumerate()
            .map(|(slot, p)| {
                draw_noise(noise_seed, p.seed ^ ((slot as u64) << 40), &shape, steps_t, model.cfg.train.cfg_drop_prob)
            })
            .collect();
        let desc = descriptors(&queries, draws.iter().map(|d| d.drop));
        let (loss, grads, bindings) = {
            let mut g = Graph::new();
            let mut b = Binder::new(&model.store, &trainable);
            let m: &Model<T> = model;
            let l = denoise_loss(&mut g, &z0, &draws, &m.sched, |g, z, t, _| {
                controlled_prediction(g, &mut b, m, &task_id, &s_tilde, &queries, z, t, &desc)
            })?;
            let value = g.value(l).item().to_f64c();
            (value, g.backward(l)?, b.into_trainable())
        };
        check_loss("fine-tuning", step, loss)?;
        apply_updates(&mut model.store, &mut opt, &grads, &bindings, &trainable)?;
        losses.push(loss);
        log(step, loss);
        step += 1;
    }
    let (best_step, best_loss, snap) = best.expect("evaluated at step 0");
    for (k, t) in snap {
        *model.store.get_mut(&k)? = t;
    }
    let allowed = vec![Partition::TaskBiases, Partition::MatchingSigma, Partition::ProjectionsZ];
    let changed = audit(&before, &model.store, &allowed, Some(std::slice::from_ref(&task_id)))?;
    let initial_loss = validation[0].1;
    Ok(TrainReport {
        stage: Stage::Finetune,
        steps: step,
        losses,
        allowed,
        changed,
        wall_seconds: started.elapsed().as_secs_f64(),
        finetune: Some(FinetuneSummary {
            task: task_id,
            validation,
            best_step,
            best_loss,
            initial_loss,
            stopped_early,
        }),
    })
}
