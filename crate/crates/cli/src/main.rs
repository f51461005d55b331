use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsc_core::adapter::ControlMode;
use fsc_core::checkpoint::{Stage, StageRecord};
use fsc_core::config::RunConfig;
use fsc_core::dataset::{self, check_compatible, load_pairs, load_pool, load_support, read_manifest};
use fsc_core::image::write_ppm;
use fsc_core::pipeline::{adapt, evaluate, generate, load_model, meta_trained, param_report, to_checkpoint, Variant};
use fsc_core::tasks::{PoolKind, TaskKind};
use fsc_core::trainer::{finetune, optimizer, pretrain};
use fsc_core::{Checkpoint, CoreError, Model, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "fsc", version, about = "Few-shot spatial control for a small diffusion model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting preset: default, paper or desk.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Seed for training and sampling [default: 42].
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the scene pools and every task's conditions.
    Dataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pretraining checkpoint up to `train.pretrain_steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Meta-train the adapter on the meta-train tasks.
    MetaTrain {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained backbone checkpoint.
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on a novel task's support set.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Dataset directory holding the support pool.
        #[arg(long)]
        support_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images for eval query conditions.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        support_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate for the eval pool and score controllability.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score only the first N eval queries.
        #[arg(long)]
        limit: Option<usize>,
        /// Sample with the backbone alone.
        #[arg(long)]
        unconditional: bool,
    },
    /// Print the parameter partition table.
    Params {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare the full model with the no-matching and no-fine-tuning variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "42,43,44")]
        seeds: Vec<u64>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config { .. } | CoreError::InvalidRange(_) => 2,
        CoreError::Numeric(_) => 4,
        CoreError::Tensor(_) | CoreError::Shape(_) | CoreError::FrozenMutation(_) => 1,
        _ => 3,
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut sets = c.set.clone();
    if let Some(seed) = c.seed {
        sets.push(format!("train.seed={seed}"));
        sets.push(format!("inference.seed={seed}"));
    }
    RunConfig::load(c.config.as_deref(), &c.preset, &sets)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&serde_json::to_value(value)?)?;
    std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

fn progress(stage: &'static str, every: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if every > 0 && step % every == 0 {
            log::info!("{stage} step {step}: loss {loss:.5}");
        }
    }
}

fn record(model: &Model, stage: Stage, steps: usize, seed: u64, task: Option<&str>) -> StageRecord {
    StageRecord { stage, config_hash: model.cfg.config_hash(), steps, seed, task: task.map(str::to_string) }
}

fn data_pool(dir: &Path, cfg: &RunConfig, pool: PoolKind) -> Result<fsc_core::tasks::ScenePool> {
    let m = read_manifest(dir)?;
    check_compatible(&m, cfg)?;
    load_pool(dir, &m, pool)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config_hash: String,
    checkpoint_id: String,
    task: &'a str,
    seed: u64,
    query_seed: u64,
    support_seeds: Vec<u64>,
    steps: usize,
    cfg_scale: f64,
}

#[derive(Serialize)]
struct AblationRow {
    variant: Variant,
    seed: u64,
    metric_mean: f64,
    controllability: f64,
    finetune_steps: Option<usize>,
}

#[derive(Serialize)]
struct AblationReport {
    task: String,
    config_hash: String,
    rows: Vec<AblationRow>,
    /// Controllability averaged over seeds, larger is better.
    means: Vec<(Variant, f64)>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let every = cfg.train.log_every;
    match cli.cmd {
        Command::Dataset { out } => {
            let m = dataset::write_dataset(&cfg, &out)?;
            println!("wrote {} scenes and {} tasks to {}", m.records.len(), m.tasks.len(), out.display());
        }
        Command::Pretrain { data, out, resume } => {
            let pool = data_pool(&data, &cfg, PoolKind::Train)?;
            let (mut model, mut opt, mut provenance, done) = match resume {
                Some(dir) => {
                    let (model, ck) = load_model::<f32>(&dir, &cfg)?;
                    if ck.manifest.stage != Stage::Pretrain {
                        return Err(CoreError::Data(format!("{} is not a pretraining checkpoint", dir.display())));
                    }
                    let done: usize = ck.manifest.provenance.iter().map(|r| r.steps).sum();
                    let opt =
                        ck.optimizer.ok_or_else(|| CoreError::Data("checkpoint has no optimizer state".into()))?;
                    (model, opt, ck.manifest.provenance, done)
                }
                None => (
                    Model::new(cfg.clone())?,
                    optimizer(cfg.train.learning_rate, cfg.train.weight_decay),
                    Vec::new(),
                    0,
                ),
            };
            let steps = cfg.train.pretrain_steps.saturating_sub(done);
            let report = pretrain(&mut model, &pool, &mut opt, done, steps, progress("pretrain", every))?;
            provenance.push(record(&model, Stage::Pretrain, steps, cfg.train.seed, None));
            let mut ck = to_checkpoint(&model, Stage::Pretrain, provenance, Vec::new(), Some(opt));
            ck.save(&out)?;
            write_json(&out.join("report.json"), &report)?;
            println!(
                "pretrained {steps} steps in {:.1}s -> {} ({})",
                report.wall_seconds,
                out.display(),
                ck.manifest.id()
            );
        }
        Command::MetaTrain { data, backbone, out } => {
            let pool = data_pool(&data, &cfg, PoolKind::Train)?;
            let (pre, ck) = load_model::<f32>(&backbone, &cfg)?;
            let mode = cfg.train.ablation.control_mode();
            let mut warnings = ck.manifest.warnings.clone();
            if ck.manifest.stage < Stage::Pretrain {
                warnings.push("encoders cloned from a backbone that was never pretrained".into());
            }
            let steps = cfg.train.meta_steps;
            let (model, report, w) =
                meta_trained(&pre, mode, &pool, steps, cfg.train.seed, progress("meta-train", every))?;
            warnings.extend(w);
            let mut provenance = ck.manifest.provenance.clone();
            provenance.push(record(&model, Stage::MetaTrain, steps, cfg.train.seed, None));
            let mut out_ck = to_checkpoint(&model, Stage::MetaTrain, provenance, warnings, None);
            out_ck.save(&out)?;
            write_json(&out.join("report.json"), &report)?;
            println!(
                "meta-trained {steps} steps ({mode:?}) in {:.1}s -> {} ({})",
                report.wall_seconds,
                out.display(),
                out_ck.manifest.id()
            );
        }
        Command::Finetune { checkpoint, task, support_dir, out } => {
            let kind = TaskKind::parse(&task)?;
            let m = read_manifest(&support_dir)?;
            check_compatible(&m, &cfg)?;
            let support = load_support(&support_dir, &m, kind, cfg.finetune.shots)?;
            let (mut model, ck) = load_model::<f32>(&checkpoint, &cfg)?;
            let report = if cfg.train.ablation.no_finetune {
                let (adapted, _) = adapt(&model, &support, false, cfg.train.seed, |_, _| {})?;
                model = adapted;
                None
            } else {
                Some(finetune(
                    &mut model,
                    &support,
                    &cfg.finetune,
                    cfg.train.seed,
                    progress("finetune", cfg.finetune.eval_every),
                )?)
            };
            let steps = report.as_ref().map_or(0, |r| r.steps);
            let mut provenance = ck.manifest.provenance.clone();
            provenance.push(record(&model, Stage::Finetune, steps, cfg.train.seed, Some(&task)));
            let mut out_ck = to_checkpoint(&model, Stage::Finetune, provenance, ck.manifest.warnings.clone(), None);
            out_ck.save(&out)?;
            if let Some(r) = &report {
                write_json(&out.join("report.json"), r)?;
            }
            println!("fine-tuned `{task}` for {steps} steps -> {} ({})", out.display(), out_ck.manifest.id());
        }
        Command::Generate { checkpoint, task, support_dir, n_images, out } => {
            let kind = TaskKind::parse(&task)?;
            let m = read_manifest(&support_dir)?;
            check_compatible(&m, &cfg)?;
            let (model, ck) = load_model::<f32>(&checkpoint, &cfg)?;
            let k = cfg.inference.support_pairs_at_inference;
            let support = load_support(&support_dir, &m, kind, k)?;
            let queries = load_pairs(&support_dir, &m, kind, PoolKind::Eval)?;
            if queries.len() < n_images {
                return Err(CoreError::Data(format!("only {} eval queries for {n_images} images", queries.len())));
            }
            let queries = &queries[..n_images];
            let q: Vec<_> = queries.iter().map(|p| (&p.condition, p.descriptor)).collect();
            let seed = cfg.inference.seed;
            let images = generate(&model, Some((kind.id(), &support)), &q, &cfg.inference, seed)?;
            let ck_id = ck.manifest.id();
            for (i, (img, p)) in images.iter().zip(queries).enumerate() {
                write_ppm(&out.join(format!("{i:04}.ppm")), img)?;
                let side = Sidecar {
                    config_hash: cfg.config_hash(),
                    checkpoint_id: ck_id.clone(),
                    task: kind.id(),
                    seed,
                    query_seed: p.seed,
                    support_seeds: support.pairs.iter().map(|s| s.seed).collect(),
                    steps: cfg.inference.steps,
                    cfg_scale: cfg.inference.cfg_scale,
                };
                write_json(&out.join(format!("{i:04}.json")), &side)?;
            }
            println!("wrote {} images to {}", images.len(), out.display());
        }
        Command::Evaluate { checkpoint, task, data, out, limit, unconditional } => {
            let kind = TaskKind::parse(&task)?;
            let m = read_manifest(&data)?;
            check_compatible(&m, &cfg)?;
            let (model, ck) = load_model::<f32>(&checkpoint, &cfg)?;
            let mut eval = load_pairs(&data, &m, kind, PoolKind::Eval)?;
            eval.truncate(limit.unwrap_or(usize::MAX));
            let support_seeds = &m.pools.get(PoolKind::Support.name()).map(|p| p.seeds.clone()).unwrap_or_default();
            dataset::check_disjoint(support_seeds, &eval.iter().map(|p| p.seed).collect::<Vec<_>>())?;
            let support = if unconditional {
                None
            } else {
                Some(load_support(&data, &m, kind, cfg.inference.support_pairs_at_inference)?)
            };
            let (report, _) =
                evaluate(&model, kind, support.as_ref(), &eval, &cfg.inference, cfg.inference.seed, &ck.manifest.id())?;
            write_json(&out, &report)?;
            println!(
                "{} {:?} over {} samples: {:.4} ± {:.4}",
                report.task_id, report.metric, report.n_samples, report.mean, report.std
            );
        }
        Command::Params { checkpoint, json } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let report = param_report(&ck)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
        }
        Command::Ablate { data, backbone, task, out, seeds, limit } => {
            let kind = TaskKind::parse(&task)?;
            let m = read_manifest(&data)?;
            check_compatible(&m, &cfg)?;
            let pool = load_pool(&data, &m, PoolKind::Train)?;
            let support = load_support(&data, &m, kind, cfg.finetune.shots)?;
            let mut eval = load_pairs(&data, &m, kind, PoolKind::Eval)?;
            eval.truncate(limit.unwrap_or(usize::MAX));
            let (pre, _) = load_model::<f32>(&backbone, &cfg)?;
            let mut rows = Vec::new();
            for &seed in &seeds {
                for mode in [ControlMode::Matching, ControlMode::Direct] {
                    let (meta, _, _) =
                        meta_trained(&pre, mode, &pool, cfg.train.meta_steps, seed, progress("meta-train", every))?;
                    let variants: &[Variant] = match mode {
                        ControlMode::Matching => &[Variant::Full, Variant::NoFinetune],
                        ControlMode::Direct => &[Variant::NoMatching],
                    };
                    for &v in variants {
                        let (model, ft) = adapt(&meta, &support, v.finetunes(), seed, |_, _| {})?;
                        let (r, _) = evaluate(&model, kind, Some(&support), &eval, &cfg.inference, seed, "ablation")?;
                        log::info!("seed {seed} {v:?}: {:?} {:.4}", r.metric, r.mean);
                        rows.push(AblationRow {
                            variant: v,
                            seed,
                            metric_mean: r.mean,
                            controllability: r.controllability(),
                            finetune_steps: ft.map(|f| f.steps),
                        });
                    }
                }
            }
            let means = Variant::ALL
                .into_iter()
                .map(|v| {
                    let xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.controllability).collect();
                    (v, xs.iter().sum::<f64>() / xs.len().max(1) as f64)
                })
                .collect();
            let report = AblationReport { task, config_hash: cfg.config_hash(), rows, means };
            write_json(&out, &report)?;
            for (v, c) in &report.means {
                println!("{v:?}: {c:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
