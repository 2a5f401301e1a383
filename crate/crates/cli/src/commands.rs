use std::io::Write;
use std::path::{Path, PathBuf};

use dpot::data::{make_window, ChannelStats, UnifiedDataset};
use dpot::io::{load_checkpoint, read_dataset, write_dataset, Checkpoint, TrajectoryDataset};
use dpot::model::{transfer_weights, AtResolution, DpotModel, ModelConfig, ResolutionMode};
use dpot::pde::{generate_dataset, PdeKind, SolverSpec};
use dpot::train::{
    one_step_l2re, prepare, rollout as roll_forward, rollout_curve, run_ablation, split_trajectories, AblationKind,
    AblationSetup, EvalSet, RunOptions, Trainer,
};

use crate::config::{read_json, seed_override, write_json, GenerateConfig, RunConfig};
use crate::{
    AblateArgs, CliError, EvalMode, EvaluateArgs, Family, FinetuneArgs, GenerateArgs, RolloutArgs, TrainArgs,
    VerifyArgs,
};

const RUN_CONFIG: &str = "run_config.json";

fn log_config<T: serde::Serialize>(what: &str, value: &T) {
    log::info!("{what}: {}", serde_json::to_string(value).expect("config serializes"));
}

fn load_dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    read_dataset(path).map_err(|source| CliError::Dataset {
        path: path.display().to_string(),
        source,
    })
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|source| CliError::Checkpoint {
        path: path.display().to_string(),
        source,
    })
}

fn create_file(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::create(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })
}

// ---- generate --------------------------------------------------------------

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = match (&args.spec, args.preset) {
        (Some(path), _) => read_json::<GenerateConfig>(path)?,
        (None, Some(family)) => {
            let kind = match family {
                Family::Heat => PdeKind::Heat,
                Family::NsVorticity => PdeKind::NsVorticity,
                Family::DiffusionReaction => PdeKind::DiffusionReaction,
            };
            GenerateConfig {
                solver: SolverSpec::preset(kind, args.resolution),
                n_traj: 16,
            }
        }
        (None, None) => unreachable!("clap requires one of --spec and --preset"),
    };
    if let Some(n) = args.n_traj {
        cfg.n_traj = n;
    }
    if let Some(seed) = seed_override()? {
        cfg.solver.seed = seed;
    }
    log_config("generate config", &cfg);
    let ds = generate_dataset(&cfg.solver, cfg.n_traj, cfg.solver.seed)?;
    write_dataset(&ds, &args.out).map_err(|source| CliError::Dataset {
        path: args.out.display().to_string(),
        source,
    })?;
    log::info!(
        "wrote {} trajectories of {} frames at {}x{} to {}",
        ds.n,
        ds.t,
        ds.h,
        ds.w,
        args.out.display()
    );
    Ok(())
}

// ---- training --------------------------------------------------------------

struct Datasets {
    train: Vec<UnifiedDataset>,
    eval: Vec<EvalSet>,
}

/// Resamples, standardizes and pads every dataset; the last `holdout`
/// trajectories of each become an evaluation set.
fn load_training_data(cfg: &RunConfig, model: &ModelConfig, raw: &[TrajectoryDataset]) -> Result<Datasets, CliError> {
    let c_max = model.c_out();
    let mut out = Datasets {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for ds in raw {
        if cfg.holdout >= ds.n {
            return Err(CliError::Config(format!(
                "holdout of {} leaves no training trajectories in a dataset of {}",
                cfg.holdout, ds.n
            )));
        }
        let (tr, te) = split_trajectories(ds, ds.n - cfg.holdout);
        let p = prepare(&tr, model.resolution, c_max, None)?;
        if cfg.holdout > 0 {
            let q = prepare(&te, model.resolution, c_max, Some(&p.stats))?;
            out.eval.push(EvalSet {
                data: q.data,
                stats: q.stats,
                rollout_steps: cfg.rollout_steps,
            });
        }
        out.train.push(p.data);
    }
    Ok(out)
}

/// Fills in data paths, weights and the seed from the command line.
fn resolve_run(mut cfg: RunConfig, data: &[PathBuf], weights: &[f64]) -> Result<RunConfig, CliError> {
    if !data.is_empty() {
        cfg.data = data.iter().map(|p| p.display().to_string()).collect();
    }
    if cfg.data.is_empty() {
        return Err(CliError::Config(
            "no training data: pass --data or list it in the config".into(),
        ));
    }
    if !weights.is_empty() {
        cfg.train.weights = weights.to_vec();
    } else if cfg.train.weights.len() != cfg.data.len() {
        cfg.train.weights = vec![1.0; cfg.data.len()];
    }
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn read_all(paths: &[String]) -> Result<Vec<TrajectoryDataset>, CliError> {
    paths.iter().map(|p| load_dataset(Path::new(p))).collect()
}

fn run_training(cfg: &RunConfig, model: DpotModel, raw: &[TrajectoryDataset], out: &Path) -> Result<(), CliError> {
    let sets = load_training_data(cfg, &model.config, raw)?;
    std::fs::create_dir_all(out)?;
    write_json(cfg, &out.join(RUN_CONFIG))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let opts = RunOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        stop_after_epoch: None,
    };
    trainer.run(&sets.train, &sets.eval, &opts)?;
    let last = trainer.metrics.epochs.last();
    log::info!(
        "finished {} steps, final loss {:.4e}; checkpoint in {}",
        trainer.step,
        last.map_or(f64::NAN, |e| e.train_loss),
        out.display()
    );
    Ok(())
}

pub fn pretrain(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_run(RunConfig::load(args.config.as_deref())?, &args.data, &args.weights)?;
    let raw = read_all(&cfg.data)?;
    let widest = raw.iter().map(|d| d.c).max().unwrap_or(1);
    let c_max = cfg.c_max.unwrap_or(widest);
    let model_cfg = cfg.model.clone().unwrap_or(ModelConfig {
        t_ctx: cfg.train.t_ctx,
        ..ModelConfig::nano(c_max + 1)
    });
    if model_cfg.c_out() != c_max {
        return Err(CliError::Config(format!(
            "model takes {} physical channels but c_max is {c_max}",
            model_cfg.c_out()
        )));
    }
    cfg.c_max = Some(c_max);
    cfg.model = Some(model_cfg.clone());
    log_config("pretrain config", &cfg);
    let model = DpotModel::new(model_cfg, cfg.train.seed)?;
    log::info!("model has {} parameters", model.param_count());
    run_training(&cfg, model, &raw, &args.out)
}

pub fn finetune(args: FinetuneArgs) -> Result<(), CliError> {
    let a = args.train;
    let source = load_ckpt(&args.from)?;
    let source_cfg: ModelConfig = serde_json::from_value(source.config.clone()).map_err(|e| CliError::Json {
        path: args.from.display().to_string(),
        source: e,
    })?;
    let mut cfg = resolve_run(RunConfig::load(a.config.as_deref())?, &a.data, &a.weights)?;
    let raw = read_all(&cfg.data)?;
    let widest = raw.iter().map(|d| d.c).max().unwrap_or(1);
    let mut target = cfg.model.clone().unwrap_or_else(|| source_cfg.clone());
    if cfg.model.is_none() && widest > target.c_out() {
        target.c_in = widest + 1;
    }
    cfg.train.t_ctx = target.t_ctx;
    cfg.c_max = Some(target.c_out());
    cfg.model = Some(target.clone());
    cfg.from = Some(args.from.display().to_string());
    log_config("finetune config", &cfg);
    let (model, report) = transfer_weights(&source, &target, cfg.train.seed)?;
    log::info!(
        "copied {} tensors ({} values), reinitialized {}",
        report.copied.len(),
        report.copied_param_count(&model),
        report.reinitialized.len()
    );
    run_training(&cfg, model, &raw, &a.out)
}

// ---- evaluation ------------------------------------------------------------

/// Model plus the dataset prepared at its own grid with its own statistics.
fn model_and_data(ckpt: &Path, data: &Path) -> Result<(DpotModel, EvalSet, TrajectoryDataset), CliError> {
    let model = DpotModel::from_checkpoint(&load_ckpt(ckpt)?)?;
    let raw = load_dataset(data)?;
    if raw.c > model.config.c_out() {
        return Err(CliError::Config(format!(
            "dataset has {} channels but the model predicts {}",
            raw.c,
            model.config.c_out()
        )));
    }
    let p = prepare(&raw, raw.h, model.config.c_out(), None)?;
    let set = EvalSet {
        data: p.data,
        stats: p.stats,
        rollout_steps: 0,
    };
    Ok((model, set, raw))
}

fn check_steps(set: &EvalSet, t_ctx: usize, steps: usize) -> Result<(), CliError> {
    let available = set.data.t.saturating_sub(t_ctx);
    if steps == 0 || steps > available {
        return Err(CliError::Config(format!(
            "{steps} rollout steps requested; trajectories of {} frames allow 1..={available} after {t_ctx} context frames",
            set.data.t
        )));
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (model, set, _) = model_and_data(&args.ckpt, &args.data)?;
    let at = AtResolution {
        model: &model,
        mode: ResolutionMode::from(args.grid_mode),
    };
    log_config("model config", &model.config);
    let rows: Vec<(usize, f64)> = match args.mode {
        EvalMode::Onestep => vec![(1, one_step_l2re(&at, &set, args.windows.unwrap_or(usize::MAX))?)],
        EvalMode::Rollout => {
            check_steps(&set, model.config.t_ctx, args.steps)?;
            let curve = rollout_curve(&at, &set, args.steps)?;
            curve.into_iter().enumerate().map(|(k, v)| (k + 1, v)).collect()
        }
    };
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    println!("mean L2RE over {} step(s): {mean:.6}", rows.len());
    if let Some(path) = &args.csv {
        let mut f = create_file(path)?;
        writeln!(f, "step,l2re")?;
        for (step, v) in &rows {
            writeln!(f, "{step},{v}")?;
        }
        log::info!("wrote {} rows to {}", rows.len(), path.display());
    }
    Ok(())
}

pub fn rollout(args: RolloutArgs) -> Result<(), CliError> {
    let (model, set, raw) = model_and_data(&args.ckpt, &args.data)?;
    if args.traj >= raw.n {
        return Err(CliError::Config(format!(
            "trajectory {} out of range (dataset has {})",
            args.traj, raw.n
        )));
    }
    let t_ctx = model.config.t_ctx;
    check_steps(&set, t_ctx, args.steps)?;
    let at = AtResolution {
        model: &model,
        mode: ResolutionMode::from(args.grid_mode),
    };
    let w = make_window(&set.data, 0, args.traj, 0, t_ctx)?;
    let r = roll_forward(&at, &w.context, &w.valid, args.steps)?;
    if let Some(k) = r.stopped_at {
        log::warn!(
            "prediction became non-finite at step {}; writing {} frames",
            k + 1,
            r.frames.len()
        );
    }
    let channels = set.data.channels();
    let frame_len = set.data.h * set.data.w * channels;
    let mut standardized: Vec<f64> = w.context.data().chunks_exact(frame_len).flatten().copied().collect();
    for f in &r.frames {
        standardized.extend_from_slice(f.data());
    }
    // Keep the physical channels and undo the standardization.
    let mut values: Vec<f64> = standardized
        .chunks_exact(channels)
        .flat_map(|px| px[..raw.c].to_vec())
        .collect();
    ChannelStats::from_meta(&raw).invert(&mut values);
    let frames = t_ctx + r.frames.len();
    let out = TrajectoryDataset {
        n: 1,
        t: frames,
        h: raw.h,
        w: raw.w,
        c: raw.c,
        values: values.into_iter().map(|v| v as f32).collect(),
        mask: raw.trajectory_mask(args.traj).to_vec(),
        meta: raw.meta.clone(),
    };
    write_dataset(&out, &args.out).map_err(|source| CliError::Dataset {
        path: args.out.display().to_string(),
        source,
    })?;
    println!(
        "wrote {t_ctx} context and {} predicted frames to {}",
        r.frames.len(),
        args.out.display()
    );
    Ok(())
}

// ---- ablation --------------------------------------------------------------

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let kind = AblationKind::parse(&args.kind).expect("clap restricts the kind");
    let mut cfg = resolve_run(RunConfig::load(args.config.as_deref())?, &args.data, &args.weights)?;
    let raw = read_all(&cfg.data)?;
    let held: Vec<TrajectoryDataset> = args.eval.iter().map(|p| load_dataset(p)).collect::<Result<_, _>>()?;
    let widest = raw.iter().chain(&held).map(|d| d.c).max().unwrap_or(1);
    let c_max = cfg.c_max.unwrap_or(widest);
    let model_cfg = cfg.model.clone().unwrap_or(ModelConfig {
        t_ctx: cfg.train.t_ctx,
        ..ModelConfig::nano(c_max + 1)
    });
    cfg.c_max = Some(c_max);
    cfg.model = Some(model_cfg.clone());
    log_config("ablation config", &cfg);
    let sets = load_training_data(
        &RunConfig {
            holdout: 0,
            ..cfg.clone()
        },
        &model_cfg,
        &raw,
    )?;
    let eval: Vec<EvalSet> = held
        .iter()
        .map(|d| {
            let p = prepare(d, model_cfg.resolution, c_max, None)?;
            Ok(EvalSet {
                data: p.data,
                stats: p.stats,
                rollout_steps: cfg.rollout_steps,
            })
        })
        .collect::<Result<_, CliError>>()?;
    let setup = AblationSetup {
        model: model_cfg,
        train: cfg.train.clone(),
        model_seed: cfg.train.seed,
        sets: &sets.train,
        eval: &eval,
        resolution_mode: ResolutionMode::from(args.grid_mode),
    };
    let table = run_ablation(kind, &args.values, &setup)?;
    let mut f = create_file(&args.csv)?;
    table.write_csv(&mut f)?;
    table.write_csv(std::io::stdout().lock())?;
    Ok(())
}

// ---- verification ----------------------------------------------------------

pub fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let reports = dpot::verify::run_suite(&args.only);
    if reports.is_empty() {
        return Err(CliError::Config(format!("no check matches {:?}", args.only)));
    }
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.outcome.passed).count();
    if failed > 0 {
        return Err(CliError::Verify {
            failed,
            total: reports.len(),
        });
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}
