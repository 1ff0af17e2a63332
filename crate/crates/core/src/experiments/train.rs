//! The shared training loops: supervised classification and masked
//! autoencoding, with checkpoint/resume, EMA, and per-epoch metrics.
//!
//! Every random draw is keyed by (seed, purpose, epoch, index), so a resumed
//! run replays the original run's stream exactly and MetricsLog values are
//! bit-identical for a fixed (config, seed).

use super::{
    ExperimentConfig, ExperimentError, MetricsLog, MetricsRow, RunOutput, RunSummary, Study,
    write_run_files,
};
use crate::data::{assemble_batch, epoch_order, AugmentationConfig, Batch, InMemoryDataset, Split};
use crate::model::{
    Checkpoint, DropPathDraws, MaeAutoencoder, PixelTransformer,
};
use crate::numerics::{Graph, Tensor};
use crate::optim::{lr_at, AdamW, EmaState};
use crate::scalar::Real;
use std::path::{Path, PathBuf};
use std::time::Instant;

const VAL_MASK_STREAM: u64 = u64::MAX;

fn load_split(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    split: Split,
) -> Result<InMemoryDataset, ExperimentError> {
    let mut spec = cfg.dataset.clone();
    spec.split = split;
    Ok(spec.load(base_dir)?)
}

fn top_k_correct<F: Real>(logits: &[F], classes: usize, labels: &[usize], k: usize) -> usize {
    let mut correct = 0;
    for (bi, row) in logits.chunks(classes).enumerate() {
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        if order[..k.min(classes)].contains(&labels[bi]) {
            correct += 1;
        }
    }
    correct
}

/// Evaluation over a dataset: mean cross-entropy and top-1/top-5 accuracy.
pub fn evaluate_classifier<F: Real>(
    model: &PixelTransformer<F>,
    ds: &InMemoryDataset,
    norm: crate::tokenization::NormStats,
    batch_size: usize,
) -> Result<(f64, f64, f64), ExperimentError> {
    let mut loss_sum = 0.0f64;
    let mut c1 = 0usize;
    let mut c5 = 0usize;
    let none = AugmentationConfig::none();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch: Batch<F> = assemble_batch(ds, chunk, &none, norm, 0, 0, 0);
        let (raw, l, c) = model.batch_raw_tokens(&batch.images)?;
        let mut g = Graph::new();
        let raw_node = g.constant(vec![chunk.len(), l, c], raw)?;
        let logits = model.classifier_graph(&mut g, raw_node, None)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        loss_sum += g.scalar_value(loss).as_f64() * chunk.len() as f64;
        let hard = batch.hard_labels();
        c1 += top_k_correct(g.value(logits), ds.num_classes, &hard, 1);
        c5 += top_k_correct(g.value(logits), ds.num_classes, &hard, 5);
    }
    let n = ds.len() as f64;
    Ok((loss_sum / n, c1 as f64 / n, c5 as f64 / n))
}

fn evaluate_with_ema<F: Real>(
    model: &mut PixelTransformer<F>,
    ema: Option<&EmaState<F>>,
    ds: &InMemoryDataset,
    norm: crate::tokenization::NormStats,
    batch_size: usize,
) -> Result<(f64, f64, f64), ExperimentError> {
    match ema {
        None => evaluate_classifier(model, ds, norm, batch_size),
        Some(e) => {
            let saved = model.params.clone();
            e.apply_to(&mut model.params);
            let out = evaluate_classifier(model, ds, norm, batch_size);
            model.params = saved;
            out
        }
    }
}

struct CkptExtras<'a, F: Real> {
    opt: &'a AdamW<F>,
    ema: Option<&'a EmaState<F>>,
}

fn save_checkpoint<F: Real>(
    model: &PixelTransformer<F>,
    mae: Option<crate::model::MaeConfig>,
    extras: &CkptExtras<'_, F>,
    epoch: u64,
    seed: u64,
    label: &str,
    path: &Path,
) -> Result<(), ExperimentError> {
    let mut extra: Vec<(String, Tensor<F>)> = extras.opt.state_tensors(&model.params);
    if let Some(e) = extras.ema {
        extra.extend(e.state_tensors(&model.params));
    }
    let ckpt = model.to_checkpoint(epoch, seed, label, mae, extra);
    ckpt.save(path)?;
    Ok(())
}

/// Supervised training of a freshly initialized model.
pub fn run_supervised<F: Real>(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let mut model = PixelTransformer::<F>::new(cfg.model.clone(), cfg.seed)?;
    supervised_loop(&mut model, cfg, base_dir, out_dir, resume_from, Study::Supervised)
}

/// Fine-tuning from an MAE pre-training checkpoint: encoder weights load,
/// the head reinitializes, layer-wise lr decay applies when configured.
pub fn run_mae_finetune<F: Real>(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    init_ckpt: &Path,
) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let ckpt = Checkpoint::<F>::load(init_ckpt)?;
    let mut model = PixelTransformer::<F>::new(cfg.model.clone(), cfg.seed)?;
    crate::model::load_encoder_from_mae(&mut model, &ckpt)?;
    model.reinit_head(cfg.seed);
    supervised_loop(&mut model, cfg, base_dir, out_dir, None, Study::MaeFinetune)
}

fn supervised_loop<F: Real>(
    model: &mut PixelTransformer<F>,
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
    study: Study,
) -> Result<RunOutput, ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    let run_start = Instant::now();
    let ds_train = load_split(cfg, base_dir, Split::Train)?;
    let ds_val = load_split(cfg, base_dir, Split::Val)?;
    if ds_train.is_empty() {
        return Err(ExperimentError::InvalidConfig("empty training set".into()));
    }
    let norm = cfg.dataset.normalization;
    let steps_per_epoch = ds_train.len().div_ceil(cfg.batch_size);
    let sched = cfg.schedule.to_schedule(steps_per_epoch);
    sched.validate()?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.params)?;
    if let Some(decay) = cfg.layerwise_decay {
        opt.set_lr_scales(model.layerwise_scales(decay))?;
    }
    let mut ema = cfg.ema_decay.map(|d| EmaState::new(d, &model.params));
    let mut metrics = MetricsLog::default();
    let mut start_epoch = 1u64;
    if let Some(path) = resume_from {
        let ckpt = Checkpoint::<F>::load(path)?;
        if ckpt.header.config != model.cfg {
            return Err(ExperimentError::InvalidConfig(
                "resume checkpoint config differs from the run config".into(),
            ));
        }
        crate::model::load_params(&mut model.params, &ckpt)?;
        opt.load_state(&model.params, &ckpt.tensors)?;
        if let Some(e) = ema.as_mut() {
            e.load_state(&model.params, &ckpt.tensors)?;
        }
        start_epoch = ckpt.header.epoch + 1;
        let metrics_path = out_dir.join("metrics.csv");
        if let Ok(text) = std::fs::read_to_string(&metrics_path) {
            let prior = MetricsLog::parse(&text)?;
            metrics.rows = prior
                .rows
                .into_iter()
                .filter(|r| r.epoch < start_epoch)
                .collect();
        }
    }

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_acc1: Option<f64> = metrics.best_val_acc1();
    let mut have_best = best_acc1.is_some();
    let total = cfg.schedule.total_epochs as u64;
    let mut epochs_run = start_epoch.saturating_sub(1);
    let mut stop_early = false;

    for epoch in start_epoch..=total {
        let t0 = Instant::now();
        let order = epoch_order(ds_train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut c1 = 0usize;
        let mut c5 = 0usize;
        let mut lr = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Batch<F> =
                assemble_batch(&ds_train, chunk, &cfg.augment, norm, cfg.seed, epoch, step as u64);
            let global_step = (epoch - 1) * steps_per_epoch as u64 + step as u64 + 1;
            lr = lr_at(global_step as usize, &sched, cfg.optimizer.lr_peak);
            let (raw, l, c) = model.batch_raw_tokens(&batch.images)?;
            let mut g = Graph::new();
            let raw_node = g.constant(vec![chunk.len(), l, c], raw)?;
            let mut dp_rng = crate::rng::substream(cfg.seed, "drop-path", &[epoch, step as u64]);
            let draws = DropPathDraws::<F>::draw(
                model.cfg.layers,
                chunk.len(),
                model.cfg.drop_path_rate,
                &mut dp_rng,
            );
            let logits = model.classifier_graph(&mut g, raw_node, draws.as_ref())?;
            let loss = g.cross_entropy(logits, &batch.labels)?;
            g.backward(loss)?;
            g.accumulate_grads(&mut model.params);
            opt.step(&mut model.params, lr)?;
            model.params.zero_grads();
            if let Some(e) = ema.as_mut() {
                e.update(&model.params);
            }
            loss_sum += g.scalar_value(loss).as_f64() * chunk.len() as f64;
            seen += chunk.len();
            let hard = batch.hard_labels();
            c1 += top_k_correct(g.value(logits), ds_train.num_classes, &hard, 1);
            c5 += top_k_correct(g.value(logits), ds_train.num_classes, &hard, 5);
        }
        epochs_run = epoch;
        let train_acc1 = c1 as f64 / seen as f64;
        metrics.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            acc1: train_acc1,
            acc5: c5 as f64 / seen as f64,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if let Some(target) = cfg.early_stop_train_acc {
            if train_acc1 >= target {
                stop_early = true;
            }
        }
        let eval_now =
            epoch % cfg.eval_interval as u64 == 0 || epoch == total || stop_early;
        if eval_now {
            let tv = Instant::now();
            let (vloss, vacc1, vacc5) =
                evaluate_with_ema(model, ema.as_ref(), &ds_val, norm, cfg.batch_size)?;
            metrics.push(MetricsRow {
                epoch,
                split: "val".into(),
                loss: vloss,
                acc1: vacc1,
                acc5: vacc5,
                lr,
                seconds: tv.elapsed().as_secs_f64(),
            });
            let extras = CkptExtras { opt: &opt, ema: ema.as_ref() };
            if best_acc1.map_or(true, |b| vacc1 > b) {
                best_acc1 = Some(vacc1);
                have_best = true;
                save_checkpoint(model, cfg.mae, &extras, epoch, cfg.seed, "best", &best_path)?;
            }
            save_checkpoint(model, cfg.mae, &extras, epoch, cfg.seed, "last", &last_path)?;
            std::fs::write(out_dir.join("metrics.csv"), metrics.to_csv())?;
        }
        if stop_early {
            break;
        }
    }
    let extras = CkptExtras { opt: &opt, ema: ema.as_ref() };
    save_checkpoint(model, cfg.mae, &extras, epochs_run, cfg.seed, "last", &last_path)?;
    let summary = RunSummary {
        study,
        seed: cfg.seed,
        epochs_run,
        final_train_loss: metrics.last_of("train").map(|r| r.loss),
        final_val_loss: metrics.last_of("val").map(|r| r.loss),
        final_val_acc1: metrics.last_of("val").map(|r| r.acc1),
        best_val_acc1: best_acc1,
        initial_val_loss: None,
        wall_seconds: run_start.elapsed().as_secs_f64(),
        diverged: false,
    };
    write_run_files(out_dir, &metrics, &summary)?;
    Ok(RunOutput {
        metrics,
        summary,
        last_ckpt: last_path,
        best_ckpt: have_best.then_some(best_path),
    })
}

fn evaluate_mae<F: Real>(
    auto: &MaeAutoencoder<F>,
    ds: &InMemoryDataset,
    norm: crate::tokenization::NormStats,
    batch_size: usize,
) -> Result<f64, ExperimentError> {
    let none = AugmentationConfig::none();
    let mut loss_sum = 0.0f64;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let batch: Batch<F> = assemble_batch(ds, chunk, &none, norm, 0, 0, 0);
        let fwd = auto.forward_mae(&batch.images, &[VAL_MASK_STREAM, bi as u64], false)?;
        loss_sum += fwd.loss_value.as_f64() * chunk.len() as f64;
    }
    Ok(loss_sum / ds.len() as f64)
}

/// MAE pre-training: minimizes masked pixel regression; logs the untrained
/// validation loss as an epoch-0 row so improvement is measurable.
pub fn run_mae_pretrain<F: Real>(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let run_start = Instant::now();
    let mae_cfg = cfg.mae.expect("validated");
    let mut auto = MaeAutoencoder::<F>::new(cfg.model.clone(), mae_cfg, cfg.seed)?;
    let ds_train = load_split(cfg, base_dir, Split::Train)?;
    let ds_val = load_split(cfg, base_dir, Split::Val)?;
    if ds_train.is_empty() {
        return Err(ExperimentError::InvalidConfig("empty training set".into()));
    }
    let norm = cfg.dataset.normalization;
    let steps_per_epoch = ds_train.len().div_ceil(cfg.batch_size);
    let sched = cfg.schedule.to_schedule(steps_per_epoch);
    sched.validate()?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &auto.model.params)?;
    if let Some(decay) = cfg.layerwise_decay {
        opt.set_lr_scales(auto.model.layerwise_scales(decay))?;
    }
    let mut metrics = MetricsLog::default();
    let initial_val = evaluate_mae(&auto, &ds_val, norm, cfg.batch_size)?;
    metrics.push(MetricsRow {
        epoch: 0,
        split: "val".into(),
        loss: initial_val,
        acc1: 0.0,
        acc5: 0.0,
        lr: 0.0,
        seconds: 0.0,
    });

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_loss = initial_val;
    let total = cfg.schedule.total_epochs as u64;
    for epoch in 1..=total {
        let t0 = Instant::now();
        let order = epoch_order(ds_train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Batch<F> =
                assemble_batch(&ds_train, chunk, &cfg.augment, norm, cfg.seed, epoch, step as u64);
            let global_step = (epoch - 1) * steps_per_epoch as u64 + step as u64 + 1;
            lr = lr_at(global_step as usize, &sched, cfg.optimizer.lr_peak);
            let mut fwd = auto.forward_mae(&batch.images, &[epoch, step as u64], true)?;
            fwd.graph.backward(fwd.loss)?;
            fwd.graph.accumulate_grads(&mut auto.model.params);
            opt.step(&mut auto.model.params, lr)?;
            auto.model.params.zero_grads();
            loss_sum += fwd.loss_value.as_f64() * chunk.len() as f64;
            seen += chunk.len();
        }
        metrics.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            acc1: 0.0,
            acc5: 0.0,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
        let eval_now = epoch % cfg.eval_interval as u64 == 0 || epoch == total;
        if eval_now {
            let vloss = evaluate_mae(&auto, &ds_val, norm, cfg.batch_size)?;
            metrics.push(MetricsRow {
                epoch,
                split: "val".into(),
                loss: vloss,
                acc1: 0.0,
                acc5: 0.0,
                lr,
                seconds: 0.0,
            });
            let extra = opt.state_tensors(&auto.model.params);
            if vloss < best_loss {
                best_loss = vloss;
                auto.to_checkpoint(epoch, cfg.seed, "best", extra.clone()).save(&best_path)?;
            }
            auto.to_checkpoint(epoch, cfg.seed, "last", extra).save(&last_path)?;
            std::fs::write(out_dir.join("metrics.csv"), metrics.to_csv())?;
        }
    }
    let extra = opt.state_tensors(&auto.model.params);
    auto.to_checkpoint(total, cfg.seed, "last", extra).save(&last_path)?;
    let summary = RunSummary {
        study: Study::MaePretrain,
        seed: cfg.seed,
        epochs_run: total,
        final_train_loss: metrics.last_of("train").map(|r| r.loss),
        final_val_loss: metrics.last_of("val").map(|r| r.loss),
        final_val_acc1: None,
        best_val_acc1: None,
        initial_val_loss: Some(initial_val),
        wall_seconds: run_start.elapsed().as_secs_f64(),
        diverged: false,
    };
    write_run_files(out_dir, &metrics, &summary)?;
    Ok(RunOutput {
        metrics,
        summary,
        last_ckpt: last_path,
        best_ckpt: best_path.exists().then_some(best_path),
    })
}
