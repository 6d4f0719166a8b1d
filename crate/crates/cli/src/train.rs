//! Two-stage training loops.
//!
//! Stage one jointly minimizes the weighted entity and masked/prefix
//! objectives with decoupled decay; stage two transfers the shared
//! encoder/decoder weights and minimizes the mediator-injected report
//! loss with plain decay. Both loops are single-threaded, walk samples in
//! a seeded order, and draw every per-sample random choice from a stream
//! named by (stage, epoch, sample id), so a rerun with the same seed
//! reproduces the loss curve bit for bit. The epoch with the lowest
//! validation loss wins.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_data::corpus::LoadedSample;
use strata_model::plm::draw_prefix_len;
use strata_model::{make_mask_plan, Model, StageTwoParts};
use strata_tensor::rng::{derive_seed, stream};
use strata_tensor::{Binder, GradAccum, ParamStore, Scalar, Tape, Var};

use crate::checkpoint::{transfer_shared, SHARED_PREFIXES};
use crate::config::{RunConfig, StageOneParams};
use crate::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A finished training stage: best-validation parameters plus the curve.
pub struct TrainedStage {
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// One line per epoch, in order.
pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| crate::cfg_err(format!("cannot write {}: {e}", path.display())))?;
    for entry in log {
        serde_json::to_writer(&mut f, entry)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn nonfinite(stage: u8, epoch: usize, context: &str, id: &str) -> CliError {
    CliError::Numeric(format!(
        "stage {stage}: nonfinite loss at epoch {epoch}, {context}, sample {id}"
    ))
}

/// Joint first-stage objective for one sample. The draw order is fixed:
/// location negatives first, then prefix length, mask plan, and the
/// no-vision coin.
fn stage1_sample_loss<'t>(
    model: &Model,
    bd: &Binder<'_, 't, f32>,
    s: &LoadedSample,
    p: &StageOneParams,
    rng: &mut impl Rng,
) -> Result<Var<'t, f32>> {
    let cfg = &model.cfg;
    let mut total: Option<Var<'t, f32>> = None;
    if p.use_low {
        let low = model.low_level_loss(bd, &s.image, &s.entities, rng)?;
        total = Some(low.scale(p.lambda as f32)?);
    }
    if p.use_mid {
        let n_p = draw_prefix_len(s.tokens.len(), rng)?;
        let plan = make_mask_plan(cfg.n_patches(), cfg.mim_rate, rng)?;
        let no_vision = rng.random::<f64>() < cfg.plm_no_vision_prob;
        let mid = model.mid_level_loss(bd, &s.image, &s.tokens, &plan, n_p, no_vision)?;
        let term = mid.scale((1.0 - p.lambda) as f32)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    total.ok_or_else(|| crate::cfg_err("stage 1 has no active loss terms"))
}

fn stage1_split_loss(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
    p: &StageOneParams,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut sum = 0.0f64;
    for s in samples {
        let mut rng = stream(seed, &format!("stage1-val-{}", s.id));
        let tape = Tape::new();
        let bd = Binder::new(&tape, store);
        let loss = stage1_sample_loss(model, &bd, s, p, &mut rng)?;
        let v = loss.item()? as f64;
        if !v.is_finite() {
            return Err(nonfinite(1, epoch, "validation", &s.id));
        }
        sum += v;
    }
    Ok(sum / samples.len() as f64)
}

/// First stage over in-memory splits; `val` steers retention.
pub fn train_stage1(
    cfg: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
) -> Result<TrainedStage> {
    if train.is_empty() || val.is_empty() {
        return Err(crate::cfg_err("training needs nonempty train and val splits"));
    }
    let seed = cfg.train.seed;
    let p = &cfg.stage1;
    let model = Model::stage1(cfg.model.clone())?;
    let mut store = model.new_store::<f32>(derive_seed(seed, "stage1-init"))?;
    let mut opt = crate::AdamOpt::decoupled(p.lr, p.wd, cfg.train.warmup_steps);

    let mut log = Vec::with_capacity(p.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 0..p.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, &format!("stage1-shuffle-{epoch}")));
        let mut train_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.train.batch).enumerate() {
            let mut grads = GradAccum::new();
            for &i in chunk {
                let s = &train[i];
                let mut rng = stream(seed, &format!("stage1-e{epoch}-{}", s.id));
                let tape = Tape::new();
                let bd = Binder::new(&tape, &store);
                let loss = stage1_sample_loss(&model, &bd, s, p, &mut rng)?;
                let v = loss.item()? as f64;
                if !v.is_finite() {
                    return Err(nonfinite(1, epoch, &format!("batch {b}"), &s.id));
                }
                train_sum += v;
                let g = tape.backward(loss)?;
                bd.collect(&g, &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f32);
            opt.step(&mut store, &grads, |_| false);
        }
        let train_loss = train_sum / train.len() as f64;
        let val_loss = stage1_split_loss(&model, &store, val, p, seed, epoch)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, store.clone()));
        }
        log::info!("stage 1 epoch {epoch}: train {train_loss:.5}, val {val_loss:.5}");
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainedStage {
        params,
        log,
        best_epoch,
    })
}

fn stage2_split_loss(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
    epoch: usize,
) -> Result<f64> {
    let mut sum = 0.0f64;
    for s in samples {
        let tape = Tape::new();
        let bd = Binder::new(&tape, store);
        let loss = model.high_level_loss(&bd, &s.image, &s.tokens)?;
        let v = loss.item()? as f64;
        if !v.is_finite() {
            return Err(nonfinite(2, epoch, "validation", &s.id));
        }
        sum += v;
    }
    Ok(sum / samples.len() as f64)
}

/// Second stage. `init` carries the first stage's parameters; None trains
/// the mediator model from scratch (the no-pretraining ablation).
pub fn train_stage2(
    cfg: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    init: Option<&ParamStore<f32>>,
) -> Result<TrainedStage> {
    if train.is_empty() || val.is_empty() {
        return Err(crate::cfg_err("training needs nonempty train and val splits"));
    }
    let seed = cfg.train.seed;
    let p = &cfg.stage2;
    let parts = StageTwoParts {
        use_vdm: p.use_vdm,
        use_ldm: p.use_ldm,
    };
    let model = Model::stage2(cfg.model.clone(), parts)?;
    let mut store = model.new_store::<f32>(derive_seed(seed, "stage2-init"))?;
    if let Some(init) = init {
        transfer_shared(init, &mut store)?;
    }
    let freeze = p.freeze_shared;
    let frozen = move |name: &str| freeze && SHARED_PREFIXES.iter().any(|p| name.starts_with(p));
    let mut opt = crate::AdamOpt::coupled(p.lr, p.wd, cfg.train.warmup_steps);

    let mut log = Vec::with_capacity(p.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 0..p.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, &format!("stage2-shuffle-{epoch}")));
        let mut train_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.train.batch).enumerate() {
            let mut grads = GradAccum::new();
            for &i in chunk {
                let s = &train[i];
                let tape = Tape::new();
                let bd = Binder::new(&tape, &store);
                let loss = model.high_level_loss(&bd, &s.image, &s.tokens)?;
                let v = loss.item()? as f64;
                if !v.is_finite() {
                    return Err(nonfinite(2, epoch, &format!("batch {b}"), &s.id));
                }
                train_sum += v;
                let g = tape.backward(loss)?;
                bd.collect(&g, &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f32);
            opt.step(&mut store, &grads, &frozen);
        }
        let train_loss = train_sum / train.len() as f64;
        let val_loss = stage2_split_loss(&model, &store, val, epoch)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, store.clone()));
        }
        log::info!("stage 2 epoch {epoch}: train {train_loss:.5}, val {val_loss:.5}");
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainedStage {
        params,
        log,
        best_epoch,
    })
}

/// Fraction of (sample, entity slot) pairs where thresholding the
/// existence head at 1/2 agrees with the label.
pub fn existence_accuracy(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
) -> Result<f64> {
    let q = model.cfg.num_entities;
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let tape = Tape::new();
        let bd = Binder::new(&tape, store);
        let f_v = model.enc.encode(&bd, &s.image, &model.cfg, None)?;
        let pred = model.heads.predict(&bd, f_v)?;
        let s_hat = pred.s_hat.value();
        for slot in 0..q {
            let present = s.entities.iter().any(|&(e, _)| e == slot);
            let said = s_hat.get(slot, 0) >= 0.5;
            hits += usize::from(present == said);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Masked-reconstruction error of the model against the best constant
/// predictor, both over the same seeded mask plans. Returns
/// (model_mse, constant_baseline_mse).
pub fn masked_mse_eval(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = &model.cfg;
    let mut plans = Vec::with_capacity(samples.len());
    for s in samples {
        let mut rng = stream(seed, &format!("mim-eval-{}", s.id));
        plans.push(make_mask_plan(cfg.n_patches(), cfg.mim_rate, &mut rng)?);
    }

    // The strongest constant predictor is the mean of everything it must
    // reconstruct, so the baseline gets that mean measured on this set.
    let mut target_sum = 0.0f64;
    let mut target_n = 0usize;
    let mut targets = Vec::with_capacity(samples.len());
    for (s, plan) in samples.iter().zip(&plans) {
        let t = strata_model::patchify::<f32>(&s.image, cfg)?;
        for &row in &plan.masked {
            for c in 0..t.cols() {
                target_sum += t.get(row, c) as f64;
                target_n += 1;
            }
        }
        targets.push(t);
    }
    let mu = (target_sum / target_n as f64) as f32;

    let mut model_sum = 0.0f64;
    let mut base_sum = 0.0f64;
    for ((s, plan), t) in samples.iter().zip(&plans).zip(&targets) {
        let tape = Tape::new();
        let bd = Binder::new(&tape, store);
        let loss = strata_model::mim::mim_loss(
            &model.enc, &model.emb, &model.trunk, &bd, cfg, &s.image, &s.tokens, plan,
        )?;
        model_sum += loss.item()? as f64;
        let mut se = 0.0f64;
        for &row in &plan.masked {
            for c in 0..t.cols() {
                let d = (t.get(row, c) - mu) as f64;
                se += d * d;
            }
        }
        base_sum += se / (plan.masked.len() * t.cols()) as f64;
    }
    Ok((
        model_sum / samples.len() as f64,
        base_sum / samples.len() as f64,
    ))
}

/// Mean per-sample summed teacher-forcing loss of a first-stage model,
/// the quantity a freshly transferred second stage must reproduce.
pub fn stage1_nll_mean<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[LoadedSample],
) -> Result<f64> {
    let mut sum = 0.0f64;
    for s in samples {
        let tape = Tape::new();
        let bd = Binder::new(&tape, store);
        let loss = model.stage1_nll(&bd, &s.image, &s.tokens)?;
        sum += loss.item()?.to_f64();
    }
    Ok(sum / samples.len() as f64)
}

/// Mean per-sample mediator-injected loss, the stage-2 counterpart of
/// [`stage1_nll_mean`].
pub fn stage2_nll_mean(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
) -> Result<f64> {
    stage2_split_loss(model, store, samples, 0)
}
