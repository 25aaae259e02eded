//! Two-stage optimization: random-patch masked image modelling first, then
//! object-level masking with the combined loss, starting from the stage-1
//! weights.

mod checkpoint;
mod data;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use data::{ObjectSource, TrainData};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::losses::{loss_weights, LossConfig};
use crate::net::{grad_patches, ModelConfig, Params};
use crate::objtok::{
    plan_object_mask, plan_random_mask, ExpandMode, MaskPlan, ObjectPlanParams, PatchLayout,
};
use crate::par::{self, Exec};
use crate::scenegen::ObjectAnnotation;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    RandomPatch,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub r_patch: f64,
    pub r_obj: f64,
    pub patch_cap: f64,
    /// Summed object pixels allowed per image; `None` = half the image.
    pub pixel_budget: Option<usize>,
    pub lambda1: f64,
    pub enable_mim: bool,
    pub enable_obj: bool,
    pub expansion_mode: ExpandMode,
    /// Stage-2 masking; `random_patch` gives the random-masking control.
    pub masking: Masking,
    pub accum_steps: usize,
    /// Permit stage 2 without stage-1 weights.
    pub allow_scratch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            epochs: 25,
            batch_size: 4,
            base_lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.05,
            betas: [0.9, 0.95],
            adam_eps: 1e-8,
            r_patch: 0.75,
            r_obj: 0.5,
            patch_cap: 0.60,
            pixel_budget: None,
            lambda1: 0.4,
            enable_mim: true,
            enable_obj: true,
            expansion_mode: ExpandMode::Bbox,
            masking: Masking::RandomPatch,
            accum_steps: 1,
            allow_scratch: false,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            epochs: 100,
            masking: Masking::Object,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return bad("batch_size and accum_steps must be positive".into());
        }
        if !(self.r_patch > 0.0 && self.r_patch < 1.0) {
            return bad(format!("r_patch {} outside (0, 1)", self.r_patch));
        }
        if !(self.r_obj > 0.0 && self.r_obj <= 1.0) {
            return bad(format!("r_obj {} outside (0, 1]", self.r_obj));
        }
        if !(self.patch_cap > 0.0 && self.patch_cap < 1.0) {
            return bad(format!("patch_cap {} outside (0, 1)", self.patch_cap));
        }
        if self.stage == 2 && self.masking == Masking::Object && self.patch_cap >= self.r_patch {
            return bad(format!(
                "patch_cap {} must be below the stage-1 ratio r_patch {}",
                self.patch_cap, self.r_patch
            ));
        }
        if [self.base_lr, self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
            return bad("base_lr and weight_decay must be non-negative".into());
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        if self.masking() == Masking::RandomPatch {
            LossConfig::mim_only()
        } else {
            LossConfig {
                lambda1: self.lambda1,
                enable_mim: self.enable_mim,
                enable_obj: self.enable_obj,
            }
        }
    }

    /// Stage 1 always masks random patches.
    pub fn masking(&self) -> Masking {
        if self.stage == 1 {
            Masking::RandomPatch
        } else {
            self.masking
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let per_step = self.batch_size * self.accum_steps;
        n.div_ceil(per_step)
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step >= total { 0.0 } else { base_lr };
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay Adam. Decay applies to weight matrices only;
/// biases, norms, the mask token and frozen tables are exempt.
pub fn adamw_step(
    params: &mut Params<f32>,
    grads: &Params<f32>,
    m: &mut Params<f32>,
    v: &mut Params<f32>,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let [b1, b2] = cfg.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for k in 0..params.tensors.len() {
        let p = &mut params.tensors[k];
        if !p.trainable {
            continue;
        }
        let decay = if p.shape.len() == 2 { cfg.weight_decay } else { 0.0 };
        let g = &grads.tensors[k].data;
        let mk = &mut m.tensors[k].data;
        let vk = &mut v.tensors[k].data;
        for i in 0..p.data.len() {
            let gi = g[i] as f64;
            let mi = b1 * mk[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * vk[i] as f64 + (1.0 - b2) * gi * gi;
            mk[i] = mi as f32;
            vk[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps) + decay * p.data[i] as f64;
            p.data[i] = (p.data[i] as f64 - lr * update) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_mim: f64,
    pub l_obj: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean `l_total` per epoch run in this call.
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Images that had no objects and used a random plan instead.
    pub fallback_images: usize,
    pub images_seen: usize,
}

impl TrainSummary {
    pub fn fallback_fraction(&self) -> f64 {
        if self.images_seen == 0 {
            0.0
        } else {
            self.fallback_images as f64 / self.images_seen as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// JSONL step log.
    pub log_path: Option<PathBuf>,
    /// Directory receiving `epoch_XXX.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs of the schedule (for resumption tests).
    pub stop_after_epoch: Option<usize>,
    pub quiet: bool,
}

/// Optimizer state carried between epochs.
pub struct TrainState {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub m: Params<f32>,
    pub v: Params<f32>,
    pub step: u64,
    pub stage: u8,
}

impl TrainState {
    pub fn fresh(config: ModelConfig, params: Params<f32>, stage: u8) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            config,
            params,
            step: 0,
            stage,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            params: self.params.clone(),
            moments: Some((self.m.clone(), self.v.clone())),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        let (m, v) = c
            .moments
            .unwrap_or_else(|| (c.params.zeros_like(), c.params.zeros_like()));
        Self {
            config: c.config,
            params: c.params,
            m,
            v,
            step: c.step,
            stage: c.stage,
        }
    }
}

pub fn pixel_budget(cfg: &TrainConfig, model: &ModelConfig) -> usize {
    cfg.pixel_budget
        .unwrap_or(model.image_size * model.image_size / 2)
}

/// Mask plan of sample `i` at a given step; a pure function of the seed tags.
pub fn plan_for(
    cfg: &TrainConfig,
    model: &ModelConfig,
    objects: &[ObjectAnnotation],
    tags: [u64; 4],
) -> Result<MaskPlan> {
    let layout = PatchLayout::new(model.image_size, model.image_size, model.patch_size)?;
    let s = seed::derive(cfg.seed, &[seed::tag::PLAN, tags[0], tags[1], tags[2], tags[3]]);
    match cfg.masking() {
        Masking::RandomPatch => Ok(plan_random_mask(layout.num_patches(), cfg.r_patch, s)),
        Masking::Object => plan_object_mask(
            objects,
            &layout,
            &ObjectPlanParams {
                r_obj: cfg.r_obj,
                patch_cap: cfg.patch_cap,
                pixel_budget: pixel_budget(cfg, model),
                mode: cfg.expansion_mode,
            },
            s,
        ),
    }
}

/// Batch-mean gradient and losses.
pub struct BatchGradient {
    pub grads: Params<f32>,
    pub l_mim: f64,
    pub l_obj: f64,
    pub l_total: f64,
    pub fallback_images: usize,
}

/// Per-sample gradients for the images `idx`, computed under `exec` and
/// summed in sample order, so both execution modes give identical bits.
/// `tags` are `[epoch, step-in-epoch]` and seed the mask plans.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    exec: Exec,
    model: &ModelConfig,
    params: &Params<f32>,
    cfg: &TrainConfig,
    data: &TrainData,
    objects: &[Vec<ObjectAnnotation>],
    idx: &[usize],
    tags: [u64; 2],
) -> Result<BatchGradient> {
    if idx.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let layout = PatchLayout::new(model.image_size, model.image_size, model.patch_size)?;
    let loss_cfg = cfg.loss();
    let outs = par::map_indexed_in(exec, idx.len(), |k| {
        let i = idx[k];
        let objs = &objects[i];
        let plan = plan_for(cfg, model, objs, [cfg.stage as u64, tags[0], tags[1], i as u64])?;
        let w = loss_weights(&plan, objs, &layout, &loss_cfg)?;
        let (rep, grads) = grad_patches(model, params, data.patches(i), &plan, &w)?;
        Ok::<_, Error>((rep, plan.fallback, grads))
    });
    let mut acc: Option<Params<f32>> = None;
    let (mut lm, mut lo, mut lt, mut fb) = (0.0, 0.0, 0.0, 0);
    for out in outs {
        let (rep, fallback, grads) = out?;
        lm += rep.l_mim;
        lo += rep.l_obj;
        lt += rep.l_total;
        fb += fallback as usize;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => a.add_scaled(&grads, 1.0),
        }
    }
    let k = idx.len() as f64;
    let mut grads = acc.expect("non-empty batch");
    grads.scale((1.0 / k) as f32);
    Ok(BatchGradient {
        grads,
        l_mim: lm / k,
        l_obj: lo / k,
        l_total: lt / k,
        fallback_images: fb,
    })
}

fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = seed::rng(cfg.seed, &[seed::tag::SHUFFLE, cfg.stage as u64, epoch as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Runs (or resumes) one training stage. `state.step` decides where in the
/// schedule to pick up; a fresh state starts at step 0.
pub fn train(
    data: &TrainData,
    cfg: &TrainConfig,
    state: &mut TrainState,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let model = state.config.clone();
    if data.image_size() != Some(model.image_size) && !data.is_empty() {
        return Err(Error::Shape(format!(
            "dataset images are {:?} px, model expects {}",
            data.image_size(),
            model.image_size
        )));
    }
    let n = data.len();
    let spe = cfg.steps_per_epoch(n);
    let total = spe * cfg.epochs;
    let warmup = spe * cfg.warmup_epochs;

    let mut log = match &opts.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).at(dir)?;
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(p)
                .at(p)?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let mut summary = TrainSummary {
        steps: 0,
        epoch_losses: Vec::new(),
        epoch_seconds: Vec::new(),
        fallback_images: 0,
        images_seen: 0,
    };
    if spe == 0 {
        return Ok(summary);
    }
    let start_epoch = (state.step as usize) / spe;
    let end_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in start_epoch..end_epoch {
        let t0 = Instant::now();
        let order = epoch_order(cfg, n, epoch);
        let objects = if cfg.masking() == Masking::Object {
            data.objects_for_epoch()?
        } else {
            std::borrow::Cow::Borrowed(data.all_annotations())
        };
        let mut epoch_loss = 0.0;
        for b in 0..spe {
            let chunk = cfg.batch_size * cfg.accum_steps;
            let idx = &order[(b * chunk).min(n)..((b + 1) * chunk).min(n)];
            let lr = lr_at(state.step as usize, total, warmup, cfg.base_lr);
            let out = batch_gradient(
                Exec::default_for_build(),
                &model,
                &state.params,
                cfg,
                data,
                &objects,
                idx,
                [epoch as u64, b as u64],
            )
            .map_err(|e| match e {
                Error::NonFinite { tensor, .. } => Error::NonFinite {
                    tensor,
                    step: state.step,
                },
                e => e,
            })?;
            summary.fallback_images += out.fallback_images;
            state.step += 1;
            adamw_step(&mut state.params, &out.grads, &mut state.m, &mut state.v, state.step, lr, cfg);
            state.params.check_finite(state.step)?;
            summary.steps += 1;
            summary.images_seen += idx.len();
            let rec = StepRecord {
                step: state.step,
                epoch,
                l_mim: out.l_mim,
                l_obj: out.l_obj,
                l_total: out.l_total,
                lr,
            };
            if !rec.l_total.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "loss".into(),
                    step: state.step,
                });
            }
            epoch_loss += rec.l_total;
            if let Some(w) = &mut log {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").at(opts.log_path.as_deref().unwrap_or(Path::new("log")))?;
            }
        }
        let mean = epoch_loss / spe as f64;
        summary.epoch_losses.push(mean);
        summary.epoch_seconds.push(t0.elapsed().as_secs_f64());
        if !opts.quiet {
            eprintln!(
                "stage {} epoch {:>3}/{} loss {:.5} ({:.1}s)",
                cfg.stage,
                epoch + 1,
                cfg.epochs,
                mean,
                t0.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let c = state.checkpoint();
            c.save(&dir.join(format!("stage{}_epoch_{:03}.ckpt", cfg.stage, epoch + 1)))?;
            c.save(&dir.join(format!("stage{}_last.ckpt", cfg.stage)))?;
        }
    }
    if let (Some(w), Some(p)) = (&mut log, &opts.log_path) {
        w.flush().at(p)?;
    }
    Ok(summary)
}

pub fn train_stage1(
    data: &TrainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<Params<f32>>,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainSummary)> {
    if cfg.stage != 1 {
        return Err(Error::Config("train_stage1 needs stage = 1".into()));
    }
    let params = match init {
        Some(p) => p,
        None => Params::init(model)?,
    };
    let mut state = TrainState::fresh(model.clone(), params, 1);
    let s = train(data, cfg, &mut state, opts)?;
    Ok((state.checkpoint(), s))
}

pub fn train_stage2(
    data: &TrainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    stage1: Option<&Checkpoint>,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainSummary)> {
    if cfg.stage != 2 {
        return Err(Error::Config("train_stage2 needs stage = 2".into()));
    }
    let params = match stage1 {
        Some(c) => {
            if c.config != *model {
                return Err(Error::Config("stage-1 checkpoint was trained with a different model config".into()));
            }
            c.params.clone()
        }
        None if cfg.allow_scratch => Params::init(model)?,
        None => {
            return Err(Error::Config(
                "stage 2 requires a stage-1 checkpoint (set allow_scratch to train from scratch)".into(),
            ))
        }
    };
    let mut state = TrainState::fresh(model.clone(), params, 2);
    let s = train(data, cfg, &mut state, opts)?;
    Ok((state.checkpoint(), s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_reference_points() {
        let (total, warm, base) = (100, 20, 1.5e-4);
        assert_eq!(lr_at(0, total, warm, base), 0.0);
        assert_eq!(lr_at(warm, total, warm, base), base);
        assert!(lr_at(total, total, warm, base).abs() < 1e-20);
        assert!((lr_at(60, total, warm, base) - base / 2.0).abs() < 1e-15);
    }

    #[test]
    fn steps_per_epoch() {
        let c = TrainConfig {
            batch_size: 4,
            ..TrainConfig::stage1()
        };
        assert_eq!(c.steps_per_epoch(8), 2);
    }

    #[test]
    fn stage2_cap_must_be_below_stage1_ratio() {
        let c = TrainConfig {
            patch_cap: 0.8,
            ..TrainConfig::stage2()
        };
        assert!(c.validate().is_err());
    }
}
