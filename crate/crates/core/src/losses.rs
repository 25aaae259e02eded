//! Reconstruction objectives: a pixel-normalized masked-image loss over the
//! corrupted objects, a size-balanced per-object loss, and their weighted sum.
//!
//! Every term is a weighted sum of per-pixel errors `e_k`, where `e_k` is the
//! squared error averaged over the three colour channels. Losses are
//! therefore represented by sparse pixel-weight lists, which makes the value
//! and its gradient with respect to the prediction fall out of one routine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Prediction, Real};
use crate::objtok::{MaskPlan, PatchGrid, PatchLayout, PlanMode};
use crate::scenegen::ObjectAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub enable_mim: bool,
    pub enable_obj: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            enable_mim: true,
            enable_obj: true,
        }
    }
}

impl LossConfig {
    /// Plain masked-image modelling, as used in stage 1.
    pub fn mim_only() -> Self {
        Self {
            lambda1: 0.0,
            enable_mim: true,
            enable_obj: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 {} must be >= 0", self.lambda1)));
        }
        if !self.enable_mim && !self.enable_obj {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mim: f64,
    pub l_obj: f64,
    pub l_total: f64,
    /// `s_j` of the masked objects, in selection order.
    pub sizes: Vec<usize>,
    pub weights: Vec<f64>,
    /// Pixels the masked-image term is normalized by.
    pub omega: usize,
}

/// `Softmax(-s / ||s||_2)`.
pub fn object_weights(sizes: &[f64]) -> Result<Vec<f64>> {
    if let Some(j) = sizes.iter().position(|&s| s <= 0.0) {
        return Err(Error::ZeroSizeObject(j));
    }
    let norm = sizes.iter().map(|s| s * s).sum::<f64>().sqrt();
    let logits: Vec<f64> = sizes.iter().map(|s| -s / norm).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|e| e / z).collect())
}

/// Pixel weights of each term. Pixel index `p * c * c + off` addresses pixel
/// `off` of patch `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub mim: Vec<(usize, f64)>,
    pub obj: Vec<(usize, f64)>,
    pub sizes: Vec<usize>,
    pub weights: Vec<f64>,
    pub omega: usize,
    pub cfg: LossConfig,
}

fn patch_pixels(patches: impl IntoIterator<Item = usize>, pp: usize) -> Vec<usize> {
    patches
        .into_iter()
        .flat_map(|p| p * pp..(p + 1) * pp)
        .collect()
}

/// Pixel set and normalizer of the masked-image term. Object plans use the
/// expanded regions of the masked objects; random plans, and object plans
/// that could select no object, use every masked patch.
fn mim_pixels(plan: &MaskPlan, layout: &PatchLayout) -> Result<Vec<usize>> {
    let pp = layout.patch_size * layout.patch_size;
    let px = if plan.mode == PlanMode::Object && !plan.masked_object_ids.is_empty() {
        let mut patches: Vec<usize> = plan
            .masked_object_ids
            .iter()
            .flat_map(|id| plan.object_patches[id].iter().copied())
            .collect();
        patches.sort_unstable();
        patches.dedup();
        patch_pixels(patches, pp)
    } else {
        patch_pixels(plan.masked_idx.iter().copied(), pp)
    };
    if px.is_empty() {
        return Err(Error::EmptyMaskedSet);
    }
    Ok(px)
}

fn obj_pixels(
    plan: &MaskPlan,
    objects: &[ObjectAnnotation],
    layout: &PatchLayout,
) -> Result<(Vec<(usize, f64)>, Vec<usize>, Vec<f64>)> {
    if plan.masked_object_ids.is_empty() {
        return Err(Error::NoMaskedObjects);
    }
    let sel: Vec<&ObjectAnnotation> = plan
        .masked_object_ids
        .iter()
        .map(|id| {
            objects
                .iter()
                .find(|o| o.id == *id)
                .ok_or_else(|| Error::Config(format!("plan references unknown object {id}")))
        })
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = sel.iter().map(|o| o.pixel_count()).collect();
    let w = object_weights(&sizes.iter().map(|&s| s as f64).collect::<Vec<_>>())?;
    let pp = layout.patch_size * layout.patch_size;
    let mut out = Vec::new();
    for (o, &wj) in sel.iter().zip(&w) {
        for i in o.mask().pixels() {
            let (p, off) = layout.locate(i / layout.width, i % layout.width);
            out.push((p * pp + off, wj));
        }
    }
    Ok((out, sizes, w))
}

pub fn loss_weights(
    plan: &MaskPlan,
    objects: &[ObjectAnnotation],
    layout: &PatchLayout,
    cfg: &LossConfig,
) -> Result<LossWeights> {
    cfg.validate()?;
    let px = mim_pixels(plan, layout)?;
    let omega = px.len();
    let mim = if cfg.enable_mim {
        let w = 1.0 / omega as f64;
        px.into_iter().map(|i| (i, w)).collect()
    } else {
        Vec::new()
    };
    let (obj, sizes, weights) = if cfg.enable_obj && plan.mode == PlanMode::Object {
        match obj_pixels(plan, objects, layout) {
            Ok(t) => t,
            Err(Error::NoMaskedObjects) => Default::default(),
            Err(e) => return Err(e),
        }
    } else {
        Default::default()
    };
    Ok(LossWeights {
        mim,
        obj,
        sizes,
        weights,
        omega,
        cfg: *cfg,
    })
}

#[inline]
fn pixel_error<T: Real>(pred: &[T], target: &[T], px: usize) -> T {
    let b = px * 3;
    let mut e = T::zero();
    for k in b..b + 3 {
        let d = pred[k] - target[k];
        e += d * d;
    }
    e / T::of(3.0)
}

impl LossWeights {
    fn obj_scale(&self) -> f64 {
        self.cfg.lambda1
    }

    /// Loss values on full `M x patch_dim` predictions and targets.
    pub fn evaluate<T: Real>(&self, pred: &[T], target: &[T]) -> LossReport {
        let sum = |ws: &[(usize, f64)]| -> f64 {
            ws.iter()
                .map(|&(i, w)| w * pixel_error(pred, target, i).as_f64())
                .sum()
        };
        let l_mim = sum(&self.mim);
        let l_obj = sum(&self.obj);
        LossReport {
            l_mim,
            l_obj,
            l_total: l_mim + self.obj_scale() * l_obj,
            sizes: self.sizes.clone(),
            weights: self.weights.clone(),
            omega: self.omega,
        }
    }

    /// Loss report plus `dL_total / dpred`.
    pub fn evaluate_with_grad<T: Real>(&self, pred: &[T], target: &[T]) -> (LossReport, Vec<T>) {
        let report = self.evaluate(pred, target);
        let mut g = vec![T::zero(); pred.len()];
        let lam = self.obj_scale();
        for (ws, scale) in [(&self.mim, 1.0), (&self.obj, lam)] {
            for &(i, w) in ws.iter() {
                let c = T::of(2.0 * scale * w / 3.0);
                for k in i * 3..i * 3 + 3 {
                    g[k] += c * (pred[k] - target[k]);
                }
            }
        }
        (report, g)
    }
}

fn full_prediction(pred: &Prediction, target: &PatchGrid) -> Result<Vec<f32>> {
    let d = target.patch_dim();
    if pred.patch_dim != d {
        return Err(Error::Shape("prediction and target patch sizes differ".into()));
    }
    // visible rows are copied from the target; no term ever weights them
    let mut full = target.data().to_vec();
    for (r, &p) in pred.masked_idx.iter().enumerate() {
        full[p * d..(p + 1) * d].copy_from_slice(&pred.values[r * d..(r + 1) * d]);
    }
    Ok(full)
}

fn layout_of(target: &PatchGrid) -> PatchLayout {
    let (gh, gw) = target.grid();
    let c = target.patch_size();
    PatchLayout {
        patch_size: c,
        height: gh * c,
        width: gw * c,
    }
}

pub fn loss_mim(
    pred: &Prediction,
    target: &PatchGrid,
    plan: &MaskPlan,
    objects: &[ObjectAnnotation],
) -> Result<f64> {
    let w = loss_weights(plan, objects, &layout_of(target), &LossConfig::mim_only())?;
    Ok(w.evaluate(&full_prediction(pred, target)?, target.data()).l_mim)
}

pub fn loss_obj(
    pred: &Prediction,
    target: &PatchGrid,
    plan: &MaskPlan,
    objects: &[ObjectAnnotation],
) -> Result<f64> {
    let layout = layout_of(target);
    let (obj, _, _) = obj_pixels(plan, objects, &layout)?;
    let full = full_prediction(pred, target)?;
    Ok(obj
        .iter()
        .map(|&(i, w)| w * pixel_error(&full, target.data(), i) as f64)
        .sum())
}

pub fn loss_total(
    pred: &Prediction,
    target: &PatchGrid,
    plan: &MaskPlan,
    objects: &[ObjectAnnotation],
    cfg: &LossConfig,
) -> Result<LossReport> {
    let w = loss_weights(plan, objects, &layout_of(target), cfg)?;
    Ok(w.evaluate(&full_prediction(pred, target)?, target.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_reference_values() {
        assert_eq!(object_weights(&[100.0, 100.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(object_weights(&[3.0, 0.0]), Err(Error::ZeroSizeObject(1))));
    }

    #[test]
    fn config_requires_a_term() {
        let c = LossConfig {
            enable_mim: false,
            enable_obj: false,
            ..LossConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
