//! Encoder-decoder masked autoencoder with hand-written reverse-mode
//! gradients.
//!
//! The encoder sees only visible patches (plus their positional embeddings);
//! the decoder receives the encoded latents and a shared mask token at every
//! masked position and regresses raw pixels for all positions.

mod config;
mod model;
mod ops;
mod params;
mod real;

pub use config::ModelConfig;
pub use model::{backward, forward, ForwardCache, Output};
pub use ops::{gelu, gelu_grad, LN_EPS};
pub use params::{sincos_2d, Index, Params, Tensor};
pub use real::Real;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{LossReport, LossWeights};
use crate::objtok::{patchify, MaskPlan, PatchGrid};

/// Regressed pixels of the masked patches, row `r` belonging to patch
/// `masked_idx[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub patch_dim: usize,
    pub masked_idx: Vec<usize>,
    pub values: Vec<f32>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_idx.is_empty()
    }

    pub fn patch(&self, r: usize) -> &[f32] {
        &self.values[r * self.patch_dim..(r + 1) * self.patch_dim]
    }

    /// Pastes the predictions into a copy of `grid`.
    pub fn fill(&self, grid: &PatchGrid) -> PatchGrid {
        let mut out = grid.clone();
        for (r, &p) in self.masked_idx.iter().enumerate() {
            out.patch_mut(p).copy_from_slice(self.patch(r));
        }
        out
    }
}

fn input<T: Real>(cfg: &ModelConfig, image: &Image) -> Result<Vec<T>> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Shape(format!(
            "model expects {0}x{0} images, got {1}x{2}",
            cfg.image_size,
            image.height(),
            image.width()
        )));
    }
    let g = patchify(image, cfg.patch_size)?;
    Ok(g.data().iter().map(|&v| T::of(v as f64)).collect())
}

pub fn predict<T: Real>(cfg: &ModelConfig, params: &Params<T>, image: &Image, plan: &MaskPlan) -> Result<Prediction> {
    let x = input::<T>(cfg, image)?;
    let (out, _) = forward(cfg, params, &x, plan)?;
    let d = cfg.patch_dim();
    let mut values = Vec::with_capacity(plan.masked_idx.len() * d);
    for &p in &plan.masked_idx {
        values.extend(out.pred[p * d..(p + 1) * d].iter().map(|v| v.as_f64() as f32));
    }
    Ok(Prediction {
        patch_dim: d,
        masked_idx: plan.masked_idx.clone(),
        values,
    })
}

/// Loss and exact parameter gradients for one image.
pub fn grad<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    image: &Image,
    plan: &MaskPlan,
    weights: &LossWeights,
) -> Result<(LossReport, Params<T>)> {
    let x = input::<T>(cfg, image)?;
    grad_patches(cfg, params, &x, plan, weights)
}

pub fn grad_patches<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    patches: &[T],
    plan: &MaskPlan,
    weights: &LossWeights,
) -> Result<(LossReport, Params<T>)> {
    let (out, cache) = forward(cfg, params, patches, plan)?;
    let (report, d_pred) = weights.evaluate_with_grad(&out.pred, patches);
    if !report.l_total.is_finite() {
        let tensor = params.first_non_finite().unwrap_or("loss").to_string();
        return Err(Error::NonFinite { tensor, step: 0 });
    }
    Ok((report, backward(cfg, params, &cache, &d_pred)))
}
