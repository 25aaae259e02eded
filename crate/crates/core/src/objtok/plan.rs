use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::expand::{expand_with, ExpandMode};
use super::patch::{PatchGrid, PatchLayout};
use crate::error::{Error, Result};
use crate::scenegen::ObjectAnnotation;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    RandomPatch,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// `true` = masked.
    pub mask: Vec<bool>,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    /// Expanded patch set of every object, keyed by object id.
    pub object_patches: BTreeMap<usize, Vec<usize>>,
    /// Ids of the fully masked objects, in selection order.
    pub masked_object_ids: Vec<usize>,
    pub mode: PlanMode,
    /// Object planning fell back to random masking (no objects).
    pub fallback: bool,
}

impl MaskPlan {
    pub fn from_mask(mask: Vec<bool>, mode: PlanMode) -> Self {
        let visible_idx = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let masked_idx = (0..mask.len()).filter(|&i| mask[i]).collect();
        Self {
            mask,
            visible_idx,
            masked_idx,
            object_patches: BTreeMap::new(),
            masked_object_ids: Vec::new(),
            mode,
            fallback: false,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.mask.len()
    }
}

#[inline]
fn floor_count(n: usize, ratio: f64) -> usize {
    // a tiny epsilon keeps e.g. 64 * 0.6 from landing on 38.4 - 1 ulp
    ((n as f64) * ratio + 1e-9).floor() as usize
}

pub fn plan_random_mask(num_patches: usize, r_patch: f64, seed: u64) -> MaskPlan {
    let k = floor_count(num_patches, r_patch).min(num_patches);
    let mut rng = seed::rng(seed, &[seed::tag::PLAN]);
    let mut idx: Vec<usize> = (0..num_patches).collect();
    idx.shuffle(&mut rng);
    let mut mask = vec![false; num_patches];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    MaskPlan::from_mask(mask, PlanMode::RandomPatch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlanParams {
    pub r_obj: f64,
    pub patch_cap: f64,
    /// Upper bound on the summed pixel count of the masked objects.
    pub pixel_budget: usize,
    pub mode: ExpandMode,
}

pub fn plan_object_mask(
    objects: &[ObjectAnnotation],
    layout: &PatchLayout,
    params: &ObjectPlanParams,
    seed: u64,
) -> Result<MaskPlan> {
    let m = layout.num_patches();
    if !(params.r_obj > 0.0 && params.r_obj <= 1.0) {
        return Err(Error::Config(format!("r_obj {} outside (0, 1]", params.r_obj)));
    }
    if !(params.patch_cap > 0.0 && params.patch_cap < 1.0) {
        return Err(Error::Config(format!(
            "patch_cap {} outside (0, 1)",
            params.patch_cap
        )));
    }
    if objects.is_empty() {
        let mut plan = plan_random_mask(m, params.patch_cap, seed);
        plan.fallback = true;
        return Ok(plan);
    }

    let mut rng = seed::rng(seed, &[seed::tag::PLAN]);
    let regions: Vec<Vec<usize>> = objects
        .iter()
        .map(|o| expand_with(o, params.mode, layout, &mut rng))
        .collect();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(&mut rng);

    let want = floor_count(objects.len(), params.r_obj);
    let cap = floor_count(m, params.patch_cap);
    let mut mask = vec![false; m];
    let mut n_masked = 0usize;
    let mut pixels = 0usize;
    let mut selected = Vec::with_capacity(want);
    for &j in &order {
        if selected.len() == want {
            break;
        }
        let s = objects[j].pixel_count();
        if pixels + s > params.pixel_budget {
            continue;
        }
        let added = regions[j].iter().filter(|&&p| !mask[p]).count();
        if n_masked + added > cap {
            continue;
        }
        for &p in &regions[j] {
            mask[p] = true;
        }
        n_masked += added;
        pixels += s;
        selected.push(j);
    }

    // top up with patches outside every object's region first, then with
    // anything still visible if the background alone cannot fill the quota
    let mut in_object = vec![false; m];
    for r in &regions {
        for &p in r {
            in_object[p] = true;
        }
    }
    let mut free: Vec<usize> = (0..m).filter(|&p| !mask[p] && !in_object[p]).collect();
    free.shuffle(&mut rng);
    let mut rest: Vec<usize> = (0..m).filter(|&p| !mask[p] && in_object[p]).collect();
    rest.shuffle(&mut rng);
    for p in free.into_iter().chain(rest) {
        if n_masked >= cap {
            break;
        }
        mask[p] = true;
        n_masked += 1;
    }

    let mut plan = MaskPlan::from_mask(mask, PlanMode::Object);
    plan.object_patches = objects
        .iter()
        .zip(regions)
        .map(|(o, r)| (o.id, r))
        .collect();
    plan.masked_object_ids = selected.into_iter().map(|j| objects[j].id).collect();
    Ok(plan)
}

/// Visible patches in original order, as a `V x patch_dim` row-major block.
pub fn apply_mask(grid: &PatchGrid, plan: &MaskPlan) -> Result<Vec<f32>> {
    if plan.num_patches() != grid.len() {
        return Err(Error::Shape(format!(
            "plan covers {} patches, grid has {}",
            plan.num_patches(),
            grid.len()
        )));
    }
    let mut out = Vec::with_capacity(plan.visible_idx.len() * grid.patch_dim());
    for &i in &plan.visible_idx {
        out.extend_from_slice(grid.patch(i));
    }
    Ok(out)
}
