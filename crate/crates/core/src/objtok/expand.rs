use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::PatchLayout;
use crate::scenegen::ObjectAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandMode {
    /// Patches touched by the coarse mask.
    Exact,
    /// Patches touched by the bounding rectangle.
    Bbox,
    /// A fair coin per object picks `Exact` or `Bbox`.
    Combined,
}

impl std::str::FromStr for ExpandMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "bbox" => Ok(Self::Bbox),
            "combined" => Ok(Self::Combined),
            _ => Err(format!("unknown expansion mode `{s}`")),
        }
    }
}

fn exact_patches(obj: &ObjectAnnotation, layout: &PatchLayout) -> Vec<usize> {
    let mut hit = vec![false; layout.num_patches()];
    let w = layout.width;
    for i in obj.mask().pixels() {
        hit[layout.locate(i / w, i % w).0] = true;
    }
    hit.iter()
        .enumerate()
        .filter_map(|(p, &h)| h.then_some(p))
        .collect()
}

/// Expanded patch set of one object, sorted ascending. `Combined` consumes
/// one coin flip from `rng`; the other modes never touch it.
pub fn expand_with<R: Rng + ?Sized>(
    obj: &ObjectAnnotation,
    mode: ExpandMode,
    layout: &PatchLayout,
    rng: &mut R,
) -> Vec<usize> {
    let resolved = match mode {
        ExpandMode::Combined => {
            if rng.gen_bool(0.5) {
                ExpandMode::Bbox
            } else {
                ExpandMode::Exact
            }
        }
        m => m,
    };
    match resolved {
        ExpandMode::Bbox => {
            let mut v = layout.patches_in_rect(obj.bbox);
            v.sort_unstable();
            v
        }
        _ => exact_patches(obj, layout),
    }
}

/// Deterministic variant for the non-random modes.
pub fn expand_mask(obj: &ObjectAnnotation, mode: ExpandMode, layout: &PatchLayout, seed: u64) -> Vec<usize> {
    let mut rng = crate::seed::rng(seed, &[crate::seed::tag::PLAN]);
    expand_with(obj, mode, layout, &mut rng)
}
