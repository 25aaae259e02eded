//! Patch tokenization, coarse object extraction and mask planning.

mod backend;
mod cache;
mod expand;
mod patch;
mod plan;
mod rle;

pub use backend::{extract_objects, quantize_key, TokenizerBackend};
pub use cache::{image_hash, preprocess_masks, CacheEntry, CacheIndex, CacheRecord, ObjectCache};
pub use expand::{expand_mask, expand_with, ExpandMode};
pub use patch::{patchify, unpatchify, PatchGrid, PatchLayout};
pub use plan::{apply_mask, plan_object_mask, plan_random_mask, MaskPlan, ObjectPlanParams, PlanMode};
pub use rle::{BinaryMask, RleMask};
