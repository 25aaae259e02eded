//! Reconstruction-based evaluation: context recovery, prompt-grid mIoU and
//! the pixel-averaging shortcut score.

mod judge;
mod render;

pub use judge::{
    classify_shape, detect_object_in_region, judge_self_test, moment_features, DetectionResult, MIN_FILL,
    SHAPE_FLOOR, TAU_BG, TAU_COLOR,
};
pub use render::{masked_input, panel_image, render_report, Panel, PanelIndex};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{luminance, Image, Rgb};
use crate::net::{predict, ModelConfig, Params};
use crate::objtok::{patchify, unpatchify, BinaryMask, MaskPlan, PatchLayout, PlanMode};
use crate::par;
use crate::scenegen::{ColorTable, PaletteColor, Scene};
use crate::trainer::Checkpoint;

/// Composite of the input's visible patches and the model's predictions for
/// the masked ones, clamped to `[0, 1]`.
pub fn reconstruct(cfg: &ModelConfig, params: &Params<f32>, image: &Image, plan: &MaskPlan) -> Result<Image> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Shape(format!(
            "model expects {0}x{0} images, got {1}x{2}",
            cfg.image_size,
            image.height(),
            image.width()
        )));
    }
    if plan.masked_idx.is_empty() {
        return Ok(image.clone());
    }
    let grid = patchify(image, cfg.patch_size)?;
    let pred = predict(cfg, params, image, plan)?;
    let mut out = unpatchify(&pred.fill(&grid))?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Plan masking exactly the union of the given patch sets.
pub fn plan_from_patches(num_patches: usize, patches: impl IntoIterator<Item = usize>) -> MaskPlan {
    let mut mask = vec![false; num_patches];
    for p in patches {
        mask[p] = true;
    }
    MaskPlan::from_mask(mask, PlanMode::Object)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene: usize,
    /// Trial label, e.g. `circle->triangle` or an object id.
    pub label: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    /// Mean of `records[*].value`.
    pub value: f64,
    /// Means over record subsets, keyed by label.
    pub breakdown: BTreeMap<String, f64>,
    pub records: Vec<SampleRecord>,
    pub config: ModelConfig,
    pub checkpoint_id: String,
}

impl EvalReport {
    fn new(metric: &str, ckpt: &Checkpoint, records: Vec<SampleRecord>) -> Self {
        let value = mean(records.iter().map(|r| r.value));
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &records {
            groups.entry(r.label.clone()).or_default().push(r.value);
        }
        let breakdown = if groups.len() > 1 && groups.len() < records.len() {
            groups.into_iter().map(|(k, v)| (k, mean(v.into_iter()))).collect()
        } else {
            BTreeMap::new()
        };
        Self {
            metric: metric.to_string(),
            value,
            breakdown,
            records,
            config: ckpt.config.clone(),
            checkpoint_id: checkpoint_id(ckpt),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// First 16 hex digits of the SHA-256 of the parameter section.
pub fn checkpoint_id(ckpt: &Checkpoint) -> String {
    let bare = Checkpoint {
        moments: None,
        ..ckpt.clone()
    };
    crate::objtok::image_hash(&bare.to_bytes())[..16].to_string()
}

/// Held-out scenes plus the colour table that identifies the pair.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub scenes: Vec<Scene>,
    pub colors: ColorTable,
}

/// One recovery trial: `visible` stays in view, everything else is masked
/// and `partner` is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub scene: usize,
    pub visible: usize,
    pub partner: usize,
}

impl Trial {
    pub fn label(&self, scene: &Scene) -> String {
        let name = |i: usize| scene.objects[i].shape.map_or("?", |s| s.name());
        format!("{}->{}", name(self.visible), name(self.partner))
    }
}

/// Both directions for every scene of the set, circle-visible first.
pub fn recovery_trials(set: &EvalSet, limit: Option<usize>) -> Result<Vec<Trial>> {
    let n = limit.unwrap_or(set.scenes.len()).min(set.scenes.len());
    let mut out = Vec::with_capacity(2 * n);
    for (i, s) in set.scenes.iter().take(n).enumerate() {
        let (c, t) = s.pair_indices(&set.colors).ok_or(Error::MissingPair(i))?;
        out.push(Trial {
            scene: i,
            visible: c,
            partner: t,
        });
        out.push(Trial {
            scene: i,
            visible: t,
            partner: c,
        });
    }
    Ok(out)
}

/// Masks every object's bounding-box patches except those of `visible`.
pub fn trial_plan(scene: &Scene, layout: &PatchLayout, visible: usize) -> MaskPlan {
    let keep: BTreeSet<usize> = layout
        .patches_in_rect(scene.objects[visible].bbox)
        .into_iter()
        .collect();
    let masked = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != visible)
        .flat_map(|(_, o)| layout.patches_in_rect(o.bbox))
        .filter(|p| !keep.contains(p));
    plan_from_patches(layout.num_patches(), masked)
}

fn layout_of(cfg: &ModelConfig) -> Result<PatchLayout> {
    PatchLayout::new(cfg.image_size, cfg.image_size, cfg.patch_size)
}

/// Any function that fills the masked region of a plan. Lets the metrics run
/// against reference painters as well as trained models.
pub trait Painter: Sync {
    fn paint(&self, scene: &Scene, plan: &MaskPlan) -> Result<Image>;
}

pub struct ModelPainter<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Params<f32>,
}

impl<'a> ModelPainter<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        Self {
            config: &ckpt.config,
            params: &ckpt.params,
        }
    }
}

impl Painter for ModelPainter<'_> {
    fn paint(&self, scene: &Scene, plan: &MaskPlan) -> Result<Image> {
        reconstruct(self.config, self.params, &scene.image, plan)
    }
}

fn recovery_records(painter: &dyn Painter, set: &EvalSet, layout: &PatchLayout, limit: Option<usize>) -> Result<Vec<SampleRecord>> {
    let trials = recovery_trials(set, limit)?;
    par::map_slice(&trials, |t| {
        let scene = &set.scenes[t.scene];
        let plan = trial_plan(scene, layout, t.visible);
        let rec = painter.paint(scene, &plan)?;
        let partner = &scene.objects[t.partner];
        let d = detect_object_in_region(&rec, partner.bbox, set.colors.background);
        let ok = d.color_class == Some(PaletteColor::nearest(partner.color).0) && d.shape_class == partner.shape;
        Ok(SampleRecord {
            scene: t.scene,
            label: t.label(scene),
            value: ok as u8 as f64,
            detection: Some(d),
        })
    })
    .into_iter()
    .collect()
}

/// Fraction of trials in which the hidden pair member is reconstructed with
/// the right colour and shape. `breakdown` holds each direction.
pub fn context_recovery_rate(ckpt: &Checkpoint, set: &EvalSet, trials: Option<usize>) -> Result<EvalReport> {
    let layout = layout_of(&ckpt.config)?;
    let records = recovery_records(&ModelPainter::new(ckpt), set, &layout, trials)?;
    Ok(EvalReport::new("context_recovery_rate", ckpt, records))
}

pub fn context_recovery_with(
    painter: &dyn Painter,
    set: &EvalSet,
    layout: &PatchLayout,
    trials: Option<usize>,
) -> Result<f64> {
    Ok(mean(recovery_records(painter, set, layout, trials)?.iter().map(|r| r.value)))
}

/// Mean colour of non-object input pixels within one patch of the object's
/// box, or of all non-object pixels when that ring is empty.
pub fn local_background(scene: &Scene, object: usize, patch_size: usize) -> Rgb {
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut occupied = vec![false; h * w];
    for o in &scene.objects {
        for i in o.mask().pixels() {
            occupied[i] = true;
        }
    }
    let [x, y, bw, bh] = scene.objects[object].bbox;
    let avg = |x0: usize, y0: usize, x1: usize, y1: usize| {
        let mut s = [0.0f64; 3];
        let mut n = 0usize;
        for yy in y0..y1 {
            for xx in x0..x1 {
                if !occupied[yy * w + xx] {
                    let c = scene.image.get(yy, xx);
                    for k in 0..3 {
                        s[k] += c[k] as f64;
                    }
                    n += 1;
                }
            }
        }
        (n > 0).then(|| s.map(|v| (v / n as f64) as f32))
    };
    avg(
        x.saturating_sub(patch_size),
        y.saturating_sub(patch_size),
        (x + bw + patch_size).min(w),
        (y + bh + patch_size).min(h),
    )
    .or_else(|| avg(0, 0, w, h))
    .unwrap_or([0.5; 3])
}

fn mean_abs(rec: &Image, mask: &BinaryMask, reference: impl Fn(usize) -> Rgb) -> f64 {
    let w = rec.width();
    let mut s = 0.0f64;
    let mut n = 0usize;
    for i in mask.pixels() {
        let c = rec.get(i / w, i % w);
        let r = reference(i);
        for k in 0..3 {
            s += (c[k] - r[k]).abs() as f64;
        }
        n += 3;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Whether the reconstruction of object `j` sits closer to the local
/// background than to the true object pixels.
pub fn is_shortcut(scene: &Scene, rec: &Image, j: usize, patch_size: usize) -> bool {
    let bg = local_background(scene, j, patch_size);
    let mask = scene.objects[j].mask();
    let w = scene.image.width();
    let to_bg = mean_abs(rec, &mask, |_| bg);
    let to_gt = mean_abs(rec, &mask, |i| scene.image.get(i / w, i % w));
    to_bg < to_gt
}

fn shortcut_records(painter: &dyn Painter, set: &EvalSet, layout: &PatchLayout) -> Result<Vec<SampleRecord>> {
    let trials = recovery_trials(set, None)?;
    let c = layout.patch_dim() / 3;
    let patch = (c as f64).sqrt().round() as usize;
    let per: Vec<Result<Vec<SampleRecord>>> = par::map_slice(&trials, |t| {
        let scene = &set.scenes[t.scene];
        let plan = trial_plan(scene, layout, t.visible);
        let rec = painter.paint(scene, &plan)?;
        Ok((0..scene.objects.len())
            .filter(|&j| j != t.visible)
            .filter(|&j| layout.patches_in_rect(scene.objects[j].bbox).iter().all(|&p| plan.mask[p]))
            .map(|j| SampleRecord {
                scene: t.scene,
                label: format!("{}:{}", t.label(scene), j),
                value: is_shortcut(scene, &rec, j, patch) as u8 as f64,
                detection: None,
            })
            .collect())
    });
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

/// Fraction of fully masked objects whose reconstruction is closer to the
/// surrounding background than to the object. Uses the recovery trials.
pub fn shortcut_score(ckpt: &Checkpoint, set: &EvalSet) -> Result<EvalReport> {
    let layout = layout_of(&ckpt.config)?;
    let records = shortcut_records(&ModelPainter::new(ckpt), set, &layout)?;
    Ok(EvalReport::new("shortcut_score", ckpt, records))
}

pub fn shortcut_score_with(painter: &dyn Painter, set: &EvalSet, layout: &PatchLayout) -> Result<f64> {
    Ok(mean(shortcut_records(painter, set, layout)?.iter().map(|r| r.value)))
}

/// Patches of the bottom-right quadrant of a prompt grid.
pub fn quadrant_plan(layout: &PatchLayout) -> Result<MaskPlan> {
    let (gh, gw) = (layout.grid_h(), layout.grid_w());
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::Shape(format!(
            "a {gh}x{gw} patch grid cannot be split into aligned quadrants"
        )));
    }
    let patches = (gh / 2..gh).flat_map(|gy| (gw / 2..gw).map(move |gx| gy * gw + gx));
    Ok(plan_from_patches(layout.num_patches(), patches))
}

/// Foreground of the bottom-right quadrant: luminance above one half.
pub fn binarize_quadrant(image: &Image) -> BinaryMask {
    let (h, w) = (image.height() / 2, image.width() / 2);
    let mut m = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, luminance(image.get(h + y, w + x)) > 0.5);
        }
    }
    m
}

/// Mean IoU between the binarized bottom-right reconstruction and the query
/// foreground, over every grid.
pub fn prompt_grid_miou(ckpt: &Checkpoint, grids: &[(Scene, BinaryMask)]) -> Result<EvalReport> {
    let layout = layout_of(&ckpt.config)?;
    let plan = quadrant_plan(&layout)?;
    let painter = ModelPainter::new(ckpt);
    let records = par::map_indexed(grids.len(), |i| {
        let (scene, target) = &grids[i];
        if target.height() * 2 != scene.image.height() || target.width() * 2 != scene.image.width() {
            return Err(Error::Shape(format!("grid {i}: target is not a quadrant of the canvas")));
        }
        let rec = painter.paint(scene, &plan)?;
        Ok(SampleRecord {
            scene: i,
            label: "grid".into(),
            value: binarize_quadrant(&rec).iou(target),
            detection: None,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new("prompt_grid_miou", ckpt, records))
}

/// Panels for the first `n` recovery trials.
pub fn recovery_panels(ckpt: &Checkpoint, set: &EvalSet, n: usize) -> Result<Vec<Panel>> {
    let layout = layout_of(&ckpt.config)?;
    let painter = ModelPainter::new(ckpt);
    let trials: Vec<Trial> = recovery_trials(set, None)?.into_iter().take(n).collect();
    par::map_slice(&trials, |t| {
        let scene = &set.scenes[t.scene];
        let plan = trial_plan(scene, &layout, t.visible);
        Ok(Panel {
            caption: format!("scene {} {}", t.scene, t.label(scene)),
            input: scene.image.clone(),
            masked_input: masked_input(&scene.image, &plan, ckpt.config.patch_size),
            reconstruction: painter.paint(scene, &plan)?,
            ground_truth: scene.image.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Panels for the first `n` prompt grids; the ground truth shows the target
/// silhouette in the bottom-right quadrant.
pub fn grid_panels(ckpt: &Checkpoint, grids: &[(Scene, BinaryMask)], n: usize) -> Result<Vec<Panel>> {
    let layout = layout_of(&ckpt.config)?;
    let plan = quadrant_plan(&layout)?;
    let painter = ModelPainter::new(ckpt);
    par::map_indexed(n.min(grids.len()), |i| {
        let (scene, _) = &grids[i];
        Ok(Panel {
            caption: format!("grid {i}"),
            input: scene.image.clone(),
            masked_input: masked_input(&scene.image, &plan, ckpt.config.patch_size),
            reconstruction: painter.paint(scene, &plan)?,
            ground_truth: scene.image.clone(),
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scenes, SceneSpec};

    struct Oracle;
    impl Painter for Oracle {
        fn paint(&self, scene: &Scene, _: &MaskPlan) -> Result<Image> {
            Ok(scene.image.clone())
        }
    }

    struct Blank;
    impl Painter for Blank {
        fn paint(&self, scene: &Scene, plan: &MaskPlan) -> Result<Image> {
            let c = 8;
            let mut out = scene.image.clone();
            let gw = out.width() / c;
            for &p in &plan.masked_idx {
                for y in 0..c {
                    for x in 0..c {
                        out.set((p / gw) * c + y, (p % gw) * c + x, crate::scenegen::BACKGROUND);
                    }
                }
            }
            Ok(out)
        }
    }

    fn set() -> EvalSet {
        let spec = SceneSpec::default();
        EvalSet {
            scenes: generate_scenes(&spec, 6, 11).unwrap(),
            colors: spec.color_table(11),
        }
    }

    #[test]
    fn reference_painters_bound_the_metrics() {
        let s = set();
        let layout = PatchLayout::new(64, 64, 8).unwrap();
        assert_eq!(context_recovery_with(&Oracle, &s, &layout, None).unwrap(), 1.0);
        assert_eq!(context_recovery_with(&Blank, &s, &layout, None).unwrap(), 0.0);
        assert_eq!(shortcut_score_with(&Oracle, &s, &layout).unwrap(), 0.0);
        assert_eq!(shortcut_score_with(&Blank, &s, &layout).unwrap(), 1.0);
    }

    #[test]
    fn trial_plan_keeps_only_the_visible_member() {
        let s = set();
        let layout = PatchLayout::new(64, 64, 8).unwrap();
        let t = recovery_trials(&s, Some(1)).unwrap()[0];
        let plan = trial_plan(&s.scenes[0], &layout, t.visible);
        let vis = layout.patches_in_rect(s.scenes[0].objects[t.visible].bbox);
        assert!(vis.iter().all(|&p| !plan.mask[p]));
        let par = layout.patches_in_rect(s.scenes[0].objects[t.partner].bbox);
        assert!(par.iter().all(|&p| plan.mask[p]));
    }

    #[test]
    fn half_overlapping_rectangles_have_iou_one_third() {
        let mut a = BinaryMask::new(4, 8);
        let mut b = BinaryMask::new(4, 8);
        for y in 0..4 {
            for x in 0..4 {
                a.set(y, x, true);
                b.set(y, x + 2, true);
            }
        }
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
