use objmim::losses::{loss_mim, loss_obj, loss_total, loss_weights, object_weights, LossConfig, LossWeights};
use objmim::net::Prediction;
use objmim::objtok::{patchify, plan_object_mask, plan_random_mask, ExpandMode, MaskPlan, ObjectPlanParams, PatchGrid, PatchLayout};
use objmim::scenegen::{scene_from_placements, ColorTable, Placement, Scene, ShapeClass};
use objmim::Error;
use proptest::prelude::*;

/// Two 8x8 squares sitting exactly on patches 9 and 54, both masked. Dyadic
/// colours keep `v + delta` exact in f32.
fn two_squares() -> (Scene, MaskPlan, PatchGrid) {
    let colors = ColorTable::default();
    let sq = |x, y| Placement {
        class: ShapeClass::Square,
        x,
        y,
        side: 8,
    };
    let scene = scene_from_placements(
        64,
        &colors,
        &[(sq(8, 8), [0.25, 0.5, 0.75]), (sq(48, 48), [0.5, 0.25, 0.125])],
        0,
    )
    .unwrap();
    let layout = PatchLayout::new(64, 64, 8).unwrap();
    let params = ObjectPlanParams {
        r_obj: 1.0,
        patch_cap: 0.6,
        pixel_budget: 2048,
        mode: ExpandMode::Bbox,
    };
    let plan = plan_object_mask(&scene.objects, &layout, &params, 1).unwrap();
    assert_eq!(plan.masked_object_ids.len(), 2);
    let grid = patchify(&scene.image, 8).unwrap();
    (scene, plan, grid)
}

fn prediction(grid: &PatchGrid, plan: &MaskPlan, f: impl Fn(usize, f32) -> f32) -> Prediction {
    let mut values = Vec::new();
    for &p in &plan.masked_idx {
        values.extend(grid.patch(p).iter().map(|&v| f(p, v)));
    }
    Prediction {
        patch_dim: grid.patch_dim(),
        masked_idx: plan.masked_idx.clone(),
        values,
    }
}

#[test]
fn perfect_reconstruction_is_zero() {
    let (scene, plan, grid) = two_squares();
    let pred = prediction(&grid, &plan, |_, v| v);
    assert_eq!(loss_mim(&pred, &grid, &plan, &scene.objects).unwrap(), 0.0);
    assert_eq!(loss_obj(&pred, &grid, &plan, &scene.objects).unwrap(), 0.0);
    let r = loss_total(&pred, &grid, &plan, &scene.objects, &LossConfig::default()).unwrap();
    assert_eq!((r.l_mim, r.l_obj, r.l_total), (0.0, 0.0, 0.0));
    assert_eq!(r.weights, vec![0.5, 0.5]);
}

#[test]
fn uniform_offset_gives_delta_squared() {
    let (scene, plan, grid) = two_squares();
    let delta = 0.125f32;
    let pred = prediction(&grid, &plan, |_, v| v + delta);
    let want = (delta as f64).powi(2);
    assert_eq!(loss_mim(&pred, &grid, &plan, &scene.objects).unwrap(), want);

    let random = plan_random_mask(64, 0.75, 2);
    let pred = prediction(&grid, &random, |_, v| v - delta);
    // background pixels are not dyadic, so f32 rounding of v - delta shows
    let got = loss_mim(&pred, &grid, &random, &scene.objects).unwrap();
    assert!((got - want).abs() < 1e-8, "{got}");
}

#[test]
fn one_perfect_object_and_one_offset_object() {
    let (scene, plan, grid) = two_squares();
    let delta = 0.125f32;
    let second = 6 * 8 + 6;
    let pred = prediction(&grid, &plan, |p, v| if p == second { v + delta } else { v });
    let s = 64.0;
    assert_eq!(
        loss_obj(&pred, &grid, &plan, &scene.objects).unwrap(),
        0.5 * s * (delta as f64).powi(2)
    );
}

#[test]
fn visible_predictions_are_ignored() {
    let (scene, plan, grid) = two_squares();
    let pred = prediction(&grid, &plan, |_, v| v * 0.5);
    let base = loss_total(&pred, &grid, &plan, &scene.objects, &LossConfig::default()).unwrap();
    let layout = PatchLayout::new(64, 64, 8).unwrap();
    let w = loss_weights(&plan, &scene.objects, &layout, &LossConfig::default()).unwrap();
    let mut full = grid.data().to_vec();
    for (r, &p) in pred.masked_idx.iter().enumerate() {
        full[p * 192..(p + 1) * 192].copy_from_slice(pred.patch(r));
    }
    let mut noisy = full.clone();
    for &p in &plan.visible_idx {
        noisy[p * 192..(p + 1) * 192].fill(7.0);
    }
    assert_eq!(w.evaluate(&full, grid.data()), base);
    assert_eq!(w.evaluate(&noisy, grid.data()), base);
    let (_, g) = w.evaluate_with_grad(&noisy, grid.data());
    for &p in &plan.visible_idx {
        assert!(g[p * 192..(p + 1) * 192].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn size_weight_examples() {
    assert_eq!(object_weights(&[100.0, 100.0]).unwrap(), vec![0.5, 0.5]);
    let w = object_weights(&[10.0, 90.0]).unwrap();
    let n = (10.0f64 * 10.0 + 90.0 * 90.0).sqrt();
    let (a, b) = ((-10.0 / n).exp(), (-90.0 / n).exp());
    assert!((w[0] - a / (a + b)).abs() < 1e-15);
    assert!((w[1] - b / (a + b)).abs() < 1e-15);
    assert_eq!(((w[0] * 1000.0).round(), (w[1] * 1000.0).round()), (708.0, 292.0));
    assert!(matches!(object_weights(&[5.0, 0.0]), Err(Error::ZeroSizeObject(1))));
}

fn weights_of(mim: f64, obj: f64, cfg: LossConfig) -> LossWeights {
    LossWeights {
        mim: vec![(0, mim)],
        obj: vec![(1, obj)],
        sizes: vec![],
        weights: vec![],
        omega: 1,
        cfg,
    }
}

#[test]
fn combined_objective() {
    // pixel 0 and pixel 1 both carry a unit error on every channel
    let pred = [1.0f64, 1.0, 1.0, 1.0, 1.0, 1.0];
    let target = [0.0f64; 6];
    let r = weights_of(1.0, 0.5, LossConfig::default()).evaluate(&pred, &target);
    assert_eq!((r.l_mim, r.l_obj), (1.0, 0.5));
    assert_eq!(r.l_total, 1.2);

    let zero = LossConfig {
        lambda1: 0.0,
        ..LossConfig::default()
    };
    let r = weights_of(1.0, 0.5, zero).evaluate(&pred, &target);
    assert_eq!(r.l_total, r.l_mim);

    let (scene, plan, grid) = two_squares();
    let pred = prediction(&grid, &plan, |_, v| v * 0.5);
    let obj_only = LossConfig {
        enable_mim: false,
        ..LossConfig::default()
    };
    let r = loss_total(&pred, &grid, &plan, &scene.objects, &obj_only).unwrap();
    assert_eq!(r.l_mim, 0.0);
    assert!(r.l_obj > 0.0);
    assert_eq!(r.l_total, 0.4 * r.l_obj);
    let both = loss_total(&pred, &grid, &plan, &scene.objects, &LossConfig::default()).unwrap();
    assert_eq!(both.l_total, both.l_mim + 0.4 * both.l_obj);
    assert_eq!(both.l_obj, r.l_obj);
}

#[test]
fn object_term_needs_masked_objects() {
    let (scene, _, grid) = two_squares();
    let plan = plan_random_mask(64, 0.6, 0);
    let pred = prediction(&grid, &plan, |_, v| v);
    assert!(matches!(
        loss_obj(&pred, &grid, &plan, &scene.objects),
        Err(Error::NoMaskedObjects)
    ));
    let none = MaskPlan::from_mask(vec![false; 64], objmim::objtok::PlanMode::RandomPatch);
    let pred = prediction(&grid, &none, |_, v| v);
    assert!(matches!(
        loss_mim(&pred, &grid, &none, &scene.objects),
        Err(Error::EmptyMaskedSet)
    ));
    let bad = LossConfig {
        lambda1: -1.0,
        ..LossConfig::default()
    };
    assert!(loss_total(&pred, &grid, &plan, &scene.objects, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_are_a_distribution_inverse_to_size(sizes in prop::collection::vec(1u32..5000, 1..8), k in 0i32..20) {
        let s: Vec<f64> = sizes.iter().map(|&v| v as f64).collect();
        let w = object_weights(&s).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] < s[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
        // power-of-two scaling is exact, so the weights must not move at all
        let scaled: Vec<f64> = s.iter().map(|v| v * 2f64.powi(k)).collect();
        prop_assert_eq!(object_weights(&scaled).unwrap(), w);
    }
}
