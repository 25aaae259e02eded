use objmim::image::Image;
use objmim::losses::{loss_weights, LossConfig};
use objmim::net::{backward, forward, predict, ModelConfig, Params};
use objmim::objtok::{patchify, plan_random_mask, PatchLayout};
use objmim::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_raw(size, size, (0..size * size * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn jitter(params: &mut Params<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors.iter_mut().filter(|t| t.trainable) {
        for v in &mut t.data {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

#[test]
fn prediction_covers_masked_patches() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg).unwrap();
    let plan = plan_random_mask(64, 0.6, 1);
    let pred = predict(&cfg, &params, &random_image(64, 2), &plan).unwrap();
    assert_eq!(pred.len(), 38);
    assert_eq!(pred.masked_idx, plan.masked_idx);
    assert_eq!(pred.values.len(), 38 * 192);
    assert!(matches!(
        predict(&cfg, &params, &random_image(32, 2), &plan),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        predict(&cfg, &params, &random_image(64, 2), &plan_random_mask(63, 0.6, 1)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn head_dim_and_deterministic_init() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.enc_dim / cfg.heads, 32);
    let a = Params::<f32>::init(&cfg).unwrap();
    let b = Params::<f32>::init(&cfg).unwrap();
    assert_eq!(a, b);
    let c = Params::<f32>::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_is_finite_and_within_five_sigma() {
    let cfg = ModelConfig::default();
    let p = Params::<f64>::init(&cfg).unwrap();
    assert!(p.first_non_finite().is_none());
    for t in &p.tensors {
        if !t.trainable {
            assert!(t.data.iter().all(|v| v.abs() <= 1.0), "{}", t.name);
        } else if t.shape.len() == 2 {
            let std = (2.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
            assert!(t.data.iter().all(|v| v.abs() <= 5.0 * std), "{}", t.name);
        }
    }
    assert!(p.by_name("decoder.mask_token").unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn masked_pixels_never_reach_the_output() {
    let cfg = ModelConfig::micro(32, 8);
    let mut params = Params::<f64>::init(&cfg).unwrap();
    jitter(&mut params, 4);
    let plan = plan_random_mask(16, 0.5, 7);
    let img = random_image(32, 3);
    let mut noisy = img.clone();
    let layout = PatchLayout::new(32, 32, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &p in &plan.masked_idx {
        for off in 0..64 {
            let (y, x) = layout.pixel_of(p, off);
            noisy.set(y, x, [rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    assert_ne!(noisy, img);
    assert_eq!(
        predict(&cfg, &params, &img, &plan).unwrap(),
        predict(&cfg, &params, &noisy, &plan).unwrap()
    );
}

#[test]
fn visible_token_order_does_not_matter() {
    let cfg = ModelConfig::micro(32, 8);
    let mut params = Params::<f64>::init(&cfg).unwrap();
    jitter(&mut params, 5);
    let plan = plan_random_mask(16, 0.5, 3);
    let x: Vec<f64> = patchify(&random_image(32, 6), 8)
        .unwrap()
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut swapped = plan.clone();
    let n = swapped.visible_idx.len();
    swapped.visible_idx.swap(0, n - 1);
    let (a, _) = forward(&cfg, &params, &x, &plan).unwrap();
    let (b, _) = forward(&cfg, &params, &x, &swapped).unwrap();
    for (u, v) in a.pred.iter().zip(&b.pred) {
        assert!((u - v).abs() < 1e-12, "{u} vs {v}");
    }
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let cfg = ModelConfig::micro(32, 8);
    let mut params = Params::<f64>::init(&cfg).unwrap();
    jitter(&mut params, 6);
    let plan = plan_random_mask(16, 0.5, 3);
    let x: Vec<f64> = patchify(&random_image(32, 7), 8)
        .unwrap()
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let layout = PatchLayout::new(32, 32, 8).unwrap();
    let w = loss_weights(&plan, &[], &layout, &LossConfig::mim_only()).unwrap();
    let (out, cache) = forward(&cfg, &params, &x, &plan).unwrap();
    // target equal to the prediction
    let (report, d_pred) = w.evaluate_with_grad(&out.pred, &out.pred);
    assert_eq!(report.l_total, 0.0);
    let g = backward(&cfg, &params, &cache, &d_pred);
    assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));

    // visible rows of dL/dpred vanish for any target
    let (_, d_pred) = w.evaluate_with_grad(&out.pred, &x);
    let pd = cfg.patch_dim();
    for &p in &plan.visible_idx {
        assert!(d_pred[p * pd..(p + 1) * pd].iter().all(|&v| v == 0.0));
    }
    assert!(plan.masked_idx.iter().any(|&p| d_pred[p * pd..(p + 1) * pd].iter().any(|&v| v != 0.0)));
}

#[test]
fn frozen_positions_get_no_gradient() {
    let cfg = ModelConfig::micro(32, 8);
    let params = Params::<f64>::init(&cfg).unwrap();
    let plan = plan_random_mask(16, 0.5, 3);
    let x: Vec<f64> = patchify(&random_image(32, 8), 8)
        .unwrap()
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let layout = PatchLayout::new(32, 32, 8).unwrap();
    let w = loss_weights(&plan, &[], &layout, &LossConfig::mim_only()).unwrap();
    let (out, cache) = forward(&cfg, &params, &x, &plan).unwrap();
    let (_, d_pred) = w.evaluate_with_grad(&out.pred, &x);
    let g = backward(&cfg, &params, &cache, &d_pred);
    for (t, gt) in params.tensors.iter().zip(&g.tensors) {
        if !t.trainable {
            assert!(gt.data.iter().all(|&v| v == 0.0), "{}", t.name);
        }
    }
    assert!(g.by_name("decoder.mask_token").unwrap().data.iter().any(|&v| v != 0.0));
}
