use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::real::Real;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Frozen tensors (positional tables) receive no updates.
    pub trainable: bool,
}

/// Per-block tensor offsets.
pub mod blk {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const QKV_W: usize = 2;
    pub const QKV_B: usize = 3;
    pub const PROJ_W: usize = 4;
    pub const PROJ_B: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FC1_W: usize = 8;
    pub const FC1_B: usize = 9;
    pub const FC2_W: usize = 10;
    pub const FC2_B: usize = 11;
    pub const COUNT: usize = 12;
}

/// Positions of the named tensors inside [`Params::tensors`].
#[derive(Debug, Clone, Copy)]
pub struct Index {
    enc_depth: usize,
    dec_depth: usize,
}

impl Index {
    pub const PATCH_W: usize = 0;
    pub const PATCH_B: usize = 1;
    pub const ENC_POS: usize = 2;

    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            enc_depth: cfg.enc_depth,
            dec_depth: cfg.dec_depth,
        }
    }

    pub fn enc_block(&self, b: usize) -> usize {
        3 + b * blk::COUNT
    }
    pub fn enc_norm_g(&self) -> usize {
        3 + self.enc_depth * blk::COUNT
    }
    pub fn enc_norm_b(&self) -> usize {
        self.enc_norm_g() + 1
    }
    pub fn dec_embed_w(&self) -> usize {
        self.enc_norm_g() + 2
    }
    pub fn dec_embed_b(&self) -> usize {
        self.enc_norm_g() + 3
    }
    pub fn mask_token(&self) -> usize {
        self.enc_norm_g() + 4
    }
    pub fn dec_pos(&self) -> usize {
        self.enc_norm_g() + 5
    }
    pub fn dec_block(&self, b: usize) -> usize {
        self.enc_norm_g() + 6 + b * blk::COUNT
    }
    pub fn dec_norm_g(&self) -> usize {
        self.dec_block(self.dec_depth)
    }
    pub fn dec_norm_b(&self) -> usize {
        self.dec_norm_g() + 1
    }
    pub fn head_w(&self) -> usize {
        self.dec_norm_g() + 2
    }
    pub fn head_b(&self) -> usize {
        self.dec_norm_g() + 3
    }
    pub fn len(&self) -> usize {
        self.dec_norm_g() + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Tensor<T>>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Truncated Gaussian, std `sqrt(2 / (fan_in + fan_out))`, cut at 3 std.
    Xavier,
    SinCos,
}

fn spec_list(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let (e, d, p, m, r) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_dim(), cfg.num_patches(), cfg.mlp_ratio);
    let mut v = vec![
        ("patch_embed.weight".into(), vec![p, e], Init::Xavier, true),
        ("patch_embed.bias".into(), vec![e], Init::Zeros, true),
        ("encoder.pos".into(), vec![m, e], Init::SinCos, false),
    ];
    let block = |v: &mut Vec<(String, Vec<usize>, Init, bool)>, pre: String, w: usize| {
        for (n, s, i) in [
            ("ln1.gamma", vec![w], Init::Ones),
            ("ln1.beta", vec![w], Init::Zeros),
            ("attn.qkv.weight", vec![w, 3 * w], Init::Xavier),
            ("attn.qkv.bias", vec![3 * w], Init::Zeros),
            ("attn.proj.weight", vec![w, w], Init::Xavier),
            ("attn.proj.bias", vec![w], Init::Zeros),
            ("ln2.gamma", vec![w], Init::Ones),
            ("ln2.beta", vec![w], Init::Zeros),
            ("mlp.fc1.weight", vec![w, r * w], Init::Xavier),
            ("mlp.fc1.bias", vec![r * w], Init::Zeros),
            ("mlp.fc2.weight", vec![r * w, w], Init::Xavier),
            ("mlp.fc2.bias", vec![w], Init::Zeros),
        ] {
            v.push((format!("{pre}.{n}"), s, i, true));
        }
    };
    for b in 0..cfg.enc_depth {
        block(&mut v, format!("encoder.blocks.{b}"), e);
    }
    v.push(("encoder.norm.gamma".into(), vec![e], Init::Ones, true));
    v.push(("encoder.norm.beta".into(), vec![e], Init::Zeros, true));
    v.push(("decoder.embed.weight".into(), vec![e, d], Init::Xavier, true));
    v.push(("decoder.embed.bias".into(), vec![d], Init::Zeros, true));
    v.push(("decoder.mask_token".into(), vec![d], Init::Zeros, true));
    v.push(("decoder.pos".into(), vec![m, d], Init::SinCos, false));
    for b in 0..cfg.dec_depth {
        block(&mut v, format!("decoder.blocks.{b}"), d);
    }
    v.push(("decoder.norm.gamma".into(), vec![d], Init::Ones, true));
    v.push(("decoder.norm.beta".into(), vec![d], Init::Zeros, true));
    v.push(("decoder.head.weight".into(), vec![d, p], Init::Xavier, true));
    v.push(("decoder.head.bias".into(), vec![p], Init::Zeros, true));
    v
}

/// 2-D sine-cosine table, `grid*grid x dim`: the first half of each row
/// encodes the row coordinate, the second half the column.
pub fn sincos_2d(grid: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for pos in [gy as f64, gx as f64] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).sin());
                }
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).cos());
                }
            }
        }
    }
    out
}

impl<T: Real> Params<T> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.seed, &[seed::tag::INIT]);
        let tensors = spec_list(cfg)
            .into_iter()
            .map(|(name, shape, init, trainable)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Xavier => {
                        let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n)
                            .map(|_| loop {
                                let z: f64 = rng.sample(StandardNormal);
                                if z.abs() <= 3.0 {
                                    break T::of(z * std);
                                }
                            })
                            .collect()
                    }
                    Init::SinCos => {
                        let grid = (shape[0] as f64).sqrt().round() as usize;
                        sincos_2d(grid, shape[1]).into_iter().map(T::of).collect()
                    }
                };
                Tensor {
                    name,
                    shape,
                    data,
                    trainable,
                }
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                    trainable: t.trainable,
                })
                .collect(),
        }
    }

    pub fn get(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    /// Disjoint mutable access to tensors `i < j`.
    pub fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [T], &mut [T]) {
        assert!(i < j);
        let (a, b) = self.tensors.split_at_mut(j);
        (&mut a[i].data, &mut b[0].data)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= alpha;
            }
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    pub fn check_finite(&self, step: u64) -> Result<()> {
        match self.first_non_finite() {
            Some(name) => Err(Error::NonFinite {
                tensor: name.to_string(),
                step,
            }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.as_f64())).collect(),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }

    /// Checks names and shapes against what `cfg` would produce.
    pub fn matches_config(&self, cfg: &ModelConfig) -> bool {
        let want = spec_list(cfg);
        want.len() == self.tensors.len()
            && want
                .iter()
                .zip(&self.tensors)
                .all(|(w, t)| w.0 == t.name && w.1 == t.shape && w.3 == t.trainable)
    }
}
