use super::config::ModelConfig;
use super::ops::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear,
    linear_backward, AttnCache, LnCache,
};
use super::params::{blk, Index, Params};
use super::real::Real;
use crate::error::{Error, Result};
use crate::objtok::MaskPlan;

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    attn: AttnCache<T>,
    attn_out: Vec<T>,
    ln2: LnCache<T>,
    m: Vec<T>,
    f_pre: Vec<T>,
    f_act: Vec<T>,
}

fn block_forward<T: Real>(
    p: &Params<T>,
    base: usize,
    x: Vec<T>,
    s: usize,
    d: usize,
    heads: usize,
    ratio: usize,
) -> (Vec<T>, BlockCache<T>) {
    let (a, ln1) = layer_norm(&x, d, p.get(base + blk::LN1_G), p.get(base + blk::LN1_B));
    let qkv = linear(&a, s, d, p.get(base + blk::QKV_W), p.get(base + blk::QKV_B), 3 * d);
    let (attn_out, attn) = attention(&qkv, s, d, heads);
    let o = linear(&attn_out, s, d, p.get(base + blk::PROJ_W), p.get(base + blk::PROJ_B), d);
    let h1: Vec<T> = x.iter().zip(&o).map(|(&u, &v)| u + v).collect();
    let (m, ln2) = layer_norm(&h1, d, p.get(base + blk::LN2_G), p.get(base + blk::LN2_B));
    let f_pre = linear(&m, s, d, p.get(base + blk::FC1_W), p.get(base + blk::FC1_B), ratio * d);
    let f_act: Vec<T> = f_pre.iter().map(|&v| gelu(v)).collect();
    let f = linear(&f_act, s, ratio * d, p.get(base + blk::FC2_W), p.get(base + blk::FC2_B), d);
    let out = h1.iter().zip(&f).map(|(&u, &v)| u + v).collect();
    (
        out,
        BlockCache {
            ln1,
            a,
            qkv,
            attn,
            attn_out,
            ln2,
            m,
            f_pre,
            f_act,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    p: &Params<T>,
    g: &mut Params<T>,
    base: usize,
    c: &BlockCache<T>,
    dout: Vec<T>,
    s: usize,
    d: usize,
    heads: usize,
    ratio: usize,
) -> Vec<T> {
    let (dw, db) = g.pair_mut(base + blk::FC2_W, base + blk::FC2_B);
    let d_fact = linear_backward(&c.f_act, s, ratio * d, p.get(base + blk::FC2_W), d, &dout, dw, db);
    let d_fpre: Vec<T> = d_fact
        .iter()
        .zip(&c.f_pre)
        .map(|(&u, &v)| u * gelu_grad(v))
        .collect();
    let (dw, db) = g.pair_mut(base + blk::FC1_W, base + blk::FC1_B);
    let d_m = linear_backward(&c.m, s, d, p.get(base + blk::FC1_W), ratio * d, &d_fpre, dw, db);
    let (dg, db) = g.pair_mut(base + blk::LN2_G, base + blk::LN2_B);
    let d_h1_ln = layer_norm_backward(&d_m, d, &c.ln2, p.get(base + blk::LN2_G), dg, db);
    let d_h1: Vec<T> = dout.iter().zip(&d_h1_ln).map(|(&u, &v)| u + v).collect();
    let (dw, db) = g.pair_mut(base + blk::PROJ_W, base + blk::PROJ_B);
    let d_attn = linear_backward(&c.attn_out, s, d, p.get(base + blk::PROJ_W), d, &d_h1, dw, db);
    let d_qkv = attention_backward(&d_attn, &c.qkv, &c.attn, s, d, heads);
    let (dw, db) = g.pair_mut(base + blk::QKV_W, base + blk::QKV_B);
    let d_a = linear_backward(&c.a, s, d, p.get(base + blk::QKV_W), 3 * d, &d_qkv, dw, db);
    let (dg, db) = g.pair_mut(base + blk::LN1_G, base + blk::LN1_B);
    let d_x_ln = layer_norm_backward(&d_a, d, &c.ln1, p.get(base + blk::LN1_G), dg, db);
    d_h1.iter().zip(&d_x_ln).map(|(&u, &v)| u + v).collect()
}

/// Everything `backward` needs from one forward pass.
pub struct ForwardCache<T> {
    visible: Vec<usize>,
    masked: Vec<usize>,
    xv: Vec<T>,
    enc: Vec<BlockCache<T>>,
    enc_ln: LnCache<T>,
    latent: Vec<T>,
    dec: Vec<BlockCache<T>>,
    dec_ln: LnCache<T>,
    dec_out: Vec<T>,
}

/// Predicted pixels for every patch position, `M x patch_dim`. The loss
/// reads only the masked rows.
pub struct Output<T> {
    pub pred: Vec<T>,
}

pub fn check_plan(cfg: &ModelConfig, patches: usize, plan: &MaskPlan) -> Result<()> {
    let m = cfg.num_patches();
    if plan.num_patches() != m || patches != m * cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "model expects {} patches of {} values; got plan over {} and {} input values",
            m,
            cfg.patch_dim(),
            plan.num_patches(),
            patches
        )));
    }
    Ok(())
}

/// Runs encoder and decoder. `patches` is the full `M x patch_dim` input;
/// only the rows listed in `plan.visible_idx` are read.
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    p: &Params<T>,
    patches: &[T],
    plan: &MaskPlan,
) -> Result<(Output<T>, ForwardCache<T>)> {
    check_plan(cfg, patches.len(), plan)?;
    let ix = Index::new(cfg);
    let (e, d, pd, m) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_dim(), cfg.num_patches());
    let (h, r) = (cfg.heads, cfg.mlp_ratio);
    let vis = plan.visible_idx.clone();
    let v = vis.len();

    let mut xv = Vec::with_capacity(v * pd);
    for &i in &vis {
        xv.extend_from_slice(&patches[i * pd..(i + 1) * pd]);
    }
    let mut x = linear(&xv, v, pd, p.get(Index::PATCH_W), p.get(Index::PATCH_B), e);
    let pos = p.get(Index::ENC_POS);
    for (row, &i) in vis.iter().enumerate() {
        for k in 0..e {
            x[row * e + k] += pos[i * e + k];
        }
    }
    let mut enc = Vec::with_capacity(cfg.enc_depth);
    for b in 0..cfg.enc_depth {
        let (out, c) = block_forward(p, ix.enc_block(b), x, v, e, h, r);
        enc.push(c);
        x = out;
    }
    let (latent, enc_ln) = layer_norm(&x, e, p.get(ix.enc_norm_g()), p.get(ix.enc_norm_b()));

    let z = linear(&latent, v, e, p.get(ix.dec_embed_w()), p.get(ix.dec_embed_b()), d);
    let mut y = vec![T::zero(); m * d];
    let tok = p.get(ix.mask_token());
    for &i in &plan.masked_idx {
        y[i * d..(i + 1) * d].copy_from_slice(tok);
    }
    for (row, &i) in vis.iter().enumerate() {
        y[i * d..(i + 1) * d].copy_from_slice(&z[row * d..(row + 1) * d]);
    }
    for (a, &b) in y.iter_mut().zip(p.get(ix.dec_pos())) {
        *a += b;
    }
    let mut dec = Vec::with_capacity(cfg.dec_depth);
    for b in 0..cfg.dec_depth {
        let (out, c) = block_forward(p, ix.dec_block(b), y, m, d, h, r);
        dec.push(c);
        y = out;
    }
    let (dec_out, dec_ln) = layer_norm(&y, d, p.get(ix.dec_norm_g()), p.get(ix.dec_norm_b()));
    let pred = linear(&dec_out, m, d, p.get(ix.head_w()), p.get(ix.head_b()), pd);
    Ok((
        Output { pred },
        ForwardCache {
            visible: vis,
            masked: plan.masked_idx.clone(),
            xv,
            enc,
            enc_ln,
            latent,
            dec,
            dec_ln,
            dec_out,
        },
    ))
}

/// Reverse pass: gradients of a scalar loss given `d_pred = dL/dpred`
/// (`M x patch_dim`). Frozen tensors get zero gradient.
pub fn backward<T: Real>(cfg: &ModelConfig, p: &Params<T>, c: &ForwardCache<T>, d_pred: &[T]) -> Params<T> {
    let ix = Index::new(cfg);
    let (e, d, pd, m) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_dim(), cfg.num_patches());
    let (h, r) = (cfg.heads, cfg.mlp_ratio);
    let v = c.visible.len();
    let mut g = p.zeros_like();

    let (dw, db) = g.pair_mut(ix.head_w(), ix.head_b());
    let d_out = linear_backward(&c.dec_out, m, d, p.get(ix.head_w()), pd, d_pred, dw, db);
    let (dg, db) = g.pair_mut(ix.dec_norm_g(), ix.dec_norm_b());
    let mut dy = layer_norm_backward(&d_out, d, &c.dec_ln, p.get(ix.dec_norm_g()), dg, db);
    for b in (0..cfg.dec_depth).rev() {
        dy = block_backward(p, &mut g, ix.dec_block(b), &c.dec[b], dy, m, d, h, r);
    }
    {
        let dt = g.get_mut(ix.mask_token());
        for &i in &c.masked {
            for k in 0..d {
                dt[k] += dy[i * d + k];
            }
        }
    }
    let mut dz = Vec::with_capacity(v * d);
    for &i in &c.visible {
        dz.extend_from_slice(&dy[i * d..(i + 1) * d]);
    }
    let (dw, db) = g.pair_mut(ix.dec_embed_w(), ix.dec_embed_b());
    let d_lat = linear_backward(&c.latent, v, e, p.get(ix.dec_embed_w()), d, &dz, dw, db);
    let (dg, db) = g.pair_mut(ix.enc_norm_g(), ix.enc_norm_b());
    let mut dx = layer_norm_backward(&d_lat, e, &c.enc_ln, p.get(ix.enc_norm_g()), dg, db);
    for b in (0..cfg.enc_depth).rev() {
        dx = block_backward(p, &mut g, ix.enc_block(b), &c.enc[b], dx, v, e, h, r);
    }
    let (dw, db) = g.pair_mut(Index::PATCH_W, Index::PATCH_B);
    linear_backward(&c.xv, v, pd, p.get(Index::PATCH_W), e, &dx, dw, db);
    g
}
