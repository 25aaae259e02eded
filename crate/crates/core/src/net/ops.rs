//! Row-major dense kernels and their reverse-mode counterparts. A matrix of
//! `s` rows by `d` columns is a flat slice of length `s * d`.

use super::real::Real;

pub const LN_EPS: f64 = 1e-6;

/// `y = x W + b` with `x: s x din`, `W: din x dout`.
pub fn linear<T: Real>(x: &[T], s: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(s * dout);
    for _ in 0..s {
        y.extend_from_slice(b);
    }
    T::gemm(
        s,
        din,
        dout,
        T::one(),
        x,
        din as isize,
        1,
        w,
        dout as isize,
        1,
        T::one(),
        &mut y,
        dout as isize,
        1,
    );
    y
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)` and returns `dx = dy W^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    s: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    T::gemm(
        din,
        s,
        dout,
        T::one(),
        x,
        1,
        din as isize,
        dy,
        dout as isize,
        1,
        T::one(),
        dw,
        dout as isize,
        1,
    );
    for row in dy.chunks_exact(dout) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![T::zero(); s * din];
    T::gemm(
        s,
        dout,
        din,
        T::one(),
        dy,
        dout as isize,
        1,
        w,
        1,
        dout as isize,
        T::zero(),
        &mut dx,
        din as isize,
        1,
    );
    dx
}

pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let s = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(s);
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..s {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd.push(rs);
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    d: usize,
    cache: &LnCache<T>,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let s = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..s {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        let rs = cache.rstd[r];
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[r * d + i] = rs * (dxh - inv_d * sum_dxh - xh[i] * inv_d * sum_dxh_xh);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub struct AttnCache<T> {
    /// Softmax probabilities, `heads x s x s`.
    pub probs: Vec<T>,
}

/// Multi-head scaled dot-product attention over a packed `s x 3d` QKV block
/// (`[q | k | v]`, heads contiguous within each). Returns `s x d`.
pub fn attention<T: Real>(qkv: &[T], s: usize, d: usize, heads: usize) -> (Vec<T>, AttnCache<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let row = 3 * d;
    let mut out = vec![T::zero(); s * d];
    let mut probs = vec![T::zero(); heads * s * s];
    for h in 0..heads {
        let q = &qkv[h * dh..];
        let k = &qkv[d + h * dh..];
        let v = &qkv[2 * d + h * dh..];
        let p = &mut probs[h * s * s..(h + 1) * s * s];
        T::gemm(s, dh, s, scale, q, row as isize, 1, k, 1, row as isize, T::zero(), p, s as isize, 1);
        for r in p.chunks_exact_mut(s) {
            let mx = r.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in r.iter_mut() {
                *e = (*e - mx).exp();
                z += *e;
            }
            let inv = T::one() / z;
            for e in r.iter_mut() {
                *e *= inv;
            }
        }
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            p,
            s as isize,
            1,
            v,
            row as isize,
            1,
            T::zero(),
            &mut out[h * dh..],
            d as isize,
            1,
        );
    }
    (out, AttnCache { probs })
}

pub fn attention_backward<T: Real>(
    dout: &[T],
    qkv: &[T],
    cache: &AttnCache<T>,
    s: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let row = 3 * d;
    let mut dqkv = vec![T::zero(); s * row];
    let mut dp = vec![T::zero(); s * s];
    for h in 0..heads {
        let q = &qkv[h * dh..];
        let k = &qkv[d + h * dh..];
        let v = &qkv[2 * d + h * dh..];
        let p = &cache.probs[h * s * s..(h + 1) * s * s];
        let dout_h = &dout[h * dh..];
        // dV = P^T dO
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            p,
            1,
            s as isize,
            dout_h,
            d as isize,
            1,
            T::zero(),
            &mut dqkv[2 * d + h * dh..],
            row as isize,
            1,
        );
        // dP = dO V^T
        T::gemm(s, dh, s, T::one(), dout_h, d as isize, 1, v, 1, row as isize, T::zero(), &mut dp, s as isize, 1);
        // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
        for (dr, pr) in dp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for (a, &b) in dr.iter_mut().zip(pr) {
                *a = b * (*a - dot);
            }
        }
        // dQ = dS K * scale, dK = dS^T Q * scale
        T::gemm(
            s,
            s,
            dh,
            scale,
            &dp,
            s as isize,
            1,
            k,
            row as isize,
            1,
            T::zero(),
            &mut dqkv[h * dh..],
            row as isize,
            1,
        );
        T::gemm(
            s,
            s,
            dh,
            scale,
            &dp,
            1,
            s as isize,
            q,
            row as isize,
            1,
            T::zero(),
            &mut dqkv[d + h * dh..],
            row as isize,
            1,
        );
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = [1.0, 0.0, 0.5, -1.0, 2.0, 1.0];
        let b = [0.1, 0.2];
        let y = linear(&x, 2, 3, &w, &b, 2);
        assert_eq!(y, vec![1.0 + 1.0 + 6.0 + 0.1, -2.0 + 3.0 + 0.2, 4.0 + 2.5 + 12.0 + 0.1, -5.0 + 6.0 + 0.2]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let s = 3;
        let d = 4;
        let qkv: Vec<f64> = (0..s * 3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, c) = attention(&qkv, s, d, 2);
        for r in c.probs.chunks(s) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
