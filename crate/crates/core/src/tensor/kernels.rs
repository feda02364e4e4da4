//! Slice-level kernels shared by the graph forward and backward passes.

use super::Real;

/// `c[m, n] = a[m, k] · b[k, n]`, row-major, i-p-j loop order.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if a_ip == T::zero() {
                continue;
            }
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `da[m, k] = dc[m, n] · bᵀ` where `b` is `[k, n]`.
pub(crate) fn matmul_grad_a<T: Real>(dc: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = vec![T::zero(); m * k];
    for (dc_row, da_row) in dc.chunks_exact(n).zip(da.chunks_exact_mut(k)) {
        for (da_ip, b_row) in da_row.iter_mut().zip(b.chunks_exact(n)) {
            *da_ip = dot(dc_row, b_row);
        }
    }
    da
}

/// `db[k, n] = aᵀ · dc` where `a` is `[m, k]` and `dc` is `[m, n]`.
pub(crate) fn matmul_grad_b<T: Real>(a: &[T], dc: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    for (a_row, dc_row) in a.chunks_exact(k).zip(dc.chunks_exact(n)).take(m) {
        for (&a_ip, db_row) in a_row.iter().zip(db.chunks_exact_mut(n)) {
            if a_ip == T::zero() {
                continue;
            }
            for (db_pj, &g) in db_row.iter_mut().zip(dc_row) {
                *db_pj += a_ip * g;
            }
        }
    }
    db
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise numerically stable softmax in place.
pub(crate) fn softmax_rows<T: Real>(data: &mut [T], n: usize) {
    for row in data.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Rotary angle table: `cos`/`sin` for `positions × half` frequencies.
pub(crate) fn rope_angles(pos: usize, half: usize, theta: f64) -> impl Iterator<Item = (f64, f64)> {
    (0..half).map(move |i| {
        let freq = theta.powf(-(2.0 * i as f64) / (2.0 * half as f64));
        let angle = pos as f64 * freq;
        (angle.cos(), angle.sin())
    })
}

/// Multi-head scaled dot-product attention on token-major inputs.
///
/// `q` is `[n, d]`, `k` and `v` are `[m, d]`, heads occupy contiguous
/// `d / n_heads` column blocks. Under `causal`, query `i` sits at absolute
/// position `m - n + i` and sees keys `0..=m - n + i`. Returns the output
/// `[n, d]` and the probabilities `[n_heads, n, m]` (masked entries zero).
pub(crate) fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    m: usize,
    d: usize,
    n_heads: usize,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let hd = d / n_heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); n_heads * n * m];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let visible = if causal { m - n + i + 1 } else { m };
            let q_row = &q[i * d + cols.start..i * d + cols.end];
            let p_row = &mut probs[(h * n + i) * m..(h * n + i) * m + m];
            for (j, p) in p_row.iter_mut().enumerate().take(visible) {
                *p = dot(q_row, &k[j * d + cols.start..j * d + cols.end]) * scale;
            }
            softmax_in_place(&mut p_row[..visible]);
            let o_row = &mut out[i * d + cols.start..i * d + cols.end];
            for (j, &p) in p_row.iter().enumerate().take(visible) {
                let v_row = &v[j * d + cols.start..j * d + cols.end];
                for (o, &x) in o_row.iter_mut().zip(v_row) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into a new buffer with axes `a` and `b` swapped.
pub(crate) fn transpose<T: Real>(src: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    let in_strides = strides(shape);
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    // Input stride for each output axis.
    let mut walk = in_strides.clone();
    walk.swap(a, b);
    let ndim = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; ndim];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            offset += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
