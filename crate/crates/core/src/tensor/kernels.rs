//! Raw slice kernels behind the tape operations.
//!
//! Convolutions use `[N, C, L]` row-major layout. Three primitives cover both
//! directions of both convolutions:
//!
//! * [`conv_gather`]: `dst[n,b,t] += Σ_{a,k} w[b,a,k] · src[n,a,t·s+k−p]`
//! * [`conv_scatter`]: `dst[n,b,t·s+k−p] += w[a,b,k] · src[n,a,t]`
//! * [`conv_correlate`]: `r[b,a,k] += Σ_{n,t} small[n,b,t] · big[n,a,t·s+k−p]`

/// Branch-free `e^x` with relative error below 2e-7 on `[-87, 88]`; inputs
/// outside are clamped. Written so loops over it vectorize.
#[inline(always)]
pub fn exp_fast(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E).round_ties_even();
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series to degree 7 on |r| ≤ ln2/2
    let mut p = 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

/// `tanh` through [`exp_fast`]; absolute error below 3e-7.
#[inline(always)]
pub fn tanh_fast(x: f32) -> f32 {
    let e = exp_fast(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Column width of the register tile in [`matmul_acc`].
const NR: usize = 32;
/// Lanes per accumulator in the dot-product kernels.
const W: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let full = n / NR * NR;
    let mut j0 = 0;
    while j0 < full {
        // the k×NR panel of `b` stays in L1 across all row blocks
        let mut i = 0;
        while i + 4 <= m {
            tile::<4>(a, b, c, i, j0, k, n);
            i += 4;
        }
        while i < m {
            tile::<1>(a, b, c, i, j0, k, n);
            i += 1;
        }
        j0 += NR;
    }
    if full < n {
        matmul_cols(a, b, c, m, k, n, full);
    }
}

/// `MR×NR` block of `c` held in registers while streaming over `k`.
#[inline(always)]
fn tile<const MR: usize>(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    i0: usize,
    j0: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f32; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
    }
    for p in 0..k {
        let bp: &[f32; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let x = a[(i0 + r) * k + p];
            for j in 0..NR {
                row[j] += x * bp[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
    }
}

/// Columns `j0..n` of [`matmul_acc`], row by row.
fn matmul_cols(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, j0: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let bp = &b[p * n + j0..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(bp) {
                *cv += x * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    let mut i = 0;
    while i < m {
        let mi = if i + 4 <= m { 4 } else { 1 };
        let mut p = 0;
        while p < k {
            let pj = if p + 4 <= k { 4 } else { 1 };
            match (mi, pj) {
                (4, 4) => dot_block::<4, 4>(a, b, c, i, p, n, k),
                (4, _) => dot_block::<4, 1>(a, b, c, i, p, n, k),
                (_, 4) => dot_block::<1, 4>(a, b, c, i, p, n, k),
                _ => dot_block::<1, 1>(a, b, c, i, p, n, k),
            }
            p += pj;
        }
        i += mi;
    }
}

/// Fused where the target has FMA; `mul_add` without it is a libm call.
#[inline(always)]
fn fmadd(x: f32, y: f32, acc: f32) -> f32 {
    if cfg!(target_feature = "fma") {
        x.mul_add(y, acc)
    } else {
        x * y + acc
    }
}

/// `MI×PJ` dot products between rows of `a` and rows of `b`.
#[inline(always)]
fn dot_block<const MI: usize, const PJ: usize>(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    i0: usize,
    p0: usize,
    n: usize,
    k: usize,
) {
    let ar: [&[f32]; MI] = std::array::from_fn(|r| &a[(i0 + r) * n..(i0 + r + 1) * n]);
    let br: [&[f32]; PJ] = std::array::from_fn(|q| &b[(p0 + q) * n..(p0 + q + 1) * n]);
    let mut acc = [[[0.0f32; W]; PJ]; MI];
    let chunks = n / W;
    for ch in 0..chunks {
        let xs: [[f32; W]; MI] = std::array::from_fn(|r| ar[r][ch * W..ch * W + W].try_into().unwrap());
        let ys: [[f32; W]; PJ] = std::array::from_fn(|q| br[q][ch * W..ch * W + W].try_into().unwrap());
        for r in 0..MI {
            for q in 0..PJ {
                for j in 0..W {
                    acc[r][q][j] = fmadd(xs[r][j], ys[q][j], acc[r][q][j]);
                }
            }
        }
    }
    for r in 0..MI {
        for q in 0..PJ {
            let mut s = acc[r][q].iter().sum::<f32>();
            for t in chunks * W..n {
                s += ar[r][t] * br[q][t];
            }
            c[(i0 + r) * k + p0 + q] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    // Transpose the (small) left operand once, then reuse the blocked kernel.
    let mut at = vec![0.0f32; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    matmul_acc(&at, b, c, k, m, n);
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Range of `t` in `0..t_len` such that `0 <= t*s + k - p < big_len`.
#[inline]
fn valid_range(t_len: usize, big_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // t*s + k >= p  =>  t >= ceil((p - k) / s) when p > k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // t*s + k - p <= big_len - 1  =>  t <= (big_len - 1 + p - k) / s
    let hi = if big_len + pad > k {
        ((big_len - 1 + pad - k) / stride + 1).min(t_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Layout descriptor shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

/// Column matrix `[a·K, N·t_len]` for the whole batch, written in order so
/// no zero fill is needed.
fn im2col_batch(src: &[f32], a_ch: usize, src_len: usize, t_len: usize, d: ConvDims) -> Vec<f32> {
    let mut cols = Vec::with_capacity(a_ch * d.kernel * d.batch * t_len);
    for a in 0..a_ch {
        for k in 0..d.kernel {
            let (lo, hi) = valid_range(t_len, src_len, d.stride, k, d.pad);
            for n in 0..d.batch {
                let inp = &src[(n * a_ch + a) * src_len..(n * a_ch + a + 1) * src_len];
                cols.resize(cols.len() + lo, 0.0);
                if lo < hi {
                    let start = lo * d.stride + k - d.pad;
                    if d.stride == 1 {
                        cols.extend_from_slice(&inp[start..start + (hi - lo)]);
                    } else {
                        cols.extend(inp[start..].iter().step_by(d.stride).take(hi - lo));
                    }
                }
                cols.resize(cols.len() + t_len - hi.max(lo), 0.0);
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col_batch`] for one item: `dst[b, t·s+k−p] += cols[(b,k), off+t]`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    b_ch: usize,
    stride_row: usize,
    off: usize,
    t_len: usize,
    dst: &mut [f32],
    dst_len: usize,
    d: ConvDims,
) {
    for b in 0..b_ch {
        let out = &mut dst[b * dst_len..(b + 1) * dst_len];
        for k in 0..d.kernel {
            let base = (b * d.kernel + k) * stride_row + off;
            let row = &cols[base..base + t_len];
            let (lo, hi) = valid_range(t_len, dst_len, d.stride, k, d.pad);
            if lo >= hi {
                continue;
            }
            let start = lo * d.stride + k - d.pad;
            if d.stride == 1 {
                axpy(1.0, &row[lo..hi], &mut out[start..start + (hi - lo)]);
            } else {
                for (r, o) in row[lo..hi].iter().zip(out[start..].iter_mut().step_by(d.stride)) {
                    *o += *r;
                }
            }
        }
    }
}

/// `[N, C, L]` to channel-major `[C, N·L]`.
fn channel_major(x: &[f32], batch: usize, c: usize, l: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for n in 0..batch {
            out.extend_from_slice(&x[(n * c + ch) * l..(n * c + ch + 1) * l]);
        }
    }
    out
}

/// `dst[n,b,t] += Σ_{a,k} w[b,a,k] · src[n,a,t·s+k−p]` for `t < dst_len`.
#[allow(clippy::too_many_arguments)]
pub fn conv_gather(
    src: &[f32],
    a_ch: usize,
    src_len: usize,
    w: &[f32],
    dst: &mut [f32],
    b_ch: usize,
    dst_len: usize,
    d: ConvDims,
) {
    let ak = a_ch * d.kernel;
    let width = d.batch * dst_len;
    let cols = im2col_batch(src, a_ch, src_len, dst_len, d);
    let mut wide = vec![0.0f32; b_ch * width];
    matmul_acc(w, &cols, &mut wide, b_ch, ak, width);
    for n in 0..d.batch {
        for b in 0..b_ch {
            let from = &wide[b * width + n * dst_len..b * width + (n + 1) * dst_len];
            let to = &mut dst[(n * b_ch + b) * dst_len..(n * b_ch + b + 1) * dst_len];
            to.iter_mut().zip(from).for_each(|(t, f)| *t += f);
        }
    }
}

/// `dst[n,b,t·s+k−p] += w[a,b,k] · src[n,a,t]`, dropping positions outside `dst_len`.
#[allow(clippy::too_many_arguments)]
pub fn conv_scatter(
    src: &[f32],
    a_ch: usize,
    src_len: usize,
    w: &[f32],
    dst: &mut [f32],
    b_ch: usize,
    dst_len: usize,
    d: ConvDims,
) {
    let kk = d.kernel;
    // wt[(b,k), a] = w[a,b,k]
    let mut wt = vec![0.0f32; b_ch * kk * a_ch];
    for a in 0..a_ch {
        for b in 0..b_ch {
            for k in 0..kk {
                wt[(b * kk + k) * a_ch + a] = w[(a * b_ch + b) * kk + k];
            }
        }
    }
    let width = d.batch * src_len;
    let inp = channel_major(src, d.batch, a_ch, src_len);
    let mut cols = vec![0.0f32; b_ch * kk * width];
    matmul_acc(&wt, &inp, &mut cols, b_ch * kk, a_ch, width);
    for n in 0..d.batch {
        let out = &mut dst[n * b_ch * dst_len..(n + 1) * b_ch * dst_len];
        col2im(&cols, b_ch, width, n * src_len, src_len, out, dst_len, d);
    }
}

/// `r[b,a,k] += Σ_{n,t} small[n,b,t] · big[n,a,t·s+k−p]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_correlate(
    small: &[f32],
    b_ch: usize,
    small_len: usize,
    big: &[f32],
    a_ch: usize,
    big_len: usize,
    r: &mut [f32],
    d: ConvDims,
) {
    let ak = a_ch * d.kernel;
    let cols = im2col_batch(big, a_ch, big_len, small_len, d);
    let sm = channel_major(small, d.batch, b_ch, small_len);
    matmul_nt_acc(&sm, &cols, r, b_ch, d.batch * small_len, ak);
}

/// Causal multi-head attention over `n_seq` sequences of length `t`.
///
/// `q`, `k`, `v` are `[n_seq·t, d]`; heads split `d` into contiguous blocks.
/// Returns `(out, probs)` with `probs` laid out `[n_seq, heads, t, t]`.
pub fn causal_attention_fwd(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n_seq: usize,
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; n_seq * t * d];
    let mut probs = vec![0.0f32; n_seq * heads * t * t];
    for s in 0..n_seq {
        for h in 0..heads {
            let p_base = (s * heads + h) * t * t;
            for i in 0..t {
                let qi = &q[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                let row = &mut probs[p_base + i * t..p_base + (i + 1) * t];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                    row[j] = dot(qi, kj) * scale;
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for x in row[..=i].iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let inv = 1.0 / sum;
                for x in row[..=i].iter_mut() {
                    *x *= inv;
                }
                let oi = &mut out[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                for (j, &pj) in row[..=i].iter().enumerate() {
                    let vj = &v[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                    axpy(pj, vj, oi);
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`causal_attention_fwd`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_bwd(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    dims: (usize, usize, usize, usize),
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let (n_seq, t, d, heads) = dims;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ds = vec![0.0f32; t];
    for s in 0..n_seq {
        for h in 0..heads {
            let p_base = (s * heads + h) * t * t;
            let span = |i: usize| (s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh;
            for i in 0..t {
                let row = &probs[p_base + i * t..p_base + (i + 1) * t];
                let doi = &dout[span(i)];
                // dP_ij = dO_i · v_j ; dv_j += P_ij dO_i
                let mut weighted = 0.0;
                for j in 0..=i {
                    let dp = dot(doi, &v[span(j)]);
                    ds[j] = dp;
                    weighted += dp * row[j];
                    axpy(row[j], doi, &mut dv[span(j)]);
                }
                for j in 0..=i {
                    ds[j] = row[j] * (ds[j] - weighted) * scale;
                }
                for j in 0..=i {
                    axpy(ds[j], &k[span(j)], &mut dq[span(i)]);
                    axpy(ds[j], &q[span(i)], &mut dk[span(j)]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c
    }

    #[test]
    fn blocked_matmuls_match_naive() {
        let mut rng = crate::rng::Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 3, 32), (9, 17, 70), (8, 40, 96), (5, 33, 129)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.normal_f32()).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.normal_f32()).collect();
            let want = naive(&a, &b, m, k, n);
            let close = |got: &[f32], want: &[f64]| {
                got.iter().zip(want).all(|(&g, &w)| (g as f64 - w).abs() <= 1e-4 * (1.0 + w.abs()))
            };
            // accumulate onto ones to check the += contract
            let mut c = vec![1.0f32; m * n];
            matmul_acc(&a, &b, &mut c, m, k, n);
            let shifted: Vec<f64> = want.iter().map(|w| w + 1.0).collect();
            assert!(close(&c, &shifted), "matmul_acc {m}x{k}x{n}");
            // a · (bᵀ)ᵀ with bᵀ stored [n×k]
            let mut bt = vec![0.0f32; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c = vec![0.0f32; m * n];
            matmul_nt_acc(&a, &bt, &mut c, m, k, n);
            assert!(close(&c, &want), "matmul_nt_acc {m}x{k}x{n}");
            // (aᵀ)ᵀ · b with aᵀ stored [k×m]
            let mut at = vec![0.0f32; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c = vec![0.0f32; m * n];
            matmul_tn_acc(&at, &b, &mut c, k, m, n);
            assert!(close(&c, &want), "matmul_tn_acc {m}x{k}x{n}");
        }
    }

    #[test]
    fn fast_exp_and_tanh_track_f64() {
        let mut worst = (0.0f64, 0.0f64);
        for i in -80_000..=80_000 {
            let x = i as f32 * 1e-3;
            let e = exp_fast(x) as f64;
            let want = (x as f64).exp();
            worst.0 = worst.0.max((e - want).abs() / want);
            worst.1 = worst.1.max((tanh_fast(x) as f64 - (x as f64).tanh()).abs());
        }
        assert!(worst.0 < 1e-7 * 2.0, "exp relative error {}", worst.0);
        assert!(worst.1 < 3e-7, "tanh absolute error {}", worst.1);
        assert_eq!(tanh_fast(0.0), 0.0);
        assert_eq!(tanh_fast(50.0), 1.0);
        assert_eq!(tanh_fast(-50.0), -1.0);
    }

    #[test]
    fn valid_range_bounds() {
        // len 4 input, k=3, pad 1, stride 1, output len 4.
        assert_eq!(valid_range(4, 4, 1, 0, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1, 1), (0, 4));
        assert_eq!(valid_range(4, 4, 1, 2, 1), (0, 3));
        // stride 2 downsample 8 -> 4 with pad 1.
        assert_eq!(valid_range(4, 8, 2, 0, 1), (1, 4));
        assert_eq!(valid_range(4, 8, 2, 2, 1), (0, 4));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - i as f32 * 0.1).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-3);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);
        // bᵀ as 2x3
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0];
        let mut c2 = [0.0; 4];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ·c where a is treated as 2x3
        let mut c3 = [0.0; 6];
        matmul_tn_acc(&a, &[1.0, 0.0, 0.0, 1.0], &mut c3, 2, 3, 2);
        assert_eq!(c3, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
