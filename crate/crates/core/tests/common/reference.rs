//! Plain f64 forward implementations used as finite-difference oracles.
//! Written for clarity, not speed; nothing here shares code with the library.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax along `axis` of a row-major tensor with `shape`.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (x[at(j)] - max).exp()).sum();
            for j in 0..n {
                y[at(j)] = (x[at(j)] - max).exp() / z;
            }
        }
    }
    y
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = gain.len();
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out[j] = (row[j] - m) * rs * gain[j] + bias[j];
        }
    }
    y
}

pub fn cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    let c = logits.len() / labels.len();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            let row = &logits[r * c..(r + 1) * c];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum();
    total / labels.len() as f64
}

/// Cross-correlation. `x`: [n, cin, l], `w`: [cout, cin, k].
#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    (n, cin, l): (usize, usize, usize),
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let lout = (l + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * cout * lout];
    for b in 0..n {
        for o in 0..cout {
            for t in 0..lout {
                let mut s = 0.0;
                for i in 0..cin {
                    for q in 0..k {
                        let pos = (t * stride + q) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            s += w[(o * cin + i) * k + q] * x[(b * cin + i) * l + pos as usize];
                        }
                    }
                }
                y[(b * cout + o) * lout + t] = s;
            }
        }
    }
    y
}

/// Transposed convolution. `x`: [n, cin, l], `w`: [cin, cout, k].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d(
    x: &[f64],
    w: &[f64],
    (n, cin, l): (usize, usize, usize),
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Vec<f64> {
    let lout = (l - 1) * stride + k + out_pad - 2 * pad;
    let mut y = vec![0.0; n * cout * lout];
    for b in 0..n {
        for i in 0..cin {
            for t in 0..l {
                for o in 0..cout {
                    for q in 0..k {
                        let pos = (t * stride + q) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < lout {
                            y[(b * cout + o) * lout + pos as usize] +=
                                x[(b * cin + i) * l + t] * w[(i * cout + o) * k + q];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Multi-head causal self-attention over `n_seq` sequences of length `t`.
/// Inputs are [n_seq·t, d] with heads laid out as contiguous column blocks.
pub fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (n_seq, t, d): (usize, usize, usize),
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; q.len()];
    for s in 0..n_seq {
        for h in 0..heads {
            for i in 0..t {
                let qi = (s * t + i) * d + h * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = (s * t + j) * d + h * dh;
                        (0..dh).map(|c| q[qi + c] * k[kj + c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax(&scores, &[scores.len()], 0);
                for (j, pj) in p.iter().enumerate() {
                    let vj = (s * t + j) * d + h * dh;
                    for c in 0..dh {
                        out[qi + c] += pj * v[vj + c];
                    }
                }
            }
        }
    }
    out
}
