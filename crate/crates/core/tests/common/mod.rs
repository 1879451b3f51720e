//! Shared test oracles: central finite differences and Monte-Carlo helpers.
#![allow(dead_code)]

use loragen::rng::Rng;
use loragen::tensor::{Tape, Tensor, Var};

/// Relative gradient error `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)`
/// for every input of `f`, using a fixed random projection of the output.
///
/// The finite-difference side only ever calls the forward pass; the analytic
/// side comes from the tape's reverse sweep.
pub fn gradcheck<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&tape, &vars);
    let mut rng = Rng::new(seed);
    let proj: Vec<f32> = (0..out.value().len()).map(|_| rng.normal_f32()).collect();
    let grads = tape.backward_with(out, proj.clone());

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars);
        let v = out.value();
        v.data()
            .iter()
            .zip(&proj)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };

    let mut errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(|g| g.iter().map(|x| *x as f64).collect())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0f64; input.len()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for j in 0..input.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            // Use the actually representable step.
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            numeric[j] = (plus - minus) / step;
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    errors
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Random tensor whose entries stay at least `margin` away from zero, so
/// piecewise-linear ops are not probed across their kink.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize], margin: f32) -> Tensor {
    let mut t = Tensor::gaussian(rng, shape);
    for x in t.data_mut() {
        if x.abs() < margin {
            *x = if *x < 0.0 { -margin - x.abs() } else { margin + x.abs() };
        }
    }
    t
}

pub fn rand_extent(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub mod reference;

type TapeFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

/// A primitive under test: f32 inputs, the tape graph, and an independent
/// f64 forward that serves as the finite-difference oracle.
pub struct Probe {
    pub inputs: Vec<Tensor>,
    pub graph: TapeFn,
    pub reference: RefFn,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeReport {
    /// Relative error of the tape forward against the reference.
    pub forward: f64,
    /// Worst relative gradient error over the inputs.
    pub gradient: f64,
}

impl Probe {
    fn new(
        inputs: Vec<Tensor>,
        graph: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'static,
        reference: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
    ) -> Self {
        Self {
            inputs,
            graph: Box::new(graph),
            reference: Box::new(reference),
        }
    }

    /// Tape gradients against central differences of the reference, stepping
    /// each f32 input by `h` and using the representable step size.
    pub fn run(&self, h: f32, seed: u64) -> ProbeReport {
        let tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_grad()))
            .collect();
        let out = (self.graph)(&tape, &vars);
        let out_data: Vec<f64> = out.data().iter().map(|&x| x as f64).collect();
        let mut rng = Rng::new(seed);
        let proj: Vec<f32> = (0..out_data.len()).map(|_| rng.normal_f32()).collect();
        let grads = tape.backward_with(out, proj.clone());

        let as_f64 = |ts: &[Tensor]| -> Vec<Vec<f64>> {
            ts.iter()
                .map(|t| t.data().iter().map(|&x| x as f64).collect())
                .collect()
        };
        let reference_out = (self.reference)(&as_f64(&self.inputs));
        let forward = relative_error(&out_data, &reference_out);

        let eval = |xs: &[Vec<f64>]| -> f64 {
            (self.reference)(xs)
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * *b as f64)
                .sum()
        };
        let mut gradient: f64 = 0.0;
        let mut work = as_f64(&self.inputs);
        for (i, input) in self.inputs.iter().enumerate() {
            let analytic: Vec<f64> = grads
                .get(vars[i])
                .map(|g| g.iter().map(|&x| x as f64).collect())
                .unwrap_or_else(|| vec![0.0; input.len()]);
            let mut numeric = vec![0.0; input.len()];
            for j in 0..input.len() {
                let orig = input.data()[j];
                let (hi, lo) = ((orig + h) as f64, (orig - h) as f64);
                work[i][j] = hi;
                let plus = eval(&work);
                work[i][j] = lo;
                let minus = eval(&work);
                work[i][j] = orig as f64;
                numeric[j] = (plus - minus) / (hi - lo);
            }
            gradient = gradient.max(relative_error(&analytic, &numeric));
        }
        ProbeReport { forward, gradient }
    }
}

pub type ProbeBuilder = fn(&mut Rng) -> Probe;

fn gauss(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::gaussian(rng, shape)
}

fn ext(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rand_extent(rng, lo, hi)
}

fn pair(rng: &mut Rng) -> [usize; 2] {
    [ext(rng, 1, 8), ext(rng, 1, 8)]
}

/// Every differentiable primitive, each as a randomized probe with extents
/// of at most 8.
pub fn primitive_probes() -> Vec<(&'static str, ProbeBuilder)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (ext(rng, 1, 8), ext(rng, 1, 8), ext(rng, 1, 8));
            let inputs = vec![gauss(rng, &[m, k]), gauss(rng, &[k, n])];
            Probe::new(
                inputs,
                |_, v| v[0].matmul(&v[1]).unwrap(),
                move |x| reference::matmul(&x[0], &x[1], m, k, n),
            )
        }),
        ("transpose", |rng| {
            let [r, c] = pair(rng);
            Probe::new(
                vec![gauss(rng, &[r, c])],
                |_, v| v[0].transpose().unwrap(),
                move |x| reference::transpose(&x[0], r, c),
            )
        }),
        ("add", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s), gauss(rng, &s)],
                |_, v| v[0].add(&v[1]).unwrap(),
                |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
            )
        }),
        ("sub", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s), gauss(rng, &s)],
                |_, v| v[0].sub(&v[1]).unwrap(),
                |x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
            )
        }),
        ("mul", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s), gauss(rng, &s)],
                |_, v| v[0].mul(&v[1]).unwrap(),
                |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
            )
        }),
        ("add_tiled", |rng| {
            let [r, c] = pair(rng);
            Probe::new(
                vec![gauss(rng, &[r, c]), gauss(rng, &[c])],
                |_, v| v[0].add_tiled(&v[1]).unwrap(),
                move |x| (0..r * c).map(|i| x[0][i] + x[1][i % c]).collect(),
            )
        }),
        ("add_channel_bias", |rng| {
            let (n, c, l) = (ext(rng, 1, 3), ext(rng, 1, 5), ext(rng, 1, 8));
            Probe::new(
                vec![gauss(rng, &[n, c, l]), gauss(rng, &[c])],
                |_, v| v[0].add_channel_bias(&v[1]).unwrap(),
                move |x| (0..n * c * l).map(|i| x[0][i] + x[1][(i / l) % c]).collect(),
            )
        }),
        ("scale", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s)],
                |_, v| v[0].scale(-1.7).add_scalar(0.3),
                |x| x[0].iter().map(|a| -1.7f32 as f64 * a + 0.3f32 as f64).collect(),
            )
        }),
        ("relu", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![away_from_zero(rng, &s, 0.05)],
                |_, v| v[0].relu(),
                |x| x[0].iter().map(|a| a.max(0.0)).collect(),
            )
        }),
        ("gelu", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s)],
                |_, v| v[0].gelu(),
                |x| x[0].iter().map(|&a| reference::gelu(a)).collect(),
            )
        }),
        ("exp", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s)],
                |_, v| v[0].exp(),
                |x| x[0].iter().map(|a| a.exp()).collect(),
            )
        }),
        ("clamp", |rng| {
            let s = pair(rng);
            let mut a = Tensor::randn(rng, &s, 1.5);
            // keep clear of the clamp edges at ±1
            for x in a.data_mut() {
                if (x.abs() - 1.0).abs() < 0.05 {
                    *x *= 1.2;
                }
            }
            Probe::new(
                vec![a],
                |_, v| v[0].clamp(-1.0, 1.0),
                |x| x[0].iter().map(|a| a.clamp(-1.0, 1.0)).collect(),
            )
        }),
        ("softmax", |rng| {
            let s = [ext(rng, 1, 6), ext(rng, 1, 6), ext(rng, 1, 6)];
            let axis = rng.below(3);
            Probe::new(
                vec![gauss(rng, &s)],
                move |_, v| v[0].softmax(axis).unwrap(),
                move |x| reference::softmax(&x[0], &s, axis),
            )
        }),
        ("layer_norm", |rng| {
            // d = 2 is degenerate: the output is ±1 and the x-gradient ~eps
            let (r, d) = (ext(rng, 1, 8), ext(rng, 3, 8));
            let mut g = Tensor::randn(rng, &[d], 0.3);
            g.data_mut().iter_mut().for_each(|v| *v += 1.0);
            Probe::new(
                vec![gauss(rng, &[r, d]), g, gauss(rng, &[d])],
                |_, v| v[0].layer_norm(&v[1], &v[2]).unwrap(),
                |x| reference::layer_norm(&x[0], &x[1], &x[2]),
            )
        }),
        ("sum", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s)],
                |_, v| v[0].sum(),
                |x| vec![x[0].iter().sum()],
            )
        }),
        ("mean", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s)],
                |_, v| v[0].mean(),
                |x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64],
            )
        }),
        ("concat", |rng| {
            let (r, c1, c2) = (ext(rng, 1, 5), ext(rng, 1, 5), ext(rng, 1, 5));
            Probe::new(
                vec![gauss(rng, &[r, c1, 3]), gauss(rng, &[r, c2, 3])],
                |_, v| loragen::tensor::concat(&[v[0], v[1]], 1).unwrap(),
                move |x| {
                    (0..r)
                        .flat_map(|i| {
                            let a = &x[0][i * c1 * 3..(i + 1) * c1 * 3];
                            let b = &x[1][i * c2 * 3..(i + 1) * c2 * 3];
                            a.iter().chain(b).copied().collect::<Vec<_>>()
                        })
                        .collect()
                },
            )
        }),
        ("mse", |rng| {
            let s = pair(rng);
            Probe::new(
                vec![gauss(rng, &s), gauss(rng, &s)],
                |_, v| v[0].mse(&v[1]).unwrap(),
                |x| {
                    let n = x[0].len() as f64;
                    vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n]
                },
            )
        }),
        ("cross_entropy", |rng| {
            let (n, c) = (ext(rng, 1, 8), ext(rng, 2, 8));
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let l2 = labels.clone();
            Probe::new(
                vec![gauss(rng, &[n, c])],
                move |_, v| v[0].cross_entropy(&labels).unwrap(),
                move |x| vec![reference::cross_entropy(&x[0], &l2)],
            )
        }),
        ("narrow", |rng| {
            let (r, c) = (ext(rng, 1, 8), ext(rng, 2, 8));
            let start = rng.below(c - 1);
            let len = c - start - 1;
            Probe::new(
                vec![gauss(rng, &[r, c])],
                move |_, v| v[0].narrow(1, start, len).unwrap(),
                move |x| {
                    (0..r)
                        .flat_map(|i| x[0][i * c + start..i * c + start + len].to_vec())
                        .collect()
                },
            )
        }),
        ("gather_rows", |rng| {
            let [r, c] = pair(rng);
            let idx: Vec<usize> = (0..ext(rng, 1, 8)).map(|_| rng.below(r)).collect();
            let i2 = idx.clone();
            Probe::new(
                vec![gauss(rng, &[r, c])],
                move |_, v| v[0].gather_rows(&idx).unwrap(),
                move |x| i2.iter().flat_map(|&i| x[0][i * c..(i + 1) * c].to_vec()).collect(),
            )
        }),
        ("reshape", |rng| {
            let [r, c] = pair(rng);
            Probe::new(
                vec![gauss(rng, &[r, c])],
                move |_, v| v[0].reshape(&[c, r]).unwrap(),
                |x| x[0].clone(),
            )
        }),
        ("tile_length", |rng| {
            let (n, c, l) = (ext(rng, 1, 4), ext(rng, 1, 6), ext(rng, 1, 8));
            Probe::new(
                vec![gauss(rng, &[n, c])],
                move |_, v| v[0].tile_length(l).unwrap(),
                move |x| x[0].iter().flat_map(|&a| vec![a; l]).collect(),
            )
        }),
        ("conv1d", |rng| {
            let (n, cin, cout) = (ext(rng, 1, 3), ext(rng, 1, 4), ext(rng, 1, 4));
            let k = ext(rng, 1, 4);
            let stride = ext(rng, 1, 3);
            let pad = rng.below(3);
            let l = ext(rng, k.max(2), 8);
            Probe::new(
                vec![gauss(rng, &[n, cin, l]), gauss(rng, &[cout, cin, k])],
                move |_, v| v[0].conv1d(&v[1], stride, pad).unwrap(),
                move |x| reference::conv1d(&x[0], &x[1], (n, cin, l), (cout, k), stride, pad),
            )
        }),
        ("conv_transpose1d", |rng| {
            let (n, cin, cout) = (ext(rng, 1, 3), ext(rng, 1, 4), ext(rng, 1, 4));
            let k = ext(rng, 1, 4);
            let stride = ext(rng, 1, 3);
            let out_pad = rng.below(stride);
            let l = ext(rng, 1, 8);
            let full = (l - 1) * stride + k + out_pad;
            // at least one output position must survive the padding
            let pad = rng.below(3).min((full - 1) / 2);
            Probe::new(
                vec![gauss(rng, &[n, cin, l]), gauss(rng, &[cin, cout, k])],
                move |_, v| {
                    v[0].conv_transpose1d_padded(&v[1], stride, pad, out_pad)
                        .unwrap()
                },
                move |x| {
                    reference::conv_transpose1d(
                        &x[0],
                        &x[1],
                        (n, cin, l),
                        (cout, k),
                        stride,
                        pad,
                        out_pad,
                    )
                },
            )
        }),
        ("causal_attention", |rng| {
            let (s, t, heads) = (ext(rng, 1, 3), ext(rng, 1, 5), ext(rng, 1, 2));
            let d = heads * ext(rng, 1, 4);
            let shape = [s * t, d];
            Probe::new(
                vec![gauss(rng, &shape), gauss(rng, &shape), gauss(rng, &shape)],
                move |_, x| x[0].causal_attention(&x[1], &x[2], s, heads).unwrap(),
                move |x| reference::causal_attention(&x[0], &x[1], &x[2], (s, t, d), heads),
            )
        }),
    ]
}
