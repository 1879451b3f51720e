mod common;

use common::{gradcheck, primitive_probes};
use loragen::rng::Rng;
use loragen::tensor::{concat, Adam, AdamConfig, Tape, Tensor};
use loragen::Error;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(eye.matmul(&m).unwrap().data(), vec![1.0, 2.0, 3.0, 4.0]);

    let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
    let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(a.matmul(&b).unwrap().data(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[2, 3]));
    match a.matmul(&b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {:?}", other.map(|v| v.shape())),
    }
}

#[test]
fn matmul_5x4_4x3_gradient() {
    let mut rng = Rng::new(5);
    let a = Tensor::gaussian(&mut rng, &[5, 4]);
    let b = Tensor::gaussian(&mut rng, &[4, 3]);
    let errs = gradcheck(&[a, b], 1e-3, 1, |_, v| v[0].matmul(&v[1]).unwrap());
    assert!(errs.iter().all(|e| *e < 1e-3), "{errs:?}");
}

#[test]
fn conv1d_examples() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
    let w = tape.leaf(&t(&[1, 1, 1], &[1.0]));
    assert_eq!(x.conv1d(&w, 1, 0).unwrap().data(), vec![1.0, 2.0, 3.0]);

    let x = tape.leaf(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.leaf(&t(&[1, 1, 2], &[1.0, 1.0]));
    assert_eq!(x.conv1d(&w, 2, 0).unwrap().data(), vec![3.0, 7.0]);
}

#[test]
fn conv1d_too_short_is_length_error() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[1, 2]));
    let w = tape.leaf(&Tensor::zeros(&[1, 1, 5]));
    assert!(matches!(x.conv1d(&w, 1, 1), Err(Error::Length { .. })));
    let y = tape.leaf(&Tensor::zeros(&[1, 1]));
    let w1 = tape.leaf(&Tensor::zeros(&[1, 1, 1]));
    assert!(matches!(y.conv_transpose1d(&w1, 1, 1), Err(Error::Length { .. })));
}

#[test]
fn conv1d_gradient_cin2_l9_k3() {
    let mut rng = Rng::new(8);
    for case in 0..5 {
        let x = Tensor::gaussian(&mut rng, &[2, 9]);
        let w = Tensor::gaussian(&mut rng, &[3, 2, 3]);
        let stride = 1 + case % 2;
        let errs = gradcheck(&[x, w], 1e-3, case as u64, move |_, v| {
            v[0].conv1d(&v[1], stride, 1).unwrap()
        });
        assert!(errs.iter().all(|e| *e < 1e-3), "{errs:?}");
    }
}

#[test]
fn conv_transpose_single_tap() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[1, 1], &[1.0]));
    let w = tape.leaf(&t(&[1, 1, 2], &[1.0, 1.0]));
    assert_eq!(x.conv_transpose1d(&w, 1, 0).unwrap().data(), vec![1.0, 1.0]);
}

/// ⟨conv1d(x, W), y⟩ == ⟨x, conv_transpose1d(y, W)⟩ where both ops read the
/// same kernel array: conv1d as [C_out, C_in, K], the transpose as
/// [C_in', C_out', K] with C_in' = C_out.
#[test]
fn conv_adjoint_identity() {
    let mut rng = Rng::new(21);
    for _ in 0..30 {
        let (n, cin, cout) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let k = 1 + rng.below(4);
        let stride = 1 + rng.below(3);
        let pad = rng.below(k);
        let l = k + rng.below(12);
        let lout = (l + 2 * pad - k) / stride + 1;
        let out_pad = l - ((lout - 1) * stride + k - 2 * pad);
        if out_pad >= stride {
            continue;
        }
        let x = Tensor::gaussian(&mut rng, &[n, cin, l]);
        let w = Tensor::gaussian(&mut rng, &[cout, cin, k]);
        let y = Tensor::gaussian(&mut rng, &[n, cout, lout]);
        let tape = Tape::new();
        let (xv, wv, yv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&y));
        let fwd = xv.conv1d(&wv, stride, pad).unwrap();
        let back = yv.conv_transpose1d_padded(&wv, stride, pad, out_pad).unwrap();
        assert_eq!(back.shape(), vec![n, cin, l]);
        let lhs: f64 = fwd.data().iter().zip(y.data()).map(|(a, b)| (a * *b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| (*a * b) as f64).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-6) < 1e-5, "{lhs} vs {rhs}");
    }
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let z = tape.leaf(&t(&[2], &[0.0, 0.0]));
    assert_eq!(z.softmax(0).unwrap().data(), vec![0.5, 0.5]);
    let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(&t(&[2], &[1.0, 2.0]));
    assert_eq!(a.mse(&b).unwrap().item(), 0.0);
    assert!(z.softmax(1).is_err());
    let logits = tape.leaf(&t(&[1, 2], &[0.0, 1.0]));
    assert!(logits.cross_entropy(&[2]).is_err());
    assert!(concat(&[a, z], 3).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(&mut rng, &[4, 7, 3], 5.0);
    let tape = Tape::new();
    let v = tape.leaf(&x);
    for axis in 0..3 {
        let y = v.softmax(axis).unwrap().to_tensor();
        let s = y.shape().to_vec();
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f32 = (0..s[axis]).map(|j| y.data()[(o * s[axis] + j) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = Rng::new(1234);
    for (name, build) in primitive_probes() {
        for case in 0..20 {
            let report = build(&mut rng).run(1e-3, case);
            assert!(report.forward < 1e-5, "{name}: forward error {}", report.forward);
            assert!(report.gradient < 1e-3, "{name}: gradient error {}", report.gradient);
        }
    }
}

/// Backward through a composed graph agrees with one finite-difference pass
/// over the whole composition.
#[test]
fn composed_graph_gradient() {
    let mut rng = Rng::new(77);
    for _ in 0..10 {
        let x = Tensor::gaussian(&mut rng, &[2, 3, 8]);
        let w1 = Tensor::randn(&mut rng, &[4, 3, 3], 0.5);
        let w2 = Tensor::randn(&mut rng, &[4, 2, 3], 0.5);
        let errs = gradcheck(&[x, w1, w2], 1e-3, 3, |_, v| {
            let h = v[0].conv1d(&v[1], 2, 1).unwrap().gelu();
            h.conv_transpose1d_padded(&v[2], 2, 1, 1).unwrap().softmax(2).unwrap()
        });
        assert!(errs.iter().all(|e| *e < 1e-3), "{errs:?}");
    }
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::full(&[2, 2], 1.0));
    let x = tape.leaf(&Tensor::full(&[1, 2], 2.0).with_grad());
    let y = x.matmul(&w).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert!(g.get(w).is_none());
    assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn adam_training_is_bit_reproducible() {
    let run = || {
        let mut rng = Rng::new(99);
        let mut w = Tensor::randn(&mut rng, &[3, 3], 0.3).with_grad();
        let x = Tensor::gaussian(&mut rng, &[5, 3]);
        let target = Tensor::gaussian(&mut rng, &[5, 3]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..50 {
            let tape = Tape::new();
            let wv = tape.leaf(&w);
            let loss = tape.leaf(&x).matmul(&wv).unwrap().mse(&tape.leaf(&target)).unwrap();
            let mut g = tape.backward(loss).unwrap();
            w.set_grad(g.take(wv)).unwrap();
            adam.step(std::slice::from_mut(&mut w)).unwrap();
        }
        w.into_data()
    };
    assert_eq!(run(), run());
}
