//! Finite-difference checks of every graph op and of the full model, plus
//! hand-computed forward oracles.

mod common;

use common::gradcheck::{model_suite, op_suite};
use plab::tensor::{Graph, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let report = op_suite(2024, 15);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert!(
        report.instances >= 100,
        "only {} instances",
        report.instances
    );
    assert!(report.coords > 1000);
}

#[test]
fn small_cnn_gradients_match_finite_differences() {
    let report = model_suite(7, 20);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
}

#[test]
fn conv3x3_matches_hand_computation() {
    // 3x3 single-channel input 1..9, all-ones kernel: each output is the
    // sum of the in-bounds 3x3 neighbourhood.
    let x = Tensor::new(vec![1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
    let ones = Tensor::full(&[3, 3, 1, 1], 1.0);
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false);
    let ki = g.leaf(ones, false);
    let bi = g.leaf(Tensor::full(&[1], 0.5), false);
    let y = g.conv3x3(xi, ki, bi).unwrap();
    let expected = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0];
    let got: Vec<f64> = g.value(y).data().iter().map(|v| v - 0.5).collect();
    assert_eq!(got, expected);

    // Only the top-left tap set: out(y, x) = in(y - 1, x - 1), zero outside.
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    k.data_mut()[0] = 1.0;
    let mut g = Graph::new();
    let xi = g.leaf(x, false);
    let ki = g.leaf(k, false);
    let bi = g.leaf(Tensor::zeros(&[1]), false);
    let y = g.conv3x3(xi, ki, bi).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]
    );

    // Two input channels, two filters: filter 0 sums channel 0 centre taps,
    // filter 1 takes twice channel 1 at the centre.
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 10.0, 2.0, 20.0]).unwrap();
    let mut k = Tensor::zeros(&[3, 3, 2, 2]);
    // index ((ky * 3 + kx) * cin + c) * cout + o
    k.data_mut()[((1 * 3 + 1) * 2 + 0) * 2 + 0] = 1.0;
    k.data_mut()[((1 * 3 + 2) * 2 + 0) * 2 + 0] = 1.0;
    k.data_mut()[((1 * 3 + 1) * 2 + 1) * 2 + 1] = 2.0;
    let mut g = Graph::new();
    let xi = g.leaf(x, false);
    let ki = g.leaf(k, false);
    let bi = g.leaf(Tensor::zeros(&[2]), false);
    let y = g.conv3x3(xi, ki, bi).unwrap();
    // pixel (0,0): ch0 centre 1 + ch0 right 2 = 3; filter 1: 2 * 10
    // pixel (0,1): ch0 centre 2 + right (outside) 0; filter 1: 2 * 20
    assert_eq!(g.value(y).data(), &[3.0, 20.0, 2.0, 40.0]);
}

#[test]
fn maxpool_and_dense_forward_oracles() {
    let x = Tensor::new(
        vec![1, 2, 4, 1],
        vec![1.0, 5.0, -1.0, 0.0, 3.0, 2.0, -2.0, -3.0],
    )
    .unwrap();
    let mut g = Graph::new();
    let xi = g.leaf(x, false);
    let p = g.maxpool2(xi).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1, 2, 1]);
    assert_eq!(g.value(p).data(), &[5.0, 0.0]);

    let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
    let b = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
    let wi = g.leaf(w, false);
    let bi = g.leaf(b, false);
    let d = g.dense(p, wi, bi).unwrap();
    // [5, 0] . W + b
    assert_eq!(g.value(d).data(), &[5.0, 1.0, -3.0]);
}
