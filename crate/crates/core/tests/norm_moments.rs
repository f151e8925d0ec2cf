use kanrecon_core::rng::SplitMix64;
use kanrecon_core::tensor::{NormKind, Tape, Tensor};

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

fn unit_affine(tape: &mut Tape, c: usize) -> (kanrecon_core::tensor::Var, kanrecon_core::tensor::Var) {
    (tape.constant(Tensor::ones(vec![c])), tape.constant(Tensor::zeros(vec![c])))
}

#[test]
fn batch_norm_standardizes_columns() {
    let mut rng = SplitMix64::new(1);
    let x = Tensor::randn(vec![64, 5], 3.0, &mut rng);
    let shifted = Tensor::new(vec![64, 5], x.data().iter().map(|v| v + 7.0).collect()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(shifted);
    let (g, b) = unit_affine(&mut tape, 5);
    let (y, _, _) = tape.norm(xv, g, b, NormKind::BatchRows).unwrap();
    let y = tape.value(y);
    for c in 0..5 {
        let col: Vec<f64> = (0..64).map(|r| y.at(&[r, c])).collect();
        let (m, v) = moments(&col);
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn batch_norm_over_planes() {
    let mut rng = SplitMix64::new(2);
    let x = Tensor::randn(vec![3, 16, 16], 2.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (g, b) = unit_affine(&mut tape, 3);
    let (y, _, _) = tape.norm(xv, g, b, NormKind::BatchPlanes).unwrap();
    for plane in tape.value(y).data().chunks(256) {
        let (m, v) = moments(plane);
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = SplitMix64::new(3);
    let x = Tensor::randn(vec![7, 128], 5.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (g, b) = unit_affine(&mut tape, 128);
    let (y, _, _) = tape.norm(xv, g, b, NormKind::Layer).unwrap();
    for row in tape.value(y).data().chunks(128) {
        let (m, v) = moments(row);
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn concat_and_slice_are_exact_inverses() {
    let mut rng = SplitMix64::new(4);
    let a = Tensor::randn(vec![2, 4, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![3, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let cat = tape.concat(&[av, bv]).unwrap();
    assert_eq!(tape.shape(cat), &[5, 4, 4]);
    let sa = tape.slice(cat, 0, 2).unwrap();
    let sb = tape.slice(cat, 2, 3).unwrap();
    assert_eq!(tape.value(sa), &a);
    assert_eq!(tape.value(sb), &b);
}
