use proptest::prelude::{prop_assert, proptest};

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

/// Wraps a tape-building closure so it can be checked against finite
/// differences.
struct Graph<F>(F);

impl<F> Graph<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, KernelError>,
{
    fn run(&self, params: &[Tensor], grad: bool) -> Result<(f64, Vec<Vec<f64>>), KernelError> {
        let mut tape = Tape::with_nan_scan(true);
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        if !grad {
            return Ok((value, vec![]));
        }
        let grads = tape.backward(loss)?;
        Ok((
            value,
            vars.iter().map(|&v| grads.get(v).unwrap().data().to_vec()).collect(),
        ))
    }
}

impl<F> LossFunction for Graph<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, KernelError>,
{
    fn loss(&self, params: &[Tensor]) -> Result<f64, KernelError> {
        Ok(self.run(params, false)?.0)
    }
    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Vec<f64>>, KernelError> {
        Ok(self.run(params, true)?.1)
    }
}

fn assert_grads<F>(f: F, params: &[Tensor])
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, KernelError>,
{
    let report = finite_diff_check(&Graph(f), params, 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:#?}");
}

// Scalar readout with non-uniform weights so every output element matters.
fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var, KernelError> {
    let len = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let w: Vec<f64> = (0..len).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    let col = tape.leaf(t(&[2, 1], &[5.0, 7.0]));
    let d = tape.matmul(eye, col).unwrap();
    assert_eq!(tape.value(d).data(), &[5.0, 7.0]);
    assert_eq!(tape.shape(d), &[2, 1]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(3);
    for &(m, k, n) in &[(3, 4, 2), (40, 64, 33)] {
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let expected = naive_matmul(&a, &b);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        // Same product with b supplied pre-transposed.
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.at(p, j);
            }
        }
        let vbt = tape.leaf(t(&[n, k], &bt));
        let c2 = tape.matmul_nt(va, vbt).unwrap();
        for (x, y) in tape.value(c2).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.leaf(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] >= 0.0 && v[1] < 1e-300);

    let mut rng = Rng::new(11);
    let raw = rand_tensor(&[9], &mut rng);
    let argmax = |d: &[f64]| (0..d.len()).max_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
    let am = argmax(raw.data());
    let x = tape.leaf(raw);
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(argmax(v), am);

    assert!(matches!(tape.softmax(x, 1), Err(KernelError::Axis { .. })));
}

#[test]
fn softmax_middle_axis() {
    let mut rng = Rng::new(12);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[2, 3, 4], &mut rng));
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y).data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let ones = tape.leaf(Tensor::full(&[3], 1.0));
    let zeros = tape.leaf(Tensor::zeros(&[3]));
    let x = tape.leaf(t(&[1, 3], &[2.5, 2.5, 2.5]));
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let bias = tape.leaf(t(&[3], &[0.1, -0.2, 0.3]));
    let x = tape.leaf(t(&[2, 3], &[1.0, 5.0, -3.0, 0.0, 2.0, 9.0]));
    let y = tape.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);

    let mut rng = Rng::new(5);
    let d = 64;
    let ones = tape.leaf(Tensor::full(&[d], 1.0));
    let zeros = tape.leaf(Tensor::zeros(&[d]));
    let x = tape.leaf(Tensor::randn(&[1, d], 3.0, &mut rng));
    let y = tape.layer_norm(x, ones, zeros, 1e-14).unwrap();
    let v = tape.value(y).data();
    let mean = v.iter().sum::<f64>() / d as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() <= 1e-12);
    assert!((var - 1.0).abs() <= 1e-9);
}

fn naive_cross_entropy(logits: &Tensor, targets: &[usize]) -> f64 {
    let v = logits.shape()[1];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * v..(r + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[t].exp() / z).ln();
    }
    total / targets.len() as f64
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
    assert!((tape.value(l).data()[0] - 1.3862944).abs() < 1e-7);

    let x = tape.leaf(t(&[1, 3], &[0.0, 40.0, 0.0]));
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-12);

    let mut rng = Rng::new(8);
    let logits = rand_tensor(&[5, 7], &mut rng);
    let targets = [0, 6, 3, 3, 1];
    let expected = naive_cross_entropy(&logits, &targets);
    let x = tape.leaf(logits);
    let l = tape.cross_entropy(x, &targets).unwrap();
    assert!((tape.value(l).data()[0] - expected).abs() < 1e-10);

    assert_eq!(
        tape.cross_entropy(x, &[0, 1, 2, 3, 7]).unwrap_err(),
        KernelError::Target { id: 7, classes: 7 }
    );
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = Rng::new(1);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::randn(&[3, 2, 2], 1.0, &mut rng).with_requires_grad(true));
    let s = tape.sum(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 12]);
    assert_eq!(grads.get(x).unwrap().shape(), &[3, 2, 2]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let mut rng = Rng::new(2);
    let xt = Tensor::randn(&[5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(&xt);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let grads = tape.backward(half).unwrap();
    for (g, v) in grads.get(x).unwrap().data().iter().zip(xt.data()) {
        assert!((g - v).abs() < 1e-15);
    }
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1]).with_requires_grad(true));
    assert_eq!(tape.backward(x).unwrap_err(), KernelError::EmptyTape);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]).with_requires_grad(true));
    let y = tape.scale(x, 2.0).unwrap();
    assert_eq!(tape.backward(y).unwrap_err(), KernelError::NonScalar(vec![3]));
}

#[test]
fn backward_visits_each_op_once() {
    let mut rng = Rng::new(4);
    let mut tape = Tape::new();
    let a = tape.param(&Tensor::randn(&[3, 4], 1.0, &mut rng));
    let b = tape.param(&Tensor::randn(&[4, 2], 1.0, &mut rng));
    let c = tape.matmul(a, b).unwrap();
    let d = tape.gelu(c).unwrap();
    let e = tape.add(d, c).unwrap();
    let s = tape.sum(e).unwrap();
    let recorded = tape.op_count();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.ops_visited(), recorded);
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::full(&[2], 1.0));
    let unused = tape.param(&Tensor::full(&[3], 1.0));
    let s = tape.sum(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn nan_scan_raises() {
    let mut tape = Tape::with_nan_scan(true);
    let x = tape.leaf(t(&[2], &[f64::MAX, 1.0]));
    let err = tape.scale(x, 10.0).unwrap_err();
    assert_eq!(err, KernelError::NonFinite("scale"));

    let mut quiet = Tape::with_nan_scan(false);
    let x = quiet.leaf(t(&[2], &[f64::MAX, 1.0]));
    assert!(quiet.scale(x, 10.0).is_ok());
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 5], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.matmul(v[0], v[1])?;
            weighted_sum(tp, c)
        },
        &[a.clone(), b.clone()],
    );
    let bt = rand_tensor(&[5, 4], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.matmul_nt(v[0], v[1])?;
            weighted_sum(tp, c)
        },
        &[a.clone(), bt],
    );
    // Large enough to go through the packed gemm path.
    let big_a = rand_tensor(&[24, 20], &mut rng);
    let big_b = rand_tensor(&[20, 30], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.matmul(v[0], v[1])?;
            let c = tp.gelu(c)?;
            weighted_sum(tp, c)
        },
        &[big_a, big_b],
    );
    let x3 = rand_tensor(&[2, 3, 4], &mut rng);
    let y3 = rand_tensor(&[2, 4, 3], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.batch_matmul(v[0], v[1], false)?;
            weighted_sum(tp, c)
        },
        &[x3.clone(), y3],
    );
    let z3 = rand_tensor(&[2, 5, 4], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.batch_matmul(v[0], v[1], true)?;
            weighted_sum(tp, c)
        },
        &[x3.clone(), z3],
    );
    for axis in 0..3 {
        assert_grads(
            move |tp, v| {
                let c = tp.softmax(v[0], axis)?;
                weighted_sum(tp, c)
            },
            &[x3.clone()],
        );
    }
    let x = rand_tensor(&[4, 6], &mut rng);
    let g = rand_tensor(&[6], &mut rng);
    let bias = rand_tensor(&[6], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(tp, c)
        },
        &[x.clone(), g, bias.clone()],
    );
    assert_grads(
        |tp, v| {
            let c = tp.add_bias(v[0], v[1])?;
            let c = tp.gelu(c)?;
            weighted_sum(tp, c)
        },
        &[x.clone(), bias],
    );
    assert_grads(
        |tp, v| {
            let c = tp.cross_entropy(v[0], &[1, 5, 0, 2])?;
            tp.scale(c, 3.0)
        },
        &[x.clone()],
    );
    let shifted = Tensor::new(&[4, 6], x.data().iter().map(|v| v + 0.05).collect()).unwrap();
    assert_grads(
        |tp, v| {
            let c = tp.relu(v[0])?;
            weighted_sum(tp, c)
        },
        &[shifted],
    );
    let table = rand_tensor(&[5, 3], &mut rng);
    assert_grads(
        |tp, v| {
            let c = tp.gather(v[0], &[4, 0, 4, 2])?;
            weighted_sum(tp, c)
        },
        &[table],
    );
    let wide = rand_tensor(&[6, 8], &mut rng);
    assert_grads(
        |tp, v| {
            let s = tp.split_heads(v[0], 2, 4)?;
            let s2 = tp.batch_matmul(s, s, true)?;
            let s2 = tp.softmax(s2, 2)?;
            let c = tp.batch_matmul(s2, s, false)?;
            let m = tp.merge_heads(c, 2, 4)?;
            weighted_sum(tp, m)
        },
        &[wide],
    );
}

#[test]
fn split_merge_round_trip() {
    let mut rng = Rng::new(9);
    let x = rand_tensor(&[6, 8], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.split_heads(v, 2, 4).unwrap();
    assert_eq!(tape.shape(s), &[8, 3, 2]);
    // head 1 of batch 0, token 2 = row 2, columns 2..4
    let sv = tape.value(s).data();
    assert_eq!(&sv[(3 + 2) * 2..(3 + 2) * 2 + 2], &x.data()[2 * 8 + 2..2 * 8 + 4]);
    let m = tape.merge_heads(s, 2, 4).unwrap();
    assert_eq!(tape.value(m), &x);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        values in proptest::collection::vec(-1000.0f64..1000.0, 12)
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3, 4], values).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let graph1 = |tp: &mut Tape, a: Var, b: Var| -> Result<Var, KernelError> {
            let c = tp.matmul(a, b)?;
            let c = tp.gelu(c)?;
            tp.sum(c)
        };
        let graph2 = |tp: &mut Tape, a: Var, _b: Var| -> Result<Var, KernelError> {
            let c = tp.softmax(a, 1)?;
            let c = tp.mul(c, a)?;
            tp.sum(c)
        };
        let separate = |which: u8| {
            let mut tp = Tape::new();
            let (va, vb) = (tp.param(&a), tp.param(&b));
            let l = if which == 1 { graph1(&mut tp, va, vb) } else { graph2(&mut tp, va, vb) }.unwrap();
            let g = tp.backward(l).unwrap();
            (g.get(va).unwrap().clone(), g.get(vb).unwrap().clone())
        };
        let (a1, b1) = separate(1);
        let (a2, b2) = separate(2);
        let mut tp = Tape::new();
        let (va, vb) = (tp.param(&a), tp.param(&b));
        let l1 = graph1(&mut tp, va, vb).unwrap();
        let l2 = graph2(&mut tp, va, vb).unwrap();
        let l = tp.add(l1, l2).unwrap();
        let g = tp.backward(l).unwrap();
        for (x, (p, q)) in g.get(va).unwrap().data().iter().zip(a1.data().iter().zip(a2.data())) {
            prop_assert!((x - (p + q)).abs() < 1e-12);
        }
        for (x, (p, q)) in g.get(vb).unwrap().data().iter().zip(b1.data().iter().zip(b2.data())) {
            prop_assert!((x - (p + q)).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_matches_libm_tanh_form() {
    let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.025).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap());
    let y = tape.gelu(x).unwrap();
    for (&x, &y) in xs.iter().zip(tape.value(y).data()) {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let want = 0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh());
        assert!((y - want).abs() < 1e-14, "{x}: {y} vs {want}");
    }
}
