use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::grad_check;
use super::{Precision, Tape, Tensor, TensorRef};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(
        a.len(),
        b.len(),
        "length mismatch: {} vs {}",
        a.len(),
        b.len()
    );
    for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {i}: {x} vs {y} (|diff| = {:.3e} > {tol})",
            (x - y).abs()
        );
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

// ── matmul ─────────────────────────────────────────────────────────────

#[test]
fn matmul_identity_passes_through() {
    let tape = Tape::new(Precision::Double);
    let i = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(&t(&[2, 2], &[3., 4., 5., 6.]));
    let c = tape.matmul(i, b);
    assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);
}

#[test]
fn matmul_hand_evaluated_dot() {
    // [[1,2]] @ [[3],[4]] = [[1*3 + 2*4]] = [[11]]
    let tape = Tape::new(Precision::Double);
    let a = tape.constant(&t(&[1, 2], &[1., 2.]));
    let b = tape.constant(&t(&[2, 1], &[3., 4.]));
    let c = tape.matmul(a, b);
    assert_eq!(tape.value(c).data(), &[11.]);
}

#[test]
fn matmul_zero_annihilates() {
    let tape = Tape::new(Precision::Double);
    let z = tape.constant(&Tensor::zeros(vec![2, 3]));
    let b = tape.constant(&t(
        &[3, 4],
        &(0..12).map(|i| i as f64 + 1.0).collect::<Vec<_>>(),
    ));
    let c = tape.matmul(z, b);
    assert_eq!(tape.shape(c), vec![2, 4]);
    assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
#[should_panic(expected = "inner dimensions disagree")]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new(Precision::Double);
    let a = tape.constant(&Tensor::zeros(vec![2, 3]));
    let b = tape.constant(&Tensor::zeros(vec![4, 2]));
    tape.matmul(a, b);
}

#[test]
fn matmul_broadcasts_batch_dims() {
    // [2,1,2,2] @ [1,3,2,2]: batch broadcast to [2,3]
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[2, 1, 2, 2]);
    let b = rand_tensor(&mut rng, &[1, 3, 2, 2]);
    let tape = Tape::new(Precision::Double);
    let (ar, br) = (tape.constant(&a), tape.constant(&b));
    let c = tape.matmul(ar, br);
    assert_eq!(tape.shape(c), vec![2, 3, 2, 2]);
    // spot-check block (1,2): a batch (1,0), b batch (0,2)
    let ab = &a.data()[4..8];
    let bb = &b.data()[8..12];
    let expect = [
        ab[0] * bb[0] + ab[1] * bb[2],
        ab[0] * bb[1] + ab[1] * bb[3],
        ab[2] * bb[0] + ab[3] * bb[2],
        ab[2] * bb[1] + ab[3] * bb[3],
    ];
    let cv = tape.value(c);
    let got = &cv.data()[(3 + 2) * 4..(3 + 2) * 4 + 4];
    assert_close(got, &expect, 1e-12);
}

// ── softmax ────────────────────────────────────────────────────────────

#[test]
fn softmax_symmetry() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[2], &[0., 0.]));
    let s = tape.softmax(x, 0);
    assert_close(tape.value(s).data(), &[0.5, 0.5], 1e-12);
}

#[test]
fn softmax_direct_evaluation() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[3], &[1., 2., 3.]));
    let s = tape.softmax(x, 0);
    assert_close(
        tape.value(s).data(),
        &[0.09003057, 0.24472847, 0.66524096],
        1e-7,
    );
}

#[test]
fn softmax_shift_invariance_and_row_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &c in &[1.0, -7.5, 1e4] {
        let x = rand_tensor(&mut rng, &[4, 6]);
        let tape = Tape::new(Precision::Double);
        let xr = tape.constant(&x);
        let shifted = tape.add(xr, tape.scalar_const(c));
        let (s1, s2) = (tape.softmax(xr, 1), tape.softmax(shifted, 1));
        assert_close(tape.value(s1).data(), tape.value(s2).data(), 1e-12);
        for row in tape.value(s1).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_stable_at_large_magnitude() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[3], &[1e4, 0.0, -1e4]));
    let s = tape.softmax(x, 0);
    let sum: f64 = tape.value(s).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(tape.value(s).data().iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_interior_axis() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
    let s = tape.softmax(x, 1);
    let v = tape.value(s);
    // slices along axis 1: (x[0,0,0], x[0,1,0]) = (1,3); (x[1,0,0], x[1,1,0]) = (5,7)
    let e = |a: f64, b: f64| (a - a.max(b)).exp() / ((a - a.max(b)).exp() + (b - a.max(b)).exp());
    assert!((v.data()[0] - e(1., 3.)).abs() < 1e-12);
    assert!((v.data()[4] - e(5., 7.)).abs() < 1e-12);
}

// ── layer_norm ─────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_is_zero() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[2], &[1., 1.]));
    let g = tape.constant(&t(&[2], &[1., 1.]));
    let b = tape.constant(&t(&[2], &[0., 0.]));
    let y = tape.layer_norm(x, g, b, 1e-5);
    assert_close(tape.value(y).data(), &[0., 0.], 1e-2);
}

#[test]
fn layer_norm_standardizes() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[2], &[1., 3.]));
    let g = tape.constant(&t(&[2], &[1., 1.]));
    let b = tape.constant(&t(&[2], &[0., 0.]));
    let y = tape.layer_norm(x, g, b, 0.0);
    assert_close(tape.value(y).data(), &[-1., 1.], 1e-12);
}

#[test]
fn layer_norm_affine_params_apply() {
    let tape = Tape::new(Precision::Double);
    let x = tape.constant(&t(&[2], &[1., 3.]));
    let g = tape.constant(&t(&[2], &[2., 2.]));
    let b = tape.constant(&t(&[2], &[1., 1.]));
    let y = tape.layer_norm(x, g, b, 0.0);
    assert_close(tape.value(y).data(), &[-1., 3.], 1e-12);
}

// ── label_smoothed_ce ──────────────────────────────────────────────────

#[test]
fn label_smoothing_zero_reduces_to_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = rand_tensor(&mut rng, &[3, 5]);
    let targets = [2usize, 0, 4];
    let tape = Tape::new(Precision::Double);
    let lr = tape.constant(&logits);
    let loss = tape.label_smoothed_ce(lr, &targets, 0.0, 0);
    // oracle: mean of -log softmax picked at targets (pad id 0 hits row 1)
    let mut expect = 0.0;
    let mut n = 0;
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt == 0 {
            continue;
        }
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let lse = super::kernels::logsumexp_row(row);
        expect += lse - row[tgt];
        n += 1;
    }
    assert!((tape.scalar(loss) - expect / n as f64).abs() < 1e-12);
}

#[test]
fn label_smoothing_uniform_binary_case() {
    // V=2, logits [0,0], true=0, eps 0.1: both classes get -log 0.5
    let tape = Tape::new(Precision::Double);
    let lr = tape.constant(&t(&[1, 2], &[0., 0.]));
    let loss = tape.label_smoothed_ce(lr, &[0], 0.1, 99);
    assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-10);
}

#[test]
fn label_smoothing_all_pad_is_zero_loss_and_grad() {
    let tape = Tape::new(Precision::Double);
    let lr = tape.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
    let loss = tape.label_smoothed_ce(lr, &[0, 0], 0.1, 0);
    assert_eq!(tape.scalar(loss), 0.0);
    tape.backward(loss);
    assert!(tape.grad(lr).is_none() || tape.grad(lr).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
#[should_panic(expected = "out of range")]
fn label_smoothing_target_out_of_range() {
    let tape = Tape::new(Precision::Double);
    let lr = tape.constant(&t(&[1, 2], &[0., 0.]));
    tape.label_smoothed_ce(lr, &[5], 0.1, 0);
}

// ── backward ───────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new(Precision::Double);
    let w = tape.leaf(&t(&[3], &[1., -2., 0.5]), true);
    let loss = tape.reduce_sum(w, None);
    tape.backward(loss);
    assert_eq!(tape.grad(w).unwrap().data(), &[1., 1., 1.]);
}

#[test]
fn backward_of_sum_of_squares_is_2w() {
    let tape = Tape::new(Precision::Double);
    let w = tape.leaf(&t(&[3], &[1., -2., 0.5]), true);
    let sq = tape.mul(w, w);
    let loss = tape.reduce_sum(sq, None);
    tape.backward(loss);
    assert_close(tape.grad(w).unwrap().data(), &[2., -4., 1.], 1e-12);
}

#[test]
fn gradients_accumulate_across_paths() {
    // f(x) = sum(x + x): both paths contribute, grad = 2
    let tape = Tape::new(Precision::Double);
    let x = tape.leaf(&t(&[2], &[3., 4.]), true);
    let y = tape.add(x, x);
    let loss = tape.reduce_sum(y, None);
    tape.backward(loss);
    assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
}

#[test]
fn backward_is_deterministic_on_same_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 4]);
    let tape = Tape::new(Precision::Double);
    let xr = tape.leaf(&x, true);
    let h = tape.matmul(xr, xr);
    let s = tape.softmax(h, 1);
    let loss = tape.reduce_sum(s, None);
    tape.backward(loss);
    let g1 = tape.grad(xr).unwrap();
    tape.backward(loss);
    let g2 = tape.grad(xr).unwrap();
    assert_eq!(
        g1.data(),
        g2.data(),
        "two backward sweeps must agree bit-for-bit"
    );
}

#[test]
#[should_panic(expected = "loss must be scalar")]
fn backward_rejects_non_scalar() {
    let tape = Tape::new(Precision::Double);
    let x = tape.leaf(&t(&[2], &[1., 2.]), true);
    tape.backward(x);
}

// ── grad_check: every primitive against the finite-difference oracle ──

#[test]
fn grad_check_sum_is_exact() {
    // exactly representable inputs and h keep the central difference exact
    let x = t(&[3], &[1.0, 2.0, -0.5]);
    let report = grad_check(|t, x| t.reduce_sum(x, None), &x, 0.5, 1e-12);
    assert_eq!(report.max_rel_err, 0.0, "{report}");
}

#[test]
fn grad_check_all_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let h = 1e-5;
    let tol = 1e-4;
    type Case = (
        &'static str,
        Box<dyn Fn(&Tape, TensorRef) -> TensorRef>,
        Tensor,
    );

    let w = rand_tensor(&mut rng, &[3, 4]);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            Box::new({
                let w = w.clone();
                move |t: &Tape, x: TensorRef| {
                    let wr = t.constant(&w);
                    let y = t.matmul(x, wr);
                    let sq = t.mul(y, y);
                    t.reduce_sum(sq, None)
                }
            }),
            rand_tensor(&mut rng, &[2, 3]),
        ),
        (
            "matmul_rhs_broadcast",
            Box::new(|t: &Tape, x: TensorRef| {
                let y = t.matmul(x, x); // square both batch entries
                t.reduce_sum(y, None)
            }),
            rand_tensor(&mut rng, &[2, 3, 3]),
        ),
        (
            "add_broadcast",
            Box::new(|t: &Tape, x: TensorRef| {
                let b = t.constant(&Tensor::new(vec![4], vec![0.3, -0.1, 0.7, 0.2]));
                let y = t.add(x, b);
                let sq = t.mul(y, y);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[3, 4]),
        ),
        (
            "mul_broadcast",
            Box::new(|t: &Tape, x: TensorRef| {
                let b = t.constant(&Tensor::new(vec![3, 1], vec![0.5, -1.5, 2.0]));
                let y = t.mul(x, b);
                t.reduce_sum(y, None)
            }),
            rand_tensor(&mut rng, &[3, 4]),
        ),
        (
            "scale",
            Box::new(|t: &Tape, x: TensorRef| {
                let y = t.scale(x, -3.25);
                let sq = t.mul(y, y);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[5]),
        ),
        (
            "relu",
            Box::new(|t: &Tape, x: TensorRef| {
                let y = t.relu(x);
                let sq = t.mul(y, y);
                t.reduce_sum(sq, None)
            }),
            // keep inputs away from the kink at 0
            Tensor::new(vec![6], vec![0.7, -0.6, 1.3, -1.1, 0.4, -0.2]),
        ),
        (
            "softmax",
            Box::new(|t: &Tape, x: TensorRef| {
                let s = t.softmax(x, 1);
                let w = t.constant(&Tensor::new(
                    vec![2, 4],
                    vec![0.1, 0.9, -0.4, 0.3, 0.8, -0.2, 0.5, -0.6],
                ));
                let y = t.mul(s, w);
                t.reduce_sum(y, None)
            }),
            rand_tensor(&mut rng, &[2, 4]),
        ),
        (
            "layer_norm_x",
            Box::new(|t: &Tape, x: TensorRef| {
                let g = t.constant(&Tensor::new(vec![4], vec![1.1, 0.9, 1.3, 0.7]));
                let b = t.constant(&Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]));
                let y = t.layer_norm(x, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[3, 4]),
        ),
        (
            "layer_norm_gain_bias",
            Box::new({
                let x0 = rand_tensor(&mut rng, &[3, 4]);
                move |t: &Tape, gb: TensorRef| {
                    let parts = t.split(gb, 0, &[4, 4]);
                    let xr = t.constant(&x0);
                    let y = t.layer_norm(xr, parts[0], parts[1], 1e-5);
                    let sq = t.mul(y, y);
                    t.reduce_sum(sq, None)
                }
            }),
            rand_tensor(&mut rng, &[8]),
        ),
        (
            "gather",
            Box::new(|t: &Tape, x: TensorRef| {
                let y = t.gather(x, &[2, 0, 2, 1], &[4]);
                let sq = t.mul(y, y);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[3, 2]),
        ),
        (
            "concat_split",
            Box::new(|t: &Tape, x: TensorRef| {
                let parts = t.split(x, 1, &[2, 3]);
                let back = t.concat(&[parts[1], parts[0]], 1);
                let sq = t.mul(back, back);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[2, 5]),
        ),
        (
            "reshape_transpose",
            Box::new(|t: &Tape, x: TensorRef| {
                let r = t.reshape(x, &[2, 3, 2]);
                let p = t.transpose(r, &[1, 0, 2]);
                let sq = t.mul(p, p);
                let s = t.reduce_sum(sq, Some(2));
                t.reduce_sum(s, None)
            }),
            rand_tensor(&mut rng, &[4, 3]),
        ),
        (
            "reduce_mean_axis",
            Box::new(|t: &Tape, x: TensorRef| {
                let m = t.reduce_mean(x, Some(0));
                let sq = t.mul(m, m);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[3, 4]),
        ),
        (
            "log",
            Box::new(|t: &Tape, x: TensorRef| {
                let e = t.exp(x); // keep log's argument positive
                let l = t.log(e);
                let sq = t.mul(l, l);
                t.reduce_sum(sq, None)
            }),
            rand_tensor(&mut rng, &[5]),
        ),
        (
            "exp",
            Box::new(|t: &Tape, x: TensorRef| {
                let e = t.exp(x);
                t.reduce_sum(e, None)
            }),
            rand_tensor(&mut rng, &[5]),
        ),
        (
            "label_smoothed_ce",
            Box::new(|t: &Tape, x: TensorRef| t.label_smoothed_ce(x, &[1, 3, 0], 0.1, 0)),
            rand_tensor(&mut rng, &[3, 4]),
        ),
    ];

    for (name, f, x) in cases {
        let report = grad_check(&f, &x, h, tol);
        assert!(report.pass, "{name}: {report}");
    }
}

#[test]
fn grad_check_dropout_with_frozen_mask() {
    // dropout is checked with the mask frozen: record once, then compare
    // analytic vs numeric through the same mask realization
    let x = Tensor::new(vec![8], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.5, -0.2, 0.9]);
    let p = 0.5;
    let mask: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new(Precision::Double);
        let xr = tape.leaf(&x, false);
        let y = tape.dropout(xr, p, &mut rng);
        // recover realized mask from output / input
        tape.value(y)
            .data()
            .iter()
            .zip(x.data().iter())
            .map(|(&o, &i)| if i == 0.0 { 0.0 } else { o / i })
            .collect()
    };
    let mask_t = Tensor::new(vec![8], mask);
    let report = grad_check(
        move |t, x| {
            let m = t.constant(&mask_t);
            let y = t.mul(x, m);
            let sq = t.mul(y, y);
            t.reduce_sum(sq, None)
        },
        &x,
        1e-5,
        1e-4,
    );
    assert!(report.pass, "{report}");
}

// ── precision mode ─────────────────────────────────────────────────────

#[test]
fn single_precision_quantizes_storage() {
    let tape = Tape::new(Precision::Single);
    let x = tape.leaf(&t(&[2], &[0.1, 0.2]), false);
    for &v in tape.value(x).data() {
        assert_eq!(v, v as f32 as f64);
    }
    let y = tape.mul(x, x);
    for &v in tape.value(y).data() {
        assert_eq!(v, v as f32 as f64);
    }
}

#[test]
fn tensor_invariant_shape_covers_data() {
    let x = Tensor::new(vec![2, 3], vec![0.0; 6]);
    assert_eq!(x.numel(), 6);
}

#[test]
#[should_panic(expected = "implies 4 elements")]
fn tensor_rejects_shape_data_mismatch() {
    Tensor::new(vec![2, 2], vec![0.0; 5]);
}
