use mstgcn::tensor::{grad_check, BatchNormMode, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let m = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = t.constant(mat(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let v = t.constant(mat(&[&[5.0], &[7.0]]));
    let out = t.matmul(p, v).unwrap();
    assert_eq!(t.value(out).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 3], &mut rng);
    let b = random(&[3, 3], &mut rng);
    let err = grad_check(
        |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv)?;
            Ok::<_, TensorError>(t.sum_all(y))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn conv1d_valid_lengths_follow_the_floor_formula() {
    let mut t = Tape::new();
    let s = t.constant(Tensor::zeros(&[3000]));
    let k50 = t.constant(Tensor::ones(&[50]));
    let k400 = t.constant(Tensor::ones(&[400]));
    let a = t.conv1d_valid(s, k50, 6).unwrap();
    let b = t.conv1d_valid(s, k400, 50).unwrap();
    assert_eq!(t.shape(a), &[492]);
    assert_eq!(t.shape(b), &[53]);
    assert!(t.value(a).data().iter().all(|&v| v == 0.0));

    let long = t.constant(Tensor::ones(&[4]));
    let short = t.constant(Tensor::ones(&[3]));
    assert!(matches!(t.conv1d_valid(short, long, 1), Err(TensorError::EmptyOutput { .. })));
}

#[test]
fn conv1d_valid_matches_direct_sum() {
    let mut t = Tape::new();
    let s = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
    let k = t.constant(Tensor::vector(vec![1.0, -1.0]));
    let y = t.conv1d_valid(s, k, 2).unwrap();
    assert_eq!(t.value(y).data(), &[-1.0, -1.0]);
}

#[test]
fn maxpool_lengths_and_constant_signal() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(&[492], 3.5));
    let b = t.constant(Tensor::zeros(&[53]));
    let pa = t.maxpool1d_signal(a, 16, 16).unwrap();
    let pb = t.maxpool1d_signal(b, 8, 8).unwrap();
    assert_eq!(t.shape(pa), &[30]);
    assert_eq!(t.shape(pb), &[6]);
    assert!(t.value(pa).data().iter().all(|&v| v == 3.5));
    let short = t.constant(Tensor::zeros(&[3]));
    assert!(t.maxpool1d_signal(short, 4, 1).is_err());
}

#[test]
fn maxpool_routes_gradient_to_first_maximum() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![2.0, 2.0, 1.0, 0.0]));
    let y = t.maxpool1d_signal(x, 2, 2).unwrap();
    let s = t.sum_all(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn activation_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-2.0, 3.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 3.0]);

    let eq = t.constant(Tensor::full(&[2, 4], 0.7));
    let s = t.softmax_rows(eq);
    assert!(t.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = t.constant(mat(&[&[0.0, 3f64.ln()]]));
    let s = t.softmax_rows(x);
    let d = t.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
}

#[test]
fn cross_entropy_values() {
    let mut t = Tape::new();
    let y = t.constant(mat(&[&[1.0, 0.0, 0.0, 0.0, 0.0]]));
    let perfect = t.constant(mat(&[&[1.0, 0.0, 0.0, 0.0, 0.0]]));
    let uniform = t.constant(Tensor::full(&[1, 5], 0.2));
    let l0 = t.cross_entropy(perfect, y).unwrap();
    let l1 = t.cross_entropy(uniform, y).unwrap();
    assert_eq!(t.value(l0).item(), 0.0);
    assert!((t.value(l1).item() - 5f64.ln()).abs() < 1e-12);

    let p = t.constant(mat(&[&[0.7, 0.2, 0.1]]));
    let y3 = t.constant(mat(&[&[1.0, 0.0, 0.0]]));
    let l = t.cross_entropy(p, y3).unwrap();
    assert!((t.value(l).item() - 0.356_674_943_938_732_4).abs() < 1e-12);

    let bad = t.constant(mat(&[&[0.7, 0.2, 0.2]]));
    assert!(matches!(t.cross_entropy(bad, y3), Err(TensorError::Normalization { row: 0, .. })));
}

#[test]
fn cross_entropy_clamps_zero_probability() {
    let mut t = Tape::new();
    let p = t.constant(mat(&[&[0.0, 1.0]]));
    let y = t.constant(mat(&[&[1.0, 0.0]]));
    let l = t.cross_entropy(p, y).unwrap();
    assert!((t.value(l).item() - (-(1e-12f64).ln())).abs() < 1e-9);
}

#[test]
fn structural_ops() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::ones(&[2, 5]));
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), &[2, 8]);
    assert_eq!(t.value(c).row(1), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    let bad = t.constant(Tensor::zeros(&[3, 5]));
    assert!(t.concat(&[a, bad], 1).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = t.constant(random(&[4, 4], &mut rng));
    let y = t.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let p = t.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
    let pt = t.transpose(p).unwrap();
    assert_eq!(t.value(pt).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    let s = t.sum_axis(p, 1).unwrap();
    assert_eq!(t.value(s).data(), &[3.0, 12.0]);
    let g = t.gather(p, &[1, 1, 0]).unwrap();
    assert_eq!(t.value(g).data(), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    let n = t.narrow(p, 1, 1, 2).unwrap();
    assert_eq!(t.value(n).data(), &[1.0, 2.0, 4.0, 5.0]);
    let bc = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let bc = t.reshape(bc, &[2, 1]).unwrap();
    let e = t.broadcast_to(bc, &[2, 3]).unwrap();
    assert_eq!(t.value(e).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    assert!(t.broadcast_to(p, &[3, 3]).is_err());
}

#[test]
fn train_dropout_scales_survivors() {
    let mut t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = t.constant(Tensor::ones(&[1000]));
    let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
    let vals = t.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = vals.iter().filter(|&&v| v == 2.0).count();
    assert!((400..600).contains(&kept));
    assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn batch_norm_zero_variance_outputs_shift() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[4, 2], 3.0));
    let gamma = t.constant(Tensor::vector(vec![2.0, 5.0]));
    let beta = t.constant(Tensor::vector(vec![0.5, -1.0]));
    let mut rm = Tensor::zeros(&[2]);
    let mut rv = Tensor::ones(&[2]);
    let y = t.batch_norm(x, gamma, beta, &mut rm, &mut rv, BatchNormMode::Train).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    // momentum 0.9 towards the batch statistics
    assert!((rm.data()[0] - 0.3).abs() < 1e-12);
    assert!((rv.data()[0] - 0.9).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![3.0]).reshaped(&[1, 1]).unwrap());
    let gamma = t.constant(Tensor::ones(&[1]));
    let beta = t.constant(Tensor::zeros(&[1]));
    let mut rm = Tensor::vector(vec![1.0]);
    let mut rv = Tensor::vector(vec![4.0]);
    let y = t.batch_norm(x, gamma, beta, &mut rm, &mut rv, BatchNormMode::Eval).unwrap();
    assert!((t.value(y).item() - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    assert_eq!(rm.data(), &[1.0]);
}

#[test]
fn grad_check_known_derivatives() {
    let err = grad_check(
        |t, x| {
            let y = t.square(x);
            Ok::<_, TensorError>(t.sum_all(y))
        },
        &Tensor::scalar(3.0),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.square(x);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let err = grad_check(
        |t, x| {
            let y = t.sigmoid(x);
            Ok::<_, TensorError>(t.sum_all(y))
        },
        &random(&[4], &mut rng),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);

    let onehot = mat(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
    let err = grad_check(
        |t, x| {
            let p = t.softmax_rows(x);
            let y = t.constant(onehot.clone());
            t.cross_entropy(p, y)
        },
        &random(&[2, 3], &mut rng),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5);
}

#[test]
fn grad_check_rejects_non_finite_values() {
    let r = grad_check(
        |t, x| {
            let y = t.recip(x);
            Ok::<_, TensorError>(t.sum_all(y))
        },
        &Tensor::scalar(0.0),
        1e-5,
    );
    assert!(r.is_err());
}

#[test]
fn tape_zero_grad_clears_gradients() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let y = t.sum_all(x);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0]);
    t.zero_grad();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn shared_input_receives_each_contribution_once() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![2.0]));
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[5.0]);
}

/// Weighted sum with fixed pseudo-random weights so that every output
/// coordinate carries a distinct gradient.
fn weighted_sum(t: &mut Tape, y: mstgcn::Var) -> Result<mstgcn::Var, TensorError> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 1.37).sin() + 0.2).collect())?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

type OpFn = Box<dyn Fn(&mut Tape, mstgcn::Var) -> Result<mstgcn::Var, TensorError>>;

#[test]
fn every_differentiable_op_passes_grad_check_at_ten_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let other = random(&[3, 4], &mut rng);
    let other_b = random(&[2, 4, 3], &mut rng);
    let onehot = mat(&[&[0.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
    let kernel = random(&[3 * 4, 2], &mut rng);
    let ops: Vec<(&str, Vec<usize>, OpFn)> = vec![
        ("relu", vec![3, 4], Box::new(|t, x| Ok(t.relu(x)))),
        ("sigmoid", vec![3, 4], Box::new(|t, x| Ok(t.sigmoid(x)))),
        ("abs", vec![3, 4], Box::new(|t, x| Ok(t.abs(x)))),
        ("square", vec![3, 4], Box::new(|t, x| Ok(t.square(x)))),
        ("exp", vec![3, 4], Box::new(|t, x| Ok(t.exp(x)))),
        ("scale", vec![3, 4], Box::new(|t, x| Ok(t.scale(x, -1.5)))),
        ("add_scalar", vec![3, 4], Box::new(|t, x| Ok(t.add_scalar(x, 0.3)))),
        ("recip", vec![3, 4], Box::new(|t, x| {
            let s = t.add_scalar(x, 3.0);
            Ok(t.recip(s))
        })),
        ("add", vec![3, 4], Box::new({
            let o = other.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                t.add(x, c)
            }
        })),
        ("sub", vec![3, 4], Box::new({
            let o = other.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                t.sub(c, x)
            }
        })),
        ("mul", vec![3, 4], Box::new({
            let o = other.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                t.mul(x, c)
            }
        })),
        ("div", vec![3, 4], Box::new({
            let o = other.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                let d = t.add_scalar(x, 3.0);
                let n = t.div(c, d)?;
                let m = t.div(x, d)?;
                t.add(n, m)
            }
        })),
        ("permute", vec![2, 3, 4], Box::new(|t, x| t.permute(x, &[2, 0, 1]))),
        ("broadcast", vec![3, 1], Box::new(|t, x| t.broadcast_to(x, &[2, 3, 4]))),
        ("gather", vec![3, 4], Box::new(|t, x| t.gather(x, &[2, 0, 2]))),
        ("narrow", vec![3, 4], Box::new(|t, x| t.narrow(x, 1, 1, 2))),
        ("concat", vec![3, 4], Box::new(|t, x| {
            let s = t.square(x);
            t.concat(&[x, s], 0)
        })),
        ("sum_axis", vec![2, 3, 4], Box::new(|t, x| t.sum_axis(x, 1))),
        ("matmul", vec![4, 3], Box::new({
            let o = other.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                t.matmul(c, x)
            }
        })),
        ("bmm_ta", vec![2, 4, 3], Box::new({
            let o = other_b.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                t.bmm(x, c, true, false)
            }
        })),
        ("bmm_tb_broadcast", vec![3, 4], Box::new({
            let o = other_b.clone();
            move |t, x| {
                let c = t.constant(o.clone());
                t.bmm(c, x, true, true)
            }
        })),
        ("bmm_self", vec![2, 3, 3], Box::new(|t, x| t.bmm(x, x, false, true))),
        ("softmax_rows", vec![3, 4], Box::new(|t, x| Ok(t.softmax_rows(x)))),
        ("cross_entropy", vec![3, 4], Box::new({
            let y = onehot.clone();
            move |t, x| {
                let p = t.softmax_rows(x);
                let y = t.constant(y.clone());
                t.cross_entropy(p, y)
            }
        })),
        ("conv1d_input", vec![2, 7, 4], Box::new({
            let k = kernel.clone();
            move |t, x| {
                let w = t.constant(k.clone());
                t.conv1d(x, w, None, 3, 2, 1, 1)
            }
        })),
        ("conv1d_weight", vec![12, 2], Box::new(|t, w| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let x = t.constant(random(&[2, 6, 4], &mut r));
            let b = t.constant(Tensor::vector(vec![0.1, -0.2]));
            t.conv1d(x, w, Some(b), 3, 1, 1, 1)
        })),
        ("conv1d_valid", vec![9], Box::new(|t, s| {
            let k = t.constant(Tensor::vector(vec![0.5, -1.0, 0.25]));
            t.conv1d_valid(s, k, 2)
        })),
        ("maxpool1d", vec![2, 8, 3], Box::new(|t, x| t.maxpool1d(x, 3, 2))),
        ("batch_norm_train", vec![5, 3], Box::new(|t, x| {
            let g = t.constant(Tensor::vector(vec![1.5, 0.5, -1.0]));
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let mut rm = Tensor::zeros(&[3]);
            let mut rv = Tensor::ones(&[3]);
            t.batch_norm(x, g, b, &mut rm, &mut rv, BatchNormMode::Train)
        })),
        ("batch_norm_eval", vec![5, 3], Box::new(|t, x| {
            let g = t.constant(Tensor::vector(vec![1.5, 0.5, -1.0]));
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let mut rm = Tensor::vector(vec![0.1, 0.0, -0.1]);
            let mut rv = Tensor::vector(vec![0.5, 1.0, 2.0]);
            t.batch_norm(x, g, b, &mut rm, &mut rv, BatchNormMode::Eval)
        })),
        ("dropout_train", vec![3, 4], Box::new(|t, x| {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            t.dropout(x, 0.3, true, &mut r)
        })),
        ("lambda_max", vec![4, 4], Box::new(|t, x| {
            let xt = t.transpose(x)?;
            let s = t.bmm(x, xt, false, false)?;
            let (l, _) = t.lambda_max(s)?;
            Ok(l)
        })),
    ];
    for (name, shape, f) in &ops {
        for _ in 0..10 {
            let point = random(shape, &mut rng);
            let err = grad_check(
                |t, x| {
                    let y = f(t, x)?;
                    weighted_sum(t, y)
                },
                &point,
                1e-5,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
    }
}

#[test]
fn grl_reverses_and_scales_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let y = t.grl(x, 1.0).unwrap();
    assert_eq!(t.value(y), t.value(x));
    let s = t.sum_all(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    assert!(t.grl(x, -0.1).is_err());
}

#[test]
fn lambda_max_of_two_node_laplacian_is_two() {
    let mut t = Tape::new();
    let l = t.constant(mat(&[&[1.0, -1.0], &[-1.0, 1.0]]));
    let (lam, degenerate) = t.lambda_max(l).unwrap();
    assert!((t.value(lam).item() - 2.0).abs() < 1e-9);
    assert!(degenerate.is_empty());
    let z = t.constant(Tensor::zeros(&[2, 2]));
    let (lam, degenerate) = t.lambda_max(z).unwrap();
    assert_eq!(t.value(lam).item(), 2.0);
    assert_eq!(degenerate, vec![0]);
}

#[test]
fn forward_is_deterministic_with_seeded_dropout() {
    let run = || {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = t.constant(random(&[8, 8], &mut rng));
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let s = t.softmax_rows(y);
        t.value(s).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(vec![rows, cols], x).unwrap());
        let s = t.softmax_rows(xv);
        for r in 0..rows {
            let row = t.value(s).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_output_length_formula(len in 1usize..200, k_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
        let k = 1 + ((len - 1) as f64 * k_frac) as usize;
        let s = 1 + ((len - 1) as f64 * s_frac) as usize;
        let mut t = Tape::new();
        let sig = t.constant(Tensor::ones(&[len]));
        let ker = t.constant(Tensor::ones(&[k]));
        let y = t.conv1d_valid(sig, ker, s).unwrap();
        prop_assert_eq!(t.shape(y)[0], (len - k) / s + 1);
    }
}
