//! Layer-level behaviour of the autodiff engine, checked against direct
//! summation and central finite differences.

use hydrocorr::autodiff::{adam_step, conv_downsample, AdamState, LayerParams, NnError, PatchWindow, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().trainable()
}

/// Central differences of `f` with respect to every element of every input.
fn finite_differences(inputs: &[Tensor], h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for t in 0..inputs.len() {
        let mut grads = Vec::new();
        for i in 0..inputs[t].numel() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[i] -= h;
            grads.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Builds the graph with `build`, compares analytic and numeric gradients.
fn check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut tp = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|t| tp.leaf(t)).collect();
        let l = build(&mut tp, &vs);
        tp.scalar(l)
    };
    let numeric = finite_differences(inputs, 1e-3, &eval);
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let ana = grads.get(*v).unwrap();
        for (a, n) in ana.iter().zip(num) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    worst
}

/// Reduces a tensor to a scalar with fixed random weights, so every
/// output element has a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = tape.constant(shape, w).unwrap();
    // sum(v * w) via ((v + w)^2 - v^2 - w^2) / 2 keeps the op set minimal.
    let s = tape.add(v, wv).unwrap();
    let s2 = tape.square(s);
    let v2 = tape.square(v);
    let w2 = tape.square(wv);
    let a = tape.scale(v2, -1.0);
    let b = tape.scale(w2, -1.0);
    let t = tape.add(s2, a).unwrap();
    let t = tape.add(t, b).unwrap();
    let total = tape.sum(t);
    tape.scale(total, 0.5)
}

const SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn conv2d_direct_summation() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let w = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_identity_and_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random(&[2, 1, 5, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(&input);
    let one = tape.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let zb = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv2d(x, one, zb).unwrap();
    assert_eq!(tape.value(y), input.data());

    let zero = tape.constant(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap();
    let b = tape.constant(vec![1], vec![0.75]).unwrap();
    let y = tape.conv2d(x, zero, b).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.75));
}

#[test]
fn conv2d_preserves_shape_for_odd_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in [1, 3, 5] {
        let mut tape = Tape::new();
        let x = tape.leaf(&random(&[1, 2, 7, 6], &mut rng));
        let w = tape.leaf(&random(&[3, 2, k, k], &mut rng));
        let b = tape.leaf(&random(&[3], &mut rng));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 7, 6]);
    }
}

#[test]
fn conv2d_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2, 4, 4], vec![0.0; 32]).unwrap();
    let w = tape.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    assert!(matches!(tape.conv2d(x, w, b), Err(NnError::ChannelMismatch { .. })));
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = tape.avg_pool2(x).unwrap();
    assert_eq!(tape.value(y), &[2.5]);

    let c = tape.constant(vec![1, 2, 4, 6], vec![3.25; 48]).unwrap();
    let y = tape.avg_pool2(c).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 3]);
    assert!(tape.value(y).iter().all(|&v| v == 3.25));

    let odd = tape.constant(vec![1, 1, 3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(tape.avg_pool2(odd), Err(NnError::OddSpatial { .. })));
}

#[test]
fn avg_pool_gradient_is_a_quarter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random(&[1, 1, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(&input);
    let y = tape.avg_pool2(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut t = Tape::new();
        let x = t.leaf(&ts[0]);
        let y = t.avg_pool2(x).unwrap();
        let s = t.sum(y);
        t.scalar(s)
    };
    let fd = finite_differences(&[input], 1e-3, &eval);
    for (a, n) in g.get(x).unwrap().iter().zip(&fd[0]) {
        assert!((a - 0.25).abs() < 1e-12);
        assert!((n - 0.25).abs() < 1e-9);
    }
}

#[test]
fn transposed_conv_scatter_and_crop() {
    // A single unit input scatters the 4x4 all-ones kernel into the raw
    // (2h+2)x(2w+2) = 4x4 canvas (sum 16); cropping one pixel per side
    // leaves the central 2x2 block.
    let raw_sum: f64 = {
        let mut canvas = [[0.0f64; 4]; 4];
        for (ki, row) in canvas.iter_mut().enumerate() {
            for (kj, v) in row.iter_mut().enumerate() {
                *v += 1.0 * [[1.0; 4]; 4][ki][kj];
            }
        }
        canvas.iter().flatten().sum()
    };
    assert_eq!(raw_sum, 16.0);

    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let w = tape.constant(vec![1, 1, 4, 4], vec![1.0; 16]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv_transpose2(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y), &[1.0; 4]);
    assert_eq!(tape.value(y).iter().sum::<f64>(), 4.0);
}

#[test]
fn transposed_conv_matches_direct_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (ci, co, h, w) = (2, 3, 3, 2);
    let x = random(&[1, ci, h, w], &mut rng);
    let k = random(&[ci, co, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let kv = tape.leaf(&k);
    let b = tape.constant(vec![co], vec![0.0; co]).unwrap();
    let y = tape.conv_transpose2(xv, kv, b).unwrap();

    let (rh, rw) = (2 * h + 2, 2 * w + 2);
    let mut raw = vec![0.0; co * rh * rw];
    for c in 0..ci {
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    for ki in 0..4 {
                        for kj in 0..4 {
                            raw[(o * rh + 2 * i + ki) * rw + 2 * j + kj] +=
                                x.data()[(c * h + i) * w + j] * k.data()[((c * co + o) * 4 + ki) * 4 + kj];
                        }
                    }
                }
            }
        }
    }
    let got = tape.value(y);
    for o in 0..co {
        for p in 0..2 * h {
            for q in 0..2 * w {
                let want = raw[(o * rh + p + 1) * rw + q + 1];
                assert!((got[(o * 2 * h + p) * 2 * w + q] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn transposed_conv_zero_input_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap();
    let w = tape.constant(vec![2, 3, 4, 4], vec![0.3; 96]).unwrap();
    let b = tape.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let y = tape.conv_transpose2(x, w, b).unwrap();
    let v = tape.value(y);
    assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
    assert!(v[..16].iter().all(|&a| a == 1.0));
    assert!(v[16..32].iter().all(|&a| a == -2.0));
    assert!(v[32..].iter().all(|&a| a == 0.5));
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co, h, w) = (3, 2, 4, 5);
        let x = random(&[2, ci, h, w], &mut rng);
        let y = random(&[2, co, 2 * h, 2 * w], &mut rng);
        let k = random(&[ci, co, 4, 4], &mut rng);
        let down = conv_downsample(&y, &k).unwrap();
        let lhs: f64 = down.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let kv = tape.leaf(&k);
        let b = tape.constant(vec![co], vec![0.0; co]).unwrap();
        let up = tape.conv_transpose2(xv, kv, b).unwrap();
        let rhs: f64 = tape.value(up).iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![0.0, -3.0]).unwrap().trainable());
    let s = tape.sigmoid(x);
    let r = tape.relu(x);
    assert_eq!(tape.value(s)[0], 0.5);
    assert_eq!(tape.value(r)[1], 0.0);
    let total = tape.sum(s);
    let g = tape.backward(total).unwrap();
    assert_eq!(g.get(x).unwrap()[0], 0.25);
}

#[test]
fn sigmoid_output_in_open_interval() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![6], vec![-1e6, -800.0, -40.0, 40.0, 800.0, 1e6]).unwrap();
    let s = tape.sigmoid(x);
    assert!(tape.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn add_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[1, 1, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let av = tape.leaf(&a);
    let zero = tape.constant(vec![1, 1, 4, 4], vec![0.0; 16]).unwrap();
    let s = tape.add(av, zero).unwrap();
    assert_eq!(tape.value(s), a.data());
    let bv = tape.leaf(&random(&[1, 1, 4, 4], &mut rng));
    let s = tape.add(av, bv).unwrap();
    let total = tape.sum(s);
    let g = tape.backward(total).unwrap();
    assert!(g.get(av).unwrap().iter().all(|&v| v == 1.0));
    assert!(g.get(bv).unwrap().iter().all(|&v| v == 1.0));
    let small = tape.constant(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.add(av, small), Err(NnError::Shape { .. })));
}

#[test]
fn global_sum_pool_examples() {
    let mut tape = Tape::new();
    let m = tape.leaf(&Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap().trainable());
    let s = tape.global_sum_pool(m).unwrap();
    assert_eq!(tape.value(s), &[2.0]);
    let z = tape.constant(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
    let zs = tape.global_sum_pool(z).unwrap();
    assert_eq!(tape.value(zs), &[0.0]);
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(m).unwrap(), &[1.0; 4]);
    let multi = tape.constant(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap();
    assert!(matches!(tape.global_sum_pool(multi), Err(NnError::ChannelMismatch { .. })));
}

#[test]
fn dense_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1], vec![3.0]).unwrap();
    let w = tape.constant(vec![1, 1], vec![2.0]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[6.0]);
    let id = tape.constant(vec![1, 1], vec![1.0]).unwrap();
    let xs = tape.constant(vec![3, 1], vec![-1.5, 0.0, 7.0]).unwrap();
    let y = tape.dense(xs, id, b).unwrap();
    assert_eq!(tape.value(y), &[-1.5, 0.0, 7.0]);
    let wide = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert!(matches!(tape.dense(x, wide, b), Err(NnError::Shape { .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().trainable());
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().trainable());
    let sq = tape.square(x);
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    assert!(matches!(tape.backward(sq), Err(NnError::NonScalarLoss(_))));
}

#[test]
fn gradcheck_conv2d() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 2, 5, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)];
        let err = check(&inputs, &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_conv2d_pointwise() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 3, 4, 4], &mut rng), random(&[1, 3, 1, 1], &mut rng), random(&[1], &mut rng)];
        let err = check(&inputs, &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_conv_transpose2() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 2, 3, 4], &mut rng), random(&[2, 3, 4, 4], &mut rng), random(&[3], &mut rng)];
        let err = check(&inputs, &|t, v| {
            let y = t.conv_transpose2(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_pool_activations_dense() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 2, 4, 4], &mut rng)];
        let err = check(&inputs, &|t, v| {
            let p = t.avg_pool2(v[0]).unwrap();
            let s = t.sigmoid(p);
            weighted_sum(t, s, seed)
        });
        assert!(err < 1e-3, "pool/sigmoid seed {seed}: {err}");

        // Keep ReLU inputs away from the kink so central differences are valid.
        let mut x = random(&[1, 1, 3, 3], &mut rng);
        for v in x.data_mut() {
            *v += 0.1 * v.signum();
        }
        let err = check(&[x], &|t, v| {
            let r = t.relu(v[0]);
            weighted_sum(t, r, seed)
        });
        assert!(err < 1e-3, "relu seed {seed}: {err}");

        let inputs = [random(&[4, 3], &mut rng), random(&[2, 3], &mut rng), random(&[2], &mut rng)];
        let err = check(&inputs, &|t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-3, "dense seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_reductions() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random(&[3, 1, 8, 8], &mut rng);
        let win = PatchWindow { row: 1, col: 2, size: 6 };
        let err = check(&[mask.clone()], &|t, v| {
            let pv = t.patch_variance(v[0], win).unwrap();
            t.mean(pv)
        });
        assert!(err < 1e-3, "patch variance seed {seed}: {err}");

        // Distinct values spaced 0.05 apart so no perturbation swaps the extremes.
        let mut spaced = mask.clone();
        for n in 0..3 {
            let mut order: Vec<usize> = (0..64).collect();
            order.sort_by_key(|&i| (mask.data()[n * 64 + i] * 1e6) as i64);
            for (rank, &i) in order.iter().enumerate() {
                spaced.data_mut()[n * 64 + i] = 0.05 * rank as f64 / (1.0 + n as f64);
            }
        }
        let err = check(&[spaced.clone()], &|t, v| {
            let rg = t.sample_range(v[0]).unwrap();
            let inv = t.reciprocal(rg, 1e-6);
            t.mean(inv)
        });
        assert!(err < 1e-3, "range seed {seed}: {err}");

        let err = check(&[spaced], &|t, v| {
            let g = t.global_sum_pool(v[0]).unwrap();
            let var = t.variance(g);
            t.reciprocal(var, 1e-12)
        });
        assert!(err < 1e-3, "area variance seed {seed}: {err}");

        let pred = random(&[5, 1], &mut rng);
        let observed = [0.3, 1.2, -0.4, 2.0, 0.9];
        let err = check(&[pred], &|t, v| t.pearson_loss(v[0], &observed, 1e-8).unwrap());
        assert!(err < 1e-3, "pearson seed {seed}: {err}");
    }
}

#[test]
fn patch_variance_of_alternating_patch() {
    let mut data = vec![0.5; 64];
    for r in 0..6 {
        for c in 0..6 {
            data[r * 8 + c] = if (r + c) % 2 == 0 { 0.0 } else { 0.2 };
        }
    }
    let mut tape = Tape::new();
    let m = tape.constant(vec![1, 1, 8, 8], data).unwrap();
    let v = tape.patch_variance(m, PatchWindow { row: 0, col: 0, size: 6 }).unwrap();
    assert!((tape.value(v)[0] - 0.01).abs() < 1e-15);
    assert!(tape.patch_variance(m, PatchWindow { row: 3, col: 3, size: 6 }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constrained_weights_stay_nonnegative_under_adam(
        seed in any::<u64>(),
        steps in 1usize..30,
        lr in 1e-4f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = LayerParams::nonnegative_dense(5, 1, &mut rng);
        let mut state = AdamState::new(lr);
        for _ in 0..steps {
            layer.weights.grad = Some((0..5).map(|_| rng.random_range(-10.0..10.0)).collect());
            layer.bias.grad = Some(vec![rng.random_range(-1.0..1.0)]);
            adam_step(&mut [&mut layer], &mut state).unwrap();
            prop_assert!(layer.weights.data().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn sigmoid_stays_in_the_open_interval(xs in proptest::collection::vec(-1e300f64..1e300, 1..32)) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![xs.len()], xs).unwrap();
        let s = tape.sigmoid(x);
        prop_assert!(tape.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv2d_keeps_shape_for_odd_kernels(k in prop_oneof![Just(1usize), Just(3), Just(5)], h in 1usize..9, w in 1usize..9, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64((k * 100 + h * 10 + w) as u64);
        let mut tape = Tape::new();
        let x = tape.leaf(&random(&[2, c, h, w], &mut rng));
        let wt = tape.leaf(&random(&[3, c, k, k], &mut rng));
        let b = tape.leaf(&random(&[3], &mut rng));
        let y = tape.conv2d(x, wt, b).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, 3, h, w]);
    }
}
