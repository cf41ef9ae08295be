use fedmetanas::tensor::{ConvSpec, PoolKind, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::<f32>::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut tape = Tape::<f32>::new();
    let data: Vec<f32> = (0..9).map(|v| v as f32 - 4.0).collect();
    let x = tape.constant(t(&[1, 1, 3, 3], &data)).unwrap();
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let y = tape.conv2d(x, k, ConvSpec::new(1, 1, 0)).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &data[..]);
}

#[test]
fn zero_kernel_gives_zero_output_and_correlation_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Tensor::<f32>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
    let upstream = Tensor::<f32>::randn(&[1, 1, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(input.clone()).unwrap();
    let k = tape.leaf(Tensor::<f32>::zeros(&[1, 2, 3, 3]).with_grad()).unwrap();
    let y = tape.conv2d(x, k, ConvSpec::same(3, 1, 1)).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
    let g = tape.constant(upstream.clone()).unwrap();
    let p = tape.mul(y, g).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    let dk = tape.grad(k).unwrap().unwrap();
    // dk[c,i,j] = sum_{y,x} input[c, y+i-1, x+j-1] * upstream[y, x]
    for c in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0f64;
                for yy in 0..4 {
                    for xx in 0..4 {
                        let (sy, sx) = (yy as isize + i as isize - 1, xx as isize + j as isize - 1);
                        if (0..4).contains(&sy) && (0..4).contains(&sx) {
                            acc += input.data()[c * 16 + sy as usize * 4 + sx as usize] as f64
                                * upstream.data()[yy * 4 + xx] as f64;
                        }
                    }
                }
                assert!((dk[c * 9 + i * 3 + j] as f64 - acc).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::<f32>::zeros(&[1, 2, 5, 5])).unwrap();
    let k = tape.constant(Tensor::<f32>::zeros(&[3, 3, 3, 3])).unwrap();
    match tape.conv2d(x, k, ConvSpec::same(3, 1, 1)) {
        Err(TensorError::ShapeMismatch { dim, expected, got, .. }) => {
            assert_eq!((dim, expected, got), ("kernel input channels", 2, 3));
        }
        other => panic!("unexpected {other:?}"),
    }
    let even = tape.constant(Tensor::<f32>::zeros(&[1, 2, 2, 2])).unwrap();
    assert!(tape.conv2d(x, even, ConvSpec::new(1, 1, 0)).is_err());
}

#[test]
fn constant_input_pools_to_the_same_constant() {
    for kind in [PoolKind::Max, PoolKind::Avg] {
        for stride in [1, 2] {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::<f32>::full(&[1, 2, 5, 5], 0.7)).unwrap();
            let y = tape.pool(x, kind, 3, stride, 1).unwrap();
            assert!(tape.value(y).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        }
    }
}

#[test]
fn avg_pool_gradient_counts_covering_windows() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).with_grad()).unwrap();
    let y = tape.pool(x, PoolKind::Avg, 3, 1, 1).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap().unwrap();
    // Brute force over every output window: each contributes 1/(cells in window).
    let mut expect = [0f64; 9];
    for oy in 0..3i32 {
        for ox in 0..3i32 {
            let cells: Vec<(i32, i32)> = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (oy + dy, ox + dx)))
                .filter(|&(y, x)| (0..3).contains(&y) && (0..3).contains(&x))
                .collect();
            for (y, x) in &cells {
                expect[(y * 3 + x) as usize] += 1.0 / cells.len() as f64;
            }
        }
    }
    for (a, b) in g.iter().zip(expect) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn max_pool_of_increasing_values_picks_bottom_right() {
    let data: Vec<f32> = (0..25).map(|v| v as f32).collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[1, 1, 5, 5], &data).with_grad()).unwrap();
    let y = tape.pool(x, PoolKind::Max, 3, 2, 1).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap().unwrap();
    assert_eq!(g.iter().sum::<f32>(), 9.0);
    assert_eq!(g[24], 1.0);
}

#[test]
fn max_pool_ties_route_to_first_index() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::<f32>::full(&[1, 1, 3, 3], 2.0).with_grad()).unwrap();
    let y = tape.pool(x, PoolKind::Max, 3, 1, 1).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap().unwrap();
    // Window origins clipped to the grid: the first in-bounds cell wins.
    assert_eq!(g, &[4.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pool_window_larger_than_padded_input_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, 1, 1])).unwrap();
    assert!(matches!(
        tape.pool(x, PoolKind::Max, 5, 1, 1),
        Err(TensorError::WindowTooLarge { .. })
    ));
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let b = tape.constant(t(&[1], &[5.0])).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[16.0]);

    let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0])).unwrap();
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
    let zero = tape.constant(Tensor::<f32>::zeros(&[3])).unwrap();
    let y = tape.linear(x, eye, zero).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);

    let bad = tape.constant(Tensor::<f32>::zeros(&[2, 3])).unwrap();
    assert!(matches!(
        tape.linear(x, bad, zero),
        Err(TensorError::ShapeMismatch { dim: "inner", .. })
    ));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::<f32>::zeros(&[3, 4])).unwrap();
    let l = tape.cross_entropy(x, &[0, 1, 3]).unwrap();
    assert!((tape.value(l).unwrap().data()[0] - 4f32.ln()).abs() < 1e-6);

    let mut prev = f32::INFINITY;
    for margin in [1.0, 5.0, 10.0] {
        let x = tape.constant(t(&[1, 3], &[margin, 0.0, 0.0])).unwrap();
        let l = tape.cross_entropy(x, &[0]).unwrap();
        let v = tape.value(l).unwrap().data()[0];
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-4);

    assert!(matches!(
        tape.cross_entropy(x, &[4, 0, 0]),
        Err(TensorError::LabelOutOfRange { label: 4, .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = [0.3f32, -1.2, 2.0, 0.1, 0.0, 0.5];
    let labels = [2, 0];
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[2, 3], &logits).with_grad()).unwrap();
    let l = tape.cross_entropy(x, &labels).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap().unwrap();
    for r in 0..2 {
        let row = &logits[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        for k in 0..3 {
            let p = (row[k] as f64).exp() / z;
            let expect = (p - if labels[r] == k { 1.0 } else { 0.0 }) / 2.0;
            assert!((g[r * 3 + k] as f64 - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]).with_grad()).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0, 1.0, 1.0]);

    tape.reset();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::BackwardAlreadyRun)));
    tape.reset();
    assert!(matches!(tape.backward(s), Err(TensorError::StaleVar { .. })));
    assert!(tape.value(x).is_err());
}

#[test]
fn unreachable_and_constant_nodes_get_no_gradient() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
    let b = tape.leaf(t(&[2], &[3.0, 4.0]).with_grad()).unwrap();
    let c = tape.constant(t(&[2], &[5.0, 6.0])).unwrap();
    let p = tape.mul(a, c).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().unwrap(), &[5.0, 6.0]);
    assert!(tape.grad(b).unwrap().is_none());
    assert!(tape.grad(c).unwrap().is_none());
}

#[test]
fn zero_op_inputs_receive_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, -1.0, 2.0, 3.0]).with_grad()).unwrap();
    let w = tape.leaf(t(&[2], &[0.0, 1.0]).with_grad()).unwrap();
    // First slot is the zero op; its weight sees no gradient either.
    let y = tape.weighted_sum(&[None, Some(x)], w, &[1, 1, 2, 2]).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().unwrap()[0], 0.0);
    assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0; 4]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::<f32>::new();
    assert!(matches!(
        tape.leaf(t(&[1], &[f32::NAN])),
        Err(TensorError::NonFinite { .. })
    ));
    let big = tape.constant(t(&[1], &[3e38])).unwrap();
    assert!(matches!(tape.add(big, big), Err(TensorError::NonFinite { op: "add" })));
}

#[test]
fn tensor_shape_invariant() {
    assert!(matches!(
        Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
        Err(TensorError::DataLength { expected: 6, got: 5, .. })
    ));
    assert!(Tensor::<f32>::zeros(&[2, 3]).reshape(vec![3, 2]).is_ok());
    assert!(Tensor::<f32>::zeros(&[2, 3]).reshape(vec![4]).is_err());
}

fn forward_once(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::<f32>::randn(&[2, 3, 6, 6], 1.0, &mut rng)).unwrap();
    let k = tape.constant(Tensor::<f32>::randn(&[4, 3, 3, 3], 0.5, &mut rng)).unwrap();
    let c = tape.conv2d(x, k, ConvSpec::same(3, 2, 1)).unwrap();
    let r = tape.relu(c).unwrap();
    let p = tape.pool(r, PoolKind::Max, 3, 1, 1).unwrap();
    let g = tape.global_avg_pool(p).unwrap();
    tape.value(g).unwrap().data().to_vec()
}

#[test]
fn forward_is_bit_deterministic() {
    let a = forward_once(11);
    let b = forward_once(11);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grad_lengths_match_data(n in 1usize..4, c in 1usize..4, h in 3usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::<f32>::randn(&[n, c, h, h], 1.0, &mut rng).with_grad()).unwrap();
        let k = tape.leaf(Tensor::<f32>::randn(&[2, c, 3, 3], 1.0, &mut rng).with_grad()).unwrap();
        let y = tape.conv2d(x, k, ConvSpec::same(3, 1, 1)).unwrap();
        let r = tape.relu(y).unwrap();
        let p = tape.pool(r, PoolKind::Avg, 3, 2, 1).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        for v in [x, k, y, r, p] {
            let len = tape.value(v).unwrap().len();
            prop_assert_eq!(tape.grad(v).unwrap().unwrap().len(), len);
        }
    }

    #[test]
    fn same_padding_divides_spatial_size(h in 1usize..9, stride in 1usize..3, k in prop::sample::select(vec![3usize, 5]), dil in 1usize..3) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, h, h])).unwrap();
        let w = tape.constant(Tensor::<f32>::zeros(&[1, 1, k, k])).unwrap();
        let y = tape.conv2d(x, w, ConvSpec::same(k, stride, dil)).unwrap();
        let oh = (h - 1) / stride + 1;
        prop_assert_eq!(tape.value(y).unwrap().shape(), &[1, 1, oh, oh]);
    }
}
