#![allow(dead_code)]

use fedmetanas::params::ParamSet;
use fedmetanas::search::{
    apply_op, cell_forward, k_subsets, register, relu_conv_affine, ArchParams, Mode, SuperNet, Target, PRIMITIVES,
};
use fedmetanas::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn softmax64(logits: &[f32], lambda: f32) -> Vec<f64> {
    let y: Vec<f64> = logits.iter().map(|&l| l as f64 / lambda as f64).collect();
    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cell output through the library, noise-free.
pub fn cell_actual(net: &SuperNet, w: &ParamSet, arch: &ArchParams, cell: usize, x0: &Tensor, x1: &Tensor) -> Vec<f32> {
    let mut tape = Tape::<f32>::new();
    let wv = register(&mut tape, w, false).unwrap();
    let av = register(&mut tape, &arch.logits, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sel = net.select(&mut tape, &av, arch.lambda, &[], Mode::Eval, &mut rng).unwrap();
    let a = tape.constant(x0.clone()).unwrap();
    let b = tape.constant(x1.clone()).unwrap();
    let out = cell_forward(&mut tape, &net.cells[cell], &net.layout, a, b, &sel, &wv).unwrap();
    tape.value(out).unwrap().data().to_vec()
}

/// Brute force: every node is the explicit sum over input subsets `I` of
/// `Z_I * Σ_{i∈I} Σ_o Z_o · o(x_i)`, each op evaluated separately.
pub fn cell_oracle(net: &SuperNet, w: &ParamSet, arch: &ArchParams, cell: usize, x0: &Tensor, x1: &Tensor) -> Vec<f64> {
    let c = &net.cells[cell];
    let mut tape = Tape::<f64>::new();
    let wv = register(&mut tape, w, false).unwrap();
    let a = tape.constant(x0.cast()).unwrap();
    let b = tape.constant(x1.cast()).unwrap();
    let s0 = relu_conv_affine(&mut tape, a, &c.pre0, &wv).unwrap();
    let s1 = relu_conv_affine(&mut tape, b, &c.pre1, &wv).unwrap();
    let mut states: Vec<Tensor<f64>> = vec![tape.value(s0).unwrap().clone(), tape.value(s1).unwrap().clone()];
    let in_shape = states[0].shape().to_vec();
    let stride = c.kind.stride();
    let out_shape = vec![in_shape[0], in_shape[1], (in_shape[2] - 1) / stride + 1, (in_shape[3] - 1) / stride + 1];
    let numel: usize = out_shape.iter().product();

    for j in 0..c.nodes {
        let to = j + 2;
        let node_cat = net.layout.node_index(c.kind, to);
        let subsets = k_subsets(to, arch.combo_size);
        match &net.layout.get(node_cat).target {
            Target::Node { subsets: s, .. } => assert_eq!(s, &subsets),
            _ => panic!("expected node categorical"),
        }
        let z_set = softmax64(arch.logits_of(node_cat), arch.lambda);
        let mut node = vec![0.0f64; numel];
        for (si, subset) in subsets.iter().enumerate() {
            for &from in subset {
                let edge_cat = net.layout.edge_index(c.kind, from, to);
                let z_op = softmax64(arch.logits_of(edge_cat), arch.lambda);
                let edge = c.edge(from, to);
                for (k, &prim) in PRIMITIVES.iter().enumerate() {
                    let x = tape.constant(states[from].clone()).unwrap();
                    let Some(y) = apply_op(&mut tape, prim, &edge.ops[k], x, edge.stride, &wv).unwrap() else {
                        continue;
                    };
                    let y = tape.value(y).unwrap();
                    assert_eq!(y.shape(), &out_shape[..]);
                    for (n, v) in node.iter_mut().zip(y.data()) {
                        *n += z_set[si] * z_op[k] * v;
                    }
                }
            }
        }
        states.push(Tensor::new(out_shape.clone(), node).unwrap());
    }

    // channel concat of the intermediate nodes
    let (n, ch, hw) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
    let mut out = Vec::with_capacity(numel * c.nodes);
    for b in 0..n {
        for s in &states[2..] {
            out.extend_from_slice(&s.data()[b * ch * hw..(b + 1) * ch * hw]);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
