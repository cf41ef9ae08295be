//! Finite-difference checks of every differentiable operation.
//!
//! Each case builds a small random graph, reduces its output to a scalar
//! with a fixed random projection, and compares the gradient of the `f32`
//! tape with central differences of the same graph evaluated in `f64`.
//! Errors are norm-wise: `|g - g_fd| / max(|g|, |g_fd|)`.
//!
//! A coordinate whose stencil moves any ReLU input across zero or changes
//! any max-pool argmax straddles a kink, where central differences do not
//! estimate the derivative; such coordinates are skipped and counted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::federation::derive_seed;
use crate::params::ParamSet;
use crate::search::{
    apply_op, init_op, mixed_op, sample_gumbel, CatWeights, Geometry, Mode, Primitive, SuperNet, PRIMITIVES,
};
use crate::tensor::{ConvSpec, PoolKind, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

/// Worst error of one case over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub coordinates: usize,
    /// Coordinates skipped because their stencil crossed a kink.
    pub skipped: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// One graph, built once on an `f32` tape for the analytic gradient and
/// again on `f64` tapes for the reference differences.
struct Graph<'a> {
    single: Box<dyn Fn(&mut Tape<f32>, &[Var]) -> Result<Var> + 'a>,
    double: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>,
}

macro_rules! graph {
    (|$t:ident, $x:ident| $body:expr) => {
        Graph {
            single: Box::new(|$t: &mut Tape<f32>, $x: &[Var]| $body),
            double: Box::new(|$t: &mut Tape<f64>, $x: &[Var]| $body),
        }
    };
    (move |$t:ident, $x:ident| $body:expr) => {
        Graph {
            single: Box::new(move |$t: &mut Tape<f32>, $x: &[Var]| $body),
            double: Box::new(move |$t: &mut Tape<f64>, $x: &[Var]| $body),
        }
    };
}

fn eval_projected(inputs: &[Tensor<f64>], graph: &Graph, proj: &[f64]) -> Result<(f64, u64)> {
    let mut tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = (graph.double)(&mut tape, &vars)?;
    let y: f64 = tape.value(out)?.data().iter().zip(proj).map(|(&y, &r)| y * r).sum();
    Ok((y, tape.branch_signature()))
}

/// Norm-wise error, coordinates checked, coordinates skipped.
pub type CheckResult = (f64, usize, usize);

/// Relative error of the analytic gradient of `graph` at `inputs`.
/// `diff` lists which inputs are differentiated; `max_coords` caps the
/// number of coordinates checked per input (sampled without replacement).
fn check<R: Rng + ?Sized>(
    inputs: &[Tensor],
    diff: &[bool],
    graph: Graph,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .zip(diff)
        .map(|(t, &d)| tape.leaf(if d { t.clone().with_grad() } else { t.clone() }))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = (graph.single)(&mut tape, &vars)?;
    let n_out = tape.value(out)?.len();
    let proj: Vec<f32> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(tape.value(out)?.shape().to_vec(), proj.clone())?)?;
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let proj: Vec<f64> = proj.into_iter().map(f64::from).collect();
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let (_, base) = eval_projected(&wide, &graph, &proj)?;
    let (mut num, mut den_a, mut den_f) = (0f64, 0f64, 0f64);
    let (mut coords, mut skipped) = (0, 0);
    for (i, t) in inputs.iter().enumerate() {
        if !diff[i] {
            continue;
        }
        let analytic: Vec<f64> = match tape.grad(vars[i])? {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; t.len()],
        };
        let mut idx: Vec<usize> = (0..t.len()).collect();
        if let Some(m) = max_coords {
            idx.shuffle(rng);
            idx.truncate(m);
        }
        for j in idx {
            let mut shifted = wide.clone();
            let x = wide[i].data()[j];
            shifted[i].data_mut()[j] = x + FD_STEP;
            let (up, sig_up) = eval_projected(&shifted, &graph, &proj)?;
            shifted[i].data_mut()[j] = x - FD_STEP;
            let (down, sig_down) = eval_projected(&shifted, &graph, &proj)?;
            if sig_up != base || sig_down != base {
                skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * FD_STEP);
            num += (analytic[j] - fd).powi(2);
            den_a += analytic[j].powi(2);
            den_f += fd.powi(2);
            coords += 1;
        }
    }
    let den = den_a.max(den_f).sqrt();
    Ok((if den < 1e-10 { 0.0 } else { num.sqrt() / den }, coords, skipped))
}

fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Random values bounded away from zero, so ReLU kinks stay outside the
/// difference stencil.
fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sizes agree")
}

/// Distinct values spaced well beyond the stencil, in random order, so
/// max-pool never sees near ties.
fn spaced<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("sizes agree")
}

struct Case {
    name: String,
    run: Box<dyn Fn(&mut ChaCha8Rng) -> Result<CheckResult>>,
}

fn case(name: impl Into<String>, run: impl Fn(&mut ChaCha8Rng) -> Result<CheckResult> + 'static) -> Case {
    Case {
        name: name.into(),
        run: Box::new(run),
    }
}

fn cases() -> Vec<Case> {
    let mut v = vec![
        case("conv2d", |rng| {
            let ins = [randn(&[1, 2, 5, 5], rng), randn(&[3, 2, 3, 3], rng)];
            check(&ins, &[true, true], graph!(|t, x| Ok(t.conv2d(x[0], x[1], ConvSpec::new(2, 1, 1))?)), None, rng)
        }),
        case("conv2d_depthwise_dilated", |rng| {
            let ins = [randn(&[2, 3, 6, 6], rng), randn(&[3, 1, 3, 3], rng)];
            let spec = ConvSpec::same(3, 1, 2).groups(3);
            check(&ins, &[true, true], graph!(|t, x| Ok(t.conv2d(x[0], x[1], spec)?)), None, rng)
        }),
        case("relu", |rng| {
            let ins = [away_from_zero(&[2, 7], rng)];
            check(&ins, &[true], graph!(|t, x| Ok(t.relu(x[0])?)), None, rng)
        }),
        case("channel_affine", |rng| {
            let ins = [randn(&[2, 3, 4, 4], rng), randn(&[3], rng), randn(&[3], rng)];
            check(&ins, &[true; 3], graph!(|t, x| Ok(t.channel_affine(x[0], x[1], x[2])?)), None, rng)
        }),
        case("max_pool", |rng| {
            let ins = [spaced(&[1, 2, 5, 5], rng)];
            check(&ins, &[true], graph!(|t, x| Ok(t.pool(x[0], PoolKind::Max, 3, 2, 1)?)), None, rng)
        }),
        case("avg_pool", |rng| {
            let ins = [randn(&[1, 2, 5, 5], rng)];
            check(&ins, &[true], graph!(|t, x| Ok(t.pool(x[0], PoolKind::Avg, 3, 1, 1)?)), None, rng)
        }),
        case("global_avg_pool", |rng| {
            let ins = [randn(&[2, 3, 3, 3], rng)];
            check(&ins, &[true], graph!(|t, x| Ok(t.global_avg_pool(x[0])?)), None, rng)
        }),
        case("linear", |rng| {
            let ins = [randn(&[3, 4], rng), randn(&[4, 2], rng), randn(&[2], rng)];
            check(&ins, &[true; 3], graph!(|t, x| Ok(t.linear(x[0], x[1], x[2])?)), None, rng)
        }),
        case("cross_entropy", |rng| {
            let ins = [randn(&[4, 5], rng)];
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            check(&ins, &[true], graph!(|t, x| Ok(t.cross_entropy(x[0], &labels)?)), None, rng)
        }),
        case("gumbel_softmax", |rng| {
            let ins = [randn(&[6], rng)];
            let noise = sample_gumbel(6, rng);
            let lambda = rng.random_range(0.5..3.0);
            check(
                &ins,
                &[true],
                graph!(|t, x| Ok(t.softmax_with_offset(x[0], Some(&noise), lambda)?)),
                None,
                rng,
            )
        }),
        case("subset_sums", |rng| {
            let ins = [randn(&[3], rng)];
            let subsets = crate::search::k_subsets(3, 2);
            check(&ins, &[true], graph!(|t, x| Ok(t.subset_sums(x[0], &subsets, 3)?)), None, rng)
        }),
        case("weighted_sum", |rng| {
            let ins = [randn(&[1, 2, 3, 3], rng), randn(&[1, 2, 3, 3], rng), randn(&[3], rng)];
            check(
                &ins,
                &[true; 3],
                graph!(|t, x| Ok(t.weighted_sum(&[Some(x[0]), None, Some(x[1])], x[2], &[1, 2, 3, 3])?)),
                None,
                rng,
            )
        }),
        case("concat_channels", |rng| {
            let ins = [randn(&[2, 1, 2, 2], rng), randn(&[2, 3, 2, 2], rng)];
            check(&ins, &[true, true], graph!(|t, x| Ok(t.concat_channels(&[x[0], x[1]])?)), None, rng)
        }),
        case("composite", |rng| {
            let ins = [
                randn(&[2, 1, 6, 6], rng),
                randn(&[2, 1, 3, 3], rng),
                randn(&[2, 3], rng),
                randn(&[3], rng),
            ];
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            check(
                &ins,
                &[false, true, true, true],
                graph!(|t, x| {
                    let c = t.conv2d(x[0], x[1], ConvSpec::same(3, 1, 1))?;
                    let p = t.pool(c, PoolKind::Avg, 3, 2, 1)?;
                    let g = t.global_avg_pool(p)?;
                    let l = t.linear(g, x[2], x[3])?;
                    Ok(t.cross_entropy(l, &labels)?)
                }),
                None,
                rng,
            )
        }),
    ];
    for prim in PRIMITIVES {
        if prim == Primitive::Zero {
            continue;
        }
        for stride in [1, 2] {
            v.push(case(format!("{}/s{stride}", prim.name()), move |rng| primitive_case(prim, stride, rng)));
        }
    }
    v.push(case("mixed_op", |rng| mixed_case(rng)));
    v.push(case("supernet_1cell", |rng| supernet_case(rng)));
    v
}

fn primitive_case(prim: Primitive, stride: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let c = 2;
    let mut w = ParamSet::new();
    let ops = init_op(&mut w, "check", prim, c, stride, rng);
    let x = if prim == Primitive::MaxPool3x3 {
        spaced(&[2, c, 5, 5], rng)
    } else {
        away_from_zero(&[2, c, 5, 5], rng)
    };
    let mut ins = vec![x];
    ins.extend(w.iter().map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("param shape")));
    let diff = vec![true; ins.len()];
    check(
        &ins,
        &diff,
        graph!(|t, v| Ok(apply_op(t, prim, &ops, v[0], stride, &v[1..])?.expect("non-zero op"))),
        None,
        rng,
    )
}

fn mixed_case(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let c = 2;
    let geometry = Geometry {
        in_channels: c,
        height: 5,
        width: 5,
        n_classes: 2,
        cells: 1,
        nodes: 1,
        stem_channels: c,
        combo_size: 2,
    };
    let (net, w) = SuperNet::build(geometry, rng)?;
    let edge = net.cells[0].edge(0, 2).clone();
    let mut ins = vec![away_from_zero(&[1, c, 5, 5], rng), randn(&[8], rng)];
    ins.extend(w.iter().map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("param shape")));
    let diff = vec![true; ins.len()];
    check(
        &ins,
        &diff,
        graph!(|t, v| {
            let z = t.softmax_with_offset(v[1], None, 1.0)?;
            let cw = CatWeights { var: z, fixed: None };
            Ok(mixed_op(t, v[0], &cw, &edge, &v[2..])?.expect("open edge"))
        }),
        Some(60),
        rng,
    )
}

/// Inputs are the batch, every weight tensor, then every architecture logit.
fn supernet_graph<'a>(net: &'a SuperNet, labels: &'a [usize], n_w: usize) -> Graph<'a> {
    graph!(move |t, v| {
        let wv = &v[1..1 + n_w];
        let av = &v[1 + n_w..];
        let sel = net.select(t, av, 1.0, &[], Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let logits = net.forward(t, wv, &sel, v[0])?;
        Ok(t.cross_entropy(logits, labels)?)
    })
}

/// One normal cell, two nodes, noise-free selection at λ = 1; checks every
/// architecture logit and a sample of the weights.
fn supernet_case(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let geometry = Geometry {
        in_channels: 1,
        height: 5,
        width: 5,
        n_classes: 3,
        cells: 1,
        nodes: 2,
        stem_channels: 3,
        combo_size: 2,
    };
    let (net, w) = SuperNet::build(geometry, rng)?;
    let mut arch = net.init_arch(1.0);
    for p in arch.logits.iter_mut() {
        for v in p.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    let n_w = w.len();
    let mut ins = vec![randn(&[2, 1, 5, 5], rng)];
    ins.extend(w.iter().map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("param shape")));
    ins.extend(arch.logits.iter().map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("logit shape")));
    let mut diff = vec![true; ins.len()];
    diff[0] = false;
    // Weight tensors are many; sample a few coordinates of each while
    // covering every architecture logit.
    let (e1, c1, s1) = check(&ins, &diff, supernet_graph(&net, &labels, n_w), Some(2), rng)?;
    let mut alpha_only = vec![false; ins.len()];
    for d in alpha_only.iter_mut().skip(1 + n_w) {
        *d = true;
    }
    let (e2, c2, s2) = check(&ins, &alpha_only, supernet_graph(&net, &labels, n_w), None, rng)?;
    Ok((e1.max(e2), c1 + c2, s1 + s2))
}

/// Runs every case over `n_seeds` seeds derived from `seed`.
pub fn run_suite(seed: u64, n_seeds: usize) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (ci, c) in cases().iter().enumerate() {
        let mut worst = 0f64;
        let (mut coords, mut skipped) = (0, 0);
        for s in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, ci as u64, s as u64]));
            let (e, n, k) = (c.run)(&mut rng)?;
            worst = worst.max(e);
            coords += n;
            skipped += k;
        }
        reports.push(OpReport {
            op: c.name.clone(),
            max_rel_error: worst,
            seeds: n_seeds,
            coordinates: coords,
            skipped,
        });
    }
    Ok(reports)
}
