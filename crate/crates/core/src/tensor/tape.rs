use super::kernels::{self, ConvGeom, ConvSpec, PoolGeom, PoolKind};
use super::{Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    epoch: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Relu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    ChannelAffine {
        input: usize,
        scale: usize,
        shift: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: usize,
        geom: PoolGeom,
    },
    GlobalAvgPool(usize),
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        inputs: Vec<Option<usize>>,
        weights: usize,
    },
    Softmax {
        logits: usize,
        inv_temperature: f64,
    },
    SubsetSums {
        weights: usize,
        subsets: Vec<Vec<usize>>,
    },
    ConcatChannels(Vec<usize>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Sum(a) | Op::Relu(a) | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelAffine { input, scale, shift } => vec![*input, *scale, *shift],
            Op::MaxPool { input, .. } | Op::AvgPool { input, .. } => vec![*input],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedSum { inputs, weights } => {
                let mut v: Vec<usize> = inputs.iter().flatten().copied().collect();
                v.push(*weights);
                v
            }
            Op::Softmax { logits, .. } => vec![*logits],
            Op::SubsetSums { weights, .. } => vec![*weights],
            Op::ConcatChannels(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    epoch: u64,
    backward_done: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node and starts a new epoch.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.epoch += 1;
        self.backward_done = false;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of every piecewise branch taken so far: the sign of each
    /// ReLU input and each max-pool argmax. Two forward passes with equal
    /// fingerprints lie on the same smooth piece of the graph.
    pub fn branch_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.nodes[*a].value.data() {
                        mix((v > T::ZERO) as u64);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.epoch != self.epoch || v.index >= self.nodes.len() {
            return Err(TensorError::StaleVar {
                var_epoch: v.epoch,
                tape_epoch: self.epoch,
            });
        }
        Ok(v.index)
    }

    fn push(&mut self, op: &'static str, mut value: Tensor<T>, node_op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        value.requires_grad = node_op
            .inputs()
            .iter()
            .any(|&i| self.nodes[i].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op: node_op });
        Ok(Var {
            index: self.nodes.len() - 1,
            epoch: self.epoch,
        })
    }

    fn node(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        self.node(v)
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` when `v` was not
    /// reachable from the loss or does not require a gradient.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>, TensorError> {
        Ok(self.node(v)?.grad.as_deref())
    }

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Result<Var, TensorError> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            epoch: self.epoch,
        })
    }

    pub fn param(&mut self, shape: &[usize], data: &[T]) -> Result<Var, TensorError> {
        self.leaf(Tensor::new(shape.to_vec(), data.to_vec())?.with_grad())
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var, TensorError> {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != sb.len() {
            return Err(TensorError::Rank {
                op,
                expected: sa.len(),
                got: sb.len(),
            });
        }
        if let Some(d) = (0..sa.len()).find(|&d| sa[d] != sb[d]) {
            return Err(TensorError::ShapeMismatch {
                op,
                dim: AXIS_NAMES.get(d).copied().unwrap_or("axis"),
                expected: sa[d],
                got: sb[d],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ia, ib)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ia, ib)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(ia, ib))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().map(|&v| v.to_f64()).sum();
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let data = t.data().iter().map(|&v| v.max(T::ZERO)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("relu", out, Op::Relu(ia))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C/groups,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var, TensorError> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let geom = kernels::conv_geom(self.nodes[ii].value.shape(), self.nodes[ik].value.shape(), spec)?;
        let data = kernels::conv2d_forward::<T>(&geom, self.nodes[ii].value.data(), self.nodes[ik].value.data());
        let out = Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], data)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                geom,
            },
        )
    }

    /// `y[n,c,..] = scale[c] * x[n,c,..] + shift[c]`.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        const OP: &str = "channel_affine";
        let (ii, isc, ish) = (self.check(input)?, self.check(scale)?, self.check(shift)?);
        let x = &self.nodes[ii].value;
        if x.rank() != 4 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                got: x.rank(),
            });
        }
        let c = x.shape()[1];
        for &p in &[isc, ish] {
            let len = self.nodes[p].value.len();
            if len != c {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim: "channels",
                    expected: c,
                    got: len,
                });
            }
        }
        let plane = x.shape()[2] * x.shape()[3];
        let (sc, sh) = (self.nodes[isc].value.data(), self.nodes[ish].value.data());
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                sc[ch] * v + sh[ch]
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(
            OP,
            out,
            Op::ChannelAffine {
                input: ii,
                scale: isc,
                shift: ish,
            },
        )
    }

    pub fn pool(
        &mut self,
        input: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let geom = kernels::pool_geom(self.nodes[ii].value.shape(), window, stride, padding)?;
        let shape = vec![geom.n, geom.c, geom.oh, geom.ow];
        match kind {
            PoolKind::Max => {
                let (data, argmax) = kernels::max_pool_forward(&geom, self.nodes[ii].value.data());
                self.push("max_pool", Tensor::new(shape, data)?, Op::MaxPool { input: ii, argmax })
            }
            PoolKind::Avg => {
                let data = kernels::avg_pool_forward(&geom, self.nodes[ii].value.data());
                self.push("avg_pool", Tensor::new(shape, data)?, Op::AvgPool { input: ii, geom })
            }
        }
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        if x.rank() != 4 {
            return Err(TensorError::Rank {
                op: "global_avg_pool",
                expected: 4,
                got: x.rank(),
            });
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let data = x
            .data()
            .chunks(plane)
            .map(|p| T::from_f64(p.iter().map(|&v| v.to_f64()).sum::<f64>() / plane as f64))
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(ii))
    }

    /// `[N,D] x [D,C] + [C] -> [N,C]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let (ii, iw, ib) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (x, w, b) = (&self.nodes[ii].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if x.rank() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                got: x.rank(),
            });
        }
        if w.rank() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                got: w.rank(),
            });
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let c = w.shape()[1];
        if w.shape()[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "inner",
                expected: d,
                got: w.shape()[0],
            });
        }
        if b.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias",
                expected: c,
                got: b.len(),
            });
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut data = vec![T::ZERO; n * c];
        for r in 0..n {
            for k in 0..c {
                let mut acc = bd[k].to_f64();
                for i in 0..d {
                    acc += xd[r * d + i].to_f64() * wd[i * c + k].to_f64();
                }
                data[r * c + k] = T::from_f64(acc);
            }
        }
        self.push(
            OP,
            Tensor::new(vec![n, c], data)?,
            Op::Linear {
                input: ii,
                weight: iw,
                bias: ib,
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "cross_entropy";
        let il = self.check(logits)?;
        let x = &self.nodes[il].value;
        if x.rank() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                got: x.rank(),
            });
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "batch",
                expected: n,
                got: labels.len(),
            });
        }
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: "empty batch".into(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                op: OP,
                label: bad,
                classes: c,
            });
        }
        let mut probs = vec![T::ZERO; n * c];
        let mut loss = 0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x.data()[r * c..(r + 1) * c];
            let p = softmax_f64(row, 1.0);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
            let lse = max + row.iter().map(|&v| (v.to_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].to_f64();
            for k in 0..c {
                probs[r * c + k] = T::from_f64(p[k]);
            }
        }
        let out = Tensor::scalar(T::from_f64(loss / n as f64));
        self.push(
            OP,
            out,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `Σ_k weights[k] * inputs[k]`; a `None` input stands for an all-zero
    /// tensor of `shape` and is never materialized.
    pub fn weighted_sum(
        &mut self,
        inputs: &[Option<Var>],
        weights: Var,
        shape: &[usize],
    ) -> Result<Var, TensorError> {
        const OP: &str = "weighted_sum";
        let iw = self.check(weights)?;
        if self.nodes[iw].value.len() != inputs.len() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "weights",
                expected: inputs.len(),
                got: self.nodes[iw].value.len(),
            });
        }
        let mut idx = Vec::with_capacity(inputs.len());
        for v in inputs {
            match v {
                Some(v) => {
                    let i = self.check(*v)?;
                    let s = self.nodes[i].value.shape();
                    if s != shape {
                        let d = (0..s.len().min(shape.len())).find(|&d| s[d] != shape[d]);
                        return Err(match d {
                            Some(d) => TensorError::ShapeMismatch {
                                op: OP,
                                dim: AXIS_NAMES.get(d).copied().unwrap_or("axis"),
                                expected: shape[d],
                                got: s[d],
                            },
                            None => TensorError::Rank {
                                op: OP,
                                expected: shape.len(),
                                got: s.len(),
                            },
                        });
                    }
                    idx.push(Some(i));
                }
                None => idx.push(None),
            }
        }
        let w = self.nodes[iw].value.data();
        let mut acc = vec![0f64; shape.iter().product()];
        for (k, i) in idx.iter().enumerate() {
            let (Some(i), wk) = (i, w[k]) else { continue };
            if wk == T::ZERO {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(self.nodes[*i].value.data()) {
                *a += wk.to_f64() * v.to_f64();
            }
        }
        let out = Tensor::new(shape.to_vec(), acc.into_iter().map(T::from_f64).collect())?;
        self.push(
            OP,
            out,
            Op::WeightedSum {
                inputs: idx,
                weights: iw,
            },
        )
    }

    /// `softmax((logits + offset) / temperature)` over a 1-D tensor. The
    /// offset is a constant (e.g. Gumbel noise) and carries no gradient.
    pub fn softmax_with_offset(
        &mut self,
        logits: Var,
        offset: Option<&[f32]>,
        temperature: f32,
    ) -> Result<Var, TensorError> {
        const OP: &str = "softmax";
        let il = self.check(logits)?;
        let x = &self.nodes[il].value;
        if x.rank() != 1 || x.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("expected a non-empty vector, got shape {:?}", x.shape()),
            });
        }
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("temperature must be positive, got {temperature}"),
            });
        }
        let shifted: Vec<T> = match offset {
            Some(g) => {
                if g.len() != x.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        dim: "noise",
                        expected: x.len(),
                        got: g.len(),
                    });
                }
                x.data().iter().zip(g).map(|(&a, &b)| a + T::from_f64(b as f64)).collect()
            }
            None => x.data().to_vec(),
        };
        let inv = 1.0 / temperature as f64;
        let p = softmax_f64(&shifted, inv);
        let out = Tensor::from_vec(p.into_iter().map(T::from_f64).collect());
        self.push(
            OP,
            out,
            Op::Softmax {
                logits: il,
                inv_temperature: inv,
            },
        )
    }

    /// `out[i] = Σ_{s : i ∈ subsets[s]} weights[s]` for `i < n_items`.
    pub fn subset_sums(
        &mut self,
        weights: Var,
        subsets: &[Vec<usize>],
        n_items: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "subset_sums";
        let iw = self.check(weights)?;
        let w = self.nodes[iw].value.data();
        if w.len() != subsets.len() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "subsets",
                expected: subsets.len(),
                got: w.len(),
            });
        }
        let mut out = vec![0f64; n_items];
        for (s, members) in subsets.iter().enumerate() {
            for &i in members {
                if i >= n_items {
                    return Err(TensorError::InvalidArgument {
                        op: OP,
                        reason: format!("member {i} out of range {n_items}"),
                    });
                }
                out[i] += w[s].to_f64();
            }
        }
        let out = Tensor::from_vec(out.into_iter().map(T::from_f64).collect());
        self.push(
            OP,
            out,
            Op::SubsetSums {
                weights: iw,
                subsets: subsets.to_vec(),
            },
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: "nothing to concatenate".into(),
            });
        };
        let s0 = self.nodes[first].value.shape().to_vec();
        if s0.len() != 4 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                got: s0.len(),
            });
        }
        let mut channels = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            for (d, name) in [(0, "batch"), (2, "height"), (3, "width")] {
                if s.len() != 4 || s[d] != s0[d] {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        dim: name,
                        expected: s0[d],
                        got: s.get(d).copied().unwrap_or(0),
                    });
                }
            }
            channels += s[1];
        }
        let plane = s0[2] * s0[3];
        let mut data = Vec::with_capacity(s0[0] * channels * plane);
        for n in 0..s0[0] {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![s0[0], channels, s0[2], s0[3]], data)?;
        self.push(OP, out, Op::ConcatChannels(idx))
    }

    /// Reverse sweep from a scalar `loss`. Fills `grad` on every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let shape = self.nodes[il].value.shape().to_vec();
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[il].value.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(il + 1);
        grads.resize_with(il + 1, || None);
        grads[il] = Some(vec![T::ONE]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |j: usize| self.nodes[j].value.requires_grad;
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    if needs(j) {
                        accumulate(grads, j, g.iter().copied());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    accumulate(grads, a, g.iter().zip(val(b).data()).map(|(&g, &y)| g * y));
                }
                if needs(b) {
                    accumulate(grads, b, g.iter().zip(val(a).data()).map(|(&g, &x)| g * x));
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = val(*a).len();
                    accumulate(grads, *a, std::iter::repeat_n(g[0], n));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = val(*a).data();
                    accumulate(grads, *a, g.iter().zip(x).map(|(g, &x)| if x > T::ZERO { *g } else { T::ZERO }));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*kernel).data(),
                    g,
                    needs(*input),
                    needs(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx.into_iter());
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk.into_iter());
                }
            }
            Op::ChannelAffine { input, scale, shift } => {
                let x = val(*input);
                let c = x.shape()[1];
                let plane = x.shape()[2] * x.shape()[3];
                let sc = val(*scale).data();
                if needs(*input) {
                    accumulate(
                        grads,
                        *input,
                        g.iter().enumerate().map(|(k, &g)| g * sc[(k / plane) % c]),
                    );
                }
                if needs(*scale) || needs(*shift) {
                    let mut dsc = vec![0f64; c];
                    let mut dsh = vec![0f64; c];
                    for (k, (&g, &xv)) in g.iter().zip(x.data()).enumerate() {
                        let ch = (k / plane) % c;
                        dsc[ch] += g.to_f64() * xv.to_f64();
                        dsh[ch] += g.to_f64();
                    }
                    if needs(*scale) {
                        accumulate(grads, *scale, dsc.into_iter().map(T::from_f64));
                    }
                    if needs(*shift) {
                        accumulate(grads, *shift, dsh.into_iter().map(T::from_f64));
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs(*input) {
                    let mut dx = vec![T::ZERO; val(*input).len()];
                    for (&a, &g) in argmax.iter().zip(g) {
                        dx[a] += g;
                    }
                    accumulate(grads, *input, dx.into_iter());
                }
            }
            Op::AvgPool { input, geom } => {
                if needs(*input) {
                    accumulate(grads, *input, kernels::avg_pool_backward(geom, g).into_iter());
                }
            }
            Op::GlobalAvgPool(a) => {
                if needs(*a) {
                    let x = val(*a);
                    let plane = x.shape()[2] * x.shape()[3];
                    let inv = T::from_f64(1.0 / plane as f64);
                    accumulate(grads, *a, (0..x.len()).map(|k| g[k / plane] * inv));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let c = w.shape()[1];
                let (xd, wd) = (x.data(), w.data());
                if needs(*input) {
                    let mut dx = vec![T::ZERO; n * d];
                    for r in 0..n {
                        for i in 0..d {
                            let mut acc = 0f64;
                            for k in 0..c {
                                acc += g[r * c + k].to_f64() * wd[i * c + k].to_f64();
                            }
                            dx[r * d + i] = T::from_f64(acc);
                        }
                    }
                    accumulate(grads, *input, dx.into_iter());
                }
                if needs(*weight) {
                    let mut dw = vec![T::ZERO; d * c];
                    for i in 0..d {
                        for k in 0..c {
                            let mut acc = 0f64;
                            for r in 0..n {
                                acc += xd[r * d + i].to_f64() * g[r * c + k].to_f64();
                            }
                            dw[i * c + k] = T::from_f64(acc);
                        }
                    }
                    accumulate(grads, *weight, dw.into_iter());
                }
                if needs(*bias) {
                    let db = (0..c).map(|k| T::from_f64((0..n).map(|r| g[r * c + k].to_f64()).sum::<f64>()));
                    accumulate(grads, *bias, db);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / T::from_f64(n as f64);
                    let d = probs.iter().enumerate().map(|(k, &p)| {
                        let onehot = if labels[k / c] == k % c { T::ONE } else { T::ZERO };
                        (p - onehot) * scale
                    });
                    accumulate(grads, *logits, d);
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let w = val(*weights).data();
                for (k, inp) in inputs.iter().enumerate() {
                    if let Some(j) = inp {
                        if needs(*j) {
                            let wk = w[k];
                            accumulate(grads, *j, g.iter().map(|&g| g * wk));
                        }
                    }
                }
                if needs(*weights) {
                    let dw = inputs.iter().map(|inp| match inp {
                        Some(j) => val(*j)
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&x, &g)| x.to_f64() * g.to_f64())
                            .sum::<f64>(),
                        None => 0.0,
                    });
                    accumulate(grads, *weights, dw.map(T::from_f64));
                }
            }
            Op::Softmax {
                logits,
                inv_temperature,
            } => {
                if needs(*logits) {
                    let z = self.nodes[i].value.data();
                    let dot: f64 = z.iter().zip(g).map(|(&z, &g)| z.to_f64() * g.to_f64()).sum();
                    let d = z
                        .iter()
                        .zip(g)
                        .map(|(&z, &g)| T::from_f64(inv_temperature * z.to_f64() * (g.to_f64() - dot)));
                    accumulate(grads, *logits, d);
                }
            }
            Op::SubsetSums { weights, subsets } => {
                if needs(*weights) {
                    let d = subsets
                        .iter()
                        .map(|members| T::from_f64(members.iter().map(|&m| g[m].to_f64()).sum::<f64>()));
                    accumulate(grads, *weights, d);
                }
            }
            Op::ConcatChannels(parts) => {
                let s0 = self.nodes[i].value.shape();
                let (n, total_c, plane) = (s0[0], s0[1], s0[2] * s0[3]);
                let mut offset = 0;
                for &j in parts {
                    let c = val(j).shape()[1];
                    if needs(j) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        accumulate(grads, j, d.into_iter());
                    }
                    offset += c;
                }
            }
        }
    }
}

const AXIS_NAMES: [&str; 4] = ["batch", "channels", "height", "width"];

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], j: usize, d: impl Iterator<Item = T>) {
    match &mut grads[j] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(d.collect()),
    }
}

/// Numerically stable `softmax(x * scale)` in `f64`.
pub(crate) fn softmax_f64<T: Real>(x: &[T], scale: f64) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64() * scale));
    let e: Vec<f64> = x.iter().map(|&v| (v.to_f64() * scale - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
