use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchLayout, ArchParams, Target};
use super::geometry::{CellKind, Geometry};
use super::gumbel::sample_gumbel;
use super::primitives::{
    apply_op, init_op, init_relu_conv_affine, op_output_shape, relu_conv_affine, OpParams,
    ReluConvAffine, PRIMITIVES,
};
use crate::error::Result;
use crate::params::{Param, ParamSet};
use crate::prune::MaskEntry;
use crate::tensor::{ConvSpec, Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel noise resampled on every forward pass.
    Search,
    /// Noise-free selection weights.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeLayout {
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    /// One entry per primitive, in primitive order.
    pub ops: Vec<OpParams>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub kind: CellKind,
    pub channels: usize,
    pub nodes: usize,
    pub pre0: ReluConvAffine,
    pub pre1: ReluConvAffine,
    pub edges: Vec<EdgeLayout>,
}

impl CellLayout {
    pub fn edge(&self, from: usize, to: usize) -> &EdgeLayout {
        let j = to - 2;
        &self.edges[j * (j + 3) / 2 + from]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stem {
    pub conv: usize,
    pub scale: usize,
    pub shift: usize,
}

/// Parameter layout of the cell-stacked supernet. The weights themselves
/// live in a [`ParamSet`] addressed by the indices stored here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperNet {
    pub geometry: Geometry,
    pub layout: ArchLayout,
    pub stem: Stem,
    pub cells: Vec<CellLayout>,
    pub head_weight: usize,
    pub head_bias: usize,
}

/// Selection weights of one categorical for the current forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CatWeights {
    pub var: Var,
    /// Set when the categorical is pruned to a single choice; the weight
    /// vector is then a constant one-hot.
    pub fixed: Option<usize>,
}

impl SuperNet {
    /// Builds the layout and freshly initialized weights.
    pub fn build<R: Rng + ?Sized>(geometry: Geometry, rng: &mut R) -> Result<(Self, ParamSet)> {
        geometry.validate()?;
        let mut w = ParamSet::new();
        let g = &geometry;
        let conv = w.push(Param::from_tensor(
            "stem.conv",
            super::primitives::he_init(&[g.stem_channels, g.in_channels, 3, 3], g.in_channels * 9, rng),
        ));
        let scale = w.push(Param::new("stem.scale", vec![g.stem_channels], vec![1.0; g.stem_channels]));
        let shift = w.push(Param::new("stem.shift", vec![g.stem_channels], vec![0.0; g.stem_channels]));
        let stem = Stem { conv, scale, shift };

        let (mut c_pp, mut c_p, mut c_cur) = (g.stem_channels, g.stem_channels, g.stem_channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(g.cells);
        for i in 0..g.cells {
            let kind = g.cell_kind(i);
            if kind == CellKind::Reduction {
                c_cur *= 2;
            }
            let prefix = format!("cell{i}");
            let pre0 = init_relu_conv_affine(
                &mut w,
                &format!("{prefix}.pre0"),
                c_pp,
                c_cur,
                if reduction_prev { 2 } else { 1 },
                rng,
            );
            let pre1 = init_relu_conv_affine(&mut w, &format!("{prefix}.pre1"), c_p, c_cur, 1, rng);
            let mut edges = Vec::new();
            for j in 0..g.nodes {
                let to = j + 2;
                for from in 0..to {
                    let stride = if kind == CellKind::Reduction && from < 2 { 2 } else { 1 };
                    let ep = format!("{prefix}.e{from}-{to}");
                    let ops = PRIMITIVES
                        .iter()
                        .map(|&p| init_op(&mut w, &ep, p, c_cur, stride, rng))
                        .collect();
                    edges.push(EdgeLayout {
                        from,
                        to,
                        stride,
                        ops,
                    });
                }
            }
            cells.push(CellLayout {
                kind,
                channels: c_cur,
                nodes: g.nodes,
                pre0,
                pre1,
                edges,
            });
            reduction_prev = kind == CellKind::Reduction;
            c_pp = c_p;
            c_p = g.nodes * c_cur;
        }
        let head_weight = w.push(Param::from_tensor(
            "head.weight",
            Tensor::randn(&[c_p, g.n_classes], (1.0 / c_p as f32).sqrt(), rng),
        ));
        let head_bias = w.push(Param::new("head.bias", vec![g.n_classes], vec![0.0; g.n_classes]));
        let net = Self {
            layout: ArchLayout::new(&geometry),
            geometry,
            stem,
            cells,
            head_weight,
            head_bias,
        };
        Ok((net, w))
    }

    /// Layout only, for decoding stored weights.
    pub fn from_geometry(geometry: Geometry) -> Result<Self> {
        Ok(Self::build(geometry, &mut ChaCha8Rng::seed_from_u64(0))?.0)
    }

    pub fn init_arch(&self, lambda: f32) -> ArchParams {
        ArchParams::zeros(&self.layout, lambda, self.geometry.combo_size)
    }

    /// Per-categorical selection weights: constant one-hot for fixed
    /// entries, otherwise `softmax((logits + G) / λ)` with Gumbel noise `G`
    /// in search mode and `G = 0` in eval mode. Noise is drawn in
    /// categorical order, only for open entries.
    pub fn select<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        alpha: &[Var],
        lambda: f32,
        mask: &[MaskEntry],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<CatWeights>> {
        let mut out = Vec::with_capacity(self.layout.len());
        for (i, cat) in self.layout.iter().enumerate() {
            match mask.get(i).copied().unwrap_or(MaskEntry::Open) {
                MaskEntry::Fixed(k) => {
                    let mut onehot = vec![T::ZERO; cat.n_choices];
                    onehot[k] = T::ONE;
                    let var = tape.constant(Tensor::from_vec(onehot))?;
                    out.push(CatWeights { var, fixed: Some(k) });
                }
                MaskEntry::Open => {
                    let noise = match mode {
                        Mode::Search => Some(sample_gumbel(cat.n_choices, rng)),
                        Mode::Eval => None,
                    };
                    let var = tape.softmax_with_offset(alpha[i], noise.as_deref(), lambda)?;
                    out.push(CatWeights { var, fixed: None });
                }
            }
        }
        Ok(out)
    }

    /// Stem -> cells -> global average pool -> linear head.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, w: &[Var], sel: &[CatWeights], batch: Var) -> Result<Var> {
        let s = self.stem;
        let h = tape.conv2d(batch, w[s.conv], ConvSpec::same(3, 1, 1))?;
        let stem = tape.channel_affine(h, w[s.scale], w[s.shift])?;
        let (mut prev2, mut prev1) = (stem, stem);
        for cell in &self.cells {
            let out = cell_forward(tape, cell, &self.layout, prev2, prev1, sel, w)?;
            prev2 = prev1;
            prev1 = out;
        }
        let pooled = tape.global_avg_pool(prev1)?;
        Ok(tape.linear(pooled, w[self.head_weight], w[self.head_bias])?)
    }

    /// Gradient-free logits for `batch`.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        w: &ParamSet,
        arch: &ArchParams,
        mask: &[MaskEntry],
        mode: Mode,
        batch: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let wv = register(&mut tape, w, false)?;
        let av = register(&mut tape, &arch.logits, false)?;
        let sel = self.select(&mut tape, &av, arch.lambda, mask, mode, rng)?;
        let x = tape.constant(batch.clone())?;
        let logits = self.forward(&mut tape, &wv, &sel, x)?;
        Ok(tape.value(logits)?.clone())
    }
}

/// Records every parameter of `params` as a leaf.
pub fn register<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet,
    requires_grad: bool,
) -> Result<Vec<Var>, TensorError> {
    params
        .iter()
        .map(|p| {
            let t = Tensor::new(p.shape.clone(), p.data.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            tape.leaf(if requires_grad { t.with_grad() } else { t })
        })
        .collect()
}

/// `Σ_o Z_o · o(x)` over the primitives of one edge. `None` means the
/// result is exactly zero (every contributing op is the zero op).
pub fn mixed_op<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weights: &CatWeights,
    edge: &EdgeLayout,
    w: &[Var],
) -> Result<Option<Var>, TensorError> {
    let in_shape = tape.value(x)?.shape().to_vec();
    let shape = op_output_shape(&in_shape, edge.stride);
    let mut outs = Vec::with_capacity(PRIMITIVES.len());
    for (k, &prim) in PRIMITIVES.iter().enumerate() {
        if weights.fixed.is_some_and(|f| f != k) {
            outs.push(None);
            continue;
        }
        outs.push(apply_op(tape, prim, &edge.ops[k], x, edge.stride, w)?);
    }
    if outs.iter().all(Option::is_none) {
        return Ok(None);
    }
    tape.weighted_sum(&outs, weights.var, &shape).map(Some)
}

/// One cell: preprocess both inputs, then for each node compute every
/// predecessor's mixed op once and combine them with the relaxed weights
/// over input subsets. Output is the channel concatenation of all nodes.
pub fn cell_forward<T: Real>(
    tape: &mut Tape<T>,
    cell: &CellLayout,
    layout: &ArchLayout,
    x_prev2: Var,
    x_prev1: Var,
    sel: &[CatWeights],
    w: &[Var],
) -> Result<Var> {
    let s0 = relu_conv_affine(tape, x_prev2, &cell.pre0, w)?;
    let s1 = relu_conv_affine(tape, x_prev1, &cell.pre1, w)?;
    let (a, b) = (tape.value(s0)?.shape().to_vec(), tape.value(s1)?.shape().to_vec());
    if a != b {
        let d = (0..4).find(|&d| a[d] != b[d]).unwrap_or(0);
        return Err(TensorError::ShapeMismatch {
            op: "cell_forward",
            dim: ["batch", "channels", "height", "width"][d],
            expected: b[d],
            got: a[d],
        }
        .into());
    }
    let out_shape = op_output_shape(&a, cell.kind.stride());
    let mut states = vec![s0, s1];
    for j in 0..cell.nodes {
        let to = j + 2;
        let node_cat = layout.node_index(cell.kind, to);
        let Target::Node { subsets, .. } = &layout.get(node_cat).target else {
            unreachable!("node categorical expected");
        };
        let combo = sel[node_cat];
        let active: Vec<bool> = match combo.fixed {
            Some(k) => (0..to).map(|i| subsets[k].contains(&i)).collect(),
            None => vec![true; to],
        };
        let mut mixed = Vec::with_capacity(to);
        for from in 0..to {
            if !active[from] {
                mixed.push(None);
                continue;
            }
            let edge_cat = layout.edge_index(cell.kind, from, to);
            mixed.push(mixed_op(tape, states[from], &sel[edge_cat], cell.edge(from, to), w)?);
        }
        let coeff = tape.subset_sums(combo.var, subsets, to)?;
        let node = tape.weighted_sum(&mixed, coeff, &out_shape)?;
        states.push(node);
    }
    Ok(tape.concat_channels(&states[2..])?)
}
