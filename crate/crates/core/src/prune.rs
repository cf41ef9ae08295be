//! Scheduled soft pruning and discretization.
//!
//! After a meta update, every still-open categorical whose noise-free
//! selection weight reaches the threshold is fixed to its argmax. Fixed
//! entries are absorbing and enter the forward pass as constant one-hots,
//! so a fully fixed supernet computes exactly what the discrete network
//! computes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::search::{
    apply_op, argmax, op_output_shape, register, relu_conv_affine, softmax_with_noise, ArchLayout, ArchParams, CellKind,
    Geometry, Primitive, SuperNet, Target, PRIMITIVES,
};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskEntry {
    Open,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    entries: Vec<MaskEntry>,
    /// Selection weight at or above which a categorical is fixed.
    pub threshold: f32,
    /// Checks run on meta epochs divisible by this period.
    pub period: usize,
}

pub const DEFAULT_THRESHOLD: f32 = 0.7;
pub const DEFAULT_PERIOD: usize = 5;

impl PruneMask {
    pub fn open(n: usize, threshold: f32, period: usize) -> Self {
        Self {
            entries: vec![MaskEntry::Open; n],
            threshold,
            period,
        }
    }

    pub fn from_entries(entries: Vec<MaskEntry>, threshold: f32, period: usize) -> Self {
        Self {
            entries,
            threshold,
            period,
        }
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn open_count(&self) -> usize {
        self.entries.iter().filter(|e| **e == MaskEntry::Open).count()
    }

    pub fn is_fully_fixed(&self) -> bool {
        self.open_count() == 0
    }
}

/// Fixes every open categorical whose noise-free weight at the current
/// temperature reaches `mask.threshold`, when `epoch` is on the schedule.
/// Returns the new mask and the number of newly fixed entries. Logits are
/// never modified.
pub fn prune_check(arch: &ArchParams, mask: &PruneMask, epoch: usize) -> Result<(PruneMask, usize)> {
    let mut next = mask.clone();
    if mask.period == 0 || epoch % mask.period != 0 {
        return Ok((next, 0));
    }
    let mut fixed = 0;
    for (i, entry) in next.entries.iter_mut().enumerate() {
        if *entry != MaskEntry::Open {
            continue;
        }
        let p = softmax_with_noise(arch.logits_of(i), &[], arch.lambda)?;
        let best = argmax(&p);
        if p[best] >= mask.threshold {
            *entry = MaskEntry::Fixed(best);
            fixed += 1;
        }
    }
    Ok((next, fixed))
}

/// Fixes, at their noise-free argmax, open edges whose source is left out
/// of the input subset already fixed for their target node. Such edges
/// cannot affect the network, so their logits stop receiving gradient and
/// would otherwise stay open for good.
pub fn fix_orphans(layout: &ArchLayout, arch: &ArchParams, mask: &PruneMask) -> (PruneMask, usize) {
    let mut next = mask.clone();
    let mut fixed = 0;
    for (i, c) in layout.iter().enumerate() {
        let Target::Edge { from, to } = c.target else {
            continue;
        };
        if next.entries[i] != MaskEntry::Open {
            continue;
        }
        let node = layout.node_index(c.kind, to);
        let Target::Node { subsets, .. } = &layout.get(node).target else {
            unreachable!("node index points at a node categorical");
        };
        if let MaskEntry::Fixed(s) = mask.entries[node] {
            if !subsets[s].contains(&from) {
                next.entries[i] = MaskEntry::Fixed(argmax(arch.logits_of(i)));
                fixed += 1;
            }
        }
    }
    (next, fixed)
}

/// Open leaves `weights` untouched; `Fixed(i)` replaces them by `onehot(i)`.
pub fn apply_mask(weights: &[f32], entry: MaskEntry) -> Result<Vec<f32>> {
    match entry {
        MaskEntry::Open => Ok(weights.to_vec()),
        MaskEntry::Fixed(i) if i < weights.len() => {
            let mut v = vec![0.0; weights.len()];
            v[i] = 1.0;
            Ok(v)
        }
        MaskEntry::Fixed(i) => Err(Error::MaskIndex {
            index: i,
            n: weights.len(),
        }),
    }
}

/// Entry-wise strict-majority merge of client masks: an entry is fixed to
/// `k` when more than half of the masks fix it to `k`.
pub fn merge_majority(masks: &[&PruneMask]) -> Result<PruneMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Federation("no masks to merge".into()))?;
    let n = first.len();
    if let Some(m) = masks.iter().find(|m| m.len() != n) {
        return Err(Error::Federation(format!(
            "mask length mismatch: {} vs {n}",
            m.len()
        )));
    }
    let entries = (0..n)
        .map(|i| {
            let mut votes: HashMap<usize, usize> = HashMap::new();
            for m in masks {
                if let MaskEntry::Fixed(k) = m.entries[i] {
                    *votes.entry(k).or_default() += 1;
                }
            }
            votes
                .into_iter()
                .find(|&(_, c)| 2 * c > masks.len())
                .map_or(MaskEntry::Open, |(k, _)| MaskEntry::Fixed(k))
        })
        .collect();
    Ok(PruneMask::from_entries(entries, first.threshold, first.period))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpChoice {
    pub cell_type: CellKind,
    pub from: usize,
    pub to: usize,
    pub op: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComboChoice {
    pub cell_type: CellKind,
    pub node: usize,
    pub inputs: Vec<usize>,
}

/// One op per edge and one input subset per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub primitives: Vec<String>,
    pub geometry: Geometry,
    pub edges: Vec<OpChoice>,
    pub nodes: Vec<ComboChoice>,
}

impl DiscreteArchitecture {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }
}

/// Fixes every remaining open categorical at its noise-free argmax
/// (lowest index on ties).
pub fn finalize_mask(arch: &ArchParams, mask: &PruneMask) -> PruneMask {
    let entries = mask
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| match e {
            MaskEntry::Fixed(k) => MaskEntry::Fixed(*k),
            MaskEntry::Open => MaskEntry::Fixed(argmax(arch.logits_of(i))),
        })
        .collect();
    PruneMask::from_entries(entries, mask.threshold, mask.period)
}

/// A fully discretized network: chosen ops only, with their trained weights.
#[derive(Clone, Debug)]
pub struct DiscreteModel {
    pub net: SuperNet,
    pub mask: PruneMask,
    pub architecture: DiscreteArchitecture,
    /// Surviving weights only.
    pub weights: ParamSet,
    /// Names of every supernet weight, in layout order.
    layout_names: Vec<String>,
}

pub fn finalize(net: &SuperNet, w: &ParamSet, arch: &ArchParams, mask: &PruneMask) -> Result<DiscreteModel> {
    let mask = finalize_mask(arch, mask);
    let fixed = |i: usize| match mask.entries[i] {
        MaskEntry::Fixed(k) => k,
        MaskEntry::Open => unreachable!("finalized"),
    };
    let mut edges = Vec::new();
    let mut nodes = Vec::new();
    for (i, cat) in net.layout.iter().enumerate() {
        let k = fixed(i);
        match &cat.target {
            Target::Edge { from, to } => edges.push(OpChoice {
                cell_type: cat.kind,
                from: *from,
                to: *to,
                op: PRIMITIVES[k].name().to_string(),
            }),
            Target::Node { to, subsets } => nodes.push(ComboChoice {
                cell_type: cat.kind,
                node: *to,
                inputs: subsets[k].clone(),
            }),
        }
    }
    let architecture = DiscreteArchitecture {
        primitives: PRIMITIVES.iter().map(|p| p.name().to_string()).collect(),
        geometry: net.geometry,
        edges,
        nodes,
    };

    let mut keep = vec![false; w.len()];
    let mut mark = |i: usize| keep[i] = true;
    let s = net.stem;
    [s.conv, s.scale, s.shift, net.head_weight, net.head_bias]
        .into_iter()
        .for_each(&mut mark);
    for cell in &net.cells {
        for p in [cell.pre0, cell.pre1] {
            [p.conv, p.scale, p.shift].into_iter().for_each(&mut mark);
        }
        for edge in &cell.edges {
            let combo = fixed(net.layout.node_index(cell.kind, edge.to));
            let Target::Node { subsets, .. } = &net.layout.get(net.layout.node_index(cell.kind, edge.to)).target
            else {
                unreachable!()
            };
            if !subsets[combo].contains(&edge.from) {
                continue;
            }
            let op = fixed(net.layout.edge_index(cell.kind, edge.from, edge.to));
            for idx in op_param_indices(&edge.ops[op]) {
                mark(idx);
            }
        }
    }
    let weights = w
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| p.clone())
        .collect();
    Ok(DiscreteModel {
        net: net.clone(),
        mask,
        architecture,
        weights,
        layout_names: w.iter().map(|p| p.name.clone()).collect(),
    })
}

fn op_param_indices(p: &crate::search::OpParams) -> Vec<usize> {
    use crate::search::OpParams;
    match p {
        OpParams::None => vec![],
        OpParams::Reduce(r) => vec![r.conv, r.scale, r.shift],
        OpParams::Sep { stages, .. } => stages
            .iter()
            .flat_map(|s| [s.depthwise, s.pointwise, s.scale, s.shift])
            .collect(),
        OpParams::Dil { stage, .. } => vec![stage.depthwise, stage.pointwise, stage.scale, stage.shift],
    }
}

impl DiscreteModel {
    /// Logits of the discrete network: each node is the plain sum of the
    /// chosen ops applied to its chosen inputs.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = &self.net;
        // full-layout view: dropped weights become a scalar placeholder that
        // fails any shape check if touched
        let kept = register(&mut tape, &self.weights, false)?;
        let by_name: HashMap<&str, Var> = self
            .weights
            .iter()
            .map(|p| p.name.as_str())
            .zip(kept.iter().copied())
            .collect();
        let placeholder = tape.constant(Tensor::scalar(0.0))?;
        let w: Vec<Var> = self
            .layout_names
            .iter()
            .map(|n| by_name.get(n.as_str()).copied().unwrap_or(placeholder))
            .collect();

        let x = tape.constant(batch.clone())?;
        let s = net.stem;
        let h = tape.conv2d(x, w[s.conv], ConvSpec::same(3, 1, 1))?;
        let stem = tape.channel_affine(h, w[s.scale], w[s.shift])?;
        let (mut prev2, mut prev1) = (stem, stem);
        for cell in &net.cells {
            let s0 = relu_conv_affine(&mut tape, prev2, &cell.pre0, &w)?;
            let s1 = relu_conv_affine(&mut tape, prev1, &cell.pre1, &w)?;
            let out_shape = op_output_shape(tape.value(s0)?.shape(), cell.kind.stride());
            let mut states = vec![s0, s1];
            for choice in self.architecture.nodes.iter().filter(|c| c.cell_type == cell.kind) {
                let mut acc: Option<Var> = None;
                for &from in &choice.inputs {
                    let op_name = &self
                        .architecture
                        .edges
                        .iter()
                        .find(|e| e.cell_type == cell.kind && e.from == from && e.to == choice.node)
                        .expect("edge recorded")
                        .op;
                    let prim = Primitive::from_name(op_name).expect("known primitive");
                    let edge = cell.edge(from, choice.node);
                    let y = apply_op(&mut tape, prim, &edge.ops[prim.index()], states[from], edge.stride, &w)?;
                    acc = match (acc, y) {
                        (Some(a), Some(b)) => Some(tape.add(a, b)?),
                        (a, b) => a.or(b),
                    };
                }
                let node = match acc {
                    Some(v) => v,
                    None => tape.constant(Tensor::zeros(&out_shape))?,
                };
                states.push(node);
            }
            let out = tape.concat_channels(&states[2..])?;
            prev2 = prev1;
            prev1 = out;
        }
        let pooled = tape.global_avg_pool(prev1)?;
        let logits = tape.linear(pooled, w[net.head_weight], w[net.head_bias])?;
        Ok(tape.value(logits)?.clone())
    }

    /// Number of weight scalars kept by discretization.
    pub fn n_weights(&self) -> usize {
        self.weights.numel()
    }
}
