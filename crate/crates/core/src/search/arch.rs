use super::geometry::{k_subsets, CellKind, Geometry};
use super::primitives::N_OPS;
use crate::params::{Param, ParamSet};

/// What one categorical chooses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    /// Operation on edge `from -> to`.
    Edge { from: usize, to: usize },
    /// Input combination for node `to`; each choice is a subset of its
    /// predecessors.
    Node { to: usize, subsets: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Categorical {
    pub kind: CellKind,
    pub target: Target,
    pub n_choices: usize,
}

impl Categorical {
    pub fn name(&self) -> String {
        match &self.target {
            Target::Edge { from, to } => format!("{}.op.{from}-{to}", self.kind.name()),
            Target::Node { to, .. } => format!("{}.combo.{to}", self.kind.name()),
        }
    }
}

/// Canonical order of all categoricals: per cell kind present, every edge
/// (grouped by target node, then source) followed by every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchLayout {
    categoricals: Vec<Categorical>,
    kinds: Vec<(CellKind, usize, usize)>,
    nodes: usize,
}

impl ArchLayout {
    pub fn new(geometry: &Geometry) -> Self {
        let mut categoricals = Vec::new();
        let mut kinds = Vec::new();
        for kind in geometry.kinds() {
            let op_base = categoricals.len();
            for j in 0..geometry.nodes {
                let to = j + 2;
                for from in 0..to {
                    categoricals.push(Categorical {
                        kind,
                        target: Target::Edge { from, to },
                        n_choices: N_OPS,
                    });
                }
            }
            let combo_base = categoricals.len();
            for j in 0..geometry.nodes {
                let subsets = k_subsets(j + 2, geometry.combo_size);
                categoricals.push(Categorical {
                    kind,
                    n_choices: subsets.len(),
                    target: Target::Node { to: j + 2, subsets },
                });
            }
            kinds.push((kind, op_base, combo_base));
        }
        Self {
            categoricals,
            kinds,
            nodes: geometry.nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.categoricals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categoricals.is_empty()
    }

    pub fn get(&self, i: usize) -> &Categorical {
        &self.categoricals[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Categorical> {
        self.categoricals.iter()
    }

    fn bases(&self, kind: CellKind) -> (usize, usize) {
        let &(_, op, combo) = self
            .kinds
            .iter()
            .find(|(k, _, _)| *k == kind)
            .expect("cell kind not present in this geometry");
        (op, combo)
    }

    /// Index of the op categorical of edge `from -> to`.
    pub fn edge_index(&self, kind: CellKind, from: usize, to: usize) -> usize {
        let j = to - 2;
        // edges into nodes before j: sum_{j' < j} (j' + 2)
        self.bases(kind).0 + j * (j + 3) / 2 + from
    }

    pub fn node_index(&self, kind: CellKind, to: usize) -> usize {
        debug_assert!(to >= 2 && to - 2 < self.nodes);
        self.bases(kind).1 + to - 2
    }
}

/// Architecture logits plus the current sampling temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    /// One entry per categorical, in [`ArchLayout`] order.
    pub logits: ParamSet,
    pub lambda: f32,
    pub combo_size: usize,
}

impl ArchParams {
    /// All-zero logits (uniform selection).
    pub fn zeros(layout: &ArchLayout, lambda: f32, combo_size: usize) -> Self {
        let logits = layout
            .iter()
            .map(|c| Param::new(c.name(), vec![c.n_choices], vec![0.0; c.n_choices]))
            .collect();
        Self {
            logits,
            lambda,
            combo_size,
        }
    }

    pub fn logits_of(&self, i: usize) -> &[f32] {
        &self.logits.get(i).data
    }

    pub fn logits_of_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.logits.get_mut(i).data
    }

    pub fn n_categoricals(&self) -> usize {
        self.logits.len()
    }
}
