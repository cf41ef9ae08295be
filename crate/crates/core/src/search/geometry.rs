use serde::{Deserialize, Serialize};

use super::primitives::PRIMITIVES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }

    pub fn stride(self) -> usize {
        match self {
            CellKind::Normal => 1,
            CellKind::Reduction => 2,
        }
    }
}

/// Shape of the searched network and of its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub cells: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
    pub stem_channels: usize,
    /// Inputs combined per node.
    pub combo_size: usize,
}

impl Geometry {
    /// 4 cells, 4 nodes, 8 stem channels, pairs of inputs.
    pub fn desk(in_channels: usize, height: usize, width: usize, n_classes: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            n_classes,
            cells: 4,
            nodes: 4,
            stem_channels: 8,
            combo_size: 2,
        }
    }

    /// One normal cell with two nodes.
    pub fn minimal(in_channels: usize, height: usize, width: usize, n_classes: usize) -> Self {
        Self {
            cells: 1,
            nodes: 2,
            stem_channels: 4,
            ..Self::desk(in_channels, height, width, n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("cells", self.cells),
            ("nodes", self.nodes),
            ("stem_channels", self.stem_channels),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            problems.push("n_classes must be at least 2".into());
        }
        if !(1..=2).contains(&self.combo_size) {
            problems.push(format!("combo_size must be 1 or 2, got {}", self.combo_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGeometry(problems.join("; ")))
        }
    }

    /// Cell `i` is a reduction cell at one and two thirds of the depth,
    /// never at position 0.
    pub fn cell_kind(&self, i: usize) -> CellKind {
        if i > 0 && (i == self.cells / 3 || i == 2 * self.cells / 3) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        }
    }

    /// Cell kinds present in the network, normal first.
    pub fn kinds(&self) -> Vec<CellKind> {
        let mut kinds = vec![CellKind::Normal];
        if (0..self.cells).any(|i| self.cell_kind(i) == CellKind::Reduction) {
            kinds.push(CellKind::Reduction);
        }
        kinds
    }

    /// Stable FNV-1a digest of the geometry and primitive order.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv1a::default();
        for p in PRIMITIVES {
            h.write(p.name().as_bytes());
            h.write(&[0]);
        }
        for v in [
            self.in_channels,
            self.height,
            self.width,
            self.n_classes,
            self.cells,
            self.nodes,
            self.stem_channels,
            self.combo_size,
        ] {
            h.write(&(v as u64).to_le_bytes());
        }
        h.0
    }
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_positions() {
        let g = Geometry::desk(1, 8, 8, 4);
        let kinds: Vec<_> = (0..4).map(|i| g.cell_kind(i)).collect();
        assert_eq!(
            kinds,
            [CellKind::Normal, CellKind::Reduction, CellKind::Reduction, CellKind::Normal]
        );
        assert_eq!(Geometry::minimal(1, 8, 8, 4).kinds(), vec![CellKind::Normal]);
    }

    #[test]
    fn subsets() {
        assert_eq!(k_subsets(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(k_subsets(2, 2).len(), 1);
        assert_eq!(k_subsets(5, 2).len(), 10);
        assert!(k_subsets(1, 2).is_empty());
    }

    #[test]
    fn hash_tracks_fields() {
        let a = Geometry::desk(1, 8, 8, 4);
        let mut b = a;
        assert_eq!(a.hash(), b.hash());
        b.nodes = 3;
        assert_ne!(a.hash(), b.hash());
    }
}
