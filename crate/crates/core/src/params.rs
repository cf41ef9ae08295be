//! Ordered collections of named parameter arrays.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_tensor(name: impl Into<String>, t: Tensor) -> Self {
        let shape = t.shape().to_vec();
        Self::new(name, shape, t.into_data())
    }
}

/// Parameters in a fixed order. Models address entries by index; names
/// exist for serialization and diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Param) -> usize {
        self.entries.push(p);
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.entries.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Same names, shapes, zero data.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|p| Param::new(p.name.clone(), p.shape.clone(), vec![0.0; p.data.len()]))
                .collect(),
        }
    }

    /// `self -= rate * other`, entrywise.
    pub fn sub_scaled(&mut self, other: &ParamSet, rate: f32) {
        debug_assert_eq!(self.len(), other.len());
        for (p, g) in self.entries.iter_mut().zip(&other.entries) {
            for (v, &d) in p.data.iter_mut().zip(&g.data) {
                *v -= rate * d;
            }
        }
    }

    /// Name of the first entry whose name or shape differs from `other`.
    pub fn schema_mismatch(&self, other: &ParamSet) -> Option<String> {
        for (i, p) in self.entries.iter().enumerate() {
            match other.entries.get(i) {
                Some(q) if q.name == p.name && q.shape == p.shape => {}
                _ => return Some(p.name.clone()),
            }
        }
        other.entries.get(self.len()).map(|q| q.name.clone())
    }

    pub fn flat(&self) -> Vec<f32> {
        self.entries.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

impl FromIterator<Param> for ParamSet {
    fn from_iter<I: IntoIterator<Item = Param>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = &'a Param;
    type IntoIter = std::slice::Iter<'a, Param>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
