use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous name -> slice map over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Registry {
    slots: Vec<Slot>,
}

impl Registry {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Range<usize> {
        let slot = Slot {
            name: name.into(),
            offset: self.len(),
            shape,
        };
        let r = slot.range();
        self.slots.push(slot);
        r
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn get(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.get(name).map(Slot::range)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Slots are in offset order, pairwise disjoint, cover `0..len` and
    /// have unique names.
    pub fn is_consistent(&self) -> bool {
        let mut next = 0;
        let mut names = std::collections::HashSet::new();
        for s in &self.slots {
            if s.offset != next || !names.insert(s.name.as_str()) {
                return false;
            }
            next += s.len();
        }
        true
    }

    /// Slot owning flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&Slot> {
        self.slots.iter().find(|s| s.range().contains(&i))
    }
}
