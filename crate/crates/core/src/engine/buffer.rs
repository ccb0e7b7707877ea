//! Capped exemplar memory.

use std::collections::BTreeMap;

use crate::data::{Dataset, Task};
use crate::tensor::Rng;

/// One stored sample, referenced by its dataset index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Exemplar {
    pub index: usize,
    pub class: usize,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExemplarBuffer {
    capacity: usize,
    /// Records grouped by class, classes in the order they were first stored.
    classes: Vec<(usize, Vec<Exemplar>)>,
}

impl ExemplarBuffer {
    pub const DEFAULT_CAPACITY: usize = 2000;

    pub fn new(capacity: usize) -> Self {
        ExemplarBuffer {
            capacity,
            classes: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &Exemplar> {
        self.classes.iter().flat_map(|(_, r)| r.iter())
    }

    pub fn indices(&self) -> Vec<usize> {
        self.records().map(|e| e.index).collect()
    }

    /// Stored count per class.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.classes.iter().map(|(c, r)| (*c, r.len())).collect()
    }

    /// Classes seen so far, stored or not.
    pub fn classes_seen(&self) -> usize {
        self.classes.len()
    }
}

/// Per-class quota after `classes` classes have been seen.
pub fn quota(capacity: usize, classes: usize) -> usize {
    capacity.checked_div(classes).unwrap_or(0)
}

/// Admits the train samples of the task just finished. Every class seen so
/// far is held to `floor(capacity / classes_seen)` records: stored classes
/// are randomly thinned, new classes randomly sampled from their train
/// split.
pub fn update_buffer(
    buffer: &ExemplarBuffer,
    ds: &Dataset,
    task: &Task,
    task_id: usize,
    rng: &mut Rng,
) -> ExemplarBuffer {
    let seen = buffer.classes.len() + task.classes.iter().filter(|c| !buffer.classes.iter().any(|(k, _)| k == *c)).count();
    let q = quota(buffer.capacity, seen);
    let mut next = ExemplarBuffer::new(buffer.capacity);
    for (class, records) in &buffer.classes {
        let mut kept = if records.len() > q {
            rng.sample_without_replacement(records, q)
        } else {
            records.clone()
        };
        kept.sort_by_key(|e| e.index);
        next.classes.push((*class, kept));
    }
    for &class in &task.classes {
        if next.classes.iter().any(|(k, _)| *k == class) {
            continue;
        }
        let pool: Vec<Exemplar> = task
            .train
            .iter()
            .filter(|&&i| ds.labels()[i] == class)
            .map(|&index| Exemplar {
                index,
                class,
                task: task_id,
            })
            .collect();
        let mut picked = rng.sample_without_replacement(&pool, q.min(pool.len()));
        picked.sort_by_key(|e| e.index);
        next.classes.push((class, picked));
    }
    next
}
