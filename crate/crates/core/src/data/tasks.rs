//! Splitting a dataset's classes into an ordered task sequence.

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::{Dataset, Split};

/// One step of the sequence: its classes and their sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSequence {
    tasks: Vec<Task>,
    /// Output slot of each dataset class: its position in task order.
    slot: Vec<usize>,
}

impl TaskSequence {
    /// Builds a sequence from explicit class groups.
    pub fn from_classes(ds: &Dataset, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut slot = vec![usize::MAX; ds.classes()];
        let mut next = 0;
        let mut tasks = Vec::with_capacity(groups.len());
        for (t, classes) in groups.into_iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::Config(format!("task {t} has no classes")));
            }
            for &c in &classes {
                if c >= ds.classes() {
                    return Err(Error::Data(format!("task {t} names class {c}, dataset has {}", ds.classes())));
                }
                if slot[c] != usize::MAX {
                    return Err(Error::Config(format!("class {c} appears in more than one task")));
                }
                slot[c] = next;
                next += 1;
            }
            let gather = |which| -> Vec<usize> {
                ds.split(which)
                    .iter()
                    .copied()
                    .filter(|&i| classes.contains(&ds.labels()[i]))
                    .collect()
            };
            tasks.push(Task {
                train: gather(Split::Train),
                test: gather(Split::Test),
                classes,
            });
        }
        if let Some(c) = slot.iter().position(|&s| s == usize::MAX) {
            return Err(Error::Config(format!("class {c} belongs to no task")));
        }
        Ok(TaskSequence { tasks, slot })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Output slot of a dataset class.
    pub fn slot(&self, class: usize) -> usize {
        self.slot[class]
    }

    /// Classes of tasks `0..=t`.
    pub fn classes_through(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(|k| k.classes.len()).sum()
    }

    /// Output slots of the given dataset labels.
    pub fn slots(&self, labels: &[usize]) -> Vec<usize> {
        labels.iter().map(|&l| self.slot[l]).collect()
    }
}

/// Permutes the classes with `shuffle_seed` and cuts them into consecutive
/// chunks of `classes_per_task`. When the class count is not a multiple, the
/// final task holds the remaining classes.
pub fn make_task_sequence(ds: &Dataset, classes_per_task: usize, shuffle_seed: u64) -> Result<TaskSequence> {
    if classes_per_task < 1 {
        return Err(Error::Parameter("classes_per_task must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.classes()).collect();
    Rng::new(shuffle_seed).shuffle(&mut order);
    let groups = order.chunks(classes_per_task).map(|c| c.to_vec()).collect();
    TaskSequence::from_classes(ds, groups)
}
