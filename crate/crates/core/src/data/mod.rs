//! Datasets: the synthetic grating generator, IDX files, normalization and
//! the split of classes into tasks.

mod idx;
mod synthetic;
mod tasks;

pub use idx::{
    encode_idx, load_idx, read_idx_images, read_idx_labels, write_idx, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, TRAIN_FRACTION};
pub use tasks::{make_task_sequence, Task, TaskSequence};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Labelled images `[M, C, H, W]` with disjoint train and test index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    train: Vec<usize>,
    test: Vec<usize>,
    class_counts: Vec<usize>,
}

/// Which partition of a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(dim_err!("images must be M x C x H x W, got {:?}", inputs.shape()));
        }
        let m = inputs.shape()[0];
        if labels.len() != m {
            return Err(Error::Data(format!("{} labels for {m} images", labels.len())));
        }
        let mut class_counts = vec![0usize; classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::Data(format!("label {l} of sample {i} is outside [0, {classes})")));
            }
            class_counts[l] += 1;
        }
        if let Some(k) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("class {k} has no samples")));
        }
        let mut seen = vec![false; m];
        for &i in train.iter().chain(&test) {
            if i >= m {
                return Err(Error::Data(format!("split index {i} outside {m} samples")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("sample {i} appears twice across the splits")));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            train,
            test,
            class_counts,
        })
    }

    /// Every sample in the train split.
    pub fn unsplit(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let m = labels.len();
        Self::new(inputs, labels, classes, (0..m).collect(), Vec::new())
    }

    /// Joins a train-only and a test-only dataset with matching image shapes.
    pub fn from_parts(train: &Dataset, test: &Dataset) -> Result<Self> {
        if train.image_shape() != test.image_shape() {
            return Err(dim_err!(
                "train images {:?} and test images {:?} differ in shape",
                train.image_shape(),
                test.image_shape()
            ));
        }
        let classes = train.classes.max(test.classes);
        let (a, b) = (train.len(), test.len());
        let mut data = train.inputs.data().to_vec();
        data.extend_from_slice(test.inputs.data());
        let mut shape = train.inputs.shape().to_vec();
        shape[0] = a + b;
        let mut labels = train.labels.clone();
        labels.extend_from_slice(&test.labels);
        Self::new(Tensor::new(&shape, data)?, labels, classes, (0..a).collect(), (a..a + b).collect())
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Samples per class over the whole dataset.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    /// Indices of `which` whose label is `class`, in index order.
    pub fn indices_of(&self, which: Split, class: usize) -> Vec<usize> {
        self.split(which)
            .iter()
            .copied()
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    /// Images and labels of the given samples.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Per-channel statistics of a train split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel statistics of the train split (population standard deviation).
pub fn channel_stats(ds: &Dataset) -> Result<ChannelStats> {
    let [c, h, w] = ds.image_shape();
    let plane = h * w;
    let count = (ds.train.len() * plane) as f64;
    if count == 0.0 {
        return Err(Error::Data("cannot compute statistics of an empty train split".into()));
    }
    let data = ds.inputs.data();
    let mut mean = vec![0.0; c];
    for &i in &ds.train {
        for (ch, m) in mean.iter_mut().enumerate() {
            let off = (i * c + ch) * plane;
            *m += data[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for &i in &ds.train {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            var[ch] += data[off..off + plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let std = var.iter().map(|v| (v / count).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// Channels whose standard deviation falls below this, relative to
/// `1 + |mean|`, count as constant. Summation roundoff keeps a constant
/// channel's computed deviation slightly above zero.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Standardizes every sample with the train split's per-channel mean and
/// standard deviation.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, ChannelStats)> {
    let stats = channel_stats(ds)?;
    let degenerate = |ch: usize| !(stats.std[ch] > DEGENERATE_STD * (1.0 + stats.mean[ch].abs()));
    if let Some(ch) = (0..stats.std.len()).find(|&ch| degenerate(ch)) {
        return Err(Error::Data(format!("channel {ch} has zero standard deviation on the train split")));
    }
    let [c, h, w] = ds.image_shape();
    let plane = h * w;
    let mut out = ds.clone();
    for (k, v) in out.inputs.data_mut().iter_mut().enumerate() {
        let ch = (k / plane) % c;
        *v = (*v - stats.mean[ch]) / stats.std[ch];
    }
    Ok((out, stats))
}
