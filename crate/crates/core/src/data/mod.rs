//! Datasets, non-IID client partitioning, synthetic tasks and episode
//! sampling.

mod episode;
mod idx;
mod partition;
mod synth;

pub use episode::{sample_episode, EpisodeIndices};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use partition::{dirichlet_partition, label_entropy, label_skew_partition, PartitionPlan, Scheme};
pub use synth::{bayes_accuracy_two_class, render_point, synth_tasks, synth_tasks_detailed, SynthTask, GRID};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no partition with every shard >= {min_size} samples after {attempts} attempts; try a smaller min_size")]
    RetriesExhausted { attempts: usize, min_size: usize },
    #[error("tau {tau} exceeds the {n_classes} available classes")]
    TauTooLarge { tau: usize, n_classes: usize },
    #[error("shard of {available} samples is too small for an episode of {needed}")]
    ShardTooSmall { needed: usize, available: usize },
    #[error("{file}: {reason} (offset {offset})")]
    Idx {
        file: String,
        offset: usize,
        reason: String,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, {n_classes})")]
    Label {
        index: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Inputs and labels for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples `[N, C, H, W]` with labels and a train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self, DataError> {
        if inputs.rank() != 4 || inputs.shape()[0] != labels.len() {
            return Err(DataError::InvalidArgument(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(DataError::Label {
                index,
                label,
                n_classes,
            });
        }
        let mut seen = vec![false; labels.len()];
        for &i in train.iter().chain(&test) {
            if i >= labels.len() || std::mem::replace(&mut seen[i], true) {
                return Err(DataError::InvalidArgument(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn test_batch(&self) -> Batch {
        self.batch(&self.test)
    }

    /// Stacks a training set and a test set into one dataset.
    pub fn join(train: Dataset, test: Dataset) -> Result<Self, DataError> {
        if train.sample_shape() != test.sample_shape() {
            return Err(DataError::InvalidArgument(format!(
                "train samples {:?} and test samples {:?} differ in shape",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        let n_train = train.len();
        let mut shape = train.inputs.shape().to_vec();
        shape[0] += test.len();
        let mut data = train.inputs.into_data();
        data.extend_from_slice(test.inputs.data());
        let mut labels = train.labels;
        labels.extend_from_slice(&test.labels);
        let n_classes = train.n_classes.max(test.n_classes);
        let inputs = Tensor::new(shape, data).map_err(|e| DataError::InvalidArgument(e.to_string()))?;
        Dataset::new(
            inputs,
            labels,
            n_classes,
            (0..n_train).collect(),
            (n_train..n_train + test.len()).collect(),
        )
    }

    /// Keeps at most `max_train` training and `max_test` test indices.
    pub fn truncate(mut self, max_train: Option<usize>, max_test: Option<usize>) -> Self {
        if let Some(n) = max_train {
            self.train.truncate(n);
        }
        if let Some(n) = max_test {
            self.test.truncate(n);
        }
        self
    }

    /// Label counts over `indices`.
    pub fn histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}
