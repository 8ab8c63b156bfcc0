//! Synthetic class-incremental streams and the exemplar-free access tracker.
//!
//! Training data is reachable only through [`Task::train_data`], which
//! records the read against an [`AccessTracker`]. Reads of a completed
//! task's training set count as violations; a clean run finishes with zero.
//! Test data is open: evaluation and diagnostics are exempt by design.

use crate::error::Result;
use crate::linalg::Matrix;
use crate::rng::{derive_seed, gaussian_matrix, seeded_rng, shuffle, unit_vector};

use super::ExperimentConfig;

/// Seed-stream tag for data generation (keeps it independent of model init
/// and batch order).
const DATA_STREAM: u64 = 0xDA7A;

/// One task of a class-incremental stream. Class ids are global and
/// contiguous: task t owns `t*classes_per_task ..` the next block.
#[derive(Debug, Clone)]
pub struct Task {
    id: usize,
    class_ids: Vec<usize>,
    train_x: Matrix,
    train_labels: Vec<usize>,
    test_x: Matrix,
    test_labels: Vec<usize>,
}

impl Task {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Training samples, routed through the tracker. This is the only way
    /// to reach them; every call is recorded.
    pub fn train_data(&self, tracker: &mut AccessTracker) -> (&Matrix, &[usize]) {
        tracker.record_train_read(self.id);
        (&self.train_x, &self.train_labels)
    }

    pub fn n_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_x(&self) -> &Matrix {
        &self.test_x
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.test_labels
    }
}

/// Records which tasks are finished and counts training-set reads that
/// break the exemplar-free contract.
#[derive(Debug, Clone)]
pub struct AccessTracker {
    completed: Vec<bool>,
    train_reads: Vec<u64>,
    violations: u64,
}

impl AccessTracker {
    pub fn new(n_tasks: usize) -> Self {
        AccessTracker {
            completed: vec![false; n_tasks],
            train_reads: vec![0; n_tasks],
            violations: 0,
        }
    }

    fn record_train_read(&mut self, task: usize) {
        if let Some(count) = self.train_reads.get_mut(task) {
            *count += 1;
        }
        if self.completed.get(task).copied().unwrap_or(false) {
            self.violations += 1;
        }
    }

    pub fn mark_completed(&mut self, task: usize) {
        if let Some(slot) = self.completed.get_mut(task) {
            *slot = true;
        }
    }

    pub fn is_completed(&self, task: usize) -> bool {
        self.completed.get(task).copied().unwrap_or(false)
    }

    /// Training-path reads of completed tasks. Zero on a clean run.
    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn train_reads(&self, task: usize) -> u64 {
        self.train_reads.get(task).copied().unwrap_or(0)
    }
}

/// Builds the deterministic synthetic stream: each class is a Gaussian
/// cluster with mean `separation * u_c` for a seeded unit vector `u_c`, plus
/// isotropic noise; each class splits 80/20 into train/test.
pub fn synth_stream(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    cfg.validate()?;
    let data_seed = derive_seed(cfg.seed, DATA_STREAM);
    let n_train_per_class = (cfg.samples_per_class * 4) / 5;
    let n_test_per_class = cfg.samples_per_class - n_train_per_class;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let class_ids: Vec<usize> = (0..cfg.classes_per_task)
            .map(|j| t * cfg.classes_per_task + j)
            .collect();
        let n_train = n_train_per_class * cfg.classes_per_task;
        let n_test = n_test_per_class * cfg.classes_per_task;
        let mut train_x = Matrix::zeros(n_train, cfg.dim);
        let mut train_labels = Vec::with_capacity(n_train);
        let mut test_x = Matrix::zeros(n_test, cfg.dim);
        let mut test_labels = Vec::with_capacity(n_test);
        for (slot, &class) in class_ids.iter().enumerate() {
            let mut rng = seeded_rng(derive_seed(data_seed, class as u64));
            let mean: Vec<f64> = unit_vector(&mut rng, cfg.dim)
                .into_iter()
                .map(|v| v * cfg.separation)
                .collect();
            let noise = gaussian_matrix(&mut rng, cfg.samples_per_class, cfg.dim, cfg.noise);
            for s in 0..cfg.samples_per_class {
                let (dest, row, label_sink) = if s < n_train_per_class {
                    (&mut train_x, slot * n_train_per_class + s, &mut train_labels)
                } else {
                    (
                        &mut test_x,
                        slot * n_test_per_class + (s - n_train_per_class),
                        &mut test_labels,
                    )
                };
                for j in 0..cfg.dim {
                    dest.set(row, j, mean[j] + noise.get(s, j));
                }
                label_sink.push(class);
            }
        }
        // Interleave classes within the task so early batches are mixed.
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut order_rng = seeded_rng(derive_seed(data_seed, 0x0D0E + t as u64));
        shuffle(&mut order_rng, &mut order);
        let train_x = train_x.select_rows(&order)?;
        let train_labels: Vec<usize> = order.iter().map(|&i| train_labels[i]).collect();
        tasks.push(Task {
            id: t,
            class_ids,
            train_x,
            train_labels,
            test_x,
            test_labels,
        });
    }
    Ok(tasks)
}
