#![allow(dead_code)]

use std::path::Path;

use mohn::encoder::EncoderSpec;
use mohn::numeric::{l2_normalize, Matrix};
use mohn::rng::SeededRng;
use mohn::trainer::{DataConfig, TrainConfig};
use rand_distr::{Distribution, StandardNormal};

pub fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize(&v).unwrap()
}

pub fn random_units(rng: &mut SeededRng, rows: usize, dim: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..rows).map(|_| random_unit(rng, dim)).collect();
    Matrix::from_rows(&rows).unwrap()
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Small synthetic run: 4 classes of 20 points in 8 dimensions, 9 steps per epoch.
pub fn small_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        queue_capacity: 32,
        eval_interval: 1,
        output_dir: dir.to_path_buf(),
        encoder: EncoderSpec::new(vec![8, 16, 8], Default::default()),
        knn: mohn::eval::KnnConfig { neighbors: 20, temperature: 0.1 },
        data: DataConfig { classes: 4, per_class: 20, dim: 8, ..DataConfig::default() },
        ..TrainConfig::default()
    }
}

/// The desk-scale toy task: 10 clusters, dim 64, 100 per class, 20 epochs.
pub fn toy_config(dir: &Path, seed: u64) -> TrainConfig {
    TrainConfig { seed, output_dir: dir.to_path_buf(), ..TrainConfig::default() }
}
