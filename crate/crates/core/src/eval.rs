//! Weighted k-nearest-neighbor evaluation of frozen embeddings.
//!
//! Each of the `k` most similar training embeddings votes for its label with
//! weight `exp(similarity / τ)`; the class with the largest total wins.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{normalized_matrix, Dataset, Normalizer};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::memory_bank::check_unit;
use crate::numeric::{cosine_similarity, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub neighbors: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { neighbors: 200, temperature: 0.1 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 || self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "knn needs neighbors >= 1 and temperature > 0, got {} / {}",
                self.neighbors, self.temperature
            )));
        }
        Ok(())
    }

    /// Same config with `neighbors` capped at `n`.
    pub fn clamped_to(self, n: usize) -> Self {
        Self { neighbors: self.neighbors.min(n).max(1), ..self }
    }
}

/// Unit-norm embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} embeddings for {} labels", embeddings.rows(), labels.len())));
        }
        for (i, r) in embeddings.iter_rows().enumerate() {
            check_unit(i, r)?;
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn class_count(&self) -> usize {
        self.labels.iter().map(|l| l + 1).max().unwrap_or(0)
    }
}

/// Embeds every item of `dataset` with the given encoder, no augmentation.
pub fn embed_dataset(params: &EncoderParams, dataset: &Dataset, normalizer: &Normalizer) -> Result<EmbeddingIndex> {
    let d = params.spec().embedding_dim();
    if dataset.is_empty() {
        return EmbeddingIndex::new(Matrix::zeros(0, d), Vec::new());
    }
    if dataset.feature_len() != params.spec().input_dim() {
        return Err(Error::DimensionMismatch { expected: params.spec().input_dim(), got: dataset.feature_len() });
    }
    let mut out = Vec::with_capacity(dataset.len() * d);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(256) {
        let x = normalized_matrix(dataset, chunk, normalizer)?;
        out.extend_from_slice(params.embed(&x)?.as_slice());
    }
    EmbeddingIndex::new(Matrix::from_vec(dataset.len(), d, out)?, dataset.labels())
}

/// Per-class vote `Σ exp(sim/τ)` over the top `k` rows by cosine similarity
/// (ties by lower row index).
pub fn knn_scores(index: &EmbeddingIndex, query: &[f64], cfg: &KnnConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if cfg.neighbors > index.len() {
        return Err(Error::KTooLarge { k: cfg.neighbors, n: index.len() });
    }
    let sims: Vec<f64> = index.embeddings.iter_rows().map(|r| cosine_similarity(query, r)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let by_sim_desc = |a: &usize, b: &usize| sims[*b].partial_cmp(&sims[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
    let k = cfg.neighbors;
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_sim_desc);
        order.truncate(k);
    }
    // accumulate in a fixed order so scores do not depend on the selection algorithm
    order.sort_unstable_by(by_sim_desc);
    let mut scores = vec![0.0; index.class_count()];
    for i in order {
        scores[index.labels[i]] += (sims[i] / cfg.temperature).exp();
    }
    Ok(scores)
}

/// Class with the largest similarity-weighted vote among the top `k` rows.
pub fn knn_predict(index: &EmbeddingIndex, query: &[f64], cfg: &KnnConfig) -> Result<usize> {
    let scores = knn_scores(index, query, cfg)?;
    let mut best = 0;
    for (c, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Fraction of `test` rows whose prediction matches their label.
pub fn knn_top1(train: &EmbeddingIndex, test: &EmbeddingIndex, cfg: &KnnConfig) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut correct = 0usize;
    for (row, &label) in test.embeddings.iter_rows().zip(&test.labels) {
        if knn_predict(train, row, cfg)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
