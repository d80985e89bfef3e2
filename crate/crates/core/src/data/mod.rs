//! Datasets, ingestion, and the two-view augmentation pipeline.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{
    augment_view, augment_view_traced, two_views, AugmentPolicy, AugmentTrace, Augmenter, Normalizer, VectorAugment,
};
pub use cifar::{load_cifar10, load_cifar100, parse_batch, serialize_batch, CifarFormat};
pub use synthetic::{gen_clusters, read_csv, write_csv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::SeededRng;

/// `height × width × channels` tensor, stored channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidImage(format!("empty shape {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// A `1 × len × 1` image wrapping a feature vector.
    pub fn from_vector(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values.len(), 1, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub split: Split,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(items: Vec<Item>, split: Split, class_count: usize) -> Result<Self> {
        if let Some(first) = items.first() {
            let shape = first.image.shape();
            for it in &items {
                if it.image.shape() != shape {
                    return Err(Error::InvalidShape(format!(
                        "mixed image shapes {:?} and {:?}",
                        shape,
                        it.image.shape()
                    )));
                }
                if it.label >= class_count {
                    return Err(Error::LabelOutOfRange { label: it.label, classes: class_count });
                }
            }
        }
        Ok(Self { items, split, class_count })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Flattened length of one item, or 0 for an empty dataset.
    pub fn feature_len(&self) -> usize {
        self.items.first().map_or(0, |it| it.image.len())
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.items.first().map(|it| it.image.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Stratified split: `round(test_fraction · n_c)` items of each class go
    /// to the test side, chosen by a seeded shuffle within the class.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidShape(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut rng = SeededRng::new(seed);
        let mut is_test = vec![false; self.items.len()];
        for class in 0..self.class_count {
            let members: Vec<usize> =
                self.items.iter().enumerate().filter(|(_, it)| it.label == class).map(|(i, _)| i).collect();
            let n_test = (test_fraction * members.len() as f64).round() as usize;
            let perm = rng.permutation(members.len());
            for &p in perm.iter().take(n_test) {
                is_test[members[p]] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (it, t) in self.items.iter().zip(is_test) {
            if t {
                test.push(it.clone());
            } else {
                train.push(it.clone());
            }
        }
        Ok((
            Dataset { items: train, split: Split::Train, class_count: self.class_count },
            Dataset { items: test, split: Split::Test, class_count: self.class_count },
        ))
    }
}

/// Stacks normalized items into a `len × features` matrix.
pub fn normalized_matrix(dataset: &Dataset, indices: &[usize], normalizer: &Normalizer) -> Result<Matrix> {
    let f = dataset.feature_len();
    let mut data = Vec::with_capacity(indices.len() * f);
    for &i in indices {
        let mut img = dataset.items[i].image.clone();
        normalizer.apply(&mut img)?;
        data.extend_from_slice(img.as_slice());
    }
    Matrix::from_vec(indices.len(), f, data)
}
