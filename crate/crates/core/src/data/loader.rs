use rand::seq::SliceRandom;

use super::{augment, load_image, AugmentPolicy, DatasetIndex, CLASSES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A labelled mini-batch `[B,3,S,S]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Decoded images held in memory, values in `[0,1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_index(index: &DatasetIndex) -> Result<Self> {
        let images = index
            .samples
            .iter()
            .map(|(p, _)| load_image(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: index.classes.clone(),
            images,
            labels: index.samples.iter().map(|(_, y)| *y).collect(),
        })
    }

    pub fn from_memory(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid("image and label counts differ"));
        }
        Ok(Self {
            classes: CLASSES.iter().map(|s| s.to_string()).collect(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Augmented batches for one epoch. The visiting order is shuffled from
    /// `(seed, epoch)` when requested; each sample's augmentation draws from
    /// its own stream keyed by `(seed, epoch, sample id)`.
    pub fn batches(
        &self,
        epoch: usize,
        batch_size: usize,
        shuffle: bool,
        policy: &AugmentPolicy,
        seed: u64,
    ) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            order.shuffle(&mut rng::substream(seed, "shuffle", epoch as u64));
        }
        let stream = format!("augment/{epoch}");
        order
            .chunks(batch_size)
            .map(|ids| {
                let views = ids
                    .iter()
                    .map(|&i| {
                        let cfg = policy.for_class(self.labels[i]);
                        augment(&self.images[i], cfg, &mut rng::substream(seed, &stream, i as u64))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Batch {
                    x: Tensor::stack(&views)?,
                    y: ids.iter().map(|&i| self.labels[i]).collect(),
                })
            })
            .collect()
    }
}
