//! Images available as stimuli.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use anytime_core::data::{synthetic_images, to_grayscale, ImageRecord};

use crate::error::{Result, ServiceError};

/// Grayscale images tagged with their index in the source set.
#[derive(Clone, Debug, Default)]
pub struct ImagePool {
    ids: Vec<usize>,
    images: Vec<ImageRecord>,
}

impl ImagePool {
    /// Draws `size` images without replacement from `source` (e.g. the test
    /// split) and converts them to grayscale.
    pub fn sample_from(source: &[ImageRecord], size: usize, seed: u64) -> Result<Self> {
        if size == 0 || size > source.len() {
            return Err(ServiceError::Config(format!(
                "pool size {size} must lie in 1..={}",
                source.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = sample(&mut rng, source.len(), size).into_vec();
        ids.sort_unstable();
        let images = ids.iter().map(|&i| to_grayscale(&source[i])).collect();
        Ok(ImagePool { ids, images })
    }

    pub fn synthetic(size: usize, seed: u64) -> Self {
        ImagePool {
            ids: (0..size).collect(),
            images: synthetic_images(size, seed),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_id(&self, slot: usize) -> usize {
        self.ids[slot]
    }

    pub fn label(&self, slot: usize) -> u8 {
        self.images[slot].label
    }

    pub fn by_id(&self, image_id: usize) -> Option<&ImageRecord> {
        let slot = self.ids.binary_search(&image_id).ok()?;
        Some(&self.images[slot])
    }
}
