//! CIFAR-10 ingestion, grayscale conversion, Gaussian pixel noise,
//! augmentation, normalization and stimulus rendering.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = 1 + 3 * IMAGE_PIXELS;
pub const NUM_CLASSES: usize = 10;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// A 32x32 image, channel-planar, values in `[0, 1]` unless noise was added.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub label: u8,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageRecord {
    pub fn gray(label: u8, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), IMAGE_PIXELS);
        ImageRecord {
            label,
            channels: 1,
            pixels,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Cifar10 {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Parses one binary batch file: 3073-byte records, label then R, G, B planes.
pub fn read_batch_file(path: &Path) -> Result<Vec<ImageRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes).map_err(|reason| Error::corrupt(path, reason))
}

fn decode_records(bytes: &[u8]) -> std::result::Result<Vec<ImageRecord>, String> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        ));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if usize::from(label) >= NUM_CLASSES {
                return Err(format!("record {i} has label byte {label}"));
            }
            Ok(ImageRecord {
                label,
                channels: 3,
                pixels: rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect(),
            })
        })
        .collect()
}

/// Inverse of [`read_batch_file`] for RGB records; values are rounded to bytes.
pub fn encode_records(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        if r.channels != 3 || r.pixels.len() != 3 * IMAGE_PIXELS {
            return Err(Error::Input("only 3-channel 32x32 records can be encoded".into()));
        }
        out.push(r.label);
        out.extend(r.pixels.iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

/// Loads the standard binary distribution from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let mut train = Vec::new();
    for f in TRAIN_FILES {
        train.extend(read_batch_file(&dir.join(f))?);
    }
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    Ok(Cifar10 { train, test })
}

/// Files [`load_cifar10`] expects in its directory.
pub fn expected_files() -> Vec<&'static str> {
    TRAIN_FILES.iter().copied().chain([TEST_FILE]).collect()
}

pub fn class_counts(records: &[ImageRecord]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        counts[usize::from(r.label)] += 1;
    }
    counts
}

/// BT.601 luma. Single-channel records pass through unchanged.
pub fn to_grayscale(record: &ImageRecord) -> ImageRecord {
    if record.channels == 1 {
        return record.clone();
    }
    let n = record.pixels.len() / record.channels;
    let (r, rest) = record.pixels.split_at(n);
    let (g, b) = rest.split_at(n);
    let pixels = (0..n)
        .map(|i| (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).clamp(0.0, 1.0))
        .collect();
    ImageRecord {
        label: record.label,
        channels: 1,
        pixels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sd: f32,
    pub seed: u64,
}

/// Adds zero-mean Gaussian noise, one sample per pixel location shared by
/// all channels. Values are not clipped.
pub fn add_noise(image: &ImageRecord, spec: &NoiseSpec) -> Result<ImageRecord> {
    if !(spec.sd >= 0.0) || !spec.sd.is_finite() {
        return Err(Error::Input(format!("noise sd must be finite and >= 0, got {}", spec.sd)));
    }
    if spec.sd == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0f32, spec.sd).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = image.pixels.len() / image.channels;
    let noise: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let mut out = image.clone();
    for plane in out.pixels.chunks_exact_mut(n) {
        plane.iter_mut().zip(&noise).for_each(|(p, z)| *p += z);
    }
    Ok(out)
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer), so every
/// batch / image / trial gets an independent, reproducible seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainNoisePolicy {
    /// Chance that a batch receives noise at all.
    pub apply_probability: f64,
    /// Noise SDs drawn uniformly when noise is applied.
    pub sd_grid: Vec<f32>,
}

impl Default for TrainNoisePolicy {
    /// 0.00..=0.14 in steps of 0.02, plus the 0.15 endpoint.
    fn default() -> Self {
        let mut sd_grid: Vec<f32> = (0..8).map(|i| i as f32 * 0.02).collect();
        sd_grid.push(0.15);
        TrainNoisePolicy {
            apply_probability: 0.5,
            sd_grid,
        }
    }
}

impl TrainNoisePolicy {
    pub fn none() -> Self {
        TrainNoisePolicy {
            apply_probability: 0.0,
            sd_grid: vec![0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config("noise apply_probability must lie in [0, 1]".into()));
        }
        if self.sd_grid.is_empty() || self.sd_grid.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("noise sd_grid must be non-empty and >= 0".into()));
        }
        Ok(())
    }

    /// The per-batch decision: `Some(sd)` if noise is applied.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Option<f32> {
        if rng.random_bool(self.apply_probability) {
            Some(self.sd_grid[rng.random_range(0..self.sd_grid.len())])
        } else {
            None
        }
    }
}

/// Global mean and SD of the grayscale training pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }

    pub fn from_records(records: &[ImageRecord]) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
        for r in records {
            for &p in &r.pixels {
                let p = f64::from(p);
                sum += p;
                sq += p * p;
            }
            n += r.pixels.len();
        }
        if n < 2 {
            return Err(Error::Input("normalization needs at least two pixels".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        if var <= 0.0 {
            return Err(Error::Input("training pixels have zero variance".into()));
        }
        Ok(Normalization {
            mean: mean as f32,
            std: var.sqrt() as f32,
        })
    }

    pub fn apply(&self, v: f32) -> f32 {
        (v - self.mean) / self.std
    }
}

fn flip_horizontal(pixels: &mut [f32]) {
    for row in pixels.chunks_exact_mut(IMAGE_SIDE) {
        row.reverse();
    }
}

/// One training batch ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Noise SD applied to this batch, if the coin came up.
    pub noise_sd: Option<f32>,
}

/// Builds tensors from grayscale records, normalizing each pixel.
pub fn to_tensor(records: &[&ImageRecord], norm: &Normalization) -> Result<Tensor> {
    let channels = records
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?
        .channels;
    let mut data = Vec::with_capacity(records.len() * channels * IMAGE_PIXELS);
    for r in records {
        if r.channels != channels || r.pixels.len() != channels * IMAGE_PIXELS {
            return Err(Error::Input("records in a batch must share one 32x32 layout".into()));
        }
        data.extend(r.pixels.iter().map(|&v| norm.apply(v)));
    }
    Tensor::new(vec![records.len(), channels, IMAGE_SIDE, IMAGE_SIDE], data)
}

/// Shuffled training batches for one epoch. Flips each image with
/// probability 0.5, tosses the noise coin once per batch, then normalizes.
/// Every random choice derives from `epoch_seed`.
pub fn train_batch_pipeline<'a>(
    records: &'a [ImageRecord],
    policy: &'a TrainNoisePolicy,
    norm: Normalization,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    policy.validate()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().enumerate().map(move |(b, idx)| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, b as u64));
        let noise_sd = policy.draw(&mut rng);
        let noise_seed: u64 = rng.random();
        let mut images = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let mut img = records[i].clone();
            if rng.random_bool(0.5) {
                for plane in img.pixels.chunks_exact_mut(IMAGE_PIXELS) {
                    flip_horizontal(plane);
                }
            }
            if let Some(sd) = noise_sd {
                img = add_noise(
                    &img,
                    &NoiseSpec {
                        sd,
                        seed: derive_seed(noise_seed, j as u64),
                    },
                )?;
            }
            images.push(img);
        }
        let refs: Vec<&ImageRecord> = images.iter().collect();
        Ok(Batch {
            images: to_tensor(&refs, &norm)?,
            labels: idx.iter().map(|&i| usize::from(records[i].label)).collect(),
            noise_sd,
        })
    }))
}

/// Evaluation tensor: no augmentation; noise (if any) seeded per image index
/// so repeated evaluations and every exit see the same noisy pixels.
pub fn eval_tensor(
    records: &[ImageRecord],
    indices: std::ops::Range<usize>,
    norm: &Normalization,
    sd: f32,
    seed: u64,
) -> Result<Tensor> {
    let images = indices
        .map(|i| {
            add_noise(
                &records[i],
                &NoiseSpec {
                    sd,
                    seed: derive_seed(seed, i as u64),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageRecord> = images.iter().collect();
    to_tensor(&refs, norm)
}

fn to_byte(v: f32) -> u8 {
    // half-up rounding of the clipped value
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Display pixels: noise at native resolution, clip, round to bytes,
/// nearest-neighbour upscale to `size` x `size`.
pub fn stimulus_pixels(image: &ImageRecord, spec: &NoiseSpec, size: usize) -> Result<Vec<u8>> {
    if image.channels != 1 || image.pixels.len() != IMAGE_PIXELS {
        return Err(Error::Input("stimuli are rendered from 32x32 grayscale images".into()));
    }
    if size == 0 {
        return Err(Error::Input("stimulus size must be >= 1".into()));
    }
    let noisy = add_noise(image, spec)?;
    let bytes: Vec<u8> = noisy.pixels.iter().map(|&v| to_byte(v)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = y * IMAGE_SIDE / size;
        for x in 0..size {
            out.push(bytes[sy * IMAGE_SIDE + x * IMAGE_SIDE / size]);
        }
    }
    Ok(out)
}

/// 8-bit grayscale PNG of [`stimulus_pixels`].
pub fn render_stimulus(image: &ImageRecord, spec: &NoiseSpec, size: usize) -> Result<Vec<u8>> {
    let pixels = stimulus_pixels(image, spec, size)?;
    let mut png_bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut png_bytes, size as u32, size as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Encoding(e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Encoding(e.to_string()))?;
    }
    Ok(png_bytes)
}

/// Learnable stand-in images for when the real dataset is absent: each class
/// is a horizontal or vertical grating (both survive a left-right flip) at
/// one of five frequencies, with random phase, contrast and pixel jitter.
/// Grayscale, balanced labels.
pub fn synthetic_images(count: usize, seed: u64) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = (i % NUM_CLASSES) as u8;
            let angle = f32::from(label % 2) * std::f32::consts::FRAC_PI_2;
            let freq = 0.2 + 0.15 * f32::from(label / 2);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let contrast: f32 = rng.random_range(0.25..0.45);
            let (s, co) = angle.sin_cos();
            let pixels = (0..IMAGE_PIXELS)
                .map(|p| {
                    let (y, x) = ((p / IMAGE_SIDE) as f32, (p % IMAGE_SIDE) as f32);
                    let v = 0.5 + contrast * (freq * (x * co + y * s) + phase).sin();
                    (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)
                })
                .collect();
            ImageRecord::gray(label, pixels)
        })
        .collect()
}
