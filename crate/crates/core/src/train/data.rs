//! Synthetic positioned-shape images and their binary file format.
//!
//! Each image is a noisy gray background with one small class-colored
//! square at a random position, so the class evidence sits in a handful of
//! patches and most tokens are redundant.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::vit::Image;

pub const DATASET_MAGIC: &[u8; 7] = b"SPOTDS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Side of the class square in pixels.
    pub square: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(samples: usize, seed: u64) -> Self {
        Self {
            image_size: 64,
            channels: 3,
            classes: 4,
            samples,
            noise: 0.1,
            square: 12,
            seed,
        }
    }
}

/// Fill color of class `c`: distinct channel on/off patterns when there are
/// enough channels, otherwise distinct gray levels.
fn class_color(c: usize, classes: usize, channels: usize) -> Vec<f64> {
    if channels >= 3 && classes < 8 {
        let code = c + 1;
        (0..channels)
            .map(|ch| if ch < 3 && (code >> ch) & 1 == 1 { 1.0 } else { 0.0 })
            .collect()
    } else {
        vec![(c + 1) as f64 / (classes + 1) as f64; channels]
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.square == 0 || spec.square > spec.image_size {
        return Err(Error::Config(format!(
            "cannot draw a {}-pixel square for {} classes in a {}-pixel image",
            spec.square, spec.classes, spec.image_size
        )));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (s, ch) = (spec.image_size, spec.channels);
    let samples = (0..spec.samples)
        .map(|i| {
            let label = i % spec.classes;
            let mut pixels: Vec<f64> = (0..s * s * ch)
                .map(|_| (0.5 + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            let y0 = rng.random_range(0..=s - spec.square);
            let x0 = rng.random_range(0..=s - spec.square);
            let color = class_color(label, spec.classes, ch);
            for y in y0..y0 + spec.square {
                for x in x0..x0 + spec.square {
                    let at = (y * s + x) * ch;
                    pixels[at..at + ch].copy_from_slice(&color);
                }
            }
            Sample {
                image: Image {
                    size: s,
                    channels: ch,
                    pixels,
                },
                label,
            }
        })
        .collect();
    Ok(Dataset { samples })
}

pub fn save(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    for s in &data.samples {
        let label = u16::try_from(s.label).map_err(|_| Error::Contract(format!("label {} exceeds u16", s.label)))?;
        w.write_all(&label.to_le_bytes())?;
        for &p in &s.image.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset of `size`×`size`×`channels` images.
pub fn load(path: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if !bytes.starts_with(DATASET_MAGIC) {
        return Err(Error::Load(format!("{}: missing dataset header", path.display())));
    }
    let body = &bytes[DATASET_MAGIC.len()..];
    let n_px = size * size * channels;
    let record = 2 + 8 * n_px;
    if body.len() % record != 0 {
        return Err(Error::Load(format!(
            "{}: {} payload bytes is not a whole number of {record}-byte records",
            path.display(),
            body.len()
        )));
    }
    let samples = body
        .chunks(record)
        .map(|r| Sample {
            label: usize::from(u16::from_le_bytes([r[0], r[1]])),
            image: Image {
                size,
                channels,
                pixels: r[2..]
                    .chunks(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            },
        })
        .collect();
    Ok(Dataset { samples })
}
