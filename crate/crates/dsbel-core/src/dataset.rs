//! Labeled image datasets: directory loading and the synthetic desk-scale
//! corpus that stands in for a real benign/malware image collection.

use crate::error::{Error, Result};
use crate::image::{read_pgm, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Benign,
    Malware,
}

impl Label {
    /// Class index used by the softmax head; malware is the positive class.
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malware => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub image: GrayImage,
    pub label: Label,
    pub source: String,
}

#[derive(Clone, Debug, Default)]
pub struct LabeledDataset {
    pub items: Vec<Item>,
}

impl LabeledDataset {
    pub fn class_counts(&self) -> (usize, usize) {
        let benign = self.items.iter().filter(|i| i.label == Label::Benign).count();
        (benign, self.items.len() - benign)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Loads `root/benign/*.pgm` and `root/malware/*.pgm` in lexicographic
/// order. Both subdirectories must exist; an empty class only warns.
pub fn load_dataset(root: &Path) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    for (sub, label) in [("benign", Label::Benign), ("malware", Label::Malware)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing subdirectory {}", dir.display())));
        }
        let mut paths: Vec<_> = std::fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            eprintln!("warning: {} contains no files", dir.display());
        }
        for path in paths {
            let image = read_pgm(&path)?;
            items.push(Item {
                image,
                label,
                source: path.display().to_string(),
            });
        }
    }
    Ok(LabeledDataset { items })
}

/// Deterministic synthetic corpus: benign images carry horizontal byte
/// bands, malware images vertical bands, both with per-pixel noise and a
/// random band layout so no single pixel separates the classes.
pub fn generate_synthetic_corpus(n_per_class: usize, side: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(2 * n_per_class);
    for label in [Label::Benign, Label::Malware] {
        for i in 0..n_per_class {
            let img = banded_image(side, label == Label::Malware, &mut rng);
            items.push(Item {
                image: img,
                label,
                source: format!("synthetic/{:?}/{}", label, i),
            });
        }
    }
    LabeledDataset { items }
}

fn banded_image(side: usize, vertical: bool, rng: &mut ChaCha8Rng) -> GrayImage {
    // random band levels with alternating contrast, thickness 4..=8
    let mut levels = Vec::with_capacity(side);
    let mut hi = rng.gen_bool(0.5);
    while levels.len() < side {
        let thick = rng.gen_range(4..=8usize);
        let level: u8 = if hi {
            rng.gen_range(160..=230)
        } else {
            rng.gen_range(20..=90)
        };
        for _ in 0..thick.min(side - levels.len()) {
            levels.push(level);
        }
        hi = !hi;
    }
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let base = levels[if vertical { x } else { y }] as i32;
            let noise = rng.gen_range(-20..=20i32);
            pixels.push((base + noise).clamp(0, 255) as u8);
        }
    }
    GrayImage::new(side, side, pixels).unwrap()
}

/// Surrogate pretraining task for the auxiliary stem: diagonal stripes vs
/// checkerboard textures at the same input geometry.
pub fn generate_surrogate_corpus(n_per_class: usize, side: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(2 * n_per_class);
    for label in [Label::Benign, Label::Malware] {
        for i in 0..n_per_class {
            let period = rng.gen_range(6..=12usize);
            let phase = rng.gen_range(0..period);
            let mut pixels = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let on = match label {
                        Label::Benign => ((x + y + phase) / period) % 2 == 0,
                        Label::Malware => {
                            ((((x + phase) / period) % 2) ^ (((y + phase) / period) % 2)) == 1
                        }
                    };
                    let base: i32 = if on { 200 } else { 50 };
                    let noise = rng.gen_range(-25..=25i32);
                    pixels.push((base + noise).clamp(0, 255) as u8);
                }
            }
            items.push(Item {
                image: GrayImage::new(side, side, pixels).unwrap(),
                label,
                source: format!("surrogate/{:?}/{}", label, i),
            });
        }
    }
    LabeledDataset { items }
}
