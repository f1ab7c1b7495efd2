//! CIFAR binary records, normalisation and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const CIFAR10_CLASSES: usize = 10;
pub const PAD: usize = 4;

/// One `label, R plane, G plane, B plane` record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Split `bytes` into records, rejecting a ragged tail or a label
/// `>= classes`.
pub fn parse_records(bytes: &[u8], classes: usize) -> Result<Vec<CifarRecord>> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Dataset(format!(
            "truncated file: {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, r)| {
            if r[0] as usize >= classes {
                return Err(Error::Dataset(format!(
                    "record {i}: label {} >= {classes}",
                    r[0]
                )));
            }
            Ok(CifarRecord {
                label: r[0],
                pixels: r[1..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_records(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// Labelled 32x32 RGB images kept as raw bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn from_records(records: &[CifarRecord], classes: usize) -> Result<Self> {
        let mut d = Dataset {
            pixels: Vec::with_capacity(records.len() * PIXELS),
            labels: Vec::with_capacity(records.len()),
            classes,
        };
        for (i, r) in records.iter().enumerate() {
            if r.pixels.len() != PIXELS {
                return Err(Error::Dataset(format!("record {i} has {} pixels", r.pixels.len())));
            }
            if r.label as usize >= classes {
                return Err(Error::Dataset(format!("record {i}: label {} >= {classes}", r.label)));
            }
            d.pixels.extend_from_slice(&r.pixels);
            d.labels.push(r.label as usize);
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    /// Image `i` as `(3, 32, 32)` floats in `[0, 1]`.
    pub fn image01(&self, i: usize) -> Vec<f32> {
        self.raw(i).iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Image `i`, normalised, as a `(1, 3, 32, 32)` tensor.
    pub fn image(&self, i: usize, norm: &Normalization) -> Tensor<f32> {
        let mut v = self.image01(i);
        norm.apply(&mut v);
        Tensor::from_vec(Shape::new(1, 3, SIDE, SIDE), v).expect("image size")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut d = Dataset {
            pixels: Vec::with_capacity(indices.len() * PIXELS),
            labels: Vec::with_capacity(indices.len()),
            classes: self.classes,
        };
        for &i in indices {
            d.pixels.extend_from_slice(self.raw(i));
            d.labels.push(self.labels[i]);
        }
        d
    }

    pub fn concat(mut self, other: &Dataset) -> Dataset {
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
        self
    }

    /// Seeded shuffle, then the first `train` images and the next `val`.
    pub fn split(&self, train: usize, val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if train + val > self.len() {
            return Err(Error::Dataset(format!(
                "split {train}/{val} needs {} images, have {}",
                train + val,
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&order[..train]), self.subset(&order[train..train + val])))
    }
}

/// Read one binary batch file.
pub fn load_cifar_file(path: &Path, classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    Dataset::from_records(&parse_records(&bytes, classes)?, classes)
}

fn cifar_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// The 50k training images: a single file, or a directory holding
/// `data_batch_1.bin` .. `data_batch_5.bin`.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        return load_cifar_file(path, CIFAR10_CLASSES);
    }
    let dir = cifar_dir(path);
    let mut out = Dataset {
        classes: CIFAR10_CLASSES,
        ..Dataset::default()
    };
    for b in 1..=5 {
        let f = dir.join(format!("data_batch_{b}.bin"));
        if !f.is_file() {
            return Err(Error::Dataset(format!("missing {}", f.display())));
        }
        out = out.concat(&load_cifar_file(&f, CIFAR10_CLASSES)?);
    }
    Ok(out)
}

/// `test_batch.bin` from a CIFAR-10 directory.
pub fn load_cifar10_test(path: &Path) -> Result<Dataset> {
    let f = cifar_dir(path).join("test_batch.bin");
    if !f.is_file() {
        return Err(Error::Dataset(format!("missing {}", f.display())));
    }
    load_cifar_file(&f, CIFAR10_CLASSES)
}

/// Per-channel mean and standard deviation of `[0, 1]` pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Population statistics over every pixel of `data`.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dataset("cannot normalise an empty dataset".into()));
        }
        let plane = SIDE * SIDE;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for i in 0..data.len() {
            for (c, chunk) in data.raw(i).chunks_exact(plane).enumerate() {
                for &p in chunk {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (data.len() * plane) as f64;
        let mut norm = Normalization::identity();
        for c in 0..3 {
            let m = sum[c] / n;
            norm.mean[c] = m;
            norm.std[c] = (sq[c] / n - m * m).max(0.0).sqrt().max(1e-8);
        }
        Ok(norm)
    }

    /// In place on a `(3, 32, 32)` image.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / 3;
        for (c, chunk) in image.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[c] as f32, self.std[c] as f32);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Pad by 4 with zeros, take the 32x32 window at `(dy, dx)` of the padded
/// image (`0..=8` each) and mirror horizontally if `flip`.
pub fn augment_with(image: &[f32], dy: usize, dx: usize, flip: bool) -> Result<Vec<f32>> {
    if image.len() != PIXELS {
        return Err(Error::shape("augment", format!("expected {PIXELS} values, got {}", image.len())));
    }
    if dy > 2 * PAD || dx > 2 * PAD {
        return Err(Error::invalid("augment", format!("crop offset ({dy}, {dx}) outside 0..=8")));
    }
    let mut out = vec![0f32; PIXELS];
    for c in 0..3 {
        for y in 0..SIDE {
            let sy = (y + dy) as isize - PAD as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let xx = if flip { SIDE - 1 - x } else { x };
                let sx = (xx + dx) as isize - PAD as isize;
                if !(0..SIDE as isize).contains(&sx) {
                    continue;
                }
                out[(c * SIDE + y) * SIDE + x] = image[(c * SIDE + sy as usize) * SIDE + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Random crop of the 4-padded image and a coin-flip mirror.
pub fn augment<R: Rng + ?Sized>(image: &[f32], rng: &mut R) -> Result<Vec<f32>> {
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(image, dy, dx, flip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> CifarRecord {
        CifarRecord {
            label,
            pixels: (0..PIXELS).map(fill).collect(),
        }
    }

    #[test]
    fn records_roundtrip_and_errors() {
        let recs = vec![record(3, |i| (i % 251) as u8), record(9, |_| 7)];
        let bytes = encode_records(&recs);
        assert_eq!(bytes.len(), 2 * RECORD_BYTES);
        assert_eq!(parse_records(&bytes, 10).unwrap(), recs);
        assert!(parse_records(&bytes[..RECORD_BYTES + 5], 10).is_err());
        assert!(parse_records(&bytes, 9).is_err());
    }

    #[test]
    fn zero_image_normalises_to_minus_mean_over_std() {
        let d = Dataset::from_records(&[record(0, |_| 0)], 10).unwrap();
        let norm = Normalization {
            mean: [0.5, 0.4, 0.3],
            std: [0.2, 0.25, 0.5],
        };
        let img = d.image(0, &norm);
        for c in 0..3 {
            let want = (-norm.mean[c] / norm.std[c]) as f32;
            assert!((img.at([0, c, 5, 7]) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_crops_and_flips() {
        let img: Vec<f32> = (0..PIXELS).map(|i| 1.0 + i as f32).collect();
        assert_eq!(augment_with(&img, 4, 4, false).unwrap(), img);
        let tl = augment_with(&img, 0, 0, false).unwrap();
        for c in 0..3 {
            for k in 0..4 {
                for j in 0..SIDE {
                    assert_eq!(tl[(c * SIDE + k) * SIDE + j], 0.0);
                    assert_eq!(tl[(c * SIDE + j) * SIDE + k], 0.0);
                }
            }
            assert_eq!(tl[(c * SIDE + 4) * SIDE + 4], img[c * SIDE * SIDE]);
        }
        let f = augment_with(&img, 4, 4, true).unwrap();
        assert_eq!(f[0], img[SIDE - 1]);
        assert!(augment_with(&img[1..], 4, 4, false).is_err());
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| augment(&img, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let recs: Vec<_> = (0..20).map(|i| record((i % 10) as u8, move |_| i as u8)).collect();
        let d = Dataset::from_records(&recs, 10).unwrap();
        let (a, b) = d.split(15, 5, 3).unwrap();
        let mut ids: Vec<u8> = (0..15).map(|i| a.raw(i)[0]).chain((0..5).map(|i| b.raw(i)[0])).collect();
        ids.sort();
        assert_eq!(ids, (0..20).collect::<Vec<u8>>());
        assert_eq!(d.split(15, 5, 3).unwrap().0, a);
        assert!(d.split(18, 5, 3).is_err());
    }
}
