//! Datasets: the CIFAR-10 binary format and a synthetic long-range pair
//! task whose discriminative evidence is forced far apart in the image.

use crate::error::{PideError, Result};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::io::Read;
use std::path::Path;

/// In-memory labeled image set, channel-last. Pixels live in f32 to keep
/// large datasets compact; batches are materialized in f64.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub classes: usize,
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(h: usize, w: usize, c: usize, classes: usize) -> Self {
        Dataset { h, w, c, classes, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stride(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn push(&mut self, image: &[f32], label: u8) {
        debug_assert_eq!(image.len(), self.stride());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image(&self, i: usize) -> Tensor {
        let s = self.stride();
        let data: Vec<f64> = self.pixels[i * s..(i + 1) * s].iter().map(|&v| v as f64).collect();
        Tensor::from_vec(&[self.h, self.w, self.c], data).unwrap()
    }

    /// Assembles (B,H,W,C) batch plus labels, optionally flipping selected
    /// samples horizontally.
    pub fn batch(&self, idx: &[usize], flips: Option<&[bool]>) -> (Tensor, Vec<usize>) {
        let s = self.stride();
        let mut data = Vec::with_capacity(idx.len() * s);
        for (pos, &i) in idx.iter().enumerate() {
            let src = &self.pixels[i * s..(i + 1) * s];
            let flip = flips.map_or(false, |f| f[pos]);
            if !flip {
                data.extend(src.iter().map(|&v| v as f64));
            } else {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let col = self.w - 1 - x;
                        let at = (y * self.w + col) * self.c;
                        data.extend(src[at..at + self.c].iter().map(|&v| v as f64));
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[idx.len(), self.h, self.w, self.c], data).unwrap();
        let labels = idx.iter().map(|&i| self.labels[i] as usize).collect();
        (t, labels)
    }

    /// Class histogram.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

// ── CIFAR-10 binary format ──────────────────────────────────────────────

pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_HW: usize = 32;
const CIFAR_PLANE: usize = CIFAR_HW * CIFAR_HW;

/// Reads one CIFAR-10 binary file: records of 1 label byte followed by 3072
/// pixel bytes (channel-planar R,G,B, row-major 32x32). Pixels map to
/// [0,1]; channel-planar source becomes channel-last storage.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(PideError::Dataset(format!(
            "{}: {} bytes is not a whole number of {}-byte records",
            path.display(),
            bytes.len(),
            CIFAR_RECORD_BYTES
        )));
    }
    let mut ds = Dataset::new(CIFAR_HW, CIFAR_HW, 3, 10);
    let mut image = vec![0.0f32; CIFAR_PLANE * 3];
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = record[0];
        if label > 9 {
            return Err(PideError::Dataset(format!("{}: label {} out of range", path.display(), label)));
        }
        let planes = &record[1..];
        for y in 0..CIFAR_HW {
            for x in 0..CIFAR_HW {
                for ch in 0..3 {
                    image[(y * CIFAR_HW + x) * 3 + ch] =
                        planes[ch * CIFAR_PLANE + y * CIFAR_HW + x] as f32 / 255.0;
                }
            }
        }
        ds.push(&image, label);
    }
    Ok(ds)
}

pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the standard directory layout: data_batch_1..5.bin + test_batch.bin.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let mut train = Dataset::new(CIFAR_HW, CIFAR_HW, 3, 10);
    for i in 1..=5 {
        let part = load_cifar10_file(&dir.join(format!("data_batch_{i}.bin")))?;
        train.pixels.extend_from_slice(&part.pixels);
        train.labels.extend_from_slice(&part.labels);
    }
    let test = load_cifar10_file(&dir.join("test_batch.bin"))?;
    Ok(Cifar10 { train, test })
}

/// Per-pixel (per position, per channel) mean image of the training split,
/// subtracted from both splits. Returns the mean image.
pub fn apply_mean_subtraction(train: &mut Dataset, test: &mut Dataset) -> Vec<f32> {
    let s = train.stride();
    let n = train.len().max(1);
    let mut mean = vec![0.0f32; s];
    for img in train.pixels.chunks_exact(s) {
        for (m, &v) in mean.iter_mut().zip(img) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f32;
    }
    for img in train.pixels.chunks_exact_mut(s) {
        for (v, &m) in img.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    for img in test.pixels.chunks_exact_mut(s) {
        for (v, &m) in img.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    mean
}

// ── Synthetic long-range pair task ──────────────────────────────────────

/// Two small markers are stamped far apart; the class says whether they are
/// the same shape. Any decision requires comparing regions separated by at
/// least `min_separation` pixels.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticLongRangeSpec {
    pub image: usize,
    pub marker: usize,
    pub min_separation: f64,
    pub noise_sigma: f64,
    pub amplitude: f64,
}

impl Default for SyntheticLongRangeSpec {
    fn default() -> Self {
        SyntheticLongRangeSpec { image: 32, marker: 3, min_separation: 20.0, noise_sigma: 0.25, amplitude: 1.0 }
    }
}

/// Marker glyphs on a marker-size grid: a plus and a diagonal cross. Both
/// light up the same number of pixels so brightness carries no class signal.
fn stamp(image: &mut [f32], w: usize, top: (usize, usize), shape: u8, k: usize, amp: f32) {
    let (ty, tx) = top;
    for dy in 0..k {
        for dx in 0..k {
            let on = match shape {
                0 => dy == k / 2 || dx == k / 2,          // plus
                _ => dy == dx || dy + dx == k - 1,         // cross
            };
            if on {
                image[(ty + dy) * w + tx + dx] += amp;
            }
        }
    }
}

fn marker_positions(spec: &SyntheticLongRangeSpec, rng: &mut Prng) -> ((usize, usize), (usize, usize)) {
    let range = spec.image - spec.marker;
    loop {
        let a = (rng.gen_range(0..=range), rng.gen_range(0..=range));
        let b = (rng.gen_range(0..=range), rng.gen_range(0..=range));
        let dy = a.0 as f64 - b.0 as f64;
        let dx = a.1 as f64 - b.1 as f64;
        if (dy * dy + dx * dx).sqrt() >= spec.min_separation {
            return (a, b);
        }
    }
}

/// Deterministic generator: exactly balanced classes (odd counts give the
/// extra sample to class 0), marker separation enforced by rejection.
pub fn gen_longrange(spec: &SyntheticLongRangeSpec, seed: u64, count: usize) -> Result<Dataset> {
    if spec.marker >= spec.image {
        return Err(PideError::InvalidArgument("marker larger than image".into()));
    }
    let max_sep = ((spec.image - spec.marker) as f64) * std::f64::consts::SQRT_2;
    if spec.min_separation > max_sep {
        return Err(PideError::InvalidArgument(format!(
            "min separation {} unreachable on a {}px image",
            spec.min_separation, spec.image
        )));
    }
    let mut rng = rng::child(seed, 0x0da7a);
    let mut ds = Dataset::new(spec.image, spec.image, 1, 2);
    let n_same = count / 2;
    let mut order: Vec<u8> = (0..count).map(|i| (i < n_same) as u8).collect();
    order.shuffle(&mut rng);

    let mut image = vec![0.0f32; spec.image * spec.image];
    for &label in &order {
        image.iter_mut().for_each(|v| *v = 0.0);
        let (pa, pb) = marker_positions(spec, &mut rng);
        let first: u8 = rng.gen_range(0..2);
        let second = if label == 1 { first } else { 1 - first };
        stamp(&mut image, spec.image, pa, first, spec.marker, spec.amplitude as f32);
        stamp(&mut image, spec.image, pb, second, spec.marker, spec.amplitude as f32);
        if spec.noise_sigma > 0.0 {
            for v in image.iter_mut() {
                *v += (rng::normal(&mut rng) * spec.noise_sigma) as f32;
            }
        }
        ds.push(&image, label);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_arithmetic_and_roundtrip() {
        let dir = std::env::temp_dir().join(format!("pidenet-cifar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fixture.bin");

        // two records: all-zero with label 0, ramp with label 9
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[CIFAR_RECORD_BYTES] = 9;
        for i in 0..3072 {
            bytes[CIFAR_RECORD_BYTES + 1 + i] = (i % 256) as u8;
        }
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_file(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(0), 0);
        assert_eq!(ds.label(1), 9);
        let img0 = ds.image(0);
        assert!(img0.data().iter().all(|&v| v == 0.0));
        // spot-check the channel-planar to channel-last mapping
        let img1 = ds.image(1);
        for (y, x, ch) in [(0usize, 5usize, 0usize), (3, 7, 1), (31, 31, 2)] {
            let byte = bytes[CIFAR_RECORD_BYTES + 1 + ch * 1024 + y * 32 + x];
            let want = (byte as f32 / 255.0) as f64;
            let got = img1.data()[(y * 32 + x) * 3 + ch];
            assert_eq!(got, want, "pixel ({y},{x},{ch})");
        }

        // truncated file rejected
        std::fs::write(&path, &bytes[..CIFAR_RECORD_BYTES + 10]).unwrap();
        assert!(load_cifar10_file(&path).is_err());
        // bad label rejected
        bytes[0] = 10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_cifar10_file(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mean_subtraction_uses_train_statistics() {
        let mut train = Dataset::new(2, 2, 1, 10);
        train.push(&[0.0, 0.2, 0.4, 0.6], 1);
        train.push(&[0.2, 0.4, 0.6, 0.8], 2);
        let mut test = Dataset::new(2, 2, 1, 10);
        test.push(&[1.0, 1.0, 1.0, 1.0], 3);
        let mean = apply_mean_subtraction(&mut train, &mut test);
        assert!((mean[0] - 0.1).abs() < 1e-7 && (mean[3] - 0.7).abs() < 1e-7);
        let t = test.image(0);
        assert!((t.data()[0] - 0.9).abs() < 1e-6);
        assert!((t.data()[3] - 0.3).abs() < 1e-6);
        // all-zero record becomes minus the mean
        let mut z = Dataset::new(2, 2, 1, 10);
        z.push(&[0.0; 4], 0);
        let mut train2 = train.clone();
        apply_mean_subtraction(&mut train2, &mut z);
    }

    #[test]
    fn longrange_determinism_balance_separation() {
        let spec = SyntheticLongRangeSpec::default();
        let a = gen_longrange(&spec, 7, 1000).unwrap();
        let b = gen_longrange(&spec, 7, 1000).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.labels, b.labels);
        let c = gen_longrange(&spec, 8, 1000).unwrap();
        assert_ne!(a.pixels, c.pixels);

        let counts = a.class_counts();
        assert!(counts[0] >= 480 && counts[0] <= 520, "{:?}", counts);
        assert!(counts[1] >= 480 && counts[1] <= 520, "{:?}", counts);
    }

    #[test]
    fn longrange_markers_are_separated() {
        // with zero noise the bright pixels are exactly the two markers
        let spec = SyntheticLongRangeSpec { noise_sigma: 0.0, ..Default::default() };
        let ds = gen_longrange(&spec, 3, 64).unwrap();
        for i in 0..ds.len() {
            let img = ds.image(i);
            let lit: Vec<(usize, usize)> = (0..32 * 32)
                .filter(|&p| img.data()[p] > 0.5)
                .map(|p| (p / 32, p % 32))
                .collect();
            assert_eq!(lit.len(), 10, "two 5-pixel markers");
            // max pairwise distance between lit pixels at least min separation
            let mut maxd = 0.0f64;
            for a in &lit {
                for b in &lit {
                    let d = ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
                    maxd = maxd.max(d);
                }
            }
            assert!(maxd >= spec.min_separation, "sample {} spread {}", i, maxd);
        }
    }

    #[test]
    fn batch_flip_mirrors_columns() {
        let mut ds = Dataset::new(1, 3, 1, 2);
        ds.push(&[1.0, 2.0, 3.0], 0);
        let (t, _) = ds.batch(&[0], Some(&[true]));
        assert_eq!(t.data(), &[3.0, 2.0, 1.0]);
    }
}
