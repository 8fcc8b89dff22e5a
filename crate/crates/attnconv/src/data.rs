//! Image classification datasets in the `ATCV` binary format and a seeded
//! synthetic generator.
//!
//! Layout (little-endian): magic `ATCV`, version `u16`, then `M`, `S` and
//! `num_classes` as `u32`, `M` labels as `u32`, and `M·3·S·S` image values
//! as `f64` in `[M, 3, S, S]` order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ByteCursor, Tensor};

pub const MAGIC: &[u8; 4] = b"ATCV";
pub const VERSION: u16 = 1;
pub const CHANNELS: usize = 3;
const HEADER: usize = 4 + 2 + 3 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    /// Checks label range and that every channel has mean within ±0.5.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != CHANNELS || s[2] != s[3] || s[0] != labels.len() {
            return Err(Error::dim("dataset", s, &[labels.len(), CHANNELS, 0, 0]));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {} at {i} >= {num_classes}", labels[i])));
        }
        let ds = Dataset {
            images,
            labels,
            num_classes,
            split,
        };
        for (c, m) in ds.channel_means().iter().enumerate() {
            if m.abs() > 0.5 {
                return Err(Error::Contract(format!("channel {c} mean {m} is not normalized")));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let plane = self.image_size() * self.image_size();
        let mut sums = vec![0.0; CHANNELS];
        for (k, chunk) in self.images.data().chunks_exact(plane).enumerate() {
            sums[k % CHANNELS] += chunk.iter().sum::<f64>();
        }
        let n = (self.len() * plane) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = CHANNELS * self.image_size() * self.image_size();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let s = self.image_size();
        (
            Tensor::new(vec![indices.len(), CHANNELS, s, s], data).expect("batch shape"),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.len() + 8 * self.images.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.len(), self.image_size(), self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected ATCV"));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let mut header = [0usize; 3];
        for (k, h) in header.iter_mut().enumerate() {
            let at = cur.pos;
            *h = cur.u32()? as usize;
            if *h == 0 {
                let what = ["sample count", "image size", "class count"][k];
                return Err(Error::format(at, format!("{what} must be positive")));
            }
        }
        let [m, s, classes] = header;
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            let at = cur.pos;
            let l = cur.u32()? as usize;
            if l >= classes {
                return Err(Error::format(at, format!("label {l} out of range for {classes} classes")));
            }
            labels.push(l);
        }
        let n = m * CHANNELS * s * s;
        if cur.remaining() != n * 8 {
            return Err(Error::format(
                cur.pos,
                format!("image block holds {} bytes, expected {}", cur.remaining(), n * 8),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let at = cur.pos;
            let v = cur.f64()?;
            if !v.is_finite() {
                return Err(Error::format(at, "non-finite pixel"));
            }
            data.push(v);
        }
        let images = Tensor::new(vec![m, CHANNELS, s, s], data)?;
        Dataset::new(images, labels, classes, Split::Train)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads an `ATCV` file; the split tag defaults to train.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Standard deviation of the additive pixel noise (pattern amplitude ≈ 1).
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        SyntheticConfig {
            samples,
            image_size: 32,
            num_classes: 10,
            noise: 0.6,
            seed,
        }
    }
}

/// Spatial frequencies (cycles per image) assigned to classes, lowest first.
pub fn class_frequencies(num_classes: usize) -> Vec<(i32, i32)> {
    let mut f: Vec<(i32, i32)> = (0..=8)
        .flat_map(|x| (-8..=8).map(move |y| (x, y)))
        .filter(|&(x, y)| x > 0 || (x == 0 && y > 0))
        .collect();
    f.sort_by_key(|&(x, y)| (x * x + y * y, x, y));
    f.truncate(num_classes);
    f.into_iter().map(|(x, y)| (2 * x, 2 * y)).collect()
}

/// Class `k` is a plane wave at its own frequency and colour, with a
/// phase jittered by up to ±π/4, random amplitude and Gaussian noise.
/// Each channel is then standardized over the whole set.
pub fn generate_synthetic(cfg: &SyntheticConfig, split: Split) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.image_size == 0 || cfg.num_classes == 0 {
        return Err(Error::Config("synthetic set needs positive samples, size and classes".into()));
    }
    if cfg.num_classes > class_frequencies(usize::MAX >> 1).len() {
        return Err(Error::Config(format!("at most {} classes", class_frequencies(usize::MAX >> 1).len())));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let freqs = class_frequencies(cfg.num_classes);
    let mut labels: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut rng);
    let s = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let two_pi = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(cfg.samples * CHANNELS * s * s);
    for &label in &labels {
        let (fx, fy) = freqs[label];
        let phase = rng.gen_range(-0.25..0.25) * std::f64::consts::PI;
        let amp = rng.gen_range(0.8..1.2);
        for c in 0..CHANNELS {
            let hue = two_pi * label as f64 / cfg.num_classes as f64 + two_pi * c as f64 / CHANNELS as f64;
            let gain = amp * (0.6 + 0.4 * hue.cos());
            for y in 0..s {
                for x in 0..s {
                    let arg = two_pi * (fx as f64 * x as f64 + fy as f64 * y as f64) / s as f64 + phase;
                    data.push(gain * arg.sin() + noise.sample(&mut rng));
                }
            }
        }
    }
    let plane = s * s;
    let n = (cfg.samples * plane) as f64;
    for c in 0..CHANNELS {
        let chunks = || data.chunks_exact(plane).skip(c).step_by(CHANNELS);
        let mean = chunks().flatten().sum::<f64>() / n;
        let var = chunks().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-12);
        for chunk in data.chunks_exact_mut(plane).skip(c).step_by(CHANNELS) {
            for v in chunk {
                *v = (*v - mean) * inv;
            }
        }
    }
    let images = Tensor::new(vec![cfg.samples, CHANNELS, s, s], data)?;
    Dataset::new(images, labels, cfg.num_classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradTape;

    fn small() -> Dataset {
        generate_synthetic(&SyntheticConfig { image_size: 8, ..SyntheticConfig::new(20, 1) }, Split::Train).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let d = small();
        let bytes = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.atcv");
        d.save(&p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let offset = |b: &[u8]| match Dataset::from_bytes(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(&[]), 0);
        let good = small().to_bytes();
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(offset(&b), 0);
        let mut b = good.clone();
        b[4] = 9;
        assert_eq!(offset(&b), 4);
        let mut b = good.clone();
        b[HEADER + 4 * 3..HEADER + 4 * 4].copy_from_slice(&10u32.to_le_bytes());
        assert_eq!(offset(&b), HEADER + 12);
        let b = &good[..good.len() - 3];
        assert_eq!(offset(b), HEADER + 4 * 20);
        assert_eq!(offset(&good[..10]), 10);
    }

    #[test]
    fn generator_is_seeded_balanced_and_normalized() {
        let cfg = SyntheticConfig::new(100, 5);
        let a = generate_synthetic(&cfg, Split::Train).unwrap();
        assert_eq!(a, generate_synthetic(&cfg, Split::Train).unwrap());
        assert_ne!(a, generate_synthetic(&SyntheticConfig::new(100, 6), Split::Train).unwrap());
        for k in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 10);
        }
        assert!(a.channel_means().iter().all(|m| m.abs() < 1e-9));
        assert_eq!(class_frequencies(3), vec![(0, 2), (2, 0), (2, -2)]);
    }

    /// Softmax regression on raw pixels, trained by full-batch gradient
    /// descent, must beat chance on held-out data.
    #[test]
    fn linear_probe_beats_chance() {
        let train = generate_synthetic(&SyntheticConfig::new(512, 11), Split::Train).unwrap();
        let val = generate_synthetic(&SyntheticConfig::new(200, 12), Split::Val).unwrap();
        let feats = 3 * 32 * 32;
        let x = train.images().clone().reshape(&[512, feats]).unwrap();
        let mut w = Tensor::zeros(&[feats, 10]);
        for _ in 0..30 {
            let mut tape = GradTape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let logits = tape.matmul(xv, wv).unwrap();
            let loss = tape.cross_entropy(logits, train.labels(), 0.0).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(wv).unwrap();
            for (p, gv) in w.data_mut().iter_mut().zip(g) {
                *p -= 0.05 * gv;
            }
        }
        let vx = val.images().clone().reshape(&[200, feats]).unwrap();
        let scores = vx.matmul(&w).unwrap();
        let correct = (0..200)
            .filter(|&i| {
                let r = scores.row(i);
                let arg = (0..10).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
                arg == val.labels()[i]
            })
            .count();
        assert!(correct as f64 / 200.0 > 0.2, "{correct}/200");
    }
}
