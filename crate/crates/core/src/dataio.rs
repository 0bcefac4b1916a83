//! Datasets, preprocessing, augmentation and batching.
//!
//! Images are held as normalized `f32` in `[N, C, H, W]`; batches are cast to
//! the model's precision on gather.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Normalized images `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel statistics used for normalization (raw pixel scale).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub split: Split,
    /// Where the data came from, for reports.
    pub source: String,
}

/// One minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn gather<T: Real>(&self, indices: &[usize]) -> Batch<T> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::lit(v as f64)));
        }
        let [c, h, w] = self.image_shape();
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all<T: Real>(&self) -> Batch<T> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// New dataset from a subset of examples (statistics carried over).
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let b = self.gather::<f32>(indices);
        Dataset { images: b.images, labels: b.labels, split, ..self.clone() }
    }

    /// First `n` examples after a seeded shuffle.
    pub fn sample(&self, n: usize, seed: u64, split: Split) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        self.subset(&idx, split)
    }

    /// Indices of a minibatch drawn round-robin over classes (as balanced as
    /// the labels permit), shuffled within each class by `seed`.
    pub fn class_balanced_indices(&self, size: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l].push(i);
        }
        per_class.iter_mut().for_each(|v| v.shuffle(&mut rng));
        let mut out = Vec::with_capacity(size);
        let mut depth = 0;
        while out.len() < size.min(self.len()) {
            for c in &per_class {
                if let Some(&i) = c.get(depth) {
                    if out.len() < size {
                        out.push(i);
                    }
                }
            }
            depth += 1;
        }
        out
    }

    pub fn class_balanced_batch<T: Real>(&self, size: usize, seed: u64) -> Batch<T> {
        self.gather(&self.class_balanced_indices(size, seed))
    }

    /// Undo normalization (back to raw `[0, 1]` pixel scale).
    pub fn denormalized(&self) -> Tensor<f32> {
        let mut t = self.images.clone();
        apply_channelwise(&mut t, |c, v| (v as f64 * self.std[c] + self.mean[c]) as f32);
        t
    }
}

fn apply_channelwise(t: &mut Tensor<f32>, f: impl Fn(usize, f32) -> f32) {
    let s = t.shape().to_vec();
    let plane = s[2] * s[3];
    for (k, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let c = k % s[1];
        chunk.iter_mut().for_each(|v| *v = f(c, *v));
    }
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(images: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (k, chunk) in images.data().chunks(plane).enumerate() {
        for &v in chunk {
            sum[k % c] += v as f64;
            sq[k % c] += (v as f64) * (v as f64);
        }
    }
    let n = (s[0] * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8)).collect();
    (mean, std)
}

/// Normalizes raw images in place with the given statistics.
pub fn normalize(images: &mut Tensor<f32>, mean: &[f64], std: &[f64]) {
    apply_channelwise(images, |c, v| ((v as f64 - mean[c]) / std[c]) as f32);
}

fn build(raw: Tensor<f32>, labels: Vec<usize>, num_classes: usize, stats: Option<(&[f64], &[f64])>, split: Split, source: &str) -> Dataset {
    let (mean, std) = match stats {
        Some((m, s)) => (m.to_vec(), s.to_vec()),
        None => channel_stats(&raw),
    };
    let mut images = raw;
    normalize(&mut images, &mean, &std);
    Dataset { images, labels, num_classes, mean, std, split, source: source.to_string() }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records (label byte, then R, G, B planes).
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Parse { path: path.to_path_buf(), offset, msg: format!("truncated record ({} trailing bytes)", bytes.len() - offset) });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse { path: path.to_path_buf(), offset: r * CIFAR_RECORD, msg: format!("label byte {}", rec[0]) });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn cifar_files(dir: &Path, names: &[&str]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let p = dir.join(name);
        let (px, lb) = parse_cifar_records(&read(&p)?, &p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?, labels))
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin`; both splits are
/// normalized with the train statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train_raw, train_labels) =
        cifar_files(dir, &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"])?;
    let (test_raw, test_labels) = cifar_files(dir, &["test_batch.bin"])?;
    let train = build(train_raw, train_labels, 10, None, Split::Train, "cifar10");
    let test = build(test_raw, test_labels, 10, Some((&train.mean, &train.std)), Split::Test, "cifar10");
    Ok((train, test))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::Parse { path: path.to_path_buf(), offset: at, msg: "truncated header".into() })
}

/// Parses an IDX image file (magic 2051) into `[N, 1, rows, cols]` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 2051 {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 0, msg: format!("image magic {magic}, expected 2051") });
    }
    let (n, rows, cols) = (be_u32(bytes, 4, path)?, be_u32(bytes, 8, path)?, be_u32(bytes, 12, path)?);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 16 + body.len().min(n * rows * cols), msg: format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()) });
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 2049 {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 0, msg: format!("label magic {magic}, expected 2049") });
    }
    let n = be_u32(bytes, 4, path)?;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 8 + body.len().min(n), msg: format!("expected {n} labels, found {}", body.len()) });
    }
    if let Some(k) = body.iter().position(|&b| b > 9) {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 8 + k, msg: format!("label {}", body[k]) });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Zero-pads square single-channel images to `size × size` (centered).
fn pad_images(n: usize, rows: usize, cols: usize, px: Vec<f32>, size: usize) -> Result<Tensor<f32>> {
    if size < rows || size < cols {
        return Err(Error::invalid(format!("cannot pad {rows}x{cols} images to {size}")));
    }
    if size == rows && size == cols {
        return Tensor::new(vec![n, 1, rows, cols], px);
    }
    let (top, left) = ((size - rows) / 2, (size - cols) / 2);
    let mut out = vec![0.0f32; n * size * size];
    for i in 0..n {
        for r in 0..rows {
            let src = &px[(i * rows + r) * cols..(i * rows + r + 1) * cols];
            let dst = (i * size + r + top) * size + left;
            out[dst..dst + cols].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, 1, size, size], out)
}

fn mnist_split(dir: &Path, images: &str, labels: &str, size: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (ip, lp): (PathBuf, PathBuf) = (dir.join(images), dir.join(labels));
    let (n, rows, cols, px) = parse_idx_images(&read(&ip)?, &ip)?;
    let lb = parse_idx_labels(&read(&lp)?, &lp)?;
    if lb.len() != n {
        return Err(Error::shape(format!("{n} images but {} labels in {}", lb.len(), dir.display())));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((pad_images(n, rows, cols, px, size)?, lb))
}

/// Loads the four standard MNIST IDX files, zero-padded to `size × size`.
pub fn load_mnist(dir: &Path, size: usize) -> Result<(Dataset, Dataset)> {
    let (tr, trl) = mnist_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", size)?;
    let (te, tel) = mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", size)?;
    let train = build(tr, trl, 10, None, Split::Train, "mnist");
    let test = build(te, tel, 10, Some((&train.mean, &train.std)), Split::Test, "mnist");
    Ok((train, test))
}

/// How class structure is drawn into synthetic images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// A smooth per-class template; separable by low-frequency matching.
    #[default]
    Blobs,
    /// A per-class layout of oriented gratings over a 4×4 grid of regions,
    /// with random phase per example: needs local feature detectors.
    Textures,
}

/// Seeded class-conditional images plus unit Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Amplitude of the class signal relative to unit pixel noise.
    pub margin: f64,
    /// Random translation of each example by up to this many pixels.
    pub max_shift: usize,
    pub pattern: Pattern,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 10, channels: 3, size: 32, margin: 1.0, max_shift: 2, pattern: Pattern::Blobs }
    }
}

const TEXTURE_GRID: usize = 4;
const TEXTURE_ORIENTATIONS: usize = 8;
/// Orientations in 22.5° steps × 2 spatial frequencies.
const TEXTURE_BANK: usize = 2 * TEXTURE_ORIENTATIONS;

/// Per-class texture ids for each grid region, and one channel mix shared by
/// every texture so that only orientation and frequency tell them apart.
struct TextureLayout {
    regions: Vec<Vec<usize>>,
    color: Vec<f64>,
}

fn texture_layout(spec: &SyntheticSpec, seed: u64) -> TextureLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0e5d);
    let regions = (0..spec.classes).map(|_| (0..TEXTURE_GRID * TEXTURE_GRID).map(|_| rng.random_range(0..TEXTURE_BANK)).collect()).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let c: Vec<f64> = (0..spec.channels).map(|_| normal.sample(&mut rng)).collect();
    let norm = (c.iter().map(|v| v * v).sum::<f64>() / spec.channels as f64).sqrt().max(1e-6);
    TextureLayout { regions, color: c.into_iter().map(|v| v / norm).collect() }
}

/// One example of `class`: every region filled with its grating at a random phase.
fn render_textures(spec: &SyntheticSpec, layout: &TextureLayout, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = spec.size;
    let cell = s.div_ceil(TEXTURE_GRID);
    let phases: Vec<f64> = (0..TEXTURE_GRID * TEXTURE_GRID).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut img = vec![0f32; spec.channels * s * s];
    for y in 0..s {
        for x in 0..s {
            let r = (y / cell).min(TEXTURE_GRID - 1) * TEXTURE_GRID + (x / cell).min(TEXTURE_GRID - 1);
            let t = layout.regions[class][r];
            let angle = (t % TEXTURE_ORIENTATIONS) as f64 * std::f64::consts::PI / TEXTURE_ORIENTATIONS as f64;
            let freq = if t < TEXTURE_ORIENTATIONS { 0.6 } else { 1.2 };
            let v = (freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) + phases[r]).sin() * std::f64::consts::SQRT_2;
            for c in 0..spec.channels {
                img[(c * s + y) * s + x] = (v * layout.color[c]) as f32;
            }
        }
    }
    img
}

/// Class prototypes: smooth random patterns (a coarse 4×4 grid per channel,
/// bilinearly upsampled), shared by every split drawn from the same seed.
fn prototypes(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let g = 4usize;
    let s = spec.size;
    (0..spec.classes)
        .map(|_| {
            let mut img = Vec::with_capacity(spec.channels * s * s);
            for _ in 0..spec.channels {
                let grid: Vec<f64> = (0..g * g).map(|_| normal.sample(&mut rng)).collect();
                for y in 0..s {
                    for x in 0..s {
                        let fy = (y as f64 + 0.5) / s as f64 * (g - 1) as f64;
                        let fx = (x as f64 + 0.5) / s as f64 * (g - 1) as f64;
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        let v = grid[y0 * g + x0] * (1.0 - ty) * (1.0 - tx)
                            + grid[y0 * g + x1] * (1.0 - ty) * tx
                            + grid[y1 * g + x0] * ty * (1.0 - tx)
                            + grid[y1 * g + x1] * ty * tx;
                        img.push(v as f32);
                    }
                }
            }
            img
        })
        .collect()
}

/// Synthetic dataset of `n` examples with balanced labels `i mod classes`.
/// `seed` fixes the class prototypes; `sample_seed` the per-example noise,
/// so train and test splits share prototypes but not examples.
pub fn synthetic(spec: &SyntheticSpec, n: usize, seed: u64, sample_seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || n < spec.classes {
        return Err(Error::invalid(format!("need at least one example per class ({n} < {})", spec.classes)));
    }
    if spec.channels == 0 || spec.size == 0 {
        return Err(Error::invalid("synthetic images need positive channels and size"));
    }
    let protos = match spec.pattern {
        Pattern::Blobs => prototypes(spec, seed),
        Pattern::Textures => Vec::new(),
    };
    let layout = (spec.pattern == Pattern::Textures).then(|| texture_layout(spec, seed));
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(seed));
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let s = spec.size;
    let per = spec.channels * s * s;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let ms = spec.max_shift as i64;
    for i in 0..n {
        let label = i % spec.classes;
        let (dy, dx) = if ms > 0 { (rng.random_range(-ms..=ms), rng.random_range(-ms..=ms)) } else { (0, 0) };
        let rendered;
        let p = match &layout {
            Some(l) => {
                rendered = render_textures(spec, l, label, &mut rng);
                &rendered
            }
            None => &protos[label],
        };
        for c in 0..spec.channels {
            for y in 0..s as i64 {
                for x in 0..s as i64 {
                    let (sy, sx) = ((y - dy).clamp(0, s as i64 - 1) as usize, (x - dx).clamp(0, s as i64 - 1) as usize);
                    data.push(spec.margin as f32 * p[(c * s + sy) * s + sx] + normal.sample(&mut rng));
                }
            }
        }
        labels.push(label);
    }
    let raw = Tensor::new(vec![n, spec.channels, s, s], data)?;
    Ok(build(raw, labels, spec.classes, None, Split::Train, "synthetic"))
}

/// Train/test pair sharing prototypes and normalization statistics.
pub fn synthetic_split(spec: &SyntheticSpec, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synthetic(spec, n_train, seed, 1)?;
    let test_raw = synthetic(spec, n_test, seed, 2)?;
    let mut raw = test_raw.denormalized();
    normalize(&mut raw, &train.mean, &train.std);
    let test = Dataset { images: raw, split: Split::Test, mean: train.mean.clone(), std: train.std.clone(), ..test_raw };
    Ok((train, test))
}

/// Seeded shuffled partition of `0..n` into batches for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0)));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut h = a ^ 0x243f_6a88_85a3_08d3;
    for v in [b, c] {
        h = (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(29) ^ (h >> 31);
    }
    h
}

/// Per-image augmentation decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop offset into the 4-pixel padded image, each in `0..=8`.
    pub dy: usize,
    pub dx: usize,
}

pub const AUGMENT_PAD: usize = 4;

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: false, dy: AUGMENT_PAD, dx: AUGMENT_PAD };

    /// Deterministic draw for `(seed, epoch, index)`.
    pub fn draw(seed: u64, epoch: usize, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, index as u64));
        AugmentDraw { flip: rng.random_bool(0.5), dy: rng.random_range(0..=2 * AUGMENT_PAD), dx: rng.random_range(0..=2 * AUGMENT_PAD) }
    }
}

/// Applies a flip and a zero-padded crop to one `[C, H, W]` image.
pub fn augment_image<T: Real>(img: &[T], c: usize, h: usize, w: usize, d: AugmentDraw) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // source row in the unpadded image
            let sy = (y + d.dy) as i64 - AUGMENT_PAD as i64;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let xx = if d.flip { w - 1 - x } else { x };
                let sx = (xx + d.dx) as i64 - AUGMENT_PAD as i64;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Augments a batch whose rows are dataset examples `indices`.
pub fn augment<T: Real>(batch: &Batch<T>, indices: &[usize], seed: u64, epoch: usize) -> Batch<T> {
    let s = batch.images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch.images.numel());
    for (k, &idx) in indices.iter().enumerate() {
        data.extend(augment_image(&batch.images.data()[k * per..(k + 1) * per], c, h, w, AugmentDraw::draw(seed, epoch, idx)));
    }
    Batch { images: Tensor::new(s.to_vec(), data).expect("same shape"), labels: batch.labels.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_bytes(n: usize) -> Vec<u8> {
        let mut b = Vec::with_capacity(n * CIFAR_RECORD);
        for i in 0..n {
            b.push((i % 10) as u8);
            b.extend((0..CIFAR_RECORD - 1).map(|j| ((i * 31 + j * 7) % 256) as u8));
        }
        b
    }

    #[test]
    fn cifar_records() {
        let p = Path::new("x.bin");
        let (px, lb) = parse_cifar_records(&cifar_bytes(20), p).unwrap();
        assert_eq!((lb.len(), px.len()), (20, 20 * 3072));
        let mut bad = cifar_bytes(3);
        bad.truncate(3 * CIFAR_RECORD - 5);
        match parse_cifar_records(&bad, p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
        let mut bad = cifar_bytes(2);
        bad[CIFAR_RECORD] = 10;
        assert!(matches!(parse_cifar_records(&bad, p), Err(Error::Parse { offset, .. }) if offset == CIFAR_RECORD));
    }

    #[test]
    fn cifar_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"]
            .iter()
            .enumerate()
        {
            fs::write(dir.path().join(name), cifar_bytes(4 + k)).unwrap();
        }
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!((train.len(), test.len()), (4 + 5 + 6 + 7 + 8, 9));
        let (mean, std) = channel_stats(&train.images);
        assert!(mean.iter().all(|m| m.abs() < 1e-3) && std.iter().all(|s| (s - 1.0).abs() < 1e-2));
        let raw = train.denormalized();
        let (px, _) = parse_cifar_records(&cifar_bytes(4), Path::new("a")).unwrap();
        for (a, b) in raw.data().iter().zip(&px) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn idx_images(n: usize, r: usize, c: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [2051u32, n as u32, r as u32, c as u32] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * r * c).map(|i| (i % 251) as u8));
        b
    }

    fn idx_labels(n: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [2049u32, n as u32] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n).map(|i| (i % 10) as u8));
        b
    }

    #[test]
    fn mnist_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("train-images-idx3-ubyte"), idx_images(12, 28, 28)).unwrap();
        fs::write(d.join("train-labels-idx1-ubyte"), idx_labels(12)).unwrap();
        fs::write(d.join("t10k-images-idx3-ubyte"), idx_images(5, 28, 28)).unwrap();
        fs::write(d.join("t10k-labels-idx1-ubyte"), idx_labels(4)).unwrap();
        assert!(load_mnist(d, 32).is_err());
        fs::write(d.join("t10k-labels-idx1-ubyte"), idx_labels(5)).unwrap();
        let (train, test) = load_mnist(d, 32).unwrap();
        assert_eq!(train.image_shape(), [1, 32, 32]);
        assert_eq!(test.len(), 5);
        // padding pixels are raw zeros
        let z = (-train.mean[0] / train.std[0]) as f32;
        assert!((train.image(0)[0] - z).abs() < 1e-6);
        let mut bad = idx_images(1, 2, 2);
        bad[2] = 9;
        assert!(parse_idx_images(&bad, Path::new("m")).is_err());
    }

    #[test]
    fn augmentation() {
        let img: Vec<f64> = (0..2 * 5 * 6).map(|v| v as f64).collect();
        assert_eq!(augment_image(&img, 2, 5, 6, AugmentDraw::IDENTITY), img);
        let flip = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY };
        assert_eq!(augment_image(&augment_image(&img, 2, 5, 6, flip), 2, 5, 6, flip), img);
        let shifted = augment_image(&img, 2, 5, 6, AugmentDraw { flip: false, dy: 5, dx: 4 });
        assert_eq!(shifted[0], img[6]);
        assert_eq!(shifted[4 * 6], 0.0);
        assert_eq!(AugmentDraw::draw(1, 2, 3), AugmentDraw::draw(1, 2, 3));
    }

    #[test]
    fn batching_partitions() {
        let b = epoch_batches(103, 10, 7, 2);
        assert_eq!(b.len(), 11);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(103, 10, 7, 2));
        assert_ne!(b, epoch_batches(103, 10, 7, 3));
    }

    #[test]
    fn synthetic_data() {
        let spec = SyntheticSpec { classes: 1, channels: 1, size: 4, margin: 1.0, max_shift: 0, ..SyntheticSpec::default() };
        assert!(synthetic(&spec, 5, 0, 0).unwrap().labels.iter().all(|&l| l == 0));
        let spec = SyntheticSpec { classes: 4, ..SyntheticSpec::default() };
        assert!(synthetic(&spec, 3, 0, 0).is_err());
        let a = synthetic(&spec, 40, 3, 1).unwrap();
        assert_eq!(a, synthetic(&spec, 40, 3, 1).unwrap());
        let idx = a.class_balanced_indices(8, 1);
        let mut counts = [0; 4];
        idx.iter().for_each(|&i| counts[a.labels[i]] += 1);
        assert_eq!(counts, [2; 4]);
    }
}
