//! Dataset ingestion: IDX image files (MNIST layout), CIFAR-10 binary
//! batches, normalization, augmentation and batching.
//!
//! The `synth` submodule renders a deterministic digit dataset in the
//! exact IDX format, so the full pipeline can be exercised end to end on
//! a machine without the real downloads.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// An image classification dataset held in memory.
///
/// Images stay in raw `[0,1]` range; `mean`/`std` are the train-split
/// per-channel statistics used for on-demand normalization (val splits
/// carry their train split's statistics).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub split: Split,
    pub id: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// (channels, height, width)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_raw(&self, i: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims();
        if i >= self.len() {
            return Err(FaError::Bounds(format!("image {i} outside dataset of {}", self.len())));
        }
        let chw = c * h * w;
        Tensor::new(vec![1, c, h, w], self.images.data()[i * chw..(i + 1) * chw].to_vec())
    }

    pub fn normalized_image(&self, i: usize) -> Result<Tensor> {
        Ok(normalize(&self.image_raw(i)?, &self.mean, &self.std))
    }

    /// Gathers and normalizes a batch by index.
    pub fn normalized_batch(&self, idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.dims();
        let chw = c * h * w;
        let mut data = Vec::with_capacity(idxs.len() * chw);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(FaError::Bounds(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * chw..(i + 1) * chw]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![idxs.len(), c, h, w], data)?;
        Ok((normalize(&batch, &self.mean, &self.std), labels))
    }

    /// First `n` samples, same statistics. Used for bounded-time runs.
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(FaError::Contract("empty dataset subset".into()));
        }
        let (c, h, w) = self.dims();
        let chw = c * h * w;
        Ok(Dataset {
            images: Tensor::new(vec![n, c, h, w], self.images.data()[..n * chw].to_vec())?,
            labels: self.labels[..n].to_vec(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            split: self.split,
            id: self.id.clone(),
        })
    }
}

/// `(x - mean) / std` per channel.
pub fn normalize(images: &Tensor, mean: &[f32], std: &[f32]) -> Tensor {
    let shape = images.shape().to_vec();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let mut out = images.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let (m, s) = (mean[ch], std[ch]);
        for v in chunk.iter_mut() {
            *v = (*v - m) / s;
        }
    }
    out
}

pub fn denormalize(images: &Tensor, mean: &[f32], std: &[f32]) -> Tensor {
    let shape = images.shape().to_vec();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let mut out = images.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let (m, s) = (mean[ch], std[ch]);
        for v in chunk.iter_mut() {
            *v = *v * s + m;
        }
    }
    out
}

fn channel_stats(images: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let shape = images.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for (i, chunk) in images.data().chunks(hw).enumerate() {
        let ch = i % c;
        for &v in chunk {
            mean[ch] += v as f64;
        }
    }
    let m = (n * hw) as f64;
    for v in &mut mean {
        *v /= m;
    }
    for (i, chunk) in images.data().chunks(hw).enumerate() {
        let ch = i % c;
        for &v in chunk {
            let d = v as f64 - mean[ch];
            var[ch] += d * d;
        }
    }
    let std = var.iter().map(|&v| ((v / m).sqrt().max(1e-6)) as f32).collect();
    (mean.iter().map(|&v| v as f32).collect(), std)
}

// ---------------------------------------------------------------------------
// IDX (MNIST layout)
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct OffsetReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    fn read(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(FaError::DataFormat {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(FaError::Io(e)),
        }
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
    let magic = r.read_u32_be("images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FaError::DataFormat {
            offset: 0,
            msg: format!("bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = r.read_u32_be("image count")? as usize;
    let rows = r.read_u32_be("rows")? as usize;
    let cols = r.read_u32_be("cols")? as usize;
    if rows == 0 || cols == 0 || count == 0 {
        return Err(FaError::DataFormat { offset: r.offset, msg: "zero-sized image header".into() });
    }
    let mut pixels = vec![0u8; count * rows * cols];
    r.read(&mut pixels, "pixel data")?;
    Ok((count, rows, cols, pixels))
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
    let magic = r.read_u32_be("labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FaError::DataFormat {
            offset: 0,
            msg: format!("bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = r.read_u32_be("label count")? as usize;
    let mut bytes = vec![0u8; count];
    r.read(&mut bytes, "label data")?;
    for (i, &b) in bytes.iter().enumerate() {
        if b > 9 {
            return Err(FaError::DataFormat {
                offset: 8 + i as u64,
                msg: format!("label {b} outside 0..=9"),
            });
        }
    }
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

fn idx_split(dir: &Path, images_file: &str, labels_file: &str, split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = read_idx_images(&dir.join(images_file))?;
    let labels = read_idx_labels(&dir.join(labels_file))?;
    if labels.len() != count {
        return Err(FaError::DataFormat {
            offset: 4,
            msg: format!("{count} images but {} labels", labels.len()),
        });
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![count, 1, rows, cols], data)?;
    let (mean, std) = channel_stats(&images);
    Ok(Dataset { images, labels, mean, std, split, id: "mnist".into() })
}

/// Loads the four standard IDX files (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-...`) from `dir`. The val split
/// reuses the train split's normalization statistics.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = idx_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?;
    let mut val = idx_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Val)?;
    val.mean = train.mean.clone();
    val.std = train.std.clone();
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes

fn read_cifar_file(path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<usize> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(FaError::DataFormat {
            offset: bytes.len() as u64,
            msg: format!(
                "{} has {} bytes, not a positive multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            ),
        });
    }
    let records = bytes.len() / CIFAR_RECORD;
    for rec in 0..records {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base];
        if label > 9 {
            return Err(FaError::DataFormat {
                offset: base as u64,
                msg: format!("label {label} outside 0..=9"),
            });
        }
        labels.push(label as usize);
        pixels.extend(bytes[base + 1..base + CIFAR_RECORD].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(records)
}

/// Loads the CIFAR-10 binary batches (`data_batch_1..5.bin` for train,
/// `test_batch.bin` for val): each record is one label byte followed by
/// the 32x32 R, G, B planes.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut pixels, &mut labels)?;
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    let (mean, std) = channel_stats(&images);
    let train = Dataset {
        images,
        labels,
        mean: mean.clone(),
        std: std.clone(),
        split: Split::Train,
        id: "cifar10".into(),
    };

    let mut vp = Vec::new();
    let mut vl = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut vp, &mut vl)?;
    let val = Dataset {
        images: Tensor::new(vec![vl.len(), 3, 32, 32], vp)?,
        labels: vl,
        mean,
        std,
        split: Split::Val,
        id: "cifar10".into(),
    };
    Ok((train, val))
}

/// Re-encodes sample `i` in the CIFAR-10 binary record layout.
pub fn serialize_cifar_record(ds: &Dataset, i: usize) -> Result<Vec<u8>> {
    let (c, h, w) = ds.dims();
    if c != 3 || h != 32 || w != 32 {
        return Err(FaError::Contract("not a CIFAR-shaped dataset".into()));
    }
    let img = ds.image_raw(i)?;
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(ds.labels[i] as u8);
    out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

// ---------------------------------------------------------------------------
// augmentation and batching
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Reflect-pad width before the random crop back to the input size.
    pub random_crop_pad: usize,
    pub hflip_prob: f32,
}

fn reflect(q: isize, size: usize) -> usize {
    let size = size as isize;
    let mut q = q;
    if q < 0 {
        q = -q;
    }
    if q >= size {
        q = 2 * size - 2 - q;
    }
    q as usize
}

/// Reflect-pad + random crop + random horizontal flip, per image.
/// Per-image draw order: crop dy, crop dx (when padded), flip (when
/// `hflip_prob > 0`), so results are reproducible under a seeded rng.
pub fn augment<R: Rng>(batch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    let p = cfg.random_crop_pad;
    let mut out = Tensor::zeros(batch.shape());
    let chw = c * h * w;
    for i in 0..n {
        let (dy, dx) = if p > 0 {
            (rng.gen_range(0..=2 * p), rng.gen_range(0..=2 * p))
        } else {
            (0, 0)
        };
        let flip = cfg.hflip_prob > 0.0 && rng.gen::<f32>() < cfg.hflip_prob;
        let src = &batch.data()[i * chw..(i + 1) * chw];
        let dst = &mut out.data_mut()[i * chw..(i + 1) * chw];
        for ch in 0..c {
            for y in 0..h {
                let sy = reflect(y as isize + dy as isize - p as isize, h);
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = reflect(xx as isize + dx as isize - p as isize, w);
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Seeded epoch batcher: shuffles `0..n` once and cuts it into batches,
/// so every sample appears exactly once per epoch.
pub struct Batcher {
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Batcher {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        Batcher { order, batch_size, drop_last }
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        let bs = self.batch_size;
        let drop_last = self.drop_last;
        self.order.chunks(bs).filter(move |c| !drop_last || c.len() == bs)
    }
}

// ---------------------------------------------------------------------------
// synthetic digits
// ---------------------------------------------------------------------------

/// Procedurally rendered digit images in the IDX format: seven-segment
/// glyphs under random affine distortion, stroke jitter and pixel noise.
/// Deterministic per (seed, index).
pub mod synth {
    use super::*;
    use rayon::prelude::*;
    use std::io::Write;

    const SIZE: usize = 28;

    // corner anchors of the glyph box, unit coordinates
    const X0: f32 = 0.30;
    const X1: f32 = 0.70;
    const Y0: f32 = 0.18;
    const YM: f32 = 0.50;
    const Y1: f32 = 0.82;

    // segments as corner-index pairs into [tl, tr, ml, mr, bl, br]
    const SEGMENTS: [(usize, usize); 7] = [
        (0, 1), // A top
        (1, 3), // B upper right
        (3, 5), // C lower right
        (4, 5), // D bottom
        (2, 4), // E lower left
        (0, 2), // F upper left
        (2, 3), // G middle
    ];

    const DIGIT_SEGMENTS: [&[usize]; 10] = [
        &[0, 1, 2, 3, 4, 5],    // 0
        &[1, 2],                // 1
        &[0, 1, 6, 4, 3],       // 2
        &[0, 1, 6, 2, 3],       // 3
        &[5, 6, 1, 2],          // 4
        &[0, 5, 6, 2, 3],       // 5
        &[0, 5, 6, 4, 2, 3],    // 6
        &[0, 1, 2],             // 7
        &[0, 1, 2, 3, 4, 5, 6], // 8
        &[0, 1, 5, 6, 2, 3],    // 9
    ];

    fn dist_to_segment(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
        let (ax, ay) = a;
        let (bx, by) = b;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
    }

    fn render_digit(label: usize, rng: &mut ChaCha8Rng) -> [u8; SIZE * SIZE] {
        // jittered glyph corners
        let base = [(X0, Y0), (X1, Y0), (X0, YM), (X1, YM), (X0, Y1), (X1, Y1)];
        let mut corners = [(0.0f32, 0.0f32); 6];
        for (c, &(x, y)) in corners.iter_mut().zip(&base) {
            *c = (x + rng.gen_range(-0.04..0.04), y + rng.gen_range(-0.04..0.04));
        }
        // global affine: shear, scale, rotation, translation about center
        let theta = rng.gen_range(-0.25..0.25f32);
        let scale = rng.gen_range(0.80..1.15f32);
        let shear = rng.gen_range(-0.15..0.15f32);
        let tx = rng.gen_range(-0.09..0.09f32);
        let ty = rng.gen_range(-0.09..0.09f32);
        let (sin, cos) = theta.sin_cos();
        let map = |(x, y): (f32, f32)| -> (f32, f32) {
            let (x, y) = (x - 0.5, y - 0.5);
            let (x, y) = (x + shear * y, y);
            let (x, y) = (scale * x, scale * y);
            let (x, y) = (cos * x - sin * y, sin * x + cos * y);
            (x + 0.5 + tx, y + 0.5 + ty)
        };
        let segs: Vec<((f32, f32), (f32, f32))> = DIGIT_SEGMENTS[label]
            .iter()
            .map(|&s| {
                let (i, j) = SEGMENTS[s];
                (map(corners[i]), map(corners[j]))
            })
            .collect();

        let thick = rng.gen_range(0.040..0.070f32);
        let brightness = rng.gen_range(0.75..1.0f32);
        let mut noise = [0.0f32; SIZE * SIZE];
        for v in noise.iter_mut() {
            *v = rng.gen_range(-0.08..0.08);
        }
        let mut out = [0u8; SIZE * SIZE];
        for (idx, o) in out.iter_mut().enumerate() {
            let (px, py) = (
                ((idx % SIZE) as f32 + 0.5) / SIZE as f32,
                ((idx / SIZE) as f32 + 0.5) / SIZE as f32,
            );
            let d = segs
                .iter()
                .map(|&(a, b)| dist_to_segment(px, py, a, b))
                .fold(f32::INFINITY, f32::min);
            let ink = ((thick - d) / 0.025 + 1.0).clamp(0.0, 1.0);
            let v = (ink * brightness + noise[idx]).clamp(0.0, 1.0);
            *o = (v * 255.0).round() as u8;
        }
        out
    }

    fn generate(n: usize, seed: u64, salt: u64) -> (Vec<u8>, Vec<u8>) {
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt ^ 0xd1ce);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        let images: Vec<[u8; SIZE * SIZE]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ salt ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                render_digit(labels[i] as usize, &mut rng)
            })
            .collect();
        let mut pixels = Vec::with_capacity(n * SIZE * SIZE);
        for img in images {
            pixels.extend_from_slice(&img);
        }
        (pixels, labels)
    }

    fn write_idx_pair(dir: &Path, stem: &str, pixels: &[u8], labels: &[u8]) -> Result<()> {
        let n = labels.len() as u32;
        let mut f =
            std::io::BufWriter::new(File::create(dir.join(format!("{stem}-images-idx3-ubyte")))?);
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
        f.write_all(&n.to_be_bytes())?;
        f.write_all(&(SIZE as u32).to_be_bytes())?;
        f.write_all(&(SIZE as u32).to_be_bytes())?;
        f.write_all(pixels)?;
        f.flush()?;
        let mut f =
            std::io::BufWriter::new(File::create(dir.join(format!("{stem}-labels-idx1-ubyte")))?);
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
        f.write_all(&n.to_be_bytes())?;
        f.write_all(labels)?;
        f.flush()?;
        Ok(())
    }

    /// Writes `train-*` and `t10k-*` IDX files with rendered digits.
    pub fn write_idx_digits(dir: &Path, n_train: usize, n_val: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (pixels, labels) = generate(n_train, seed, 0x7261_696e);
        write_idx_pair(dir, "train", &pixels, &labels)?;
        let (pixels, labels) = generate(n_val, seed, 0x7661_6c73);
        write_idx_pair(dir, "t10k", &pixels, &labels)?;
        Ok(())
    }
}
