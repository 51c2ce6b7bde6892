//! CIFAR-10 binary ingestion, splitting, normalization and augmentation.
//!
//! Each record is one label byte followed by 3072 pixel bytes: 1024 red,
//! 1024 green, 1024 blue, each channel row-major over 32×32.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const FILE_BYTES: usize = RECORD_BYTES * RECORDS_PER_FILE;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Zero padding added on each side before cropping.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() != RECORD_BYTES {
            return Err(format!("record has {} bytes, expected {RECORD_BYTES}", bytes.len()));
        }
        if bytes[0] as usize >= NUM_CLASSES {
            return Err(format!("label {} out of range", bytes[0]));
        }
        Ok(Self {
            label: bytes[0],
            pixels: bytes[1..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn pixel(&self, c: usize, r: usize, col: usize) -> u8 {
        self.pixels[(c * SIDE + r) * SIDE + col]
    }
}

#[derive(Clone, Debug, Default)]
pub struct CifarDataset {
    pub train: Vec<CifarRecord>,
    pub test: Vec<CifarRecord>,
}

/// Parses one batch file's contents. Errors name `path`.
pub fn parse_batch(path: &Path, bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if bytes.len() != FILE_BYTES {
        return Err(Error::Data {
            path: path.to_owned(),
            detail: format!("size mismatch: {} bytes, expected {FILE_BYTES}", bytes.len()),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, chunk)| {
            CifarRecord::parse(chunk).map_err(|detail| Error::Data {
                path: path.to_owned(),
                detail: format!("record {i}: {detail}"),
            })
        })
        .collect()
}

fn read_batch(path: PathBuf) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    parse_batch(&path, &bytes)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_batches(dir: &Path) -> Result<CifarDataset> {
    let mut train = Vec::with_capacity(TRAIN_FILES.len() * RECORDS_PER_FILE);
    for name in TRAIN_FILES {
        train.extend(read_batch(dir.join(name))?);
    }
    let test = read_batch(dir.join(TEST_FILE))?;
    Ok(CifarDataset { train, test })
}

pub fn write_batch(path: &Path, records: &[CifarRecord]) -> Result<()> {
    let bytes: Vec<u8> = records.iter().flat_map(|r| r.to_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` as the six standard batch files. Requires exactly
/// 50,000 training and 10,000 test records.
pub fn write_batches(dir: &Path, dataset: &CifarDataset) -> Result<()> {
    if dataset.train.len() != TRAIN_FILES.len() * RECORDS_PER_FILE || dataset.test.len() != RECORDS_PER_FILE {
        return Err(Error::InvalidConfig(format!(
            "expected 50000/10000 records, got {}/{}",
            dataset.train.len(),
            dataset.test.len()
        )));
    }
    for (name, chunk) in TRAIN_FILES.iter().zip(dataset.train.chunks(RECORDS_PER_FILE)) {
        write_batch(&dir.join(name), chunk)?;
    }
    write_batch(&dir.join(TEST_FILE), &dataset.test)
}

/// Class-patterned stand-in for CIFAR-10 with the same record layout.
///
/// Each class has a weak color cast and a faint oriented sinusoidal grating.
/// Every image adds a random low-frequency background field, random grating
/// phase and contrast, and strong pixel noise, so classes overlap and are
/// learned gradually rather than at once.
pub fn synthetic_dataset(train: usize, test: usize, seed: u64) -> CifarDataset {
    let mut proto_rng = Rng::derived(seed, &[0x5e_ed]);
    let protos: Vec<([f64; 3], f64, f64)> = (0..NUM_CLASSES)
        .map(|k| {
            let color = [0, 1, 2].map(|_| 24.0 * (proto_rng.uniform() - 0.5));
            let angle = std::f64::consts::PI * k as f64 / NUM_CLASSES as f64;
            let freq = 0.3 + 0.3 * proto_rng.uniform();
            (color, angle, freq)
        })
        .collect();
    const GRID: usize = 5;
    let make = |n: usize, rng: &mut Rng| -> Vec<CifarRecord> {
        (0..n)
            .map(|_| {
                let label = rng.below(NUM_CLASSES);
                let (color, angle, freq) = protos[label];
                let phase = 2.0 * std::f64::consts::PI * rng.uniform();
                let contrast = 6.0 + 14.0 * rng.uniform();
                let base = 90.0 + 70.0 * rng.uniform();
                let field: Vec<f64> = (0..CHANNELS * GRID * GRID).map(|_| 30.0 * rng.normal()).collect();
                let (s, c) = angle.sin_cos();
                let mut pixels = vec![0u8; IMAGE_BYTES];
                for r in 0..SIDE {
                    for col in 0..SIDE {
                        let t = freq * (c * col as f64 + s * r as f64) + phase;
                        let wave = contrast * t.sin();
                        // bilinear sample of the coarse background grid
                        let gy = r as f64 * (GRID - 1) as f64 / (SIDE - 1) as f64;
                        let gx = col as f64 * (GRID - 1) as f64 / (SIDE - 1) as f64;
                        let (y0, x0) = ((gy as usize).min(GRID - 2), (gx as usize).min(GRID - 2));
                        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                        for ch in 0..CHANNELS {
                            let g = |y: usize, x: usize| field[(ch * GRID + y) * GRID + x];
                            let bg = (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x0 + 1))
                                + fy * ((1.0 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
                            let v = base + color[ch] + bg + wave + 35.0 * rng.normal();
                            pixels[(ch * SIDE + r) * SIDE + col] = v.round().clamp(0.0, 255.0) as u8;
                        }
                    }
                }
                CifarRecord {
                    label: label as u8,
                    pixels,
                }
            })
            .collect()
    };
    let train_records = make(train, &mut Rng::derived(seed, &[1]));
    let test_records = make(test, &mut Rng::derived(seed, &[2]));
    CifarDataset {
        train: train_records,
        test: test_records,
    }
}

/// Train/validation partition of the 50,000 training records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train: 45_000,
            validation: 5_000,
            seed,
        }
    }

    /// Returns sorted `(train, validation)` index sets into a pool of
    /// `total` records. Validation indices are drawn uniformly at random.
    pub fn split(&self, total: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.train + self.validation > total {
            return Err(Error::InvalidConfig(format!(
                "split {}+{} exceeds {total} records",
                self.train, self.validation
            )));
        }
        let mut idx: Vec<usize> = (0..total).collect();
        Rng::derived(self.seed, &[0x5b_11]).shuffle(&mut idx);
        let mut validation = idx[..self.validation].to_vec();
        let mut train = idx[self.validation..self.validation + self.train].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok((train, validation))
    }
}

/// Per-channel mean and standard deviation on the 0–1 pixel scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    fn scale(&self, c: usize) -> f64 {
        // constant channels are only centered
        if self.std[c] > 1e-12 {
            1.0 / self.std[c]
        } else {
            1.0
        }
    }
}

/// Exact integer accumulation, so the result does not depend on order.
pub fn compute_channel_stats<'a>(records: impl IntoIterator<Item = &'a CifarRecord>) -> Result<ChannelStats> {
    let mut sum = [0u128; 3];
    let mut sumsq = [0u128; 3];
    let mut count = 0u128;
    for r in records {
        for c in 0..CHANNELS {
            for &p in &r.pixels[c * SIDE * SIDE..(c + 1) * SIDE * SIDE] {
                sum[c] += p as u128;
                sumsq[c] += (p as u128) * (p as u128);
            }
        }
        count += (SIDE * SIDE) as u128;
    }
    if count == 0 {
        return Err(Error::InvalidConfig("channel statistics of an empty set".into()));
    }
    let mut stats = ChannelStats {
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    for c in 0..CHANNELS {
        let n = count as f64;
        stats.mean[c] = sum[c] as f64 / n / 255.0;
        let var_num = count * sumsq[c] - sum[c] * sum[c];
        stats.std[c] = (var_num as f64).sqrt() / n / 255.0;
    }
    Ok(stats)
}

/// Crop window offset into the 40×40 padded image, plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Crop {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl Crop {
    pub const CENTER: Crop = Crop {
        dy: CROP_PAD,
        dx: CROP_PAD,
        flip: false,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        let dy = rng.below(2 * CROP_PAD + 1);
        let dx = rng.below(2 * CROP_PAD + 1);
        let flip = rng.coin();
        Crop { dy, dx, flip }
    }
}

fn write_image(record: &CifarRecord, crop: Crop, stats: &ChannelStats, out: &mut [f32]) {
    for c in 0..CHANNELS {
        let (mean, scale) = (stats.mean[c], stats.scale(c));
        for r in 0..SIDE {
            for col in 0..SIDE {
                let x = if crop.flip { SIDE - 1 - col } else { col };
                let (pr, pc) = (r + crop.dy, x + crop.dx);
                let v = if (CROP_PAD..CROP_PAD + SIDE).contains(&pr) && (CROP_PAD..CROP_PAD + SIDE).contains(&pc) {
                    record.pixel(c, pr - CROP_PAD, pc - CROP_PAD) as f64 / 255.0
                } else {
                    0.0
                };
                out[(c * SIDE + r) * SIDE + col] = ((v - mean) * scale) as f32;
            }
        }
    }
}

/// Pads with black, crops at `crop`, optionally flips, then standardizes.
pub fn augment_with(record: &CifarRecord, crop: Crop, stats: &ChannelStats) -> Tensor<f32> {
    let mut t = Tensor::zeros([1, CHANNELS, SIDE, SIDE]);
    write_image(record, crop, stats, t.data_mut());
    t
}

/// Training-time augmentation with a random crop and flip.
pub fn augment(record: &CifarRecord, rng: &mut Rng, stats: &ChannelStats) -> Tensor<f32> {
    augment_with(record, Crop::sample(rng), stats)
}

/// Evaluation pipeline: standardization only.
pub fn standardize(record: &CifarRecord, stats: &ChannelStats) -> Tensor<f32> {
    augment_with(record, Crop::CENTER, stats)
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let [_, _, _, w] = t.shape();
    Tensor::from_fn(t.shape(), |n, c, r, col| t.at(n, c, r, w - 1 - col))
}

/// Stacks records into an `(N, 3, 32, 32)` batch. With `rng`, each image is
/// augmented; without, only standardized.
pub fn make_batch(records: &[&CifarRecord], stats: &ChannelStats, mut rng: Option<&mut Rng>) -> (Tensor<f32>, Vec<usize>) {
    let mut t = Tensor::zeros([records.len(), CHANNELS, SIDE, SIDE]);
    let labels = records.iter().map(|r| r.label as usize).collect();
    for (i, rec) in records.iter().enumerate() {
        let crop = rng.as_deref_mut().map_or(Crop::CENTER, Crop::sample);
        write_image(rec, crop, stats, &mut t.data_mut()[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
    }
    (t, labels)
}
