//! Datasets: the pendulum image simulator, MNIST in IDX format, delimited
//! text, and seeded mini-batch schedules.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Continuous,
    Binary,
}

/// Per-sample annotation used only for analysis (angles, labels).
#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub name: String,
    pub values: Vec<f64>,
}

/// Samples stored row-wise, `[N × N_x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    kind: DataKind,
    metadata: Option<Metadata>,
}

impl Dataset {
    pub fn new(samples: Tensor, kind: DataKind) -> Result<Self> {
        if samples.rank() != 2 {
            return Err(Error::contract(format!(
                "dataset samples must be a matrix, got shape {:?}",
                samples.shape()
            )));
        }
        if let Some(v) = samples.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("dataset contains non-finite value {v}")));
        }
        if kind == DataKind::Binary {
            if let Some(v) = samples.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract(format!("binary dataset contains {v}")));
            }
        }
        Ok(Dataset {
            samples,
            kind,
            metadata: None,
        })
    }

    pub fn with_metadata(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::contract(format!(
                "{} metadata values for {} samples",
                values.len(),
                self.len()
            )));
        }
        self.metadata = Some(Metadata {
            name: name.to_string(),
            values,
        });
        Ok(self)
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn metadata(&self) -> Option<&Metadata> {
        self.metadata.as_ref()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// Copy of the samples at `indices`, metadata included.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::contract(format!(
                "index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Ok(Dataset {
            samples: self.samples.select_rows(indices),
            kind: self.kind,
            metadata: self.metadata.as_ref().map(|m| Metadata {
                name: m.name.clone(),
                values: indices.iter().map(|&i| m.values[i]).collect(),
            }),
        })
    }

    /// The first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Rows at `indices` as a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.samples.select_rows(indices)
    }
}

/// Pendulum image width and height in pixels.
pub const PENDULUM_SIDE: usize = 16;
const PENDULUM_CENTRE: f64 = 7.5;
const ROD_LENGTH: f64 = 6.0;
const ROD_HALF_WIDTH: f64 = 0.5;
const ROD_INTENSITY: f64 = 0.5;
const BOB_SIGMA: f64 = 1.2;

/// Noiseless `16 × 16` pendulum image, row-major, values in `[0, 1]`.
///
/// The rod starts at the image centre; angle 0 points straight down and
/// angles increase counter-clockwise. Pixel `(row, col)` sits at
/// `(x, y) = (col, row)`.
pub fn pendulum_render(angle_degrees: f64) -> Vec<f64> {
    let theta = angle_degrees.rem_euclid(360.0).to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let tip = (
        PENDULUM_CENTRE + ROD_LENGTH * dx,
        PENDULUM_CENTRE + ROD_LENGTH * dy,
    );
    let mut img = Vec::with_capacity(PENDULUM_SIDE * PENDULUM_SIDE);
    for row in 0..PENDULUM_SIDE {
        for col in 0..PENDULUM_SIDE {
            let (px, py) = (col as f64 - PENDULUM_CENTRE, row as f64 - PENDULUM_CENTRE);
            let along = (px * dx + py * dy).clamp(0.0, ROD_LENGTH);
            let dist = ((px - along * dx).powi(2) + (py - along * dy).powi(2)).sqrt();
            // Full intensity within the half width, linear fall-off over one pixel.
            let rod = (1.0 - (dist - ROD_HALF_WIDTH).max(0.0)).clamp(0.0, 1.0) * ROD_INTENSITY;
            let r2 = (col as f64 - tip.0).powi(2) + (row as f64 - tip.1).powi(2);
            let bob = (-r2 / (2.0 * BOB_SIGMA * BOB_SIGMA)).exp();
            img.push(rod.max(bob).clamp(0.0, 1.0));
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumSpec {
    pub count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        PendulumSpec {
            count: 15_000,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Renders `count` pendulums at uniform angles in `[0, 360)` and adds
/// independent Gaussian pixel noise. Angles are kept as metadata.
pub fn pendulum_dataset(spec: &PendulumSpec) -> Result<Dataset> {
    if !(spec.noise_std >= 0.0) {
        return Err(Error::contract(format!(
            "noise standard deviation must be non-negative, got {}",
            spec.noise_std
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::contract(e.to_string()))?;
    let width = PENDULUM_SIDE * PENDULUM_SIDE;
    let mut data = Vec::with_capacity(spec.count * width);
    let mut angles = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let angle = rand::Rng::random_range(&mut rng, 0.0..360.0);
        angles.push(angle);
        for v in pendulum_render(angle) {
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            data.push(v + n);
        }
    }
    Dataset::new(Tensor::new(&[spec.count, width], data)?, DataKind::Continuous)?
        .with_metadata("angle", angles)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images from an IDX file: count, rows, columns and raw bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format_at_offset(offset as u64, "file ends inside the header")
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::format_at_offset(
            0,
            format!("magic number {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let available = bytes.len() - header;
    if available < expected {
        return Err(Error::format_at_offset(
            bytes.len() as u64,
            format!("truncated payload: {available} bytes, expected {expected}"),
        ));
    }
    if available > expected {
        return Err(Error::format_at_offset(
            (header + expected) as u64,
            format!("{} trailing bytes", available - expected),
        ));
    }
    Ok(())
}

/// Parses an IDX image file (`ubyte`, rank 3).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    check_payload(bytes, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

/// Parses an IDX label file (`ubyte`, rank 1).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Image and label file names of the MNIST training split.
pub const MNIST_TRAIN_FILES: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
/// Image and label file names of the MNIST test split.
pub const MNIST_TEST_FILES: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");

/// Default binarisation threshold for MNIST intensities scaled to `[0, 1]`.
pub const MNIST_THRESHOLD: f64 = 0.5;
/// Size of the training split; the remaining images of the training file
/// are held out for validation.
pub const MNIST_TRAIN_SPLIT: usize = 50_000;

/// Loads an IDX image/label pair, scales pixels to `[0, 1]` and binarises
/// them at `threshold` (pixel ≥ threshold maps to 1). `None` keeps the
/// scaled intensities as continuous data.
pub fn mnist_load(image_path: &Path, label_path: &Path, threshold: Option<f64>) -> Result<Dataset> {
    let images = parse_idx_images(&read_all(image_path)?)?;
    let labels = parse_idx_labels(&read_all(label_path)?)?;
    mnist_from_parts(&images, &labels, threshold)
}

pub fn mnist_from_parts(images: &IdxImages, labels: &[u8], threshold: Option<f64>) -> Result<Dataset> {
    if labels.len() != images.count {
        return Err(Error::Format {
            location: "label file".into(),
            detail: format!("{} labels for {} images", labels.len(), images.count),
        });
    }
    let width = (images.rows * images.cols).max(1);
    let data: Vec<f64> = images
        .pixels
        .iter()
        .map(|&p| {
            let v = p as f64 / 255.0;
            match threshold {
                Some(t) => f64::from(u8::from(v >= t)),
                None => v,
            }
        })
        .collect();
    let kind = if threshold.is_some() {
        DataKind::Binary
    } else {
        DataKind::Continuous
    };
    let samples = if images.count == 0 {
        Tensor::empty_rows(width)
    } else {
        Tensor::new(&[images.count, width], data)?
    };
    Dataset::new(samples, kind)?.with_metadata("label", labels.iter().map(|&l| l as f64).collect())
}

/// Delimited-text layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvOptions {
    pub delimiter: u8,
    /// Column kept as metadata instead of data, by header name.
    pub metadata_column: Option<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            metadata_column: None,
        }
    }
}

fn parse_row(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record.iter().map(|c| c.trim().parse::<f64>().ok()).collect()
}

/// Reads a rectangular numeric table, one sample per row. A first row that
/// does not parse as numbers is taken as a header.
pub fn csv_load(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(options.delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(csv_error)?;
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let parsed = parse_row(&record);
        match parsed {
            None if i == 0 => {
                header = Some(record.iter().map(|c| c.trim().to_string()).collect());
                width = Some(record.len());
            }
            None => {
                let bad = record
                    .iter()
                    .find(|c| c.trim().parse::<f64>().is_err())
                    .unwrap_or_default();
                return Err(Error::format_at_line(line, format!("non-numeric cell {bad:?}")));
            }
            Some(values) => {
                let w = *width.get_or_insert(values.len());
                if values.len() != w {
                    return Err(Error::format_at_line(
                        line,
                        format!("{} fields, expected {w}", values.len()),
                    ));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                    return Err(Error::format_at_line(line, format!("non-finite value {v}")));
                }
                rows.push(values);
            }
        }
    }

    let meta_idx = match (&options.metadata_column, &header) {
        (None, _) => None,
        (Some(name), Some(h)) => Some(h.iter().position(|c| c == name).ok_or_else(|| Error::Format {
            location: path.display().to_string(),
            detail: format!("no column named {name:?}"),
        })?),
        (Some(name), None) => {
            return Err(Error::Format {
                location: path.display().to_string(),
                detail: format!("metadata column {name:?} requested but the file has no header"),
            })
        }
    };

    let total = width.unwrap_or(0);
    let data_width = total - usize::from(meta_idx.is_some());
    if data_width == 0 {
        return Err(Error::Format {
            location: path.display().to_string(),
            detail: "no data columns".into(),
        });
    }
    let mut data = Vec::with_capacity(rows.len() * data_width);
    let mut meta = Vec::new();
    for r in &rows {
        for (j, &v) in r.iter().enumerate() {
            if Some(j) == meta_idx {
                meta.push(v);
            } else {
                data.push(v);
            }
        }
    }
    let samples = if rows.is_empty() {
        Tensor::empty_rows(data_width)
    } else {
        Tensor::new(&[rows.len(), data_width], data)?
    };
    let ds = Dataset::new(samples, DataKind::Continuous)?;
    match (meta_idx, &header) {
        (Some(j), Some(h)) => ds.with_metadata(&h[j], meta),
        _ => Ok(ds),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let location = e
        .position()
        .map_or_else(|| "csv".to_string(), |p| format!("line {}", p.line()));
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            location,
            detail: format!("{other:?}"),
        },
    }
}

/// Writes the samples with a header `x0,x1,..` and, if present, the metadata
/// as a final column.
pub fn csv_save(dataset: &Dataset, path: &Path, delimiter: u8) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(file);
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    if let Some(m) = dataset.metadata() {
        header.push(m.name.clone());
    }
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(m) = dataset.metadata() {
            rec.push(format!("{:?}", m.values[i]));
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a plain numeric table with a header.
pub fn write_table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:?}"))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded mini-batch order: one fresh permutation per epoch, the final short
/// batch dropped. Every batch is a pure function of `(seed, epoch, index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::contract(format!("batch size must be at least 2, got {batch_size}")));
        }
        if len < batch_size {
            return Err(Error::contract(format!(
                "dataset of {len} samples is smaller than one batch of {batch_size}"
            )));
        }
        Ok(BatchSchedule {
            len,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// The batches of one epoch.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks_exact(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Indices used at global step `t` (0-based).
    pub fn batch_for_step(&self, t: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, k) = (t / per, (t % per) as usize);
        let perm = self.permutation(epoch);
        perm[k * self.batch_size..(k + 1) * self.batch_size].to_vec()
    }
}

/// Batches of one epoch of a dataset with `len` samples.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    Ok(BatchSchedule::new(len, batch_size, seed)?.epoch(epoch))
}
