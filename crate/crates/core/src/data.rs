//! Datasets: synthetic spirals plus CSV and IDX ingestion.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    split: Split,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, split: Split, num_classes: usize) -> Result<Self> {
        let (rows, _) = inputs.dims2()?;
        if rows != labels.len() {
            return Err(Error::Dimension(format!(
                "{rows} input rows, {} labels",
                labels.len()
            )));
        }
        if rows == 0 {
            return Err(Error::EmptyDataset("no examples".into()));
        }
        if num_classes < 2 {
            return Err(Error::Input("need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset { inputs, labels, split, num_classes })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Gathers rows `idx` into a mini-batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let x = Tensor::new(vec![idx.len(), d], data).expect("rows of equal width");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// One epoch of shuffled mini-batch index lists (last batch may be short).
    pub fn epoch_batches<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Interleaved spiral arms in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spiral {
    pub points: usize,
    pub classes: usize,
    /// Standard deviation of the angular jitter, in radians.
    pub noise: f64,
    /// Revolutions each arm makes from the center to the rim.
    pub turns: f64,
    /// Radius of the rim.
    #[serde(default = "unit")]
    pub radius: f64,
}

fn unit() -> f64 {
    1.0
}

impl Spiral {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.classes < 2 {
            return Err(Error::Input("spiral needs at least two arms".into()));
        }
        if self.points == 0 {
            return Err(Error::EmptyDataset("spiral with zero points".into()));
        }
        if !(self.noise >= 0.0) || !self.turns.is_finite() || !(self.radius > 0.0) {
            return Err(Error::Input(
                "spiral noise and turns must be finite, noise >= 0, radius > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.classes;
        let mut data = Vec::with_capacity(self.points * 2);
        let mut labels = Vec::with_capacity(self.points);
        for class in 0..k {
            let count = self.points / k + usize::from(class < self.points % k);
            for _ in 0..count {
                let t: f64 = rng.random();
                let jitter: f64 = StandardNormal.sample(&mut rng);
                let angle = 2.0 * PI * (class as f64 / k as f64 + t * self.turns)
                    + self.noise * jitter;
                data.push(self.radius * t * angle.cos());
                data.push(self.radius * t * angle.sin());
                labels.push(class);
            }
        }
        Dataset::new(Tensor::new(vec![labels.len(), 2], data)?, labels, Split::Train, k)
    }
}

/// `n_points` spiral samples over `classes` arms, one revolution per arm.
pub fn gen_spiral(seed: u64, n_points: usize, classes: usize, noise: f64) -> Result<Dataset> {
    Spiral { points: n_points, classes, noise, turns: 1.0, radius: 1.0 }.generate(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// Per-column min–max to `[0, 1]`; constant columns map to 0.
    #[default]
    MinMax,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Zero-based column holding the integer class label.
    pub label_column: usize,
    pub has_header: bool,
    /// Inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub scaling: Scaling,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { label_column: 0, has_header: false, num_classes: None, scaling: Scaling::MinMax }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, schema)
}

fn parse_csv(text: &str, path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.into(), line, msg };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() <= schema.label_column {
            return Err(parse_err(line, format!("no label column {}", schema.label_column)));
        }
        let features = record.len() - 1;
        match width {
            None if features == 0 => return Err(parse_err(line, "row has no features".into())),
            None => width = Some(features),
            Some(w) if w != features => {
                return Err(parse_err(line, format!("expected {w} features, found {features}")))
            }
            Some(_) => {}
        }
        for (col, field) in record.iter().enumerate() {
            if col == schema.label_column {
                let label = field
                    .parse::<usize>()
                    .map_err(|_| parse_err(line, format!("bad label `{field}`")))?;
                labels.push(label);
            } else {
                let v = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad value `{field}` in column {col}")))?;
                data.push(v);
            }
        }
    }
    let Some(width) = width else {
        return Err(Error::EmptyDataset(path.display().to_string()));
    };
    if schema.scaling == Scaling::MinMax {
        min_max_columns(&mut data, width);
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let num_classes = schema.num_classes.unwrap_or((max_label + 1).max(2));
    if max_label >= num_classes {
        return Err(Error::Input(format!(
            "{}: label {max_label} outside 0..{num_classes}",
            path.display()
        )));
    }
    let rows = labels.len();
    Dataset::new(Tensor::new(vec![rows, width], data)?, labels, Split::Train, num_classes)
}

fn min_max_columns(data: &mut [f64], width: usize) {
    for col in 0..width {
        let column = data.iter().skip(col).step_by(width);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for v in data.iter_mut().skip(col).step_by(width) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

const IDX_UBYTE: u8 = 0x08;

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |msg: String| Error::Format { path: path.into(), msg };
    if bytes.len() < 4 {
        return Err(fmt_err("truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE {
        return Err(fmt_err(format!(
            "bad magic number {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(fmt_err("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match count {
        Some(n) if bytes.len() - header == n => Ok((dims, bytes[header..].to_vec())),
        _ => Err(fmt_err(format!(
            "payload of {} bytes does not match dimensions {dims:?}",
            bytes.len() - header
        ))),
    }
}

/// Loads an unsigned-byte IDX image file and its label file; pixels scale to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images)?;
    let (ldims, raw_labels) = read_idx(labels)?;
    if ldims.len() != 1 {
        return Err(Error::Format { path: labels.into(), msg: "labels must be one-dimensional".into() });
    }
    let rows = dims[0];
    if rows == 0 {
        return Err(Error::EmptyDataset(images.display().to_string()));
    }
    if ldims[0] != rows {
        return Err(Error::Dimension(format!("{rows} images, {} labels", ldims[0])));
    }
    let width = pixels.len() / rows;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Tensor::new(vec![rows, width.max(1)], data)?, labels, Split::Train, num_classes)
}
