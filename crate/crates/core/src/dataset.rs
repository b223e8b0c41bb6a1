//! Synthetic Gaussian blob classification data.
//!
//! Class means are the vertices of a centered regular simplex, spread across
//! a power-of-two block of coordinates by an orthonormal Hadamard mix. The
//! mix preserves pairwise distances while giving every coordinate in the
//! block the same share of the signal; coordinates outside the block carry
//! pure noise. Samples are isotropic Gaussians around the means, clipped to
//! the data box `[-1, 1]`.

use crate::error::{Error, Result};
use crate::rng::{compose, domains, RngStream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin.
    pub radius: f64,
    /// Isotropic noise standard deviation.
    pub sigma: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("blob_spec", "need at least 2 classes"));
        }
        if self.dim < self.num_classes {
            return Err(Error::invalid(
                "blob_spec",
                format!("dim {} < num_classes {}", self.dim, self.num_classes),
            ));
        }
        if !(self.radius > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::invalid("blob_spec", "radius and sigma must be positive"));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::invalid("blob_spec", "counts must be positive"));
        }
        Ok(())
    }
}

/// Feature matrix plus integer labels. Rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} features for {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {} outside {} classes", bad, num_classes),
            ));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copy of sample `i` as a `(d,)` tensor.
    pub fn sample(&self, i: usize) -> Tensor<f64> {
        Tensor::new(vec![self.dim()], self.features.row(i).to_vec()).expect("row shape")
    }

    /// Contiguous slice of samples as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::invalid(
                "dataset_slice",
                format!("[{}, {}) of {}", start, end, self.len()),
            ));
        }
        let d = self.dim();
        let data = self.features.data()[start * d..end * d].to_vec();
        LabeledDataset::new(
            Tensor::new(vec![end - start, d], data)?,
            self.labels[start..end].to_vec(),
            self.num_classes,
        )
    }

    /// Rows of several samples stacked into an `(n, d)` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f64>, Vec<usize>)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("dataset_gather", format!("index {}", i)));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), d], data)?, labels))
    }
}

/// Sylvester-Hadamard matrix of power-of-two order, entries +-1, row-major.
fn sylvester(order: usize) -> Vec<f64> {
    debug_assert!(order.is_power_of_two());
    let mut h = vec![1.0];
    let mut size = 1;
    while size < order {
        let next = size * 2;
        let mut out = vec![0.0; next * next];
        for i in 0..size {
            for j in 0..size {
                let v = h[i * size + j];
                out[i * next + j] = v;
                out[i * next + j + size] = v;
                out[(i + size) * next + j] = v;
                out[(i + size) * next + j + size] = -v;
            }
        }
        h = out;
        size = next;
    }
    h
}

/// Width of the Hadamard mixing block: the largest power of two that fits in
/// `dim`, capped at the smallest power of two covering `2 * classes` so that
/// some coordinates stay signal-free when the ambient dimension allows it.
/// Returns `None` (no mixing) when no admissible block covers the simplex.
fn mixing_block(num_classes: usize, dim: usize) -> Option<usize> {
    let fit = if dim.is_power_of_two() {
        dim
    } else {
        usize::pow(2, dim.ilog2())
    };
    let want = usize::max(2, (2 * num_classes).next_power_of_two());
    let block = fit.min(want);
    (block >= num_classes).then_some(block)
}

/// Class means: centered regular simplex at distance `radius` from the
/// origin, Hadamard-mixed over the leading block. Shape `(c, d)`.
pub fn class_means(num_classes: usize, dim: usize, radius: f64) -> Result<Tensor<f64>> {
    if num_classes < 2 || dim < num_classes || !(radius > 0.0) {
        return Err(Error::invalid(
            "class_means",
            format!("c = {}, d = {}, radius = {}", num_classes, dim, radius),
        ));
    }
    let c = num_classes;
    // Vertex i of the centered simplex: e_i - 1/c, rescaled to norm `radius`.
    let vertex_norm = (1.0 - 1.0 / c as f64).sqrt();
    let scale = radius / vertex_norm;
    let mut means = vec![0.0; c * dim];
    for i in 0..c {
        for j in 0..c {
            let v = if i == j { 1.0 - 1.0 / c as f64 } else { -1.0 / c as f64 };
            means[i * dim + j] = scale * v;
        }
    }
    if let Some(block) = mixing_block(c, dim) {
        let h = sylvester(block);
        let norm = (block as f64).sqrt();
        for i in 0..c {
            let row = &means[i * dim..i * dim + block].to_vec();
            for r in 0..block {
                let mut acc = 0.0;
                for j in 0..block {
                    acc += h[r * block + j] * row[j];
                }
                means[i * dim + r] = acc / norm;
            }
        }
    }
    Tensor::new(vec![c, dim], means)
}

/// Split ids for stream derivation; also used as CSV file stems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

fn gen_split(spec: &BlobSpec, means: &Tensor<f64>, seed: u64, split: Split, count: usize) -> LabeledDataset {
    let d = spec.dim;
    let mut data = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.num_classes;
        let mut stream = RngStream::new(seed, compose(&[domains::DATA, split.id(), i as u64]));
        let mean = means.row(label);
        for j in 0..d {
            let x = mean[j] + spec.sigma * stream.normal();
            data.push(x.clamp(-1.0, 1.0));
        }
        labels.push(label);
    }
    LabeledDataset {
        features: Tensor::new(vec![count, d], data).expect("count * d elements"),
        labels,
        num_classes: spec.num_classes,
    }
}

/// Generate the train/test splits. Labels cycle round-robin so any prefix of
/// a split is class-balanced; each sample draws from its own stream keyed by
/// `(seed, split, index)`.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let means = class_means(spec.num_classes, spec.dim, spec.radius)?;
    let train = gen_split(spec, &means, seed, Split::Train, spec.train_count);
    let test = gen_split(spec, &means, seed, Split::Test, spec.test_count);
    Ok((train, test))
}

/// Accuracy of classifying each sample by its nearest class mean.
pub fn nearest_mean_accuracy(ds: &LabeledDataset, means: &Tensor<f64>) -> f64 {
    let mut hits = 0usize;
    for i in 0..ds.len() {
        let row = ds.features.row(i);
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..means.shape()[0] {
            let dist: f64 = row
                .iter()
                .zip(means.row(c))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        if best.1 == ds.labels[i] {
            hits += 1;
        }
    }
    hits as f64 / ds.len() as f64
}

/// 17-significant-digit float format used by every CSV writer; round-trips
/// f64 exactly.
pub fn fmt_float(x: f64) -> String {
    format!("{:.16e}", x)
}

impl LabeledDataset {
    /// CSV layout: `sample_id,label,f0,...,f{d-1}`, one row per sample.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("sample_id,label");
        for j in 0..d {
            let _ = write!(out, ",f{}", j);
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", i, self.labels[i]);
            for &x in self.features.row(i) {
                let _ = write!(out, ",{}", fmt_float(x));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let bad = |detail: String| Error::CsvFormat {
            path: origin.to_string(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
            return Err(bad(format!("unexpected header {:?}", header)));
        }
        let d = cols.len() - 2;
        for (j, col) in cols[2..].iter().enumerate() {
            if *col != format!("f{}", j) {
                return Err(bad(format!("unexpected feature column {:?}", col)));
            }
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(bad(format!("row {} has {} fields", ln + 2, fields.len())));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| bad(format!("row {} bad sample_id", ln + 2)))?;
            if id != labels.len() {
                return Err(bad(format!("row {} out-of-order sample_id {}", ln + 2, id)));
            }
            let label: usize = fields[1]
                .parse()
                .map_err(|_| bad(format!("row {} bad label", ln + 2)))?;
            labels.push(label);
            for f in &fields[2..] {
                let x: f64 = f
                    .parse()
                    .map_err(|_| bad(format!("row {} bad float {:?}", ln + 2, f)))?;
                data.push(x);
            }
        }
        if labels.is_empty() {
            return Err(bad("no data rows".into()));
        }
        let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
        LabeledDataset::new(
            Tensor::new(vec![labels.len(), d], data)?,
            labels,
            num_classes,
        )
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}
