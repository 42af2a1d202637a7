//! Datasets: the synthetic Gaussian mixture benchmark, IDX (MNIST) files,
//! and the train/calibration/test split.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Feature matrix (row-major) with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::arg(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if labels.is_empty() {
            return Err(Error::arg("dataset must hold at least one sample"));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::arg(format!(
                "feature matrix holds {} values, expected {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::arg(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    /// Build from per-sample rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::arg(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::arg(format!("row {i} has width {}, expected {dim}", rows[i].len())));
        }
        Self::new(rows.concat(), labels, dim, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn check_indices(&self, idx: &[usize]) -> Result<()> {
        match idx.iter().find(|&&i| i >= self.len()) {
            Some(bad) => Err(Error::arg(format!(
                "index {bad} out of range for dataset of {} samples",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    /// Copy with the listed rows replaced. `rows[k]` replaces row `idx[k]`.
    pub(crate) fn with_replaced_rows(&self, idx: &[usize], rows: &[Vec<f64>]) -> Self {
        let mut out = self.clone();
        for (&i, row) in idx.iter().zip(rows) {
            out.features[i * self.dim..(i + 1) * self.dim].copy_from_slice(row);
        }
        out
    }
}

/// Index partition into training (`I1`), calibration (`I2`) and test (`I3`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.cal.len(), self.test.len())
    }
}

/// Class centres `sep` apart: a line for `dim = 1`, a circle for `dim = 2`,
/// the vertices of a regular simplex when `dim >= K - 1`, and a circle in the
/// first two coordinates otherwise.
pub fn class_means(num_classes: usize, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    let k = num_classes;
    let mut means = vec![vec![0.0; dim]; k];
    if dim == 1 {
        let centre = (k - 1) as f64 / 2.0;
        for (c, m) in means.iter_mut().enumerate() {
            m[0] = (c as f64 - centre) * sep;
        }
    } else if dim == 2 || dim < k - 1 {
        // adjacent vertices of a regular K-gon are 2 r sin(pi/K) apart
        let radius = sep / (2.0 * (PI / k as f64).sin());
        for (c, m) in means.iter_mut().enumerate() {
            let angle = 2.0 * PI * c as f64 / k as f64;
            m[0] = radius * angle.cos();
            m[1] = radius * angle.sin();
        }
    } else {
        // Coordinates of the basis vectors e_c in the Helmert basis of the
        // sum-zero subspace; pairwise distance sqrt(2) before scaling.
        let scale = sep / 2f64.sqrt();
        for (c, m) in means.iter_mut().enumerate() {
            for j in 1..k {
                let norm = ((j * (j + 1)) as f64).sqrt();
                let h = match c.cmp(&j) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => -(j as f64),
                    std::cmp::Ordering::Greater => 0.0,
                };
                m[j - 1] = scale * h / norm;
            }
        }
    }
    means
}

/// Isotropic unit-variance Gaussian mixture with balanced classes.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    n: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::arg(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if dim == 0 {
        return Err(Error::arg("dim must be >= 1"));
    }
    if n < num_classes {
        return Err(Error::arg(format!("n = {n} is smaller than num_classes = {num_classes}")));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::arg(format!(
            "class_separation must be positive, got {class_separation}"
        )));
    }

    let means = class_means(num_classes, dim, class_separation);
    let mut rng = seed::derived_rng(seed, &[seed::tag::DATA]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        for &mu in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + z);
        }
    }
    LabeledDataset::new(features, labels, dim, num_classes)
}

fn read_u32(bytes: &[u8], offset: usize) -> io::Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX header"))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated IDX {what}")),
    )
}

/// Decode an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0).map_err(|e| Error::io(path, e))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic 0x{IDX_LABEL_MAGIC:08x}, found 0x{magic:08x}",
            path.display()
        )));
    }
    let count = read_u32(bytes, 4).map_err(|e| Error::io(path, e))? as usize;
    let payload = bytes.get(8..8 + count).ok_or_else(|| truncated(path, "label payload"))?;
    Ok(payload.to_vec())
}

/// Decode an IDX image file (`0x00000803`) into flattened rows of bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0).map_err(|e| Error::io(path, e))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected image magic 0x{IDX_IMAGE_MAGIC:08x}, found 0x{magic:08x}",
            path.display()
        )));
    }
    let header = |k: usize| read_u32(bytes, 4 + 4 * k).map_err(|e| Error::io(path, e));
    let (count, rows, cols) = (header(0)? as usize, header(1)? as usize, header(2)? as usize);
    let width = rows * cols;
    let payload = bytes
        .get(16..16 + count * width)
        .ok_or_else(|| truncated(path, "image payload"))?;
    Ok((count, width, payload.to_vec()))
}

/// Load an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, width, pixels) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    if width == 0 {
        return Err(Error::Format(format!("{}: zero-sized images", images_path.display())));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let features = pixels.into_iter().map(|p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(features, labels, width, num_classes)
}

/// Write a dataset as an IDX pair of shape `n x 1 x dim`. Features are
/// clamped to `[0, 1]` and quantized to bytes; labels must fit in a byte.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.num_classes() > 256 {
        return Err(Error::arg("IDX labels are single bytes; at most 256 classes"));
    }
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.features().len());
    for word in [IDX_IMAGE_MAGIC, n, 1, ds.dim() as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    images.extend(ds.features().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(ds.labels().iter().map(|&y| y as u8));

    write_file(images_path, &images)?;
    write_file(labels_path, &labels)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Write `label,x0,x1,...` rows with a header line.
pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.label(i).to_string()];
        rec.extend(ds.row(i).iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read the format produced by [`write_csv`].
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| Error::Format(format!("{}: row {line}: bad {what}", path.display()));
        let mut fields = rec.iter();
        let y: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?;
        let row = fields
            .map(|s| s.parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        labels.push(y);
        rows.push(row);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)));
    LabeledDataset::from_rows(&rows, labels, k)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Split sizes: `floor(f_i * n)` each, leftovers to train then calibration.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::arg(format!("split fractions must be positive, got {fractions:?}")));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    let mut sizes = [a, b, c].map(|f| (f * n as f64).floor() as usize);
    let leftover = n - sizes.iter().sum::<usize>();
    for i in 0..leftover {
        sizes[i % 3] += 1;
    }
    Ok((sizes[0], sizes[1], sizes[2]))
}

/// Uniformly random (unstratified) three-way split.
pub fn split_dataset(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    let n = ds.len();
    let (n_train, n_cal, _) = split_sizes(n, fractions)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::derived_rng(seed, &[seed::tag::SPLIT]));
    let test = perm.split_off(n_train + n_cal);
    let cal = perm.split_off(n_train);
    Ok(SplitIndices {
        train: perm,
        cal,
        test,
    })
}
