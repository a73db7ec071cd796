//! Deterministic toy-data generators and labeled-CSV ingestion.
//!
//! The reference task is the 2-D spiral (theta cos theta, theta sin theta)
//! for theta in [0, 3 pi], with classes as equal-width bins of theta. A small
//! Gaussian thickness keeps the support from being zero-measure for the
//! log-density probes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SPIRAL_THETA_MAX: f64 = 3.0 * core::f64::consts::PI;
pub const DEFAULT_NOISE_SCALE: f64 = 0.05;
pub const DEFAULT_CLASS_BINS: usize = 6;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Per-dimension standardization record; kept so generation-time samples can
/// be mapped back to data units.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Per-dimension mean and population standard deviation. Needs n >= 2;
    /// a zero-variance dimension is an error (it cannot be standardized).
    pub fn fit(points: &Tensor) -> Result<Self> {
        let (n, d) = points.dims2()?;
        if n < 2 {
            return Err(Error::Contract(format!("normalization fit needs n >= 2, got {n}")));
        }
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(points.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                let c = points.row(i)[j] - mean[j];
                var[j] += c * c;
            }
        }
        let mut scale = Vec::with_capacity(d);
        for (j, v) in var.iter().enumerate() {
            let s = libm::sqrt(v / n as f64);
            if s < 1e-12 {
                return Err(Error::Contract(format!("zero variance in dimension {j}")));
            }
            scale.push(s);
        }
        Ok(Normalization { mean, scale })
    }

    pub fn apply(&self, points: &Tensor) -> Result<Tensor> {
        let (n, d) = points.dims2()?;
        if d != self.mean.len() {
            return Err(Error::Dim(format!(
                "normalization is {}-dimensional, data is {d}-dimensional",
                self.mean.len()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push((points.row(i)[j] - self.mean[j]) / self.scale[j]);
            }
        }
        Tensor::new(vec![n, d], data)
    }

    pub fn invert(&self, points: &Tensor) -> Result<Tensor> {
        let (n, d) = points.dims2()?;
        if d != self.mean.len() {
            return Err(Error::Dim(format!(
                "normalization is {}-dimensional, data is {d}-dimensional",
                self.mean.len()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(points.row(i)[j] * self.scale[j] + self.mean[j]);
            }
        }
        Tensor::new(vec![n, d], data)
    }
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub normalization: Option<Normalization>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    /// Rows selected by index, keeping labels aligned.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::Contract(String::from("empty subset")));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.points.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|ls| indices.iter().map(|&i| ls[i]).collect());
        Ok(LabeledDataset {
            points: Tensor::new(vec![indices.len(), d], data)?,
            labels,
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        })
    }
}

/// Point on the noiseless spiral at parameter theta.
pub fn spiral_point(theta: f64) -> (f64, f64) {
    (theta * libm::cos(theta), theta * libm::sin(theta))
}

/// 2-D spiral dataset: theta uniform on [0, 3 pi], Gaussian thickness
/// noise_scale, labels = equal-width bins of theta.
pub fn swiss_roll(n: usize, noise_scale: f64, class_bins: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || class_bins == 0 {
        return Err(Error::Contract(format!(
            "swiss_roll needs n >= 1 and class_bins >= 1, got n = {n}, bins = {class_bins}"
        )));
    }
    let mut rng = Rng::derive(seed, "swiss", 0);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = rng.uniform() * SPIRAL_THETA_MAX;
        let (x, y) = spiral_point(theta);
        data.push(x + noise_scale * rng.normal());
        data.push(y + noise_scale * rng.normal());
        let bin = ((theta / SPIRAL_THETA_MAX) * class_bins as f64) as usize;
        labels.push(bin.min(class_bins - 1));
    }
    Ok(LabeledDataset {
        points: Tensor::new(vec![n, 2], data)?,
        labels: Some(labels),
        class_count: class_bins,
        normalization: None,
    })
}

/// Equal-weight isotropic Gaussian mixture; labels are component indices.
pub fn gaussian_mixture(n: usize, means: &[Vec<f64>], scale: f64, seed: u64) -> Result<LabeledDataset> {
    if means.is_empty() {
        return Err(Error::Contract(String::from("gaussian_mixture needs >= 1 component")));
    }
    if n == 0 {
        return Err(Error::Contract(String::from("gaussian_mixture needs n >= 1")));
    }
    let d = means[0].len();
    if means.iter().any(|m| m.len() != d) {
        return Err(Error::Dim(String::from("mixture means have mixed dimensions")));
    }
    let mut rng = Rng::derive(seed, "gmm", 0);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(means.len());
        for j in 0..d {
            data.push(means[k][j] + scale * rng.normal());
        }
        labels.push(k);
    }
    Ok(LabeledDataset {
        points: Tensor::new(vec![n, d], data)?,
        labels: Some(labels),
        class_count: means.len(),
        normalization: None,
    })
}

/// Parse CSV text: header row, numeric feature columns, optionally one
/// integer label column named `label_column`. Errors carry 1-based line
/// numbers.
pub fn parse_csv(text: &str, label_column: Option<&str>) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or(Error::Parse { line: 1, detail: String::from("empty file") })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = match label_column {
        Some(name) => Some(columns.iter().position(|c| *c == name).ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("label column '{name}' not found in header"),
        })?),
        None => None,
    };
    let d = columns.len() - label_idx.map(|_| 1).unwrap_or(0);
    if d == 0 {
        return Err(Error::Parse { line: 1, detail: String::from("no feature columns") });
    }

    let mut data: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut rows = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("expected {} cells, found {}", columns.len(), cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            if Some(j) == label_idx {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    detail: format!("label cell '{cell}' is not numeric"),
                })?;
                if v < 0.0 || libm::floor(v) != v {
                    return Err(Error::Parse {
                        line: lineno,
                        detail: format!("label cell '{cell}' is not a non-negative integer"),
                    });
                }
                labels.push(v as usize);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    detail: format!("cell '{cell}' in column '{}' is not numeric", columns[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: lineno,
                        detail: format!("cell '{cell}' is not finite"),
                    });
                }
                data.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { line: 1, detail: String::from("no data rows after header") });
    }
    let class_count = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    Ok(LabeledDataset {
        points: Tensor::new(vec![rows, d], data)?,
        labels: label_idx.map(|_| labels),
        class_count,
        normalization: None,
    })
}

/// Render a dataset in the same format `parse_csv` reads (header x0..x{d-1}
/// plus optional trailing label column).
pub fn render_csv(ds: &LabeledDataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    for j in 0..d {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("x{j}"));
    }
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        for (j, v) in ds.points.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        if let Some(labels) = &ds.labels {
            out.push(',');
            out.push_str(&labels[i].to_string());
        }
        out.push('\n');
    }
    out
}

/// Standardize the dataset in place and record the transform on it.
pub fn fit_normalize(ds: &mut LabeledDataset) -> Result<Normalization> {
    let record = Normalization::fit(&ds.points)?;
    ds.points = record.apply(&ds.points)?;
    ds.normalization = Some(record.clone());
    Ok(record)
}

/// Apply a previously fitted record (e.g. the training-split record to a
/// validation split — deliberately not refit, so there is no leakage).
pub fn apply_normalize(ds: &mut LabeledDataset, record: &Normalization) -> Result<()> {
    ds.points = record.apply(&ds.points)?;
    ds.normalization = Some(record.clone());
    Ok(())
}

/// Seeded-shuffle split; `val_fraction` of rows go to the second dataset.
pub fn train_val_split(
    ds: &LabeledDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Contract(format!("val_fraction {val_fraction} outside [0,1)")));
    }
    let n = ds.len();
    let n_val = ((n as f64) * val_fraction) as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Contract(format!(
            "split of {n} rows at fraction {val_fraction} leaves an empty side"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    Rng::derive(seed, "split", 0).shuffle(&mut indices);
    let val = ds.subset(&indices[..n_val])?;
    let train = ds.subset(&indices[n_val..])?;
    Ok((train, val))
}
