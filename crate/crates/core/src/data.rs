//! Sparse labeled datasets.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::math;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid example {index}: {message}")]
    InvalidExample { index: usize, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// One row `a_i` in compressed form together with its label `b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    indices: Vec<usize>,
    values: Vec<f64>,
    label: f64,
}

impl SparseExample {
    /// Builds an example, checking that indices strictly increase, that the
    /// two arrays line up, that values are finite and that the label is ±1.
    pub fn new(indices: Vec<usize>, values: Vec<f64>, label: f64) -> Result<Self, String> {
        if indices.len() != values.len() {
            return Err(String::from("indices and values differ in length"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(String::from("indices are not strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(String::from("non-finite feature value"));
        }
        if label != 1.0 && label != -1.0 {
            return Err(String::from("label must be -1 or +1"));
        }
        Ok(Self { indices, values, label })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> f64 {
        self.label
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// `a_i · x`
    #[inline]
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&j, &v)| v * x[j])
            .sum()
    }

    /// `y += alpha * a_i`
    #[inline]
    pub fn axpy(&self, alpha: f64, y: &mut [f64]) {
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            y[j] += alpha * v;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        math::norm_sq(&self.values)
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; dim];
        self.axpy(1.0, &mut out);
        out
    }
}

/// Immutable collection of examples sharing one dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    examples: Vec<SparseExample>,
    dim: usize,
    bias_added: bool,
    normalized: bool,
}

impl SparseDataset {
    pub fn new(examples: Vec<SparseExample>, dim: usize) -> Result<Self, DataError> {
        if examples.is_empty() {
            return Err(DataError::Empty);
        }
        if dim == 0 {
            return Err(DataError::Parameter(String::from("dimension must be at least 1")));
        }
        for (index, ex) in examples.iter().enumerate() {
            if ex.indices.last().is_some_and(|&j| j >= dim) {
                return Err(DataError::InvalidExample {
                    index,
                    message: alloc::format!("feature index exceeds dimension {dim}"),
                });
            }
        }
        Ok(Self {
            examples,
            dim,
            bias_added: false,
            normalized: false,
        })
    }

    /// Builds a dataset from dense rows; zeros are dropped.
    pub fn from_dense(rows: &[Vec<f64>], labels: &[f64]) -> Result<Self, DataError> {
        if rows.len() != labels.len() {
            return Err(DataError::Parameter(String::from("rows and labels differ in length")));
        }
        let dim = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut examples = Vec::with_capacity(rows.len());
        for (index, (row, &label)) in rows.iter().zip(labels).enumerate() {
            let (indices, values) = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, v)| (j, *v))
                .unzip();
            let ex = SparseExample::new(indices, values, label)
                .map_err(|message| DataError::InvalidExample { index, message })?;
            examples.push(ex);
        }
        Self::new(examples, dim)
    }

    pub fn examples(&self) -> &[SparseExample] {
        &self.examples
    }

    #[inline]
    pub fn example(&self, i: usize) -> &SparseExample {
        &self.examples[i]
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.examples.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bias_added(&self) -> bool {
        self.bias_added
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn nnz(&self) -> usize {
        self.examples.iter().map(SparseExample::nnz).sum()
    }

    /// Scales every nonzero row to unit norm (when `normalize`) and then
    /// appends a constant feature of value 1 at position `d` (when
    /// `add_bias`). The bias column is never rescaled.
    pub fn preprocess(&self, add_bias: bool, normalize: bool) -> SparseDataset {
        let mut examples = self.examples.clone();
        if normalize {
            for ex in &mut examples {
                let norm = math::sqrt(ex.norm_sq());
                if norm > 0.0 {
                    ex.values.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        let mut dim = self.dim;
        if add_bias {
            for ex in &mut examples {
                ex.indices.push(dim);
                ex.values.push(1.0);
            }
            dim += 1;
        }
        SparseDataset {
            examples,
            dim,
            bias_added: self.bias_added || add_bias,
            normalized: self.normalized || normalize,
        }
    }

    /// Rows selected by `rows`, in that order. Flags and dimension carry over.
    pub fn subset(&self, rows: &[usize]) -> Result<SparseDataset, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(SparseDataset {
            examples: rows.iter().map(|&i| self.examples[i].clone()).collect(),
            dim: self.dim,
            bias_added: self.bias_added,
            normalized: self.normalized,
        })
    }

    /// Restores the preprocessing flags, e.g. after reading a file written
    /// from a preprocessed dataset.
    pub fn with_flags(mut self, bias_added: bool, normalized: bool) -> Self {
        self.bias_added = bias_added;
        self.normalized = normalized;
        self
    }
}

/// Synthetic binary problem plus the weight vector that generated it.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub dataset: SparseDataset,
    pub truth: Vec<f64>,
}

/// Standard deviation of the label noise used when `margin <= 0`.
pub const SYNTHETIC_LABEL_NOISE: f64 = 0.5;

/// Draws a dense Gaussian problem from the seeded data stream.
///
/// The hidden weight vector `w` has unit norm and rows are standard normal,
/// so `a_i · w` is standard normal too. With `margin > 0` the labels are
/// noise-free and every row violating `b_i a_i · w >= margin` is shifted
/// along `w` onto the margin, which makes the instance separable. Otherwise
/// labels are `sign(a_i · w + noise)`.
pub fn generate_synthetic_with_truth(
    n: usize,
    d: usize,
    margin: f64,
    seed: u64,
) -> Result<SyntheticProblem, DataError> {
    if n < 2 {
        return Err(DataError::Parameter(String::from("synthetic problems need n >= 2")));
    }
    if d < 1 {
        return Err(DataError::Parameter(String::from("synthetic problems need d >= 1")));
    }
    if !margin.is_finite() {
        return Err(DataError::Parameter(String::from("margin must be finite")));
    }
    let mut rng = rng::stream(seed, rng::DATA_STREAM);
    let mut truth: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = math::norm(&truth);
    if norm > 0.0 {
        truth.iter_mut().for_each(|w| *w /= norm);
    } else {
        truth[0] = 1.0;
    }
    let noise = Normal::new(0.0, SYNTHETIC_LABEL_NOISE).expect("valid noise scale");

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let score = math::dot(&row, &truth);
        let label = if margin > 0.0 {
            let label = if score >= 0.0 { 1.0 } else { -1.0 };
            let signed = label * score;
            if signed < margin {
                let shift = (margin - signed) * label;
                row.iter_mut().zip(&truth).for_each(|(a, w)| *a += shift * w);
            }
            label
        } else {
            let noisy = score + noise.sample(&mut rng);
            if noisy >= 0.0 {
                1.0
            } else {
                -1.0
            }
        };
        rows.push(row);
        labels.push(label);
    }
    // keep every coordinate present so d is exactly the requested dimension
    let examples = rows
        .into_iter()
        .zip(labels)
        .map(|(row, label)| SparseExample {
            indices: (0..d).collect(),
            values: row,
            label,
        })
        .collect();
    Ok(SyntheticProblem {
        dataset: SparseDataset::new(examples, d)?,
        truth,
    })
}

pub fn generate_synthetic(n: usize, d: usize, margin: f64, seed: u64) -> Result<SparseDataset, DataError> {
    generate_synthetic_with_truth(n, d, margin, seed).map(|p| p.dataset)
}

/// Seeded shuffle followed by a split. The test part receives
/// `round(n * test_fraction)` rows.
pub fn split(
    ds: &SparseDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(SparseDataset, SparseDataset), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Parameter(alloc::format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.n();
    let n_test = math::round(n as f64 * test_fraction) as usize;
    if n_test == 0 || n_test >= n {
        return Err(DataError::Parameter(alloc::format!(
            "test fraction {test_fraction} leaves an empty part for n = {n}"
        )));
    }
    let mut rng = rng::stream(seed, rng::SPLIT_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let test = ds.subset(&order[..n_test])?;
    let train = ds.subset(&order[n_test..])?;
    Ok((train, test))
}
