//! LIBSVM text format: `label idx:val idx:val ...`, one sample per line,
//! 1-based strictly increasing feature indices.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::DataError;

/// Binary-labelled samples in compressed sparse row layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    num_features: usize,
    labels: Vec<f64>,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Dataset {
    /// Build from `(label, [(0-based index, value)])` rows.
    pub fn from_rows(num_features: usize, rows: &[(f64, Vec<(usize, f64)>)]) -> Result<Self, DataError> {
        let mut ds = Dataset {
            num_features,
            offsets: vec![0],
            ..Default::default()
        };
        for (label, feats) in rows {
            if *label != 1.0 && *label != -1.0 {
                return Err(DataError::Invalid(format!("label {label} is not ±1")));
            }
            for w in feats.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(DataError::Invalid("feature indices must increase".into()));
                }
            }
            for &(j, v) in feats {
                if j >= num_features {
                    return Err(DataError::Invalid(format!("feature index {} out of range", j + 1)));
                }
                ds.indices.push(j as u32);
                ds.values.push(v);
            }
            ds.labels.push(*label);
            ds.offsets.push(ds.indices.len());
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Sparse row `i` as (0-based indices, values).
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// `d_iᵀ x`.
    pub fn dot(&self, i: usize, x: &DVector<f64>) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| v * x[j as usize]).sum()
    }

    /// `out += scale * d_i`.
    pub fn axpy(&self, i: usize, scale: f64, out: &mut DVector<f64>) {
        let (idx, val) = self.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            out[j as usize] += scale * v;
        }
    }

    /// Dense feature vector of sample `i`.
    pub fn dense_row(&self, i: usize) -> DVector<f64> {
        let mut d = DVector::zeros(self.num_features);
        self.axpy(i, 1.0, &mut d);
        d
    }

    /// Dense `N x n` matrix with one sample per row.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.len(), self.num_features);
        for i in 0..self.len() {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                m[(i, j as usize)] = v;
            }
        }
        m
    }

    /// Sparse triples `(sample, 1-based feature, value)` in storage order.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        (0..self.len())
            .flat_map(|i| {
                let (idx, val) = self.row(i);
                idx.iter()
                    .zip(val)
                    .map(move |(&j, &v)| (i, j as usize + 1, v))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Serialize back to LIBSVM text.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            out.push_str(if self.labels[i] > 0.0 { "+1" } else { "-1" });
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                let _ = write!(out, " {}:{}", j + 1, v);
            }
            out.push('\n');
        }
        out
    }
}

/// Parse LIBSVM text. `num_features` overrides the inferred dimension
/// (the largest index seen) and must not be smaller than it.
///
/// Labels are mapped to their sign with `0` treated as negative, so both
/// `{-1, +1}` and `{0, 1}` conventions are accepted.
pub fn parse_libsvm<R: BufRead>(reader: R, num_features: Option<usize>) -> Result<Dataset, DataError> {
    let mut rows = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok.parse().map_err(|_| DataError::Parse {
            line: lineno,
            msg: format!("bad label {label_tok:?}"),
        })?;
        if !label.is_finite() {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("bad label {label_tok:?}"),
            });
        }
        let label = if label > 0.0 { 1.0 } else { -1.0 };
        let mut feats: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| DataError::Parse {
                line: lineno,
                msg: format!("malformed token {tok:?}"),
            })?;
            let idx: usize = i.parse().map_err(|_| DataError::Parse {
                line: lineno,
                msg: format!("bad index in {tok:?}"),
            })?;
            let val: f64 = v.parse().map_err(|_| DataError::Parse {
                line: lineno,
                msg: format!("bad value in {tok:?}"),
            })?;
            if idx == 0 {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: "feature index 0 (indices are 1-based)".into(),
                });
            }
            if let Some(&(prev, _)) = feats.last() {
                if idx - 1 <= prev {
                    return Err(DataError::Parse {
                        line: lineno,
                        msg: format!("index {idx} does not increase"),
                    });
                }
            }
            max_index = max_index.max(idx);
            feats.push((idx - 1, val));
        }
        rows.push((label, feats));
    }
    let n = match num_features {
        Some(n) if n < max_index => {
            return Err(DataError::Invalid(format!(
                "feature override {n} is smaller than the largest index {max_index}"
            )))
        }
        Some(n) => n,
        None => max_index,
    };
    Dataset::from_rows(n, &rows)
}

pub fn read_libsvm_file(path: &Path, num_features: Option<usize>) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    parse_libsvm(std::io::BufReader::new(f), num_features)
}
