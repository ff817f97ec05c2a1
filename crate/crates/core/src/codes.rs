//! Codeword matrices for output coding.
//!
//! Class `k` is represented by row `C_k` of an `M x N` matrix. Hadamard-derived
//! matrices take `±1` entries and are built with the Sylvester recursion
//! `H(p+1) = [[H, H], [H, -H]]`; the one-hot variant is the `M x M` identity.
//! Entries are stored as `i8` so distance computations stay exact.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Largest Sylvester exponent accepted (`2^14 x 2^14` entries, 256 MiB as `i8`).
pub const MAX_HADAMARD_EXPONENT: u32 = 14;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodesError {
    #[error("hadamard exponent {0} exceeds the limit of {MAX_HADAMARD_EXPONENT}")]
    TooLarge(u32),
    #[error("codeword length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("class count {classes} exceeds codeword length {length}")]
    TooManyClasses { classes: usize, length: usize },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("invalid codeword matrix: {0}")]
    Invalid(String),
}

/// How a [`CodewordMatrix`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeKind {
    /// Rows of a Sylvester-Hadamard matrix, entries in `{-1, +1}`.
    Hadamard,
    /// The identity matrix, entries in `{0, 1}`.
    OneHot,
    /// Caller-provided rows.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodewordMatrix {
    kind: CodeKind,
    classes: usize,
    length: usize,
    entries: Vec<i8>,
}

impl CodewordMatrix {
    /// Builds a matrix from explicit `±1` rows.
    ///
    /// Rows must share one length `N >= M` and be pairwise distinct.
    pub fn from_rows(rows: Vec<Vec<i8>>) -> Result<Self, CodesError> {
        let matrix = Self::from_rows_unchecked(CodeKind::Custom, rows)?;
        if matrix.entries.iter().any(|&e| e != 1 && e != -1) {
            return Err(CodesError::Invalid("entries must be -1 or +1".into()));
        }
        if matrix.length < matrix.classes {
            return Err(CodesError::TooManyClasses {
                classes: matrix.classes,
                length: matrix.length,
            });
        }
        if matrix.classes >= 2 && matrix.min_hamming_distance() == 0 {
            return Err(CodesError::Invalid("rows must be pairwise distinct".into()));
        }
        Ok(matrix)
    }

    /// Builds a matrix without checking entry values or row distinctness.
    /// Only the rectangular shape is enforced.
    pub fn from_rows_unchecked(kind: CodeKind, rows: Vec<Vec<i8>>) -> Result<Self, CodesError> {
        let classes = rows.len();
        if classes == 0 {
            return Err(CodesError::Invalid("no rows".into()));
        }
        let length = rows[0].len();
        if length == 0 || rows.iter().any(|r| r.len() != length) {
            return Err(CodesError::Invalid("rows must be non-empty and of equal length".into()));
        }
        Ok(Self {
            kind,
            classes,
            length,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn is_one_hot(&self) -> bool {
        self.kind == CodeKind::OneHot
    }

    /// Number of classes `M`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Codeword length `N`.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn row(&self, class: usize) -> &[i8] {
        &self.entries[class * self.length..(class + 1) * self.length]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[i8]> {
        self.entries.chunks(self.length)
    }

    pub fn entry(&self, class: usize, bit: usize) -> i8 {
        self.entries[class * self.length + bit]
    }

    pub fn row_f64(&self, class: usize) -> Vec<f64> {
        self.row(class).iter().map(|&e| f64::from(e)).collect()
    }

    /// Row-major `N x M` matrix `Cᵀ`, so `σ(z) · Cᵀ` yields all correlations.
    pub fn transposed_f64(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.length * self.classes];
        for k in 0..self.classes {
            for i in 0..self.length {
                out[i * self.classes + k] = f64::from(self.entry(k, i));
            }
        }
        out
    }

    /// Minimum over row pairs of the number of differing positions.
    pub fn min_hamming_distance(&self) -> usize {
        let mut best = usize::MAX;
        for a in 0..self.classes {
            for b in (a + 1)..self.classes {
                best = best.min(hamming(self.row(a), self.row(b)));
            }
        }
        if best == usize::MAX {
            0
        } else {
            best
        }
    }
}

impl fmt::Display for CodewordMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|e| format!("{e:>2}")).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

pub fn hamming(a: &[i8], b: &[i8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Sylvester-Hadamard matrix of order `2^p` as row vectors.
pub fn sylvester_hadamard(order_exponent: u32) -> Result<Vec<Vec<i8>>, CodesError> {
    if order_exponent > MAX_HADAMARD_EXPONENT {
        return Err(CodesError::TooLarge(order_exponent));
    }
    let mut h: Vec<Vec<i8>> = vec![vec![1]];
    for _ in 0..order_exponent {
        let size = h.len();
        let mut next = Vec::with_capacity(2 * size);
        for row in &h {
            let mut r = row.clone();
            r.extend_from_slice(row);
            next.push(r);
        }
        for row in &h {
            let mut r = row.clone();
            r.extend(row.iter().map(|&e| -e));
            next.push(r);
        }
        h = next;
    }
    Ok(h)
}

/// Selects `classes` rows of the `length x length` Sylvester-Hadamard matrix.
///
/// With `classes < length` the constant all-ones row 0 is skipped and rows
/// `1..=classes` are taken in natural order; otherwise the full matrix is used.
pub fn build_codeword_matrix(classes: usize, length: usize) -> Result<CodewordMatrix, CodesError> {
    if classes < 2 {
        return Err(CodesError::TooFewClasses(classes));
    }
    if !length.is_power_of_two() {
        return Err(CodesError::NotPowerOfTwo(length));
    }
    if classes > length {
        return Err(CodesError::TooManyClasses { classes, length });
    }
    let h = sylvester_hadamard(length.trailing_zeros())?;
    let skip = usize::from(classes < length);
    let rows = h.into_iter().skip(skip).take(classes).collect();
    CodewordMatrix::from_rows_unchecked(CodeKind::Hadamard, rows)
}

/// The `M x M` identity, flagged as one-hot.
pub fn one_hot_matrix(classes: usize) -> Result<CodewordMatrix, CodesError> {
    if classes < 2 {
        return Err(CodesError::TooFewClasses(classes));
    }
    let rows = (0..classes)
        .map(|k| (0..classes).map(|i| i8::from(i == k)).collect())
        .collect();
    CodewordMatrix::from_rows_unchecked(CodeKind::OneHot, rows)
}
