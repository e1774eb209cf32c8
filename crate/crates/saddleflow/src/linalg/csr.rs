use std::fmt;
use std::io::Write;

use crate::{Error, Result};

/// Sparse matrix in compressed-row storage.
///
/// Column indices are strictly increasing within each row and duplicate
/// entries are summed during construction.
#[derive(Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assemble from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for &(i, j, v) in &entries {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            if let (Some(&last_j), true) = (col_idx.last(), row_ptr[i + 1] > 0) {
                // Same row as the previous entry and same column: accumulate.
                if values.len() > row_ptr[i] && last_j == j && row_ptr[i + 1] == values.len() {
                    *values.last_mut().unwrap() += v;
                    continue;
                }
            }
            col_idx.push(j);
            values.push(v);
            row_ptr[i + 1] = values.len();
        }
        // row_ptr[i + 1] currently holds the end offset only for non-empty
        // rows; fill the gaps.
        for i in 0..nrows {
            if row_ptr[i + 1] < row_ptr[i] {
                row_ptr[i + 1] = row_ptr[i];
            }
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Entry lookup by binary search within the row.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    /// `y = A x`.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    /// `y += alpha * A^T x` (row-major traversal of `A`).
    pub fn tr_matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let xi = alpha * x[i];
            if xi == 0.0 {
                continue;
            }
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
    }

    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.tr_matvec_add(1.0, x, &mut y);
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for (i, j, v) in self.iter() {
            triplets.push((j, i, v));
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest |a_ij - a_ji| over the stored pattern; zero for a symmetric
    /// matrix up to roundoff.
    pub fn symmetry_error(&self) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let mut err: f64 = 0.0;
        for (i, j, v) in self.iter() {
            err = err.max((v - self.get(j, i)).abs());
        }
        err
    }

    /// `B diag(d) B^T` for a rectangular `B`; the result is symmetric with
    /// the sparsity of the pressure connectivity graph.
    pub fn bdbt(b: &CsrMatrix, d: &[f64]) -> CsrMatrix {
        assert_eq!(d.len(), b.ncols);
        let bt = b.transpose();
        let n = b.nrows;
        let mut acc = vec![0.0f64; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..n {
            let (cols, vals) = b.row(i);
            for (&u, &biu) in cols.iter().zip(vals) {
                let s = biu * d[u];
                let (pcols, pvals) = bt.row(u);
                for (&j, &bju) in pcols.iter().zip(pvals) {
                    if acc[j] == 0.0 && !touched.contains(&j) {
                        touched.push(j);
                    }
                    acc[j] += s * bju;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                triplets.push((i, j, acc[j]));
                acc[j] = 0.0;
            }
            touched.clear();
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }

    /// Write the coordinate text format: a `rows cols nnz` header, then one
    /// 0-based `i j value` record per line with round-trip decimals.
    pub fn write_triplet_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.iter() {
            writeln!(w, "{} {} {}", i, j, v)?;
        }
        Ok(())
    }

    /// Parse the coordinate text format written by [`write_triplet_text`].
    ///
    /// [`write_triplet_text`]: CsrMatrix::write_triplet_text
    pub fn read_triplet_text(text: &str) -> Result<CsrMatrix> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty triplet file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Config("bad header".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Config("triplet header must be `rows cols nnz`".into()));
        }
        let mut triplets = Vec::with_capacity(dims[2]);
        for line in lines {
            let mut it = line.split_whitespace();
            let (i, j, v) = (
                it.next().and_then(|t| t.parse::<usize>().ok()),
                it.next().and_then(|t| t.parse::<usize>().ok()),
                it.next().and_then(|t| t.parse::<f64>().ok()),
            );
            match (i, j, v) {
                (Some(i), Some(j), Some(v)) => triplets.push((i, j, v)),
                _ => return Err(Error::Config(format!("bad triplet record: {line}"))),
            }
        }
        if triplets.len() != dims[2] {
            return Err(Error::Config(format!(
                "triplet count {} does not match header nnz {}",
                triplets.len(),
                dims[2]
            )));
        }
        Ok(CsrMatrix::from_triplets(dims[0], dims[1], &triplets))
    }
}

impl fmt::Debug for CsrMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CsrMatrix({}x{}, nnz = {})",
            self.nrows,
            self.ncols,
            self.nnz()
        )
    }
}
