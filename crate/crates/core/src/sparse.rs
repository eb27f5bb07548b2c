//! Compressed sparse row matrices and the triplet text format.

use crate::error::{CoreError, Result};
use nalgebra::DMatrix;
use std::io::{BufRead, Write};
use std::path::Path;

/// Accumulates (row, col, value) entries; duplicates are summed on build.
pub struct CooBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl CooBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        CooBuilder {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row as u32, col as u32, value));
    }

    /// Push value at (row, col) and (col, row); the diagonal only once.
    pub fn push_sym(&mut self, row: usize, col: usize, value: f64) {
        self.push(row, col, value);
        if row != col {
            self.push(col, row, value);
        }
    }

    pub fn build(mut self) -> Csr {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut rowptr = vec![0u32; self.nrows + 1];
        let mut colidx = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut last = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                colidx.push(c);
                values.push(v);
                rowptr[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.nrows {
            rowptr[i + 1] += rowptr[i];
        }
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            rowptr,
            colidx,
            values,
        }
    }
}

/// General CSR matrix. Symmetric matrices store both triangles so that row
/// traversal sees the full pattern.
#[derive(Clone, Debug)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    rowptr: Vec<u32>,
    colidx: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.colidx.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.rowptr[i] as usize;
        let hi = self.rowptr[i + 1] as usize;
        self.colidx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            let lo = self.rowptr[i] as usize;
            let hi = self.rowptr[i + 1] as usize;
            let mut acc = 0.0;
            for (&c, &v) in self.colidx[lo..hi].iter().zip(&self.values[lo..hi]) {
                acc += v * x[c as usize];
            }
            y[i] = acc;
        }
    }

    /// x^T A x for symmetric use; works for any square A.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let mut acc = 0.0;
        for i in 0..self.nrows {
            let lo = self.rowptr[i] as usize;
            let hi = self.rowptr[i + 1] as usize;
            let mut row = 0.0;
            for (&c, &v) in self.colidx[lo..hi].iter().zip(&self.values[lo..hi]) {
                row += v * x[c as usize];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// C = A * B for dense B (column-major), C preallocated nrows x B.ncols.
    pub fn mul_dense(&self, b: &DMatrix<f64>, c: &mut DMatrix<f64>) {
        assert_eq!(b.nrows(), self.ncols);
        assert_eq!(c.nrows(), self.nrows);
        assert_eq!(c.ncols(), b.ncols());
        c.fill(0.0);
        for j in 0..b.ncols() {
            let bcol = b.column(j);
            let ccol = &mut c.column_mut(j);
            for i in 0..self.nrows {
                let lo = self.rowptr[i] as usize;
                let hi = self.rowptr[i + 1] as usize;
                let mut acc = 0.0;
                for (&cc, &v) in self.colidx[lo..hi].iter().zip(&self.values[lo..hi]) {
                    acc += v * bcol[cc as usize];
                }
                ccol[i] = acc;
            }
        }
    }

    /// C = A^T * B for dense B.
    pub fn mul_transpose_dense(&self, b: &DMatrix<f64>, c: &mut DMatrix<f64>) {
        assert_eq!(b.nrows(), self.nrows);
        assert_eq!(c.nrows(), self.ncols);
        assert_eq!(c.ncols(), b.ncols());
        c.fill(0.0);
        for j in 0..b.ncols() {
            let bcol = b.column(j);
            let mut ccol = c.column_mut(j);
            for i in 0..self.nrows {
                let lo = self.rowptr[i] as usize;
                let hi = self.rowptr[i + 1] as usize;
                let bi = bcol[i];
                if bi == 0.0 {
                    continue;
                }
                for (&cc, &v) in self.colidx[lo..hi].iter().zip(&self.values[lo..hi]) {
                    ccol[cc as usize] += v * bi;
                }
            }
        }
    }

    /// Submatrix at the given rows and columns, as CSR.
    /// `col_of[g]` must map global index g to Some(local col) or None.
    pub fn submatrix(&self, rows: &[usize], col_of: &[i32], ncols: usize) -> Csr {
        let mut rowptr = Vec::with_capacity(rows.len() + 1);
        let mut colidx = Vec::new();
        let mut values = Vec::new();
        rowptr.push(0u32);
        for &r in rows {
            let mut entries: Vec<(u32, f64)> = self
                .row(r)
                .filter_map(|(c, v)| {
                    let lc = col_of[c];
                    (lc >= 0).then(|| (lc as u32, v))
                })
                .collect();
            entries.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in entries {
                colidx.push(c);
                values.push(v);
            }
            rowptr.push(colidx.len() as u32);
        }
        Csr {
            nrows: rows.len(),
            ncols,
            rowptr,
            colidx,
            values,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            d[(i, j)] += v;
        }
        d
    }

    /// Largest absolute entry, 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes the triplet format: `coo <n> <nnz>` header, then one
    /// `row col value` line per stored entry of the upper triangle (i <= j).
    /// Requires a square symmetric matrix.
    pub fn write_triplets<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        assert_eq!(self.nrows, self.ncols, "triplet format stores square matrices");
        let upper: Vec<(usize, usize, f64)> = self.iter().filter(|&(i, j, _)| i <= j).collect();
        writeln!(w, "coo {} {}", self.nrows, upper.len())?;
        for (i, j, v) in upper {
            writeln!(w, "{} {} {}", i, j, v)?;
        }
        Ok(())
    }

    /// Reads the triplet format, mirroring off-diagonal entries.
    pub fn read_triplets<R: BufRead>(r: &mut R, path: &Path) -> Result<Csr> {
        let mut lines = r.lines().enumerate();
        let (ln, header) = lines
            .next()
            .ok_or_else(|| CoreError::parse(path, 1, "empty file"))?;
        let header = header.map_err(|e| CoreError::io(path, e))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("coo") {
            return Err(CoreError::parse(path, ln + 1, "expected `coo <n> <nnz>` header"));
        }
        let n: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| CoreError::parse(path, ln + 1, "bad dimension"))?;
        let nnz: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| CoreError::parse(path, ln + 1, "bad nnz"))?;
        let mut builder = CooBuilder::new(n, n);
        let mut seen = 0usize;
        for (ln, line) in lines {
            let line = line.map_err(|e| CoreError::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (i, j, v): (usize, usize, f64) = match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), Some(c)) => (
                    a.parse().map_err(|_| CoreError::parse(path, ln + 1, "bad row index"))?,
                    b.parse().map_err(|_| CoreError::parse(path, ln + 1, "bad col index"))?,
                    c.parse().map_err(|_| CoreError::parse(path, ln + 1, "bad value"))?,
                ),
                _ => return Err(CoreError::parse(path, ln + 1, "expected `row col value`")),
            };
            if i >= n || j >= n {
                return Err(CoreError::parse(path, ln + 1, format!("index out of range: ({i}, {j}) in {n}x{n}")));
            }
            builder.push_sym(i, j, v);
            seen += 1;
        }
        if seen != nnz {
            return Err(CoreError::parse(path, 1, format!("header says {nnz} entries, found {seen}")));
        }
        Ok(builder.build())
    }

    pub fn write_triplets_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_triplets(&mut buf).map_err(|e| CoreError::io(path, e))?;
        crate::pipeline::atomic_write(path, &buf)
    }

    pub fn read_triplets_file(path: &Path) -> Result<Csr> {
        let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        Csr::read_triplets(&mut std::io::BufReader::new(f), path)
    }
}
