//! Column-major design storage shared by the fitting engines.

use ndarray::{Array2, ArrayView2, ShapeBuilder};

use crate::error::{Result, SurfError};

/// Dense `n x p` matrix stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMatrix {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl ColumnMatrix {
    pub fn from_view(x: ArrayView2<f64>) -> Self {
        let (n, p) = x.dim();
        let mut data = Vec::with_capacity(n * p);
        for col in x.columns() {
            data.extend(col.iter().copied());
        }
        ColumnMatrix { n, p, data }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(n * columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != n {
                return Err(SurfError::DimensionMismatch(format!(
                    "column {j} has {} rows, expected {n}",
                    c.len()
                )));
            }
            data.extend_from_slice(c);
        }
        Ok(ColumnMatrix {
            n,
            p: columns.len(),
            data,
        })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.p).map(move |j| self.col(j))
    }

    pub fn select_rows(&self, rows: &[usize]) -> ColumnMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.p);
        for j in 0..self.p {
            let c = self.col(j);
            data.extend(rows.iter().map(|&i| c[i]));
        }
        ColumnMatrix {
            n: rows.len(),
            p: self.p,
            data,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> ColumnMatrix {
        let mut data = Vec::with_capacity(self.n * cols.len());
        for &j in cols {
            data.extend_from_slice(self.col(j));
        }
        ColumnMatrix {
            n: self.n,
            p: cols.len(),
            data,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for j in 0..self.p {
            if let Some(i) = self.col(j).iter().position(|v| !v.is_finite()) {
                return Err(SurfError::NonFinite(format!("design row {i}, column {j}")));
            }
        }
        Ok(())
    }

    /// Subtracts each column's mean in place and returns the means.
    pub fn center(&mut self) -> Vec<f64> {
        let n = self.n as f64;
        let means: Vec<f64> = self.columns().map(|c| c.iter().sum::<f64>() / n).collect();
        self.subtract(&means);
        means
    }

    /// Subtracts `shift[j]` from column `j`.
    pub fn subtract(&mut self, shift: &[f64]) {
        assert_eq!(shift.len(), self.p, "one shift per column");
        for (j, &m) in shift.iter().enumerate() {
            self.data[j * self.n..(j + 1) * self.n]
                .iter_mut()
                .for_each(|v| *v -= m);
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.n, self.p).f(), self.data.clone())
            .expect("shape matches storage")
    }
}
