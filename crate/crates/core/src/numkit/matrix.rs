use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RngStream;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Argument(format!(
                    "row {i} has length {} but row 0 has {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Row vector (1×n).
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.normal())
    }

    /// Entries drawn i.i.d. from U(-bound, bound).
    pub fn random_uniform(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(rows, cols, |_, _| bound * (2.0 * rng.uniform() - 1.0))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; the natural product for row-major activations against `(out × in)` weights.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// ‖self − other‖_F / ‖other‖_F (absolute when `other` is zero).
    pub fn relative_error(&self, reference: &Self) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let denom = reference.frobenius_norm();
        Ok(if denom == 0.0 { diff } else { diff / denom })
    }

    /// Mean of the rows (1×cols).
    pub fn mean_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::Argument(format!(
                "column slice {start}..{end} out of range for {} columns",
                self.cols
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Selected columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self.get(r, cols[c]))
    }

    /// Selected rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::Shape {
                op: "hstack",
                left: (rows, 0),
                right: p.shape(),
            });
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(p) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::Shape {
                op: "vstack",
                left: (0, cols),
                right: p.shape(),
            });
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    /// `self · diag(d)`: scales column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.cols {
            return Err(Error::Shape {
                op: "scale_cols",
                left: self.shape(),
                right: (d.len(), d.len()),
            });
        }
        Ok(Self::from_fn(self.rows, self.cols, |r, c| self.get(r, c) * d[c]))
    }

    /// `diag(d) · self`: scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.rows {
            return Err(Error::Shape {
                op: "scale_rows",
                left: self.shape(),
                right: (d.len(), d.len()),
            });
        }
        Ok(Self::from_fn(self.rows, self.cols, |r, c| self.get(r, c) * d[r]))
    }

    /// Largest |Sᵢⱼ − Sⱼᵢ|; zero for symmetric matrices.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

#[inline]
/// Inner product with four independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_non_finite() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn products_agree() {
        let mut rng = RngStream::new(1);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&a.matmul_nt(&b).unwrap()).unwrap() < 1e-14);
        let c = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let tn = a.matmul_tn(&c).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().matmul(&c).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn stacking() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let h = Matrix::hstack(&[a.clone(), a.slice_cols(0, 1).unwrap()]).unwrap();
        assert_eq!(h.row(1), &[3.0, 4.0, 3.0]);
        let v = Matrix::vstack(&[a.clone(), a]).unwrap();
        assert_eq!(v.shape(), (4, 2));
    }
}
