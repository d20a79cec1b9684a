use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
///
/// Every constructor and kernel rejects non-finite values, so a `Tensor` that
/// exists is always finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) {:?}", self.rows, self.cols, self.data)
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!("{what}: entry {i} is {}", data[i]))),
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from equal-length rows. An empty slice yields a 0x0 tensor.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(rows.len(), cols, data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    // Callers inside the crate guarantee shape and finiteness.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Writes one entry, rejecting non-finite values.
    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("set({r},{c}) = {value}")));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.data, what)
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn matmul(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        let (m, ka) = if trans_a {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (kb, n) = if trans_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions {ka} vs {kb}"
            )));
        }
        let k = ka;
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        match (trans_a, trans_b) {
            (false, false) => {
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            (false, true) => {
                // Transposing the right operand keeps the inner loop contiguous.
                let bt = other.transpose();
                let b = &bt.data;
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            (true, false) => {
                // a is k x m, b is k x n
                for p in 0..k {
                    let arow = &a[p * m..(p + 1) * m];
                    let brow = &b[p * n..(p + 1) * n];
                    for (i, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            (true, true) => {
                // a is k x m, b is n x k
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0;
                        for p in 0..k {
                            s += a[p * m + i] * b[j * k + p];
                        }
                        out[i * n + j] = s;
                    }
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Tensor::from_raw(m, n, out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        check_finite(&data, "add")?;
        Ok(Tensor::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        check_finite(&data, "sub")?;
        Ok(Tensor::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|a| a * c).collect();
        check_finite(&data, "scale")?;
        Ok(Tensor::from_raw(self.rows, self.cols, data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Softmax of each row, computed with max-subtraction.
    pub fn row_softmax(&self) -> Result<Tensor> {
        self.ensure_finite("row_softmax input")?;
        let mut out = self.data.clone();
        if self.cols > 0 {
            for row in out.chunks_mut(self.cols) {
                softmax_in_place(row);
            }
        }
        Ok(Tensor::from_raw(self.rows, self.cols, out))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks `self` on top of `other`. A 0-row operand adopts the other's width.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let cols = if self.rows == 0 {
            other.cols
        } else if other.rows == 0 || self.cols == other.cols {
            self.cols
        } else {
            return Err(Error::Shape(format!(
                "concat {} vs {} columns",
                self.cols, other.cols
            )));
        };
        let mut data = Vec::with_capacity((self.rows + other.rows) * cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor::from_raw(self.rows + other.rows, cols, data))
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_raw(self.cols, self.rows, out)
    }

    /// Copies the listed rows into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::Range(format!("row {r} of {}", self.rows)));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Tensor::from_raw(rows.len(), self.cols, data))
    }
}

/// Numerically stable in-place softmax of a slice. Empty slices are left alone.
pub fn softmax_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_all_transpose_variants_agree() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0, 0.5], [-1.0, 2.0], [0.0, 3.0]]).unwrap();
        let nn = a.matmul(&b, false, false).unwrap();
        assert_eq!(nn.as_slice(), &[-1.0, 13.5, -1.0, 30.0]);
        let at = a.transpose();
        let bt = b.transpose();
        assert_eq!(at.matmul(&b, true, false).unwrap(), nn);
        assert_eq!(a.matmul(&bt, false, true).unwrap(), nn);
        assert_eq!(at.matmul(&bt, true, true).unwrap(), nn);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(1, 1, vec![f64::INFINITY]).is_err());
        let big = Tensor::from_vec(1, 1, vec![1e308]).unwrap();
        assert!(matches!(big.scale(10.0), Err(Error::Numeric(_))));
        assert!(big.add(&big).is_err());
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b, false, false), Err(Error::Shape(_))));
        assert!(matches!(a.add(&Tensor::zeros(3, 2)), Err(Error::Shape(_))));
        assert!(Tensor::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_handles_large_logits() {
        let t = Tensor::from_rows(&[[1000.0, 1000.0], [-1000.0, 0.0]]).unwrap();
        let s = t.row_softmax().unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 1) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let t = Tensor::from_rows(std::slice::from_ref(&row)).unwrap();
            let s = t.row_softmax().unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let s2 = Tensor::from_rows(&[shifted]).unwrap().row_softmax().unwrap();
            prop_assert!(s.max_abs_diff(&s2).unwrap() < 1e-12);
        }
    }
}
