//! Dense row-major `f64` matrices and the kernels the tape is built from.

use serde::{Deserialize, Serialize};

use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds from nested rows; panics on ragged input (test and fixture helper).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimensions");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimensions");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let br = b.row(k);
        for (i, &av) in a.row(k).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-wise softmax; `-inf` entries get weight zero. A row that is entirely
/// `-inf` is left as all zeros.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k + mask) V`, where `false`
/// mask entries are excluded.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[Vec<bool>]>) -> Result<Tensor, ModelError> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(ModelError::Shape(format!(
            "Q {:?}, K {:?}, V {:?} are not compatible",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut scores = matmul_bt(q, k);
    scores.scale_assign(1.0 / (q.cols as f64).sqrt());
    if let Some(mask) = mask {
        if mask.len() != q.rows || mask.iter().any(|r| r.len() != k.rows) {
            return Err(ModelError::Shape(format!("mask is not {}x{}", q.rows, k.rows)));
        }
        for (i, row) in mask.iter().enumerate() {
            for (j, &keep) in row.iter().enumerate() {
                if !keep {
                    scores.data[i * k.rows + j] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Ok(matmul(&softmax_rows(&scores), v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_transposes() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 3.0]]);
        let ab = matmul(&a, &b);
        assert_eq!(ab.data, vec![1.0, 2.0, 8.0, 3.0, 4.0, 18.0, 5.0, 6.0, 28.0]);
        let bt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(matmul_bt(&a, &bt), ab);
        let at = Tensor::from_rows(&[vec![1.0, 3.0, 5.0], vec![2.0, 4.0, 6.0]]);
        assert_eq!(matmul_at(&at, &b), ab);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::from_rows(&[vec![0.3, -2.0]]);
        let k = Tensor::from_rows(&[vec![5.0, 1.0]]);
        let v = Tensor::from_rows(&[vec![7.0, -1.5, 2.0]]);
        assert_eq!(attention(&q, &k, &v, None).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.7, 0.1]]);
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let v = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![6.0]]);
        let out = attention(&q, &k, &v, None).unwrap();
        assert!((out.data[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = attention(&q, &k, &v, None).unwrap();
        // weights = softmax(1/√2, 0)
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((out.data[0] - w0).abs() < 1e-15);
        assert!((out.data[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((w0 - 0.669_761_549_326_656_9).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_get_no_weight() {
        let q = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        let k = Tensor::from_rows(&[vec![1.0], vec![9.0]]);
        let v = Tensor::from_rows(&[vec![4.0], vec![100.0]]);
        let mask = vec![vec![true, false], vec![true, true]];
        let out = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.data[0], 4.0);
        assert!(out.data[1] > 99.0);
        assert!(attention(&q, &k, &Tensor::zeros(3, 1), None).is_err());
    }
}
