//! Filters, dense matrices, translation operators and location-based pooling.
//!
//! Every operator here is documented with the 1-based index conventions of the
//! underlying algebra (`v_1, …, v_d`); storage is ordinary 0-based `Vec<f64>`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A real filter supported on `{0, …, s}`.
///
/// Coefficients outside that range are implicitly zero, so `coeff(m)` accepts
/// any signed index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Filter {
    coeffs: Vec<f64>,
}

impl Filter {
    /// Builds a filter from `w_0, …, w_s`. Requires `s >= 1`.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 2 {
            return invalid(format!(
                "a filter needs at least 2 coefficients (s >= 1), got {}",
                coeffs.len()
            ));
        }
        Ok(Self { coeffs })
    }

    /// The convolution identity `(1, 0, …, 0)` of length `s + 1`.
    pub fn delta(s: usize) -> Self {
        let mut coeffs = vec![0.0; s.max(1) + 1];
        coeffs[0] = 1.0;
        Self { coeffs }
    }

    pub fn zero(s: usize) -> Self {
        Self {
            coeffs: vec![0.0; s.max(1) + 1],
        }
    }

    /// Support upper bound `s`.
    pub fn s(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// `w_m`, zero outside `{0, …, s}`.
    pub fn coeff(&self, m: isize) -> f64 {
        if m < 0 {
            0.0
        } else {
            self.coeffs.get(m as usize).copied().unwrap_or(0.0)
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|w| w.abs()).sum()
    }

    /// Re-expresses the filter on a wider support `{0, …, s}` (zero padded).
    pub fn padded_to(&self, s: usize) -> Result<Self> {
        if s < self.s() {
            return invalid(format!("cannot shrink filter support from {} to {s}", self.s()));
        }
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(s + 1, 0.0);
        Ok(Self { coeffs })
    }
}

impl TryFrom<Vec<f64>> for Filter {
    type Error = Error;

    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        Filter::new(coeffs)
    }
}

impl From<Filter> for Vec<f64> {
    fn from(f: Filter) -> Self {
        f.coeffs
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return invalid(format!("matrix row {i} has {} entries, expected {m}", r.len()));
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return invalid(format!(
                "matrix-vector product: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return invalid(format!(
                "matrix product: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

/// The translation matrix `A_{j,d}`: entry `(j+i, 1+i)` is one for
/// `i = 0, …, d−j`. It moves a vector `j − 1` places towards the end,
/// so `A_{1,d}` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslationOp {
    j: usize,
    d: usize,
}

impl TranslationOp {
    pub fn new(j: usize, d: usize) -> Result<Self> {
        if j < 1 || j > d {
            return invalid(format!("translation A_{{j,d}} needs 1 <= j <= d, got j={j}, d={d}"));
        }
        Ok(Self { j, d })
    }

    /// Translation moving a vector `places` positions, i.e. `A_{places+1,d}`.
    pub fn by(places: usize, d: usize) -> Result<Self> {
        Self::new(places + 1, d)
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> Matrix {
        let mut a = Matrix::zeros(self.d, self.d);
        for i in 0..=(self.d - self.j) {
            a[(self.j - 1 + i, i)] = 1.0;
        }
        a
    }
}

/// Applies `A_{j,d}` to `v`.
pub fn translate(op: TranslationOp, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != op.d {
        return invalid(format!(
            "translation A_{{{},{}}} applied to vector of length {}",
            op.j,
            op.d,
            v.len()
        ));
    }
    let shift = op.j - 1;
    let mut out = vec![0.0; op.d];
    out[shift..].copy_from_slice(&v[..op.d - shift]);
    Ok(out)
}

/// A length-`d` vector whose nonzero entries lie in positions
/// `support_start, …, support_start + support_len − 1` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SupportedVector {
    values: Vec<f64>,
    support_start: usize,
    support_len: usize,
}

impl SupportedVector {
    /// Places `support` at positions `start, …, start + p − 1` of a zero vector of length `d`.
    pub fn new(d: usize, start: usize, support: &[f64]) -> Result<Self> {
        let p = support.len();
        if p == 0 {
            return invalid("supported vector needs p >= 1");
        }
        if start < 1 || start + p > d + 1 {
            return invalid(format!(
                "support {{{start}, …, {}}} does not fit in dimension {d}",
                start + p - 1
            ));
        }
        let mut values = vec![0.0; d];
        values[start - 1..start - 1 + p].copy_from_slice(support);
        Ok(Self {
            values,
            support_start: start,
            support_len: p,
        })
    }

    /// Wraps an existing vector, checking that it vanishes off the declared support.
    pub fn from_dense(values: Vec<f64>, start: usize, p: usize) -> Result<Self> {
        let d = values.len();
        if p == 0 || start < 1 || start + p > d + 1 {
            return invalid(format!("support start={start}, len={p} does not fit in dimension {d}"));
        }
        let outside = values
            .iter()
            .enumerate()
            .any(|(i, &x)| (i + 1 < start || i + 1 >= start + p) && x != 0.0);
        if outside {
            return invalid("vector has nonzero entries outside its declared support");
        }
        Ok(Self {
            values,
            support_start: start,
            support_len: p,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn support_start(&self) -> usize {
        self.support_start
    }

    pub fn support_len(&self) -> usize {
        self.support_len
    }

    /// The support values `v_1, …, v_p`.
    pub fn support(&self) -> &[f64] {
        &self.values[self.support_start - 1..self.support_start - 1 + self.support_len]
    }

    /// Last 1-based position of the support.
    pub fn support_end(&self) -> usize {
        self.support_start + self.support_len - 1
    }

    /// The same support values moved to start at position 1 (`v_{p,d,1}`).
    pub fn at_origin(&self) -> Self {
        Self::new(self.dim(), 1, self.support()).expect("support fits at origin")
    }
}

/// Location-based pooling `S_{d′,u,j}`: slot `k` (1-based) reads `v_{k·u+j}`,
/// or zero when `k·u + j > d′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolingSpec {
    pub input_len: usize,
    pub stride: usize,
    pub offset: usize,
    pub output_len: usize,
}

impl PoolingSpec {
    /// Pooling with the natural output length `⌊d′/u⌋`.
    pub fn new(input_len: usize, stride: usize, offset: usize) -> Result<Self> {
        if stride == 0 {
            return invalid("pooling stride must be positive");
        }
        Self::with_output_len(input_len, stride, offset, input_len / stride)
    }

    pub fn with_output_len(
        input_len: usize,
        stride: usize,
        offset: usize,
        output_len: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return invalid("pooling stride must be positive");
        }
        if offset > input_len {
            return invalid(format!("pooling offset {offset} exceeds input length {input_len}"));
        }
        Ok(Self {
            input_len,
            stride,
            offset,
            output_len,
        })
    }

    /// 0-based source index for 1-based output slot `k`, if it is in range.
    pub fn source_index(&self, k: usize) -> Option<usize> {
        let idx = k * self.stride + self.offset;
        (idx >= 1 && idx <= self.input_len).then(|| idx - 1)
    }
}

pub fn pool(spec: &PoolingSpec, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != spec.input_len {
        return invalid(format!(
            "pooling expects input of length {}, got {}",
            spec.input_len,
            v.len()
        ));
    }
    if spec.offset > spec.input_len {
        return invalid(format!(
            "pooling offset {} exceeds input length {}",
            spec.offset, spec.input_len
        ));
    }
    Ok((1..=spec.output_len)
        .map(|k| spec.source_index(k).map_or(0.0, |i| v[i]))
        .collect())
}

/// The `d̃ × d′` Toeplitz matrix `T^w` with entry `(i, k) = w_{i−k}`.
pub fn toeplitz(w: &Filter, input_len: usize, output_len: usize) -> Result<Matrix> {
    toeplitz_from_coeffs(w.coeffs(), input_len, output_len)
}

/// As [`toeplitz`], for an arbitrary finitely supported sequence `u_0, u_1, …`.
pub fn toeplitz_from_coeffs(u: &[f64], input_len: usize, output_len: usize) -> Result<Matrix> {
    if input_len == 0 || output_len == 0 {
        return invalid("toeplitz dimensions must be positive");
    }
    Ok(Matrix::from_fn(output_len, input_len, |i, k| {
        if i >= k {
            u.get(i - k).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }))
}
