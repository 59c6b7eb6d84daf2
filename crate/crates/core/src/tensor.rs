//! Dense 64-bit tensor substrate.
//!
//! Two containers live here: [`Matrix`] (row-major 2-D) and [`TokenTensor`]
//! (row-major batch × tokens × channels). The free functions at the bottom
//! operate on raw row-major slices and are what the denoiser uses on its hot
//! path; every kernel computes each output row from the matching input row
//! only, so results never depend on how many rows are processed together.

use crate::error::{Error, Result};

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        check_finite("Matrix::new", &data)?;
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: transpose(&self.data, self.rows, self.cols),
        }
    }
}

/// Activation carrier of shape batch × tokens × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    batch: usize,
    tokens: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TokenTensor {
    pub fn new(batch: usize, tokens: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || tokens == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "token tensor dims must be >= 1, got {batch}x{tokens}x{channels}"
            )));
        }
        if data.len() != batch * tokens * channels {
            return Err(Error::shape(
                "TokenTensor::new",
                format!("{} values", batch * tokens * channels),
                data.len(),
            ));
        }
        check_finite("TokenTensor::new", &data)?;
        Ok(Self {
            batch,
            tokens,
            channels,
            data,
        })
    }

    pub fn zeros(batch: usize, tokens: usize, channels: usize) -> Self {
        assert!(batch > 0 && tokens > 0 && channels > 0);
        Self {
            batch,
            tokens,
            channels,
            data: vec![0.0; batch * tokens * channels],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.tokens, self.channels)
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

    fn instance_len(&self) -> usize {
        self.tokens * self.channels
    }

    /// Flattened T×D slice of one batch element.
    pub fn instance(&self, b: usize) -> &[f64] {
        let n = self.instance_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn instance_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.instance_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn instance_matrix(&self, b: usize) -> Matrix {
        Matrix {
            rows: self.tokens,
            cols: self.channels,
            data: self.instance(b).to_vec(),
        }
    }

    /// Swaps the token and channel axes of every instance: (B,T,D) → (B,D,T).
    pub fn transpose_tokens_channels(&self) -> TokenTensor {
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            data.extend(transpose(self.instance(b), self.tokens, self.channels));
        }
        TokenTensor {
            batch: self.batch,
            tokens: self.channels,
            channels: self.tokens,
            data,
        }
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&TokenTensor]) -> Result<TokenTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_batch of nothing"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.tokens, p.channels) != (first.tokens, first.channels) {
                return Err(Error::shape(
                    "concat_batch",
                    format!("_x{}x{}", first.tokens, first.channels),
                    format!("_x{}x{}", p.tokens, p.channels),
                ));
            }
            batch += p.batch;
            data.extend_from_slice(&p.data);
        }
        Ok(TokenTensor {
            batch,
            tokens: first.tokens,
            channels: first.channels,
            data,
        })
    }

    /// Splits the batch into consecutive chunks of `size` instances.
    pub fn split_batch(&self, size: usize) -> Result<Vec<TokenTensor>> {
        if size == 0 || self.batch % size != 0 {
            return Err(Error::invalid(format!(
                "cannot split batch {} into chunks of {size}",
                self.batch
            )));
        }
        let n = size * self.instance_len();
        Ok(self
            .data
            .chunks(n)
            .map(|c| TokenTensor {
                batch: size,
                tokens: self.tokens,
                channels: self.channels,
                data: c.to_vec(),
            })
            .collect())
    }

    pub fn same_shape(&self, other: &TokenTensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn from_parts_unchecked(
        batch: usize,
        tokens: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> TokenTensor {
        debug_assert_eq!(data.len(), batch * tokens * channels);
        TokenTensor {
            batch,
            tokens,
            channels,
            data,
        }
    }
}

/// Scales each row to unit L2 norm; rows with norm below `eps` become zero.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be > 0, got {eps}")));
    }
    check_finite("l2_normalize_rows", &m.data)?;
    let mut out = m.clone();
    for row in out.data.chunks_mut(m.cols.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < eps {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

/// Row-by-row cosine similarity. Zero-norm rows are similar to nothing,
/// themselves included.
pub fn cosine_similarity_matrix(m: &Matrix) -> Result<Matrix> {
    if m.rows < 2 {
        return Err(Error::invalid("cosine similarity needs at least 2 rows"));
    }
    let unit = l2_normalize_rows(m, 1e-12)?;
    Ok(gram(&unit))
}

/// `m · mᵀ`, filled symmetrically so (i,j) and (j,i) are bit-identical.
pub(crate) fn gram(m: &Matrix) -> Matrix {
    let n = m.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = dot(m.row(i), m.row(j));
            out.data[i * n + j] = s;
            out.data[j * n + i] = s;
        }
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            b.rows,
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    check_finite("matmul", &out.data)?;
    Ok(out)
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    check_finite("softmax_rows", &m.data)?;
    let mut out = m.clone();
    for row in out.data.chunks_mut(m.cols.max(1)) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Per-token layer normalisation over the channel axis.
pub fn layer_norm(x: &TokenTensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<TokenTensor> {
    if gain.len() != x.channels || bias.len() != x.channels {
        return Err(Error::shape(
            "layer_norm",
            format!("{} gains/biases", x.channels),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    let mut out = vec![0.0; x.data.len()];
    let rows = x.batch * x.tokens;
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv = vec![0.0; rows];
    layer_norm_rows(&x.data, gain, bias, eps, x.channels, &mut out, &mut xhat, &mut inv);
    check_finite("layer_norm", &out)?;
    Ok(TokenTensor { data: out, ..*x })
}

pub fn gelu(x: &TokenTensor) -> TokenTensor {
    TokenTensor {
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        ..*x
    }
}

// ---------------------------------------------------------------------------
// slice kernels

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the slice lengths were checked above against the row-major
    // strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored k×m and `b` stored k×n.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as in `matmul_acc`; `a` is read through a transposed view.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] = a[m×k] · bᵀ` with `b` stored n×k.
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `matmul_acc`; `b` is read through a transposed view.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer norm over rows of width `d`, also returning the normalised values
/// and inverse standard deviations needed for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    d: usize,
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    let inv_d = 1.0 / d as f64;
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() * inv_d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            xh[c] = (row[c] - mean) * inv;
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
}
