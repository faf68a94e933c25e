//! Dense matrices and the small numeric kernels shared across the crate.

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Row-major dense f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "matrix entry {idx} is not finite"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Entries drawn i.i.d. uniform in `[lo, hi)` from `rng`.
    pub fn random_uniform(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut RandomStream) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform_range_f32(lo, hi)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `self^T * u` for a column vector `u` of length `rows`.
    pub fn matvec_t(&self, u: &[f32]) -> Result<Vec<f32>> {
        if u.len() != self.rows {
            return Err(Error::InvalidInput(format!(
                "transposed matvec length {} against {}x{} matrix",
                u.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0f32; self.cols];
        for (r, &uv) in u.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += uv * m;
            }
        }
        Ok(out)
    }

    /// Accumulates the outer product `u * v^T` into `self`.
    pub fn add_outer(&mut self, u: &[f32], v: &[f32]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::InvalidInput(format!(
                "outer product {}x{} into {}x{} matrix",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (r, &uv) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &vv) in row.iter_mut().zip(v) {
                *m += uv * vv;
            }
        }
        Ok(())
    }

    /// `self * x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::InvalidInput(format!(
                "matvec length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0f32; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0f32;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o = acc;
        }
        Ok(out)
    }
}

/// Numerically stable softmax. Subtracts the max logit before
/// exponentiating, so arbitrarily large logits cannot overflow.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax over empty logits".into()));
    }
    if let Some(idx) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("logit {idx} is not finite")));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// Index of the largest value among positions where `mask` is true.
/// Ties resolve to the lowest index. `mask == None` means all positions
/// are candidates.
pub fn argmax_masked(values: &[f32], mask: Option<&[bool]>) -> Result<usize> {
    if let Some(m) = mask {
        if m.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "mask length {} against {} values",
                m.len(),
                values.len()
            )));
        }
    }
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::EmptyCandidates("argmax with every position masked".into()))
}

/// Elementwise ReLU.
pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}
