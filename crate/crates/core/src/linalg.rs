//! Dense f32 tensors and the handful of kernels the pruning pipeline needs.
//!
//! Storage is always `f32`, row-major. Every reduction (dot products, Gram
//! accumulation, softmax normalizers, norm statistics) accumulates in `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` array with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be >= 1, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be >= 1"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data).expect("non-empty rows")
    }

    /// Converts an f64 buffer into an f32 tensor.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                "dims2",
                format!("expected a matrix, got {:?}", self.shape),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Keeps the listed columns of a matrix, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if cols.is_empty() {
            return Err(Error::shape("select_columns", "no columns selected"));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::shape(
                "select_columns",
                format!("column {bad} out of range for {c} columns"),
            ));
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out.extend(cols.iter().map(|&j| row[j]));
        }
        Tensor::new(vec![r, cols.len()], out)
    }

    /// Keeps the listed rows (leading-axis slices), in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        if rows.is_empty() {
            return Err(Error::shape("select_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let stride = self.data.len() / n;
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &i in rows {
            out.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, out)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    check_same_shape("add_assign", a, b)?;
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    Ok(())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Adds a bias vector to every row of a matrix.
pub fn add_row_vector(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let c = x.cols();
    if bias.len() != c {
        return Err(Error::shape(
            "add_row_vector",
            format!("bias of length {} for {c} columns", bias.len()),
        ));
    }
    for row in x.data.chunks_mut(c) {
        row.iter_mut().zip(&bias.data).for_each(|(v, b)| *v += b);
    }
    Ok(())
}

/// `a · b` with f64 accumulation, returned unrounded.
pub fn matmul_f64(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("[{m}x{k}] x [{k2}x{n}]"),
        ));
    }
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, acc)| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    });
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let m = a.shape[0];
    let n = b.cols();
    let out = matmul_f64(a, b)?;
    Tensor::from_f64(&[m, n], &out)
}

/// `a · bᵀ` with f64 accumulation; both operands share their column count.
/// Used where `b` is stored row-per-output (tied embedding heads).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]ᵀ")));
    }
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = dot_f64(arow, brow) as f32;
        }
    });
    Tensor::new(vec![m, n], out)
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `aᵀ · b` with f64 accumulation; both operands share their row count.
pub fn matmul_tn_f64(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (ra, _) = a.dims2()?;
    let (rb, _) = b.dims2()?;
    if ra != rb {
        return Err(Error::shape(
            "matmul_tn",
            format!("row counts {ra} vs {rb}"),
        ));
    }
    matmul_f64(&a.transpose()?, b)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    out.data.chunks_mut(c).for_each(softmax_in_place);
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(row.len());
    for &v in row.iter() {
        let e = ((v as f64) - (max as f64)).exp();
        sum += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: Option<&Tensor>, eps: f32) -> Result<Tensor> {
    let c = x.cols();
    check_vector("layer_norm", gain, c)?;
    if let Some(b) = bias {
        check_vector("layer_norm", b, c)?;
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let normed = ((*v as f64 - mean) * inv) as f32 * gain.data[j];
            *v = normed + bias.map_or(0.0, |b| b.data[j]);
        }
    }
    Ok(out)
}

pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.cols();
    check_vector("rms_norm", gain, c)?;
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64) * inv) as f32 * gain.data[j];
        }
    }
    Ok(out)
}

fn check_vector(op: &'static str, v: &Tensor, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::shape(
            op,
            format!("parameter vector of length {} for width {len}", v.len()),
        ));
    }
    Ok(())
}

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn relu_scalar(x: f32) -> f32 {
    x.max(0.0)
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    map(x, silu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, relu_scalar)
}

/// Indices sorted by descending value; equal values keep ascending index order.
pub fn argsort_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Indices sorted by ascending value; equal values keep ascending index order.
pub fn argsort_ascending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Damping added to the Gram diagonal, as a fraction of its mean.
    pub ridge_fraction: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            ridge_fraction: 1e-2,
        }
    }
}

impl SolveOptions {
    pub fn ridge(ridge_fraction: f64) -> Self {
        Self { ridge_fraction }
    }
}

/// Diagnostics from one normal-equation solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub lambda: f64,
    /// Extra diagonal jitter that was needed for the factorization to succeed.
    pub jitter: f64,
}

/// Jitter levels (relative to the mean Gram diagonal) tried when the damped
/// Gram is not numerically positive definite, e.g. rank-deficient inputs
/// with ridge 0.
const JITTER_LADDER: [f64; 4] = [1e-12, 1e-10, 1e-8, 1e-6];

/// Solves `(gram + λI) W = xty` for W (`d×k`) using a Cholesky factorization,
/// where `λ = ridge_fraction · mean(diag(gram))`.
pub fn solve_least_squares(gram: &Tensor, xty: &Tensor, opts: SolveOptions) -> Result<Tensor> {
    let (d, d2) = gram.dims2()?;
    let (dr, k) = xty.dims2()?;
    if d != d2 || dr != d {
        return Err(Error::shape(
            "solve_least_squares",
            format!("gram {:?}, xty {:?}", gram.shape, xty.shape),
        ));
    }
    let g: Vec<f64> = gram.data.iter().map(|&v| v as f64).collect();
    let c: Vec<f64> = xty.data.iter().map(|&v| v as f64).collect();
    let (w, _) = solve_normal_equations(&g, &c, d, k, opts, "least squares")?;
    Tensor::from_f64(&[d, k], &w)
}

/// f64 core of [`solve_least_squares`]. `gram` is `d×d`, `rhs` is `d×k`,
/// both row-major. `context` names the system in error messages.
pub fn solve_normal_equations(
    gram: &[f64],
    rhs: &[f64],
    d: usize,
    k: usize,
    opts: SolveOptions,
    context: &str,
) -> Result<(Vec<f64>, SolveStats)> {
    if gram.len() != d * d || rhs.len() != d * k {
        return Err(Error::shape(
            "solve_normal_equations",
            format!("gram len {}, rhs len {} for d={d}, k={k}", gram.len(), rhs.len()),
        ));
    }
    if !(opts.ridge_fraction >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ridge_fraction must be >= 0, got {}",
            opts.ridge_fraction
        )));
    }
    let mean_diag = (0..d).map(|i| gram[i * d + i]).sum::<f64>() / d as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::Singular {
            context: context.to_string(),
            detail: format!("Gram ({d}x{d}) has no energy on its diagonal"),
        });
    }
    let lambda = opts.ridge_fraction * mean_diag;

    let attempt = |jitter: f64| cholesky(gram, d, lambda + jitter);
    let mut stats = SolveStats { lambda, jitter: 0.0 };
    let factor = match attempt(0.0) {
        Some(l) => l,
        None => {
            let mut found = None;
            for rel in JITTER_LADDER {
                if let Some(l) = attempt(rel * mean_diag) {
                    stats.jitter = rel * mean_diag;
                    found = Some(l);
                    break;
                }
            }
            found.ok_or_else(|| Error::Singular {
                context: context.to_string(),
                detail: format!(
                    "Gram ({d}x{d}, mean diagonal {mean_diag:.3e}) is not positive definite after damping"
                ),
            })?
        }
    };
    Ok((cholesky_solve(&factor, rhs, d, k), stats))
}

/// Lower-triangular Cholesky factor of `a + shift·I`, or None if not PD.
fn cholesky(a: &[f64], d: usize, shift: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j] + shift;
        for p in 0..j {
            diag -= l[j * d + p] * l[j * d + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], rhs: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut x = rhs.to_vec();
    // forward: L z = b
    for i in 0..d {
        for p in 0..i {
            let lip = l[i * d + p];
            if lip != 0.0 {
                for c in 0..k {
                    x[i * k + c] -= lip * x[p * k + c];
                }
            }
        }
        let lii = l[i * d + i];
        for c in 0..k {
            x[i * k + c] /= lii;
        }
    }
    // backward: Lᵀ w = z
    for i in (0..d).rev() {
        for p in (i + 1)..d {
            let lpi = l[p * d + i];
            if lpi != 0.0 {
                for c in 0..k {
                    x[i * k + c] -= lpi * x[p * k + c];
                }
            }
        }
        let lii = l[i * d + i];
        for c in 0..k {
            x[i * k + c] /= lii;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for p in 0..5 {
                    s += a.at(i, p) as f64 * b.at(p, j) as f64;
                }
                let got = c.at(i, j) as f64;
                assert!((got - s).abs() <= 1e-6 * s.abs().max(1.0), "{got} vs {s}");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]));
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);

        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (i, &v) in s.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((v as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn solve_identity_gram() {
        let gram = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let xty = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let w = solve_least_squares(&gram, &xty, SolveOptions::ridge(0.0)).unwrap();
        assert_eq!(w.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn solve_recovers_known_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[64, 8], &mut rng);
        let w = random(&[8, 3], &mut rng);
        let y = matmul(&x, &w).unwrap();
        let gram = Tensor::from_f64(&[8, 8], &matmul_tn_f64(&x, &x).unwrap()).unwrap();
        let xty = Tensor::from_f64(&[8, 3], &matmul_tn_f64(&x, &y).unwrap()).unwrap();
        let got = solve_least_squares(&gram, &xty, SolveOptions::ridge(0.0)).unwrap();
        assert!(got.max_abs_diff(&w) < 1e-4);
    }

    #[test]
    fn solve_zero_gram_is_singular() {
        let gram = Tensor::zeros(&[3, 3]);
        let xty = Tensor::zeros(&[3, 1]);
        let err = solve_least_squares(&gram, &xty, SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn norms_and_activations() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]);
        let ln = layer_norm(&x, &Tensor::filled(&[2], 1.0), None, 0.0).unwrap();
        assert!((ln.data()[0] + 1.0).abs() < 1e-6 && (ln.data()[1] - 1.0).abs() < 1e-6);
        let rn = rms_norm(&x, &Tensor::filled(&[2], 1.0), 0.0).unwrap();
        let rms = (5.0f32).sqrt();
        assert!((rn.data()[1] - 3.0 / rms).abs() < 1e-6);

        assert_eq!(relu_scalar(-2.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_192).abs() < 1e-5);
        assert!((silu_scalar(1.0) - 0.731_058_6).abs() < 1e-6);
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn argsort_ties_keep_index_order() {
        assert_eq!(argsort_descending(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2, 3, 0]);
        assert_eq!(argsort_ascending(&[1.0, 0.0, 1.0]), vec![1, 0, 2]);
    }

    #[test]
    fn column_and_row_selection() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(t.select_columns(&[2, 0]).unwrap().data(), &[3.0, 1.0, 6.0, 4.0]);
        assert_eq!(t.select_rows(&[1]).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert!(t.select_columns(&[3]).is_err());
    }
}
