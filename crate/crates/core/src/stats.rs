//! Streaming accumulators: second moments `XᵀX / n`, cross products `XᵀY`,
//! and the pairwise head divergence matrix.
//!
//! Everything accumulates in f64 and supports `merge`, so partial
//! accumulators from independent batches can be combined in a fixed order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Tensor};

/// Running `Σ xᵀy` over row pairs of two matrices with equal row counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossProduct {
    pub rows: usize,
    pub cols: usize,
    pub sum: Vec<f64>,
    pub n_rows: usize,
}

impl CrossProduct {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            sum: vec![0.0; rows * cols],
            n_rows: 0,
        }
    }

    pub fn accumulate(&mut self, x: &Tensor, y: &Tensor) -> Result<()> {
        let (xr, xc) = x.dims2()?;
        let (yr, yc) = y.dims2()?;
        if xc != self.rows || yc != self.cols || xr != yr {
            return Err(Error::shape(
                "cross_product",
                format!(
                    "accumulator {}x{}, got x {:?} and y {:?}",
                    self.rows,
                    self.cols,
                    x.shape(),
                    y.shape()
                ),
            ));
        }
        let part = linalg::matmul_tn_f64(x, y)?;
        self.sum.iter_mut().zip(part).for_each(|(s, p)| *s += p);
        self.n_rows += xr;
        Ok(())
    }

    pub fn merge(&mut self, other: &CrossProduct) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("cross_product merge", "dimension mismatch"));
        }
        self.sum.iter_mut().zip(&other.sum).for_each(|(s, o)| *s += o);
        self.n_rows += other.n_rows;
        Ok(())
    }
}

/// Second moment `Σ_X = XᵀX / n` of a module input, with no mean
/// subtraction (inputs are treated as zero-mean).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    inner: CrossProduct,
}

impl CovarianceEstimate {
    pub fn new(dim: usize) -> Self {
        Self {
            inner: CrossProduct::new(dim, dim),
        }
    }

    /// Identity second moment, the data-free fallback.
    pub fn identity(dim: usize) -> Self {
        let mut est = Self::new(dim);
        for i in 0..dim {
            est.inner.sum[i * dim + i] = 1.0;
        }
        est.inner.n_rows = 1;
        est
    }

    pub fn dim(&self) -> usize {
        self.inner.rows
    }

    pub fn n_rows(&self) -> usize {
        self.inner.n_rows
    }

    pub fn accumulate(&mut self, x_rows: &Tensor) -> Result<()> {
        if x_rows.cols() != self.dim() {
            return Err(Error::shape(
                "accumulate_covariance",
                format!("estimate of dim {}, rows of width {}", self.dim(), x_rows.cols()),
            ));
        }
        self.inner.accumulate(x_rows, x_rows)
    }

    pub fn merge(&mut self, other: &CovarianceEstimate) -> Result<()> {
        self.inner.merge(&other.inner)
    }

    /// Raw `XᵀX` sum (not divided by n).
    pub fn gram(&self) -> &[f64] {
        &self.inner.sum
    }

    /// Finalized `Σ_X = XᵀX / n` in f64.
    pub fn second_moment(&self) -> Result<Vec<f64>> {
        if self.inner.n_rows == 0 {
            return Err(Error::InvalidArgument("covariance estimate has no rows".into()));
        }
        let n = self.inner.n_rows as f64;
        Ok(self.inner.sum.iter().map(|v| v / n).collect())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(&[self.dim(), self.dim()], &self.second_moment()?)
    }
}

/// Tolerance on `|Σ row − 1|` for attention rows fed to the divergence.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Floor inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Averaged per-row Jensen-Shannon distance (base 2) between every pair of
/// heads' attention distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMatrix {
    h: usize,
    sum: Vec<f64>,
    n_rows: usize,
}

/// JS distance `sqrt(½KL(P‖M) + ½KL(Q‖M))`, base-2 logs, `M = ½(P+Q)`.
/// Zero-probability terms contribute nothing.
pub fn js_distance(p: &[f32], q: &[f32]) -> f64 {
    let mut js = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        let (pi, qi) = (pi as f64, qi as f64);
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            js += 0.5 * pi * (pi.max(LOG_FLOOR) / m.max(LOG_FLOOR)).log2();
        }
        if qi > 0.0 {
            js += 0.5 * qi * (qi.max(LOG_FLOOR) / m.max(LOG_FLOOR)).log2();
        }
    }
    js.max(0.0).sqrt()
}

impl DivergenceMatrix {
    pub fn new(h: usize) -> Self {
        Self {
            h,
            sum: vec![0.0; h * h],
            n_rows: 0,
        }
    }

    pub fn heads(&self) -> usize {
        self.h
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Folds in attention probabilities shaped `[h, s, s]` (one sequence) or
    /// `[n, h, s, s]`. Row `t` is supported on positions `0..=t`; later
    /// positions are excluded from the support.
    pub fn accumulate(&mut self, attn: &Tensor) -> Result<()> {
        let (n, h, s) = match *attn.shape() {
            [h, s, s2] if s == s2 => (1, h, s),
            [n, h, s, s2] if s == s2 => (n, h, s),
            _ => {
                return Err(Error::shape(
                    "accumulate_divergence",
                    format!("expected [n, h, s, s], got {:?}", attn.shape()),
                ))
            }
        };
        if h != self.h {
            return Err(Error::shape(
                "accumulate_divergence",
                format!("matrix has {} heads, batch has {h}", self.h),
            ));
        }
        let data = attn.data();
        let row = |seq: usize, head: usize, t: usize| -> &[f32] {
            let start = ((seq * h + head) * s + t) * s;
            &data[start..start + t + 1]
        };
        for seq in 0..n {
            for head in 0..h {
                for t in 0..s {
                    let total: f64 = row(seq, head, t).iter().map(|&v| v as f64).sum();
                    if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::InvalidArgument(format!(
                            "attention row (seq {seq}, head {head}, pos {t}) sums to {total}, not 1"
                        )));
                    }
                }
            }
            for t in 0..s {
                for i in 0..h {
                    for j in (i + 1)..h {
                        let d = js_distance(row(seq, i, t), row(seq, j, t));
                        self.sum[i * h + j] += d;
                        self.sum[j * h + i] += d;
                    }
                }
            }
            self.n_rows += s;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DivergenceMatrix) -> Result<()> {
        if self.h != other.h {
            return Err(Error::shape("divergence merge", "head count mismatch"));
        }
        self.sum.iter_mut().zip(&other.sum).for_each(|(s, o)| *s += o);
        self.n_rows += other.n_rows;
        Ok(())
    }

    /// Averaged matrix `D`, row-major `h×h`.
    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.n_rows == 0 {
            return Err(Error::InvalidArgument("divergence matrix has no rows".into()));
        }
        Ok(self.sum.iter().map(|v| v / self.n_rows as f64).collect())
    }

    /// Builds a finalized matrix directly (tests, imported data).
    pub fn from_values(h: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * h {
            return Err(Error::shape("divergence", format!("{} values for h={h}", values.len())));
        }
        Ok(Self {
            h,
            sum: values,
            n_rows: 1,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sum[i * self.h + j] / self.n_rows.max(1) as f64
    }

    /// Pairs `(i, j, D_ij)` with `i < j` and `D_ij < tau`.
    pub fn edges(&self, tau: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in (i + 1)..self.h {
                let d = self.get(i, j);
                if d < tau {
                    out.push((i, j, d));
                }
            }
        }
        out
    }

    pub fn report(&self, module: String, tau: f64) -> DivergenceReport {
        DivergenceReport {
            module,
            heads: self.h,
            n_rows: self.n_rows,
            matrix: (0..self.h)
                .map(|i| (0..self.h).map(|j| self.get(i, j)).collect())
                .collect(),
            edges: self
                .edges(tau)
                .into_iter()
                .map(|(a, b, d)| DivergenceEdge { a, b, divergence: d })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEdge {
    pub a: usize,
    pub b: usize,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub module: String,
    pub heads: usize,
    pub n_rows: usize,
    pub matrix: Vec<Vec<f64>>,
    pub edges: Vec<DivergenceEdge>,
}

/// Graphviz undirected graph: one cluster per module, heads as nodes, an
/// edge wherever the divergence is below `tau`.
pub fn to_dot(reports: &[DivergenceReport], tau: f64) -> String {
    let mut s = format!("graph heads {{\n  label=\"head divergence < {tau}\";\n");
    for (k, r) in reports.iter().enumerate() {
        let tag = r.module.replace('.', "_");
        s.push_str(&format!("  subgraph cluster_{k} {{\n    label=\"{}\";\n", r.module));
        for h in 0..r.heads {
            s.push_str(&format!("    {tag}_h{h} [label=\"{h}\"];\n"));
        }
        for e in &r.edges {
            s.push_str(&format!(
                "    {tag}_h{} -- {tag}_h{} [label=\"{:.3}\"];\n",
                e.a, e.b, e.divergence
            ));
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_rows_give_identity_over_n() {
        let mut est = CovarianceEstimate::new(3);
        let rows = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        est.accumulate(&rows).unwrap();
        // Σ = XᵀX / n = I₃ / 3
        let sigma = est.second_moment().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((sigma[i * 3 + j] - want).abs() < 1e-12);
            }
        }
        // and the raw Gram is exactly I₃
        assert_eq!(est.gram(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn two_identical_rows_rank_one() {
        let mut est = CovarianceEstimate::new(2);
        est.accumulate(&Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]))
            .unwrap();
        assert_eq!(est.second_moment().unwrap(), vec![1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn covariance_dimension_mismatch() {
        let mut est = CovarianceEstimate::new(2);
        assert!(est.accumulate(&Tensor::zeros(&[1, 3])).is_err());
        assert!(CovarianceEstimate::new(2).second_moment().is_err());
    }

    #[test]
    fn covariance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[200, 8], |_| rng.gen_range(-2.0..2.0));
        let mut est = CovarianceEstimate::new(8);
        est.accumulate(&x).unwrap();
        let sigma = est.second_moment().unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0f64;
                for r in 0..200 {
                    s += x.at(r, i) as f64 * x.at(r, j) as f64;
                }
                assert!((sigma[i * 8 + j] - s / 200.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_heads_zero_disjoint_heads_one() {
        // h=2, s=2: both heads identical
        let same = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.3, 0.7, 1.0, 0.0, 0.3, 0.7]).unwrap();
        let mut dm = DivergenceMatrix::new(2);
        dm.accumulate(&same).unwrap();
        assert_eq!(dm.get(0, 1), 0.0);

        assert!((js_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_row_rejected() {
        let bad = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.5, 0.4]).unwrap();
        assert!(DivergenceMatrix::new(1).accumulate(&bad).is_err());
    }

    #[test]
    fn dot_output_lists_edges() {
        let dm = DivergenceMatrix::from_values(3, vec![0.0, 0.1, 0.5, 0.1, 0.0, 0.9, 0.5, 0.9, 0.0]).unwrap();
        let r = dm.report("blocks.0.attn".into(), 0.2);
        assert_eq!(r.edges, vec![DivergenceEdge { a: 0, b: 1, divergence: 0.1 }]);
        let dot = to_dot(&[r], 0.2);
        assert!(dot.contains("blocks_0_attn_h0 -- blocks_0_attn_h1"));
    }
}
