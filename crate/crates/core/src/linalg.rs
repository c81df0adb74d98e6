//! Truncated SVD of frozen weights, column norms, and deterministic top-k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{FlopCounts, FlopPath};
use crate::tensor::{gemm_nn, Scalar, Tensor};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Rank-`k` factors `W ≈ w_a · w_b` with the singular values split evenly:
/// `w_a = U_k·diag(√S_k)`, `w_b = diag(√S_k)·V_kᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<S> {
    pub w_a: Tensor<S>,
    pub w_b: Tensor<S>,
    pub rank: usize,
    pub source: String,
}

/// Thin SVD `W = U·diag(s)·Vᵀ` in double precision, singular values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × r`, `r = min(m, n)`.
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    /// `r × n`.
    pub vt: Tensor<f64>,
}

/// One-sided (Hestenes) Jacobi SVD. Column pairs of the working matrix are
/// rotated until every pair is orthogonal to `1e-10` relative, for at most
/// 100 sweeps.
pub fn svd_jacobi<S: Scalar>(w: &Tensor<S>, label: &str) -> Result<Svd> {
    if w.shape().len() != 2 {
        return Err(Error::dim("svd", w.shape(), &[0, 0]));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite(format!("weight {label}")));
    }
    let (m, n) = (w.rows(), w.cols());
    // Work on the tall orientation so the rotated side is the short one.
    let transposed = m < n;
    let src = if transposed { w.transpose() } else { w.clone() };
    let (rows, cols) = if transposed { (n, m) } else { (m, n) };

    // Column-major copy: column j is a contiguous slice.
    let mut a = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            a[j * rows + i] = src.at(i, j).f64();
        }
    }
    let mut v = vec![0.0f64; cols * cols];
    for j in 0..cols {
        v[j * cols + j] = 1.0;
    }

    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut worst = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = col_pair(&mut a, rows, p, q);
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (cp[i], cq[i]);
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
                let (vp, vq) = col_pair(&mut v, cols, p, q);
                for i in 0..cols {
                    let (x, y) = (vp[i], vq[i]);
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        residual = worst;
        if worst <= JACOBI_TOL {
            break;
        }
    }
    if residual > JACOBI_TOL {
        return Err(Error::SvdNoConvergence {
            layer: label.to_string(),
            sweeps,
            residual,
        });
    }

    let mut sv: Vec<(f64, usize)> = (0..cols)
        .map(|j| {
            let c = &a[j * rows..(j + 1) * rows];
            (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j)
        })
        .collect();
    // Descending, stable on index for equal values.
    sv.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let r = cols;
    // Left vectors of the tall matrix (rows × r) and right vectors (cols × r).
    let mut left = vec![0.0f64; rows * r];
    let mut right = vec![0.0f64; cols * r];
    let mut s = Vec::with_capacity(r);
    for (k, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        let col = &a[j * rows..(j + 1) * rows];
        let vcol = &v[j * cols..(j + 1) * cols];
        // Sign: first nonzero component of the right singular vector of W positive.
        let vvec = if transposed { col } else { vcol };
        let lead = vvec.iter().copied().find(|x| x.abs() > 0.0).unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            left[i * r + k] = if sigma > 0.0 { sign * col[i] / sigma } else { 0.0 };
        }
        for i in 0..cols {
            right[i * r + k] = sign * vcol[i];
        }
    }
    let left = Tensor::new(vec![rows, r], left)?;
    let right = Tensor::new(vec![cols, r], right)?;
    let (u, vt) = if transposed {
        (right, left.transpose())
    } else {
        (left, right.transpose())
    };
    Ok(Svd { u, s, vt })
}

fn col_pair(a: &mut [f64], rows: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = a.split_at_mut(q * rows);
    (&mut lo[p * rows..(p + 1) * rows], &mut hi[..rows])
}

/// Best rank-`k` factorization of `w` in the balanced `√S` split.
pub fn svd_topk<S: Scalar>(w: &Tensor<S>, k: usize, label: &str) -> Result<SvdFactors<S>> {
    let (m, n) = (w.rows(), w.cols());
    if k == 0 || k > m.min(n) {
        return Err(Error::Config(format!(
            "rank {k} out of range for {label} ({m}×{n})"
        )));
    }
    let svd = svd_jacobi(w, label)?;
    Ok(factors_from_svd(&svd, k, label))
}

pub fn factors_from_svd<S: Scalar>(svd: &Svd, k: usize, label: &str) -> SvdFactors<S> {
    let (m, n) = (svd.u.rows(), svd.vt.cols());
    let w_a = Tensor::from_fn(&[m, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        S::of(svd.u.at(i, j) * svd.s[j].sqrt())
    });
    let w_b = Tensor::from_fn(&[k, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        S::of(svd.s[i].sqrt() * svd.vt.at(i, j))
    });
    SvdFactors {
        w_a,
        w_b,
        rank: k,
        source: label.to_string(),
    }
}

impl<S: Scalar> SvdFactors<S> {
    pub fn d_in(&self) -> usize {
        self.w_a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_b.cols()
    }

    pub fn reconstruct(&self) -> Tensor<S> {
        self.w_a.matmul(&self.w_b).expect("factor shapes agree")
    }

    /// `2·T·k·(D1 + D2)`.
    pub fn apply_flops(&self, tokens: usize) -> u64 {
        2 * tokens as u64 * self.rank as u64 * (self.d_in() + self.d_out()) as u64
    }
}

/// `(x · w_a) · w_b`. Each of the two products is charged to `layer`'s
/// estimator path in `counts`.
pub fn estimator_apply<S: Scalar>(
    x: &Tensor<S>,
    f: &SvdFactors<S>,
    counts: &mut FlopCounts,
    layer: Option<usize>,
) -> Result<Tensor<S>> {
    let (t, d1) = (x.rows(), x.cols());
    if d1 != f.d_in() {
        return Err(Error::dim("estimator_apply", x.shape(), f.w_a.shape()));
    }
    let (k, d2) = (f.rank, f.d_out());
    let mut mid = vec![S::zero(); t * k];
    gemm_nn(x.data(), f.w_a.data(), &mut mid, t, d1, k);
    counts.add(layer, FlopPath::Estimator, 2 * (t * d1 * k) as u64);
    let mut out = vec![S::zero(); t * d2];
    gemm_nn(&mid, f.w_b.data(), &mut out, t, k, d2);
    counts.add(layer, FlopPath::Estimator, 2 * (t * k * d2) as u64);
    Tensor::new(vec![t, d2], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreGranularity {
    Channel,
    RopePair,
    Head,
}

/// Non-negative importance scores over channels, rotary pairs, or heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub granularity: ScoreGranularity,
}

impl ScoreVector {
    pub fn channels(scores: Vec<f64>) -> Self {
        ScoreVector {
            scores,
            granularity: ScoreGranularity::Channel,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Per-column L2 norm over all rows, accumulated in double precision.
pub fn col_l2_norms<S: Scalar>(x: &Tensor<S>) -> ScoreVector {
    let d = x.cols();
    let mut acc = vec![0.0f64; d];
    for row in x.data().chunks(d.max(1)) {
        for (a, &v) in acc.iter_mut().zip(row) {
            let v = v.f64();
            *a += v * v;
        }
    }
    ScoreVector::channels(acc.into_iter().map(f64::sqrt).collect())
}

/// Indices of the `n` largest scores in ascending index order; equal scores
/// prefer the lower index.
pub fn topk_indices(s: &ScoreVector, n: usize) -> Result<Vec<usize>> {
    if n > s.len() {
        return Err(Error::Precondition(format!(
            "top-{n} requested from {} scores",
            s.len()
        )));
    }
    if let Some(bad) = s.scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score at index {bad}")));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    let mut kept = order[..n].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn diag(v: &[f64]) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { v[i / n] } else { 0.0 })
    }

    #[test]
    fn diagonal_eckart_young() {
        let w = diag(&[3.0, 2.0, 1.0]);
        let f = svd_topk(&w, 2, "diag").unwrap();
        let rec = f.reconstruct();
        assert!(rec.max_abs_diff(&diag(&[3.0, 2.0, 0.0])) < 1e-12);
        let rel = rec.rel_err(&w);
        assert!((rel - 1.0 / 14f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_rank_two_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[9, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 6], 1.0, &mut rng);
        let w = a.matmul(&b).unwrap();
        let f = svd_topk(&w, 2, "r2").unwrap();
        assert!(f.reconstruct().rel_err(&w) < 1e-10);
    }

    #[test]
    fn full_rank_identity_on_wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::<f64>::randn(&[8, 12], 1.0, &mut rng);
        let f = svd_topk(&w, 8, "wide").unwrap();
        assert!(f.reconstruct().rel_err(&w) < 1e-10);
    }

    #[test]
    fn rank_out_of_range() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(svd_topk(&w, 4, "x"), Err(Error::Config(_))));
        assert!(matches!(svd_topk(&w, 0, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn zero_matrix_has_zero_factors() {
        let w = Tensor::<f64>::zeros(&[4, 3]);
        let f = svd_topk(&w, 2, "z").unwrap();
        assert_eq!(f.reconstruct(), Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn right_vectors_have_positive_lead() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[7, 5], 1.0, &mut rng);
        let svd = svd_jacobi(&w, "sign").unwrap();
        for i in 0..svd.vt.rows() {
            let lead = svd.vt.row(i).iter().copied().find(|x| x.abs() > 0.0).unwrap();
            assert!(lead > 0.0);
        }
        assert!(svd.s.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn estimator_full_rank_and_basis_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::<f64>::randn(&[6, 10], 1.0, &mut rng);
        let f = svd_topk(&w, 6, "w").unwrap();
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let mut c = FlopCounts::default();
        let out = estimator_apply(&x, &f, &mut c, Some(2)).unwrap();
        assert!(out.rel_err(&x.matmul(&w).unwrap()) < 1e-10);
        assert_eq!(c.get(Some(2), FlopPath::Estimator), f.apply_flops(4));

        let mut e = Tensor::<f64>::zeros(&[1, 6]);
        e.data_mut()[3] = 1.0;
        let row = estimator_apply(&e, &f, &mut c, None).unwrap();
        assert_eq!(row.data(), f.reconstruct().row(3));
    }

    #[test]
    fn estimator_shape_mismatch() {
        let f = SvdFactors::<f64> {
            w_a: Tensor::zeros(&[3, 1]),
            w_b: Tensor::zeros(&[1, 2]),
            rank: 1,
            source: "x".into(),
        };
        let x = Tensor::zeros(&[2, 4]);
        assert!(estimator_apply(&x, &f, &mut FlopCounts::default(), None).is_err());
    }

    #[test]
    fn col_norms_hand_values() {
        let x = Tensor::<f64>::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]);
        assert_eq!(col_l2_norms(&x).scores, vec![5.0, 0.0]);
        assert_eq!(col_l2_norms(&Tensor::<f64>::eye(3)).scores, vec![1.0; 3]);
    }

    #[test]
    fn topk_hand_and_ties() {
        let s = ScoreVector::channels(vec![0.1, 0.9, 0.5]);
        assert_eq!(topk_indices(&s, 2).unwrap(), vec![1, 2]);
        let eq = ScoreVector::channels(vec![1.0; 4]);
        assert_eq!(topk_indices(&eq, 2).unwrap(), vec![0, 1]);
        assert!(topk_indices(&eq, 5).is_err());
        assert_eq!(topk_indices(&eq, 0).unwrap(), Vec::<usize>::new());
    }
}
