//! Dense row-major tensors and the matmul kernels every other module uses.
//!
//! Kernels accumulate each output element strictly in increasing order of the
//! inner index, so results are bit-reproducible regardless of blocking.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training, `f64` for verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite cast")
    }

    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize cast")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// The empty `0 × 0` tensor.
impl<S> Default for Tensor<S> {
    fn default() -> Self {
        Tensor {
            shape: vec![0, 0],
            data: Vec::new(),
        }
    }
}

impl<S: Debug> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<S>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| S::of(v)));
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::of(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::of(x.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn rel_err(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "rel_err shape mismatch");
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.f64() - b.f64();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        num / other.frobenius().max(1e-300)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); r * c];
        transpose_into(&self.data, r, c, &mut out);
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// 2-D matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        if rhs.shape.len() != 2 || rhs.shape[0] != k {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let n = rhs.shape[1];
        let mut out = vec![S::zero(); m * n];
        gemm_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

pub fn transpose_into<S: Copy>(src: &[S], r: usize, c: usize, dst: &mut [S]) {
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
    }
}

const KB: usize = 128;
const NB: usize = 512;

/// `c += a · b` with `a: m×k`, `b: k×n`, all row-major.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for t0 in (0..k).step_by(KB) {
        let t1 = (t0 + KB).min(k);
        for j0 in (0..n).step_by(NB) {
            let j1 = (j0 + NB).min(n);
            let w = j1 - j0;
            let mut i = 0;
            while i + 4 <= m {
                let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
                let (c0, c1) = c01.split_at_mut(n);
                let (c2, c3) = c23.split_at_mut(n);
                let (c0, c1, c2, c3) = (
                    &mut c0[j0..j1],
                    &mut c1[j0..j1],
                    &mut c2[j0..j1],
                    &mut c3[j0..j1],
                );
                for t in t0..t1 {
                    let a0 = a[i * k + t];
                    let a1 = a[(i + 1) * k + t];
                    let a2 = a[(i + 2) * k + t];
                    let a3 = a[(i + 3) * k + t];
                    let br = &b[t * n + j0..t * n + j1];
                    for j in 0..w {
                        let bv = br[j];
                        c0[j] = c0[j] + a0 * bv;
                        c1[j] = c1[j] + a1 * bv;
                        c2[j] = c2[j] + a2 * bv;
                        c3[j] = c3[j] + a3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let cr = &mut c[i * n + j0..i * n + j1];
                for t in t0..t1 {
                    let av = a[i * k + t];
                    let br = &b[t * n + j0..t * n + j1];
                    for j in 0..w {
                        cr[j] = cr[j] + av * br[j];
                    }
                }
                i += 1;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, giving `c: k×n`.
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut at = vec![S::zero(); m * k];
    transpose_into(a, m, k, &mut at);
    gemm_nn(&at, b, c, k, m, n);
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, giving `c: m×n`.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![S::zero(); n * k];
    transpose_into(b, n, k, &mut bt);
    gemm_nn(a, &bt, c, m, k, n);
}

/// Naive triple loop, used as an independent oracle in tests.
pub fn matmul_naive<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(b.rows(), k);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut s = S::zero();
        for t in 0..k {
            s = s + a.at(i, t) * b.at(t, j);
        }
        s
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_left_factor() {
        let i = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::<f64>::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn hand_dot_product() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::<f64>::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        match a.matmul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn blocked_kernels_match_naive_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (9, 300, 600), (33, 129, 17)] {
            let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
            let fast = a.matmul(&b).unwrap();
            assert_eq!(fast, matmul_naive(&a, &b), "nn {m}x{k}x{n}");

            let bt = b.transpose();
            let mut nt = vec![0.0; m * n];
            gemm_nt(a.data(), bt.data(), &mut nt, m, k, n);
            assert_eq!(nt, fast.data(), "nt {m}x{k}x{n}");
        }
    }

    #[test]
    fn gemm_tn_matches_transposed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let mut c = vec![0.0; 20];
        gemm_tn(a.data(), b.data(), &mut c, 6, 4, 5);
        let expect = matmul_naive(&a.transpose(), &b);
        assert_eq!(c, expect.data());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
