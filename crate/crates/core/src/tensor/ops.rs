use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl<T: Scalar> Tensor<T> {
    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_same_shape(other, "zip")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn abs(&self) -> Tensor<T> {
        self.map(|v| v.abs())
    }

    pub fn square(&self) -> Tensor<T> {
        self.map(|v| v * v)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.map(|v| v + s)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a * b)
    }

    /// Passes `grad` through where `self > 0` and zeroes it elsewhere.
    pub fn relu_mask(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(grad, |x, g| if x > T::zero() { g } else { T::zero() })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of all elements in ascending flat order.
    pub fn sum_all(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Inner product in ascending flat order.
    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    /// Reduces over `axes`, dropping them from the shape. Each output element
    /// is folded in ascending input flat-index order.
    pub fn reduce(&self, axes: &[usize], kind: ReduceKind) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(dim_err!(
                    "invalid reduction axis {a} for shape {:?}",
                    self.shape
                ));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&i| !reduced[i])
            .map(|i| self.shape[i])
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();

        // stride of each input axis within the output buffer (0 for reduced axes)
        let mut out_stride = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            if !reduced[i] {
                out_stride[i] = s;
                s *= self.shape[i];
            }
        }

        let init = match kind {
            ReduceKind::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_len];
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        for &v in &self.data {
            match kind {
                ReduceKind::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
                _ => out[o] += v,
            }
            // advance the multi-index, tracking the output offset
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                o += out_stride[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                o -= out_stride[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        if kind == ReduceKind::Mean {
            let c = T::of(count as f64);
            for v in &mut out {
                *v = *v / c;
            }
        }
        Tensor::new(&out_shape, out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], data)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, each output accumulated in ascending `k`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        // Four k-steps per sweep over the row; each element still receives
        // its terms one at a time in ascending k.
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                let mut o = row[j];
                o += a0 * b0[j];
                o += a1 * b1[j];
                o += a2 * b2[j];
                o += a3 * b3[j];
                row[j] = o;
            }
            kk += 4;
        }
        for kk in kk..k {
            let aik = arow[kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` with `a` stored as `k×m`, ascending `k`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` with `b` stored as `n×k`, ascending `k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    gemm_nn(m, k, n, a, &bt, out);
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    crate::par::for_each_chunk_mut(&mut out, n, |i, row| {
        gemm_nn(1, k, n, &ad[i * k..(i + 1) * k], bd, row);
    });
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&a, &z).unwrap(), z);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = t(&[2, 3], &[0.; 6]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut nn);
        let at = t(&[2, 3], &a).transpose2().unwrap();
        let mut tn = vec![0.0; 8];
        gemm_tn(2, 3, 4, at.data(), &b, &mut tn);
        let bt = t(&[3, 4], &b).transpose2().unwrap();
        let mut nt = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, bt.data(), &mut nt);
        assert_eq!(nn, tn);
        assert_eq!(nn, nt);
    }

    #[test]
    fn reduce_examples() {
        let v = t(&[3], &[1., 2., 3.]);
        assert_eq!(v.reduce(&[0], ReduceKind::Sum).unwrap().data(), &[6.]);
        let s = t(&[1], &[4.25]);
        assert_eq!(s.reduce(&[0], ReduceKind::Mean).unwrap().data(), &[4.25]);
        let m = t(&[2], &[-1., -5.]);
        assert_eq!(m.reduce(&[0], ReduceKind::Max).unwrap().data(), &[-1.]);
    }

    #[test]
    fn reduce_inner_axes() {
        // 2x3x2
        let x = t(&[2, 3, 2], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let r = x.reduce(&[0, 2], ReduceKind::Sum).unwrap();
        assert_eq!(r.shape(), &[3]);
        assert_eq!(r.data(), &[0. + 1. + 6. + 7., 2. + 3. + 8. + 9., 4. + 5. + 10. + 11.]);
        let r = x.reduce(&[1], ReduceKind::Max).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn reduce_rejects_bad_axes() {
        let x = t(&[2, 2], &[0.; 4]);
        assert!(x.reduce(&[2], ReduceKind::Sum).is_err());
        assert!(x.reduce(&[0, 0], ReduceKind::Sum).is_err());
    }

    #[test]
    fn reduce_is_bitwise_repeatable() {
        let x = t(
            &[4, 5, 3],
            &(0..60).map(|i| (i as f64 * 0.37).sin() * 1e3).collect::<Vec<_>>(),
        );
        let a = x.reduce(&[0, 2], ReduceKind::Sum).unwrap();
        let b = x.reduce(&[0, 2], ReduceKind::Sum).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[2], &[-2., 3.]).abs().data(), &[2., 3.]);
        assert_eq!(t(&[2], &[1., -2.]).square().data(), &[1., 4.]);
        let p = t(&[2], &[1., 2.]).mul(&t(&[2], &[3., 4.])).unwrap();
        assert_eq!(p.data(), &[3., 8.]);
        assert!(t(&[2], &[1., 2.]).add(&t(&[3], &[1., 2., 3.])).is_err());
        let g = t(&[2], &[-1., 2.]).relu_mask(&t(&[2], &[5., 7.])).unwrap();
        assert_eq!(g.data(), &[0., 7.]);
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }
}
