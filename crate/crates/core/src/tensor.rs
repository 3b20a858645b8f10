//! Dense activations in channel-major `C×N×H×W` layout plus the GEMM
//! primitive every layer is built on.
//!
//! Keeping the batch axis inside the channel axis lets a 3×3 convolution over
//! a whole batch run as a single `[out_c, in_c·9] × [in_c·9, N·H·W]` product
//! whose result is already in the layout the next layer expects. Feature
//! matrices are the `H = W = 1` special case, i.e. `[features, N]`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// Checkpoint dtype tag.
    const DTYPE: u8;

    /// Raw strided GEMM: `C = alpha·A·B + beta·C`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// dimensions, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: u8 = 0;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C[m×n] = alpha·op(A)·op(B) + beta·C`.
///
/// `A` is stored `m×k` (or `k×m` when `trans_a`), `B` is stored `k×n` (or
/// `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(trans_a: bool, trans_b: bool, m: usize, n: usize, k: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and `c` is a distinct &mut borrow.
    unsafe { T::gemm_raw(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1) }
}

/// Shape of a single sample's activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.plane()
    }
}

/// A batch of activation maps stored channel-major: `data[((c·N + n)·H + y)·W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Maps<T> {
    pub shape: MapShape,
    pub batch: usize,
    pub data: Vec<T>,
}

impl<T: Real> Maps<T> {
    pub fn zeros(shape: MapShape, batch: usize) -> Self {
        Self { shape, batch, data: vec![T::zero(); shape.numel() * batch] }
    }

    pub fn from_vec(shape: MapShape, batch: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() * batch {
            return Err(Error::Dimension(format!("buffer of {} values cannot hold {batch} maps of {shape:?}", data.len())));
        }
        Ok(Self { shape, batch, data })
    }

    /// Feature matrix `[features, batch]`.
    pub fn features(features: usize, batch: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(MapShape::new(features, 1, 1), batch, data)
    }

    /// Contiguous plane for channel `c` of sample `n`.
    pub fn plane(&self, c: usize, n: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (c * self.batch + n) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (c * self.batch + n) * p;
        &mut self.data[start..start + p]
    }

    /// Samples `[start, end)` as a new batch.
    pub fn select(&self, start: usize, end: usize) -> Maps<T> {
        assert!(start <= end && end <= self.batch);
        let p = self.shape.plane();
        let nb = end - start;
        let mut data = Vec::with_capacity(self.shape.channels * nb * p);
        for c in 0..self.shape.channels {
            let base = (c * self.batch + start) * p;
            data.extend_from_slice(&self.data[base..base + nb * p]);
        }
        Maps { shape: self.shape, batch: nb, data }
    }

    /// Adds `part` into samples `[start, start + part.batch)` of `self`.
    pub fn add_into(&mut self, start: usize, part: &Maps<T>) {
        assert_eq!(self.shape, part.shape);
        assert!(start + part.batch <= self.batch);
        let p = self.shape.plane();
        for c in 0..self.shape.channels {
            let dst = (c * self.batch + start) * p;
            let src = c * part.batch * p;
            let len = part.batch * p;
            for (d, s) in self.data[dst..dst + len].iter_mut().zip(&part.data[src..src + len]) {
                *d = *d + *s;
            }
        }
    }

    /// One sample's values in `C×H×W` order.
    pub fn sample_chw(&self, n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.shape.numel());
        for c in 0..self.shape.channels {
            out.extend_from_slice(self.plane(c, n));
        }
        out
    }

    /// Concatenates two batches with equal map shapes along the batch axis.
    pub fn concat(a: &Maps<T>, b: &Maps<T>) -> Result<Maps<T>> {
        if a.shape != b.shape {
            return Err(Error::Dimension(format!("cannot concat {:?} with {:?}", a.shape, b.shape)));
        }
        let p = a.shape.plane();
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for c in 0..a.shape.channels {
            data.extend_from_slice(&a.data[c * a.batch * p..(c + 1) * a.batch * p]);
            data.extend_from_slice(&b.data[c * b.batch * p..(c + 1) * b.batch * p]);
        }
        Ok(Maps { shape: a.shape, batch: a.batch + b.batch, data })
    }

    pub fn add_assign(&mut self, other: &Maps<T>) {
        assert_eq!(self.shape, other.shape);
        assert_eq!(self.batch, other.batch);
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + *s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_every_transpose_combination() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(&a, &b, m, n, k);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { transpose(&a, m, k) } else { a.clone() };
            let bb = if tb { transpose(&b, k, n) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, n, k, 1.0, &aa, &bb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_and_concat_are_inverse() {
        let shape = MapShape::new(2, 2, 2);
        let data: Vec<f32> = (0..shape.numel() * 5).map(|v| v as f32).collect();
        let maps = Maps::from_vec(shape, 5, data).unwrap();
        let joined = Maps::concat(&maps.select(0, 2), &maps.select(2, 5)).unwrap();
        assert_eq!(joined, maps);
        assert_eq!(maps.select(3, 4).sample_chw(0), maps.sample_chw(3));
    }
}
