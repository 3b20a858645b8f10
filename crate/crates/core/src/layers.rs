//! Layer primitives with hand-written backward passes.
//!
//! Parameters live in [`Param`]s owned by the layers; gradients live in a
//! separate [`Grads`] store indexed by parameter slot, so a forward pass only
//! needs `&self`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, MapShape, Maps, Real};

/// A named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, value: vec![T::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Gradient buffers, one per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub bufs: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(params: &[&Param<T>]) -> Self {
        Self { bufs: params.iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    pub fn fill_zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn add_scaled(&mut self, other: &Grads<T>, s: T) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y * s;
            }
        }
    }

    pub fn squared_norm(&self, slots: impl IntoIterator<Item = usize>) -> f64 {
        slots.into_iter().map(|s| self.bufs[s].iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum()
    }
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Fan-in scaled uniform init: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
fn init_uniform<T: Real, R: Rng>(value: &mut [T], fan_in: usize, rng: &mut R) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in value.iter_mut() {
        *v = T::lit(rng.gen_range(-bound..bound));
    }
}

/// 3×3 convolution, stride 1, zero padding 1, followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// Slot of `weight`; `bias` is `slot + 1`.
    pub slot: usize,
}

/// Saved state for [`Conv3x3::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input_shape: MapShape,
    batch: usize,
    col: Vec<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn new<R: Rng>(name: &str, in_channels: usize, out_channels: usize, slot: usize, rng: &mut R) -> Self {
        let mut weight = Param::zeros(format!("{name}.weight"), vec![out_channels, in_channels, 3, 3]);
        init_uniform(&mut weight.value, in_channels * 9, rng);
        let bias = Param::zeros(format!("{name}.bias"), vec![out_channels]);
        Self { in_channels, out_channels, weight, bias, slot }
    }

    pub fn output_shape(&self, input: MapShape) -> MapShape {
        MapShape::new(self.out_channels, input.height, input.width)
    }

    pub fn forward(&self, x: &Maps<T>) -> (Maps<T>, ConvCache<T>) {
        assert_eq!(x.shape.channels, self.in_channels, "conv input channels");
        let (h, w, nb) = (x.shape.height, x.shape.width, x.batch);
        let cols = nb * h * w;
        let col = im2col(x);
        let out_shape = self.output_shape(x.shape);
        let mut out = vec![T::zero(); self.out_channels * cols];
        gemm(false, false, self.out_channels, cols, self.in_channels * 9, T::one(), &self.weight.value, &col, T::zero(), &mut out);
        for (co, row) in out.chunks_mut(cols).enumerate() {
            let b = self.bias.value[co];
            for v in row.iter_mut() {
                let z = *v + b;
                *v = if z > T::zero() { z } else { T::zero() };
            }
        }
        let y = Maps { shape: out_shape, batch: nb, data: out };
        (y, ConvCache { input_shape: x.shape, batch: nb, col })
    }

    /// Backward through ReLU and the convolution. `y` is the forward output,
    /// `dy` the gradient w.r.t. it. Accumulates into `grads`; returns the
    /// input gradient when `need_input_grad`.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        y: &Maps<T>,
        dy: &Maps<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Maps<T>> {
        let cols = cache.batch * cache.input_shape.plane();
        let mut dz = dy.data.clone();
        for (g, &o) in dz.iter_mut().zip(&y.data) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
        let k = self.in_channels * 9;
        gemm(false, true, self.out_channels, k, cols, T::one(), &dz, &cache.col, T::one(), &mut grads.bufs[self.slot]);
        for (co, row) in dz.chunks(cols).enumerate() {
            let s: T = row.iter().copied().sum();
            let gb = &mut grads.bufs[self.slot + 1][co];
            *gb = *gb + s;
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![T::zero(); k * cols];
        gemm(true, false, k, cols, self.out_channels, T::one(), &self.weight.value, &dz, T::zero(), &mut dcol);
        Some(col2im(&dcol, cache.input_shape, cache.batch))
    }
}

fn im2col<T: Real>(x: &Maps<T>) -> Vec<T> {
    let (c_in, h, w, nb) = (x.shape.channels, x.shape.height, x.shape.width, x.batch);
    let cols = nb * h * w;
    let mut col = vec![T::zero(); c_in * 9 * cols];
    for ci in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..nb {
                    let src = x.plane(ci, n);
                    let dst = &mut dst_row[n * h * w..(n + 1) * h * w];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * w..(oy + 1) * w];
                        match kx {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(dcol: &[T], shape: MapShape, nb: usize) -> Maps<T> {
    let (c_in, h, w) = (shape.channels, shape.height, shape.width);
    let cols = nb * h * w;
    let mut dx = Maps::zeros(shape, nb);
    for ci in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let src_row = &dcol[row * cols..(row + 1) * cols];
                for n in 0..nb {
                    let src = &src_row[n * h * w..(n + 1) * h * w];
                    let dst = dx.plane_mut(ci, n);
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[oy * w..(oy + 1) * w];
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let (d, s) = match kx {
                            0 => (&mut drow[..w - 1], &srow[1..]),
                            1 => (&mut drow[..], srow),
                            _ => (&mut drow[1..], &srow[..w - 1]),
                        };
                        for (a, b) in d.iter_mut().zip(s) {
                            *a = *a + *b;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Fully connected layer on `[features, batch]` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub slot: usize,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, slot: usize, rng: &mut R) -> Self {
        let mut weight = Param::zeros(format!("{name}.weight"), vec![out_features, in_features]);
        init_uniform(&mut weight.value, in_features, rng);
        let bias = Param::zeros(format!("{name}.bias"), vec![out_features]);
        Self { in_features, out_features, weight, bias, slot }
    }

    pub fn forward(&self, x: &Maps<T>) -> Maps<T> {
        assert_eq!(x.shape.numel(), self.in_features, "linear input features");
        let nb = x.batch;
        let mut out = vec![T::zero(); self.out_features * nb];
        gemm(false, false, self.out_features, nb, self.in_features, T::one(), &self.weight.value, &x.data, T::zero(), &mut out);
        for (o, row) in out.chunks_mut(nb.max(1)).enumerate() {
            let b = self.bias.value[o];
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        Maps { shape: MapShape::new(self.out_features, 1, 1), batch: nb, data: out }
    }

    pub fn backward(&self, x: &Maps<T>, dy: &Maps<T>, grads: &mut Grads<T>, need_input_grad: bool) -> Option<Maps<T>> {
        let nb = x.batch;
        gemm(false, true, self.out_features, self.in_features, nb, T::one(), &dy.data, &x.data, T::one(), &mut grads.bufs[self.slot]);
        if nb > 0 {
            for (o, row) in dy.data.chunks(nb).enumerate() {
                let s: T = row.iter().copied().sum();
                let gb = &mut grads.bufs[self.slot + 1][o];
                *gb = *gb + s;
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = vec![T::zero(); self.in_features * nb];
        gemm(true, false, self.in_features, nb, self.out_features, T::one(), &self.weight.value, &dy.data, T::zero(), &mut dx);
        Some(Maps { shape: MapShape::new(self.in_features, 1, 1), batch: nb, data: dx })
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
pub fn maxpool2_forward<T: Real>(x: &Maps<T>) -> (Maps<T>, Vec<u32>) {
    let (h, w) = (x.shape.height, x.shape.width);
    let (oh, ow) = (h / 2, w / 2);
    let out_shape = MapShape::new(x.shape.channels, oh, ow);
    let mut y = Maps::zeros(out_shape, x.batch);
    let mut arg = vec![0u32; y.data.len()];
    let op = oh * ow;
    for c in 0..x.shape.channels {
        for n in 0..x.batch {
            let src = x.plane(c, n);
            let base = (c * x.batch + n) * op;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    y.data[base + oy * ow + ox] = src[best];
                    arg[base + oy * ow + ox] = best as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(input_shape: MapShape, batch: usize, arg: &[u32], dy: &Maps<T>) -> Maps<T> {
    let mut dx = Maps::zeros(input_shape, batch);
    let op = dy.shape.plane();
    let ip = input_shape.plane();
    for c in 0..input_shape.channels {
        for n in 0..batch {
            let base_o = (c * batch + n) * op;
            let base_i = (c * batch + n) * ip;
            for i in 0..op {
                let t = base_i + arg[base_o + i] as usize;
                dx.data[t] = dx.data[t] + dy.data[base_o + i];
            }
        }
    }
    dx
}

/// Global average pooling to a `[channels, batch]` feature matrix.
pub fn gap_forward<T: Real>(x: &Maps<T>) -> Maps<T> {
    let inv = T::one() / T::lit(x.shape.plane() as f64);
    let mut out = Vec::with_capacity(x.shape.channels * x.batch);
    for c in 0..x.shape.channels {
        for n in 0..x.batch {
            let s: T = x.plane(c, n).iter().copied().sum();
            out.push(s * inv);
        }
    }
    Maps { shape: MapShape::new(x.shape.channels, 1, 1), batch: x.batch, data: out }
}

pub fn gap_backward<T: Real>(input_shape: MapShape, dy: &Maps<T>) -> Maps<T> {
    let inv = T::one() / T::lit(input_shape.plane() as f64);
    let mut dx = Maps::zeros(input_shape, dy.batch);
    for c in 0..input_shape.channels {
        for n in 0..dy.batch {
            let g = dy.data[c * dy.batch + n] * inv;
            dx.plane_mut(c, n).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

pub fn relu_forward<T: Real>(x: &Maps<T>) -> Maps<T> {
    let data = x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Maps { shape: x.shape, batch: x.batch, data }
}

pub fn relu_backward<T: Real>(y: &Maps<T>, dy: &Maps<T>) -> Maps<T> {
    let data = dy.data.iter().zip(&y.data).map(|(&g, &o)| if o > T::zero() { g } else { T::zero() }).collect();
    Maps { shape: dy.shape, batch: dy.batch, data }
}

/// Inverted dropout. Returns the output and the multiplicative mask.
pub fn dropout_forward<T: Real, R: Rng>(x: &Maps<T>, p: f64, mode: Mode, rng: &mut R) -> (Maps<T>, Option<Vec<T>>) {
    if mode == Mode::Eval || p <= 0.0 {
        return (x.clone(), None);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Maps { shape: x.shape, batch: x.batch, data }, Some(mask))
}

pub fn dropout_backward<T: Real>(mask: Option<&[T]>, dy: &Maps<T>) -> Maps<T> {
    match mask {
        None => dy.clone(),
        Some(m) => Maps { shape: dy.shape, batch: dy.batch, data: dy.data.iter().zip(m).map(|(&g, &k)| g * k).collect() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn conv_naive(conv: &Conv3x3<f64>, x: &Maps<f64>) -> Maps<f64> {
        let (h, w) = (x.shape.height, x.shape.width);
        let mut y = Maps::zeros(conv.output_shape(x.shape), x.batch);
        for co in 0..conv.out_channels {
            for n in 0..x.batch {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut s = conv.bias.value[co];
                        for ci in 0..conv.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * conv.in_channels + ci) * 3 + ky) * 3 + kx];
                                    s += wv * x.plane(ci, n)[iy as usize * w + ix as usize];
                                }
                            }
                        }
                        y.plane_mut(co, n)[oy * w + ox] = s.max(0.0);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3::<f64>::new("c", 2, 3, 0, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.05];
        let shape = MapShape::new(2, 4, 5);
        let data = (0..shape.numel() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Maps::from_vec(shape, 2, data).unwrap();
        let (y, _) = conv.forward(&x);
        let expect = conv_naive(&conv, &x);
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv3x3::<f64>::new("c", 2, 2, 0, &mut rng);
        let shape = MapShape::new(2, 3, 4);
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Maps::from_vec(shape, 1, data).unwrap();
        let weights: Vec<f64> = (0..2 * 12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let f = |x: &Maps<f64>| conv.forward(x).0.data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
        let (y, cache) = conv.forward(&x);
        let dy = Maps::from_vec(y.shape, 1, weights.clone()).unwrap();
        let mut grads = Grads::zeros_like(&[&conv.weight, &conv.bias]);
        let dx = conv.backward(&cache, &y, &dy, &mut grads, true).unwrap();
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let num = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-6, "input grad {i}: {num} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let shape = MapShape::new(1, 2, 2);
        let x = Maps::from_vec(shape, 1, vec![1.0f64, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data, vec![4.0]);
        let dx = maxpool2_backward(shape, 1, &arg, &Maps::from_vec(y.shape, 1, vec![1.0]).unwrap());
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Maps::features(3, 2, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (y, mask) = dropout_forward(&x, 0.4, Mode::Eval, &mut rng);
        assert_eq!(y, x);
        assert!(mask.is_none());
    }
}
