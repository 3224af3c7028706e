//! Single-sample layer kernels with analytic backward passes.
//!
//! Inputs are `[c, h, w]` for spatial layers and `[n]` for dense ones.
//! All reductions accumulate in `f64` in a fixed loop order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.to_f64()).collect()
}

fn from_f64<T: Scalar>(xs: Vec<f64>) -> Vec<T> {
    xs.into_iter().map(T::from_f64).collect()
}

/// Valid output range for a kernel offset `d ∈ {-1, 0, 1}` over length `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = input.chw()?;
    let c_out = match weights.shape()[..] {
        [co, ci, 3, 3] if ci == c_in => co,
        _ => return Err(Error::shape(format!("weights [c_out, {c_in}, 3, 3]"), format!("{:?}", weights.shape()))),
    };
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!("bias [{c_out}]"), format!("{:?}", bias.shape())));
    }
    Ok((c_in, c_out, h, w))
}

/// Unfold `[c, h, w]` into a `[c·9, h·w]` patch matrix (zero padded).
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut col = vec![0.0f64; c * 9 * plane];
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = span(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = span(dx, w);
                let row = &mut col[((ci * 9) + ky * 3 + kx) * plane..((ci * 9) + ky * 3 + kx + 1) * plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = sy * w + (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Fold a `[c·9, h·w]` patch-gradient matrix back onto `[c, h, w]`.
fn col2im(col: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut x = vec![0.0f64; c * plane];
    for ci in 0..c {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = span(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = span(dx, w);
                let row = &col[((ci * 9) + ky * 3 + kx) * plane..((ci * 9) + ky * 3 + kx + 1) * plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let d0 = sy * w + (x0 as isize + dx) as usize;
                    for (d, &g) in dst[d0..d0 + (x1 - x0)].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// 3×3 convolution, stride 1, zero padding 1, on raw buffers.
pub fn conv3x3_raw<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    c_out: usize,
) -> Vec<T> {
    let plane = h * w;
    let k = c_in * 9;
    let col = im2col(&to_f64(input), c_in, h, w);
    let wf = to_f64(weights);
    let mut acc = vec![0.0f64; plane];
    let mut out = Vec::with_capacity(c_out * plane);
    for co in 0..c_out {
        acc.fill(bias[co].to_f64());
        for (kk, &wv) in wf[co * k..(co + 1) * k].iter().enumerate() {
            axpy(&mut acc, wv, &col[kk * plane..(kk + 1) * plane]);
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

/// Gradients of the 3×3 convolution: `(d input, d weights, d bias)`. The
/// input gradient is empty when `need_input` is false.
pub fn conv3x3_backward_raw<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[T],
    c_out: usize,
    grad_out: &[T],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    conv3x3_backward_impl(input, c_in, h, w, weights, c_out, grad_out, true)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward_impl<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[T],
    c_out: usize,
    grad_out: &[T],
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let k = c_in * 9;
    let col = im2col(&to_f64(input), c_in, h, w);
    let g = to_f64(grad_out);
    let wf = to_f64(weights);
    let mut gw = vec![0.0f64; c_out * k];
    let mut gb = vec![0.0f64; c_out];
    let mut gcol = if need_input { vec![0.0f64; k * plane] } else { Vec::new() };
    for co in 0..c_out {
        let go = &g[co * plane..(co + 1) * plane];
        gb[co] = go.iter().sum();
        for kk in 0..k {
            let patch = &col[kk * plane..(kk + 1) * plane];
            gw[co * k + kk] = go.iter().zip(patch).map(|(a, b)| a * b).sum();
            if need_input {
                axpy(&mut gcol[kk * plane..(kk + 1) * plane], wf[co * k + kk], go);
            }
        }
    }
    let gx = if need_input { col2im(&gcol, c_in, h, w) } else { Vec::new() };
    (gx, gw, gb)
}

/// `[c_in, h, w] ⊛ [c_out, c_in, 3, 3] + [c_out] → [c_out, h, w]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, c_out, h, w) = check_conv(input, weights, bias)?;
    let out = conv3x3_raw(input.data(), c_in, h, w, weights.data(), bias.data(), c_out);
    Tensor::new(vec![c_out, h, w], out)
}

/// Gradient bundle for [`conv2d`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (c_in, c_out, h, w) = check_conv(input, weights, bias)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::shape(format!("[{c_out}, {h}, {w}]"), format!("{:?}", grad_out.shape())));
    }
    let (gx, gw, gb) = conv3x3_backward_raw(input.data(), c_in, h, w, weights.data(), c_out, grad_out.data());
    Ok(ConvGrads {
        input: Tensor::new(vec![c_in, h, w], from_f64(gx))?,
        weights: Tensor::new(weights.shape().to_vec(), from_f64(gw))?,
        bias: Tensor::new(vec![c_out], from_f64(gb))?,
    })
}

/// 2×2 max pool with stride 2. Returns the output and, per output element,
/// the flat input index of the first maximal element in its window.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape("even non-zero spatial dims", format!("{h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(format!("{} gradients", argmax.len()), format!("{}", grad_out.len())));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let d: &mut [T] = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = T::from_f64(d[i].to_f64() + g.to_f64());
    }
    Ok(gx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let zero = T::default();
    let data = x.data().iter().map(|&v| if v > zero { v } else { zero }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let zero = T::default();
    let data = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| if v > zero { g } else { zero }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| T::from_f64(sigmoid_scalar(v.to_f64()))).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Backward from the sigmoid's own output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| {
            let s = s.to_f64();
            T::from_f64(g.to_f64() * s * (1.0 - s))
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// `[c, h, w] → [c]` channel means.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane.max(1))
        .take(c)
        .map(|ch| T::from_f64(ch.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match input_shape {
        &[c, h, w] => (c, h, w),
        _ => return Err(Error::shape("[c, h, w]", format!("{input_shape:?}"))),
    };
    if grad_out.shape() != [c] {
        return Err(Error::shape(format!("[{c}]"), format!("{:?}", grad_out.shape())));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for &g in grad_out.data() {
        let v = T::from_f64(g.to_f64() / plane as f64);
        data.extend(std::iter::repeat_n(v, plane));
    }
    Tensor::new(input_shape.to_vec(), data)
}

pub fn dense_raw<T: Scalar>(x: &[T], weights: &[T], bias: &[T], outputs: usize) -> Vec<T> {
    let n = x.len();
    let xf = to_f64(x);
    (0..outputs)
        .map(|m| {
            let row = &weights[m * n..(m + 1) * n];
            let mut acc = bias[m].to_f64();
            for (&wv, &xv) in row.iter().zip(&xf) {
                acc += wv.to_f64() * xv;
            }
            T::from_f64(acc)
        })
        .collect()
}

/// Gradients of `W x + b`: `(d x, d W, d b)`.
pub fn dense_backward_raw<T: Scalar>(x: &[T], weights: &[T], grad_out: &[T]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len();
    let xf = to_f64(x);
    let mut gx = vec![0.0f64; n];
    let mut gw = Vec::with_capacity(weights.len());
    let gb: Vec<f64> = grad_out.iter().map(|g| g.to_f64()).collect();
    for (m, &g) in gb.iter().enumerate() {
        let row = &weights[m * n..(m + 1) * n];
        gw.extend(xf.iter().map(|&xv| g * xv));
        for (d, &wv) in gx.iter_mut().zip(row) {
            *d += g * wv.to_f64();
        }
    }
    (gx, gw, gb)
}

/// `[n] → W[m, n] · x + b[m]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = match x.shape()[..] {
        [n] => n,
        _ => return Err(Error::shape("[n]", format!("{:?}", x.shape()))),
    };
    let m = match weights.shape()[..] {
        [m, nn] if nn == n => m,
        _ => return Err(Error::shape(format!("weights [m, {n}]"), format!("{:?}", weights.shape()))),
    };
    if bias.shape() != [m] {
        return Err(Error::shape(format!("bias [{m}]"), format!("{:?}", bias.shape())));
    }
    Tensor::new(vec![m], dense_raw(x.data(), weights.data(), bias.data(), m))
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect())
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Dropout in train mode draws a mask from `rng` and returns it for the
/// backward pass; eval mode is the identity.
pub fn dropout<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<f64>>)> {
    check_rate(rate)?;
    if !train || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    Ok((apply_mask(x, &mask), Some(mask)))
}

pub fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &[f64]) -> Tensor<T> {
    let data = x.data().iter().zip(mask).map(|(&v, &m)| T::from_f64(v.to_f64() * m)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution with explicit bounds checks.
    fn naive_conv(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * h * w];
        for co in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b[co];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += k[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones() {
        let x = Tensor::filled(vec![1, 3, 3], 1.0f64);
        let k = Tensor::filled(vec![1, 1, 3, 3], 1.0f64);
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let x = Tensor::filled(vec![2, 4, 5], 3.0f32);
        let k = Tensor::zeros(vec![3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[3, 4, 5]);
        assert!(y.data()[..20].iter().all(|&v| v == 0.5));
        assert!(y.data()[40..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::filled(vec![2, 4, 4], 1.0f32);
        let k = Tensor::zeros(vec![3, 1, 3, 3]);
        let b = Tensor::zeros(vec![3]);
        match conv2d(&x, &k, &b) {
            Err(Error::Shape { expected, got }) => {
                assert!(expected.contains("[c_out, 2, 3, 3]"));
                assert!(got.contains("[3, 1, 3, 3]"));
            }
            other => panic!("{other:?}"),
        }
        let k = Tensor::zeros(vec![3, 2, 3, 3]);
        assert!(conv2d(&x, &k, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn pool_cases() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::filled(vec![1, 2, 4], 7.0f32);
        let (y, arg) = maxpool2x2(&c).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0]);
        assert_eq!(arg, vec![0, 2]);
        let g = maxpool2x2_backward(&Tensor::filled(vec![1, 1, 2], 1.0f32), &arg, &[1, 2, 4]).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        assert!(maxpool2x2(&Tensor::<f32>::zeros(vec![1, 3, 4])).is_err());
    }

    #[test]
    fn pool_matches_window_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 4, 4], data.clone()).unwrap();
        let (y, _) = maxpool2x2(&x).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(data[c * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(y.data()[c * 4 + oy * 2 + ox], m);
                }
            }
        }
    }

    #[test]
    fn elementwise_cases() {
        let r = relu(&Tensor::from_vec(vec![-1.0f32, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::from_vec(vec![0.0f32])).data(), &[0.5]);
        assert!(sigmoid_scalar(-1000.0).is_finite() && sigmoid_scalar(1000.0) == 1.0);
        let g = global_avg_pool(&Tensor::filled(vec![2, 3, 3], 4.25f32)).unwrap();
        assert_eq!(g.data(), &[4.25, 4.25]);
        let mut eye = Tensor::<f32>::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let x = Tensor::from_vec(vec![0.3f32, -2.0, 5.0]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(vec![3])).unwrap(), x);
        assert!(dense(&x, &Tensor::zeros(vec![2, 2]), &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(vec![1.0f32, 2.0, 3.0]);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, false, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap().0, x);
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Argument(_))));
        let (y, mask) = dropout(&x, 0.5, true, &mut rng).unwrap();
        let mask = mask.unwrap();
        for ((&yv, &xv), &m) in y.data().iter().zip(x.data()).zip(&mask) {
            assert!(m == 0.0 || m == 2.0);
            assert_eq!(yv, xv * m as f32);
        }
    }

    #[test]
    fn dropout_expectation() {
        // Monte-Carlo mean over 1e5 draws stays within 1% of the input.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::from_vec(vec![1.0f64, -3.0, 0.5]);
        let draws = 100_000;
        let mut sum = [0.0f64; 3];
        for _ in 0..draws {
            let (y, _) = dropout(&x, 0.5, true, &mut rng).unwrap();
            for (s, v) in sum.iter_mut().zip(y.data()) {
                *s += v;
            }
        }
        for (s, &v) in sum.iter().zip(x.data()) {
            let mean = s / draws as f64;
            assert!((mean - v).abs() <= 0.01 * v.abs(), "{mean} vs {v}");
        }
    }

    proptest! {
        #[test]
        fn conv_matches_naive(c_in in 1usize..4, c_out in 1usize..4, h in 1usize..9, w in 1usize..9, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..c_out * c_in * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv3x3_raw(&x, c_in, h, w, &k, &b, c_out);
            let slow = naive_conv(&x, c_in, h, w, &k, &b, c_out);
            for (a, e) in fast.iter().zip(&slow) {
                prop_assert!((a - e).abs() < 1e-12);
            }
        }

        #[test]
        fn shape_laws(c in 1usize..16, hh in 1usize..8, ww in 1usize..8, co in 1usize..16) {
            let (h, w) = (2 * hh, 2 * ww);
            let x = Tensor::<f32>::filled(vec![c, h, w], 0.25);
            let y = conv2d(&x, &Tensor::zeros(vec![co, c, 3, 3]), &Tensor::zeros(vec![co])).unwrap();
            prop_assert_eq!(y.shape(), &[co, h, w]);
            let (p, arg) = maxpool2x2(&x).unwrap();
            prop_assert_eq!(p.shape(), &[c, hh, ww]);
            prop_assert_eq!(arg.len(), c * hh * ww);
        }

        #[test]
        fn finite_for_bounded_inputs(v in proptest::collection::vec(-1e3f32..1e3, 1..64)) {
            let x = Tensor::from_vec(v);
            prop_assert!(sigmoid(&x).all_finite());
            prop_assert!(relu(&x).all_finite());
        }
    }
}
