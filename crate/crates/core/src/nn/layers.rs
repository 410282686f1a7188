use super::scalar::{matmul, Scalar};

/// Square-kernel 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Saved im2col buffer plus the input spatial size.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Vec<S>,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(height), f(width))
    }

    fn im2col<S: Scalar>(&self, x: &[S], height: usize, width: usize) -> Vec<S> {
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let plane = oh * ow;
        let mut cols = vec![S::zero(); self.in_channels * k * k * plane];
        for c in 0..self.in_channels {
            let src = &x[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * width..(iy as usize + 1) * width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < width as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S], height: usize, width: usize) -> Vec<S> {
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let plane = oh * ow;
        let mut x = vec![S::zero(); self.in_channels * height * width];
        for c in 0..self.in_channels {
            let dst = &mut x[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < width as isize {
                                dst[iy as usize * width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the cache needed by [`Conv2d::backward`].
    pub fn forward<S: Scalar>(
        &self,
        x: &[S],
        height: usize,
        width: usize,
        weight: &[S],
        bias: &[S],
    ) -> (Vec<S>, ConvCache<S>) {
        debug_assert_eq!(x.len(), self.in_channels * height * width);
        let (oh, ow) = self.output_size(height, width);
        let plane = oh * ow;
        let cols = self.im2col(x, height, width);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![S::zero(); self.out_channels * plane];
        for (o, b) in out.chunks_mut(plane).zip(bias) {
            o.fill(*b);
        }
        matmul(self.out_channels, ckk, plane, weight, false, &cols, false, &mut out, true);
        (
            out,
            ConvCache {
                cols,
                height,
                width,
            },
        )
    }

    /// Accumulates parameter gradients and, when `need_input_grad`, returns
    /// the gradient with respect to the input.
    pub fn backward<S: Scalar>(
        &self,
        dout: &[S],
        cache: &ConvCache<S>,
        weight: &[S],
        dweight: &mut [S],
        dbias: &mut [S],
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let (oh, ow) = self.output_size(cache.height, cache.width);
        let plane = oh * ow;
        let ckk = self.in_channels * self.kernel * self.kernel;
        matmul(self.out_channels, plane, ckk, dout, false, &cache.cols, true, dweight, true);
        for (db, d) in dbias.iter_mut().zip(dout.chunks(plane)) {
            *db += d.iter().copied().sum();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![S::zero(); ckk * plane];
        matmul(ckk, self.out_channels, plane, weight, true, dout, false, &mut dcols, false);
        Some(self.col2im(&dcols, cache.height, cache.width))
    }
}

/// Group normalisation with per-channel affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache<S> {
    xhat: Vec<S>,
    rstd: Vec<S>,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    /// Uses up to `max_groups` groups, shrinking to a divisor of `channels`.
    pub fn new(channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Self { channels, groups }
    }

    pub fn forward<S: Scalar>(&self, x: &[S], gamma: &[S], beta: &[S]) -> (Vec<S>, NormCache<S>) {
        let plane = x.len() / self.channels;
        let per_group = self.channels / self.groups;
        let n = S::from_f64((per_group * plane) as f64);
        let mut xhat = vec![S::zero(); x.len()];
        let mut rstd = vec![S::zero(); self.groups];
        let mut y = vec![S::zero(); x.len()];
        for g in 0..self.groups {
            let range = g * per_group * plane..(g + 1) * per_group * plane;
            let xs = &x[range.clone()];
            let mean = xs.iter().copied().sum::<S>() / n;
            let var = xs.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / n;
            let r = S::one() / (var + S::from_f64(NORM_EPS)).sqrt();
            rstd[g] = r;
            for (h, v) in xhat[range].iter_mut().zip(xs) {
                *h = (*v - mean) * r;
            }
        }
        for c in 0..self.channels {
            let range = c * plane..(c + 1) * plane;
            for (o, h) in y[range.clone()].iter_mut().zip(&xhat[range]) {
                *o = gamma[c] * *h + beta[c];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<S: Scalar>(
        &self,
        dy: &[S],
        cache: &NormCache<S>,
        gamma: &[S],
        dgamma: &mut [S],
        dbeta: &mut [S],
    ) -> Vec<S> {
        let plane = dy.len() / self.channels;
        let per_group = self.channels / self.groups;
        let n = S::from_f64((per_group * plane) as f64);
        let mut dxhat = vec![S::zero(); dy.len()];
        for c in 0..self.channels {
            let range = c * plane..(c + 1) * plane;
            let (mut sg, mut sb) = (S::zero(), S::zero());
            for ((d, h), o) in dy[range.clone()]
                .iter()
                .zip(&cache.xhat[range.clone()])
                .zip(&mut dxhat[range])
            {
                sg += *d * *h;
                sb += *d;
                *o = *d * gamma[c];
            }
            dgamma[c] += sg;
            dbeta[c] += sb;
        }
        let mut dx = vec![S::zero(); dy.len()];
        for g in 0..self.groups {
            let range = g * per_group * plane..(g + 1) * per_group * plane;
            let dh = &dxhat[range.clone()];
            let h = &cache.xhat[range.clone()];
            let sum_dh: S = dh.iter().copied().sum();
            let sum_dh_h: S = dh.iter().zip(h).map(|(a, b)| *a * *b).sum();
            let r = cache.rstd[g];
            for ((o, d), hv) in dx[range].iter_mut().zip(dh).zip(h) {
                *o = r / n * (n * *d - sum_dh - *hv * sum_dh_h);
            }
        }
        dx
    }
}

/// `y = W x + b` with `W` stored `out x in`.
pub fn dense_forward<S: Scalar>(x: &[S], weight: &[S], bias: &[S]) -> Vec<S> {
    let mut y = bias.to_vec();
    matmul(bias.len(), x.len(), 1, weight, false, x, false, &mut y, true);
    y
}

/// Accumulates dense gradients and returns `dL/dx`.
pub fn dense_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    weight: &[S],
    dweight: &mut [S],
    dbias: &mut [S],
) -> Vec<S> {
    matmul(dy.len(), 1, x.len(), dy, false, x, false, dweight, true);
    for (b, d) in dbias.iter_mut().zip(dy) {
        *b += *d;
    }
    let mut dx = vec![S::zero(); x.len()];
    matmul(x.len(), dy.len(), 1, weight, true, dy, false, &mut dx, false);
    dx
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|v| *v * sigmoid(*v)).collect()
}

pub fn silu_backward<S: Scalar>(dy: &[S], x: &[S]) -> Vec<S> {
    dy.iter()
        .zip(x)
        .map(|(d, v)| {
            let s = sigmoid(*v);
            *d * s * (S::one() + *v * (S::one() - s))
        })
        .collect()
}

/// Nearest-neighbour 2x upsampling of a `channels x h x w` map.
pub fn upsample2x<S: Scalar>(x: &[S], channels: usize, height: usize, width: usize) -> Vec<S> {
    let (h2, w2) = (height * 2, width * 2);
    let mut y = vec![S::zero(); channels * h2 * w2];
    for c in 0..channels {
        for yy in 0..h2 {
            for xx in 0..w2 {
                y[(c * h2 + yy) * w2 + xx] = x[(c * height + yy / 2) * width + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<S: Scalar>(
    dy: &[S],
    channels: usize,
    height: usize,
    width: usize,
) -> Vec<S> {
    let (h2, w2) = (height * 2, width * 2);
    let mut dx = vec![S::zero(); channels * height * width];
    for c in 0..channels {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dx[(c * height + yy / 2) * width + xx / 2] += dy[(c * h2 + yy) * w2 + xx];
            }
        }
    }
    dx
}

/// Stacks two CHW maps of equal spatial size along the channel axis.
pub fn concat_channels<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let conv = Conv2d::new(2, 3, 3, 1);
        let (h, w) = (4, 5);
        let x = seq(2 * h * w, 0.3);
        let wt = seq(conv.weight_len(), 0.7);
        let b = vec![0.1, -0.2, 0.3];
        let (y, _) = conv.forward(&x, h, w, &wt, &b);
        for o in 0..3 {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += wt[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y[(o * h + oy) * w + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_conv_halves_size() {
        let conv = Conv2d::new(1, 1, 3, 2);
        assert_eq!(conv.output_size(16, 16), (8, 8));
        assert_eq!(conv.output_size(8, 8), (4, 4));
    }

    #[test]
    fn conv_gradients() {
        for stride in [1, 2] {
            let conv = Conv2d::new(2, 3, 3, stride);
            let (h, w) = (4, 4);
            let x = seq(2 * h * w, 0.3);
            let wt = seq(conv.weight_len(), 0.7);
            let b = vec![0.1, -0.2, 0.3];
            let (y, cache) = conv.forward(&x, h, w, &wt, &b);
            let r = seq(y.len(), 1.3);
            let loss = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
                let (y, _) = conv.forward(x, h, w, wt, b);
                y.iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; 3];
            let dx = conv.backward(&r, &cache, &wt, &mut dw, &mut db, true).unwrap();
            assert_close(&dx, &numeric_grad(|x| loss(x, &wt, &b), &x), 1e-6);
            assert_close(&dw, &numeric_grad(|wt| loss(&x, wt, &b), &wt), 1e-6);
            assert_close(&db, &numeric_grad(|b| loss(&x, &wt, b), &b), 1e-6);
        }
    }

    #[test]
    fn group_norm_gradients() {
        let gn = GroupNorm::new(4, 2);
        assert_eq!(gn.groups, 2);
        let x = seq(4 * 6, 0.9);
        let gamma = vec![1.0, 0.5, -0.7, 2.0];
        let beta = vec![0.0, 0.1, 0.2, -0.3];
        let r = seq(x.len(), 0.4);
        let loss = |x: &[f64], g: &[f64], b: &[f64]| -> f64 {
            let (y, _) = gn.forward(x, g, b);
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gn.forward(&x, &gamma, &beta);
        let mut dg = vec![0.0; 4];
        let mut db = vec![0.0; 4];
        let dx = gn.backward(&r, &cache, &gamma, &mut dg, &mut db);
        assert_close(&dx, &numeric_grad(|x| loss(x, &gamma, &beta), &x), 1e-5);
        assert_close(&dg, &numeric_grad(|g| loss(&x, g, &beta), &gamma), 1e-6);
        assert_close(&db, &numeric_grad(|b| loss(&x, &gamma, b), &beta), 1e-6);
    }

    #[test]
    fn group_count_divides_channels() {
        assert_eq!(GroupNorm::new(16, 8).groups, 8);
        assert_eq!(GroupNorm::new(4, 8).groups, 4);
        assert_eq!(GroupNorm::new(12, 8).groups, 6);
    }

    #[test]
    fn dense_and_silu_gradients() {
        let x = seq(3, 0.5);
        let wt = seq(6, 0.8);
        let b = vec![0.2, -0.1];
        let r = vec![0.7, -1.1];
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
            let y = silu(&dense_forward(x, wt, b));
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let pre = dense_forward(&x, &wt, &b);
        let dpre = silu_backward(&r, &pre);
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let dx = dense_backward(&dpre, &x, &wt, &mut dw, &mut db);
        assert_close(&dx, &numeric_grad(|x| loss(x, &wt, &b), &x), 1e-7);
        assert_close(&dw, &numeric_grad(|w| loss(&x, w, &b), &wt), 1e-7);
        assert_close(&db, &numeric_grad(|bb| loss(&x, &wt, bb), &b), 1e-7);
    }

    #[test]
    fn upsample_round_trip_sums_blocks() {
        let x = seq(2 * 2 * 3, 0.2);
        let y = upsample2x(&x, 2, 2, 3);
        assert_eq!(y.len(), 2 * 4 * 6);
        let back = upsample2x_backward(&y, 2, 2, 3);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }
}
