use rand::Rng;

use super::{Float, Mode, Param, Tensor};

/// Per-call state the convolution needs for its backward pass.
#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

/// 2-D convolution (cross-correlation) with square kernel, stride and zero
/// padding, implemented as im2col followed by a matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache<T>>,
}

impl<T: Float> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = Param::normal(out_ch * in_ch * kernel * kernel, init_std, rng);
        Self {
            weight,
            bias: bias.then(|| Param::new(vec![T::zero(); out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// Evaluation-mode forward pass; records nothing.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x).0
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (out, cols) = self.compute(x);
        self.cache = match mode {
            Mode::Train => Some(ConvCache {
                cols,
                in_shape: x.shape(),
            }),
            Mode::Eval => None,
        };
        out
    }

    fn compute(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let kk = self.in_ch * self.kernel * self.kernel;
        let p = ho * wo;
        let mut out = Tensor::zeros([n, self.out_ch, ho, wo]);
        let mut cols = vec![T::zero(); n * kk * p];
        for b in 0..n {
            let col = &mut cols[b * kk * p..(b + 1) * kk * p];
            self.im2col(x.item(b), h, w, ho, wo, col);
            let y = out.item_mut(b);
            if let Some(bias) = &self.bias {
                for (o, row) in y.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias.value[o]);
                }
            }
            let beta = if self.bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                self.out_ch,
                kk,
                p,
                &self.weight.value,
                kk,
                1,
                col,
                p,
                1,
                beta,
                y,
            );
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .cache
            .take()
            .expect("Conv2d::backward without a training-mode forward");
        let [n, _, h, w] = cache.in_shape;
        let (ho, wo) = self.out_size(h, w);
        assert_eq!(dy.shape(), [n, self.out_ch, ho, wo], "conv grad shape");
        let kk = self.in_ch * self.kernel * self.kernel;
        let p = ho * wo;
        let mut dx = Tensor::zeros(cache.in_shape);
        let mut dcol = vec![T::zero(); kk * p];
        for b in 0..n {
            let col = &cache.cols[b * kk * p..(b + 1) * kk * p];
            let g = dy.item(b);
            // dW += dY · colsᵀ
            T::gemm(
                self.out_ch,
                p,
                kk,
                g,
                p,
                1,
                col,
                1,
                p,
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(bias) = &mut self.bias {
                for (o, row) in g.chunks_exact(p).enumerate() {
                    bias.grad[o] += row.iter().copied().sum::<T>();
                }
            }
            // dcols = Wᵀ · dY
            T::gemm(
                kk,
                self.out_ch,
                p,
                &self.weight.value,
                1,
                kk,
                g,
                p,
                1,
                T::zero(),
                &mut dcol,
            );
            self.col2im(&dcol, h, w, ho, wo, dx.item_mut(b));
        }
        dx
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, col: &mut [T]) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let p = ho * wo;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let p = ho * wo;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn params(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
}

/// Per-channel batch normalization with learned scale and shift.
///
/// Running statistics follow `running = momentum · running + (1 − momentum) · batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    momentum: T,
    eps: T,
    cache: Option<BnCache<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(momentum),
            eps: T::from_f64_lossy(1e-5),
            cache: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Normalizes with the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.gamma.len(), "batch-norm channels");
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for ch in 0..c {
            let inv = T::one() / (self.running_var[ch] + self.eps).sqrt();
            let (g, b, mu) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean[ch]);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    out.data_mut()[j] = g * (x.data()[j] - mu) * inv + b;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.gamma.len(), "batch-norm channels");
        let hw = h * w;
        let m = n * hw;
        let mt = T::from_usize(m).expect("count fits");
        let mut out = Tensor::zeros(x.shape());
        match mode {
            Mode::Eval => {
                self.cache = None;
                return self.infer(x);
            }
            Mode::Train => {
                let mut x_hat = vec![T::zero(); x.len()];
                let mut inv_std = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        sum += x.data()[off..off + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / mt;
                    let mut var = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for &v in &x.data()[off..off + hw] {
                            var += (v - mean) * (v - mean);
                        }
                    }
                    let biased = var / mt;
                    let inv = T::one() / (biased + self.eps).sqrt();
                    inv_std[ch] = inv;
                    let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            let xh = (x.data()[j] - mean) * inv;
                            x_hat[j] = xh;
                            out.data_mut()[j] = g * xh + b;
                        }
                    }
                    let unbiased = if m > 1 {
                        var / T::from_usize(m - 1).expect("count fits")
                    } else {
                        biased
                    };
                    let keep = self.momentum;
                    self.running_mean[ch] = keep * self.running_mean[ch] + (T::one() - keep) * mean;
                    self.running_var[ch] = keep * self.running_var[ch] + (T::one() - keep) * unbiased;
                }
                self.cache = Some(BnCache {
                    x_hat,
                    inv_std,
                    shape: x.shape(),
                });
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward without a training-mode forward");
        let [n, c, h, w] = cache.shape;
        assert_eq!(dy.shape(), cache.shape, "batch-norm grad shape");
        let hw = h * w;
        let mt = T::from_usize(n * hw).expect("count fits");
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    sum_dy += dy.data()[j];
                    sum_dy_xh += dy.data()[j] * cache.x_hat[j];
                }
            }
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / mt;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    dx.data_mut()[j] =
                        scale * (mt * dy.data()[j] - sum_dy - cache.x_hat[j] * sum_dy_xh);
                }
            }
        }
        dx
    }

    pub(crate) fn params(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![
            ("gamma".to_string(), &mut self.gamma),
            ("beta".to_string(), &mut self.beta),
        ]
    }

    pub(crate) fn buffers(&mut self) -> Vec<(String, &mut Vec<T>)> {
        vec![
            ("running_mean".to_string(), &mut self.running_mean),
            ("running_var".to_string(), &mut self.running_var),
        ]
    }
}

pub fn leaky_relu<T: Float>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient of [`leaky_relu`] given the forward *input* `x`.
pub fn leaky_relu_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of [`sigmoid`] given the forward *output* `y`.
pub fn sigmoid_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

pub fn upsample_nearest2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (ho, wo) = (2 * h, 2 * w);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            let s = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *v = s[xo / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                dst[(y / 2) * w + xo / 2] += src[y * wo + xo];
            }
        }
    }
    dx
}

/// Concatenates `a` and `b` along channels: `[a | b]`.
pub fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: first `ca` channels, then the rest.
pub fn split_channels<T: Float>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    assert!(ca <= c);
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * (c - ca) * hw);
    for i in 0..n {
        let item = x.item(i);
        a.extend_from_slice(&item[..ca * hw]);
        b.extend_from_slice(&item[ca * hw..]);
    }
    (
        Tensor::from_vec([n, ca, h, w], a),
        Tensor::from_vec([n, c - ca, h, w], b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (k, s, p) = (conv.kernel, conv.stride, conv.pad as isize);
        let (ho, wo) = conv.out_size(h, w);
        let mut out = Tensor::zeros([n, conv.out_ch, ho, wo]);
        for b in 0..n {
            for o in 0..conv.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p;
                                    let ix = (ox * s + kx) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * c + ci) * k + ky) * k + kx];
                                    acc += wv * x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * conv.out_ch + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (4, 2, 1)] {
            let mut conv = Conv2d::<f64>::new(3, 5, k, s, p, true, 0.5, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0, 0.5];
            let x = rand_tensor([2, 3, 8, 8], &mut rng);
            let fast = conv.forward(&x, Mode::Eval);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, convᵀ(g)> for the bias-free linear map
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 3, 4, 2, 1, false, 0.5, &mut rng);
        let x = rand_tensor([1, 2, 8, 8], &mut rng);
        let y = conv.forward(&x, Mode::Train);
        let g = rand_tensor(y.shape(), &mut rng);
        let dx = conv.backward(&g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor([2, 3, 4, 5], &mut rng);
        let up = upsample_nearest2x(&x);
        assert_eq!(up.shape(), [2, 3, 8, 10]);
        assert_eq!(up.data()[0], up.data()[11]);
        let back = upsample_nearest2x_backward(&up);
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor([2, 3, 4, 4], &mut rng);
        let b = rand_tensor([2, 2, 4, 4], &mut rng);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1, 0.9);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - 1e-5];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]);
        let y = bn.forward(&x, Mode::Eval);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1, 0.9);
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x, Mode::Train);
        assert!(y.mean().abs() < 1e-12);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
