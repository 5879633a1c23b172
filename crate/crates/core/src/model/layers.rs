//! Layers with explicit backward passes. Forward methods take `&self`;
//! backward methods accumulate into the parameters' gradient buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn filled(len: usize, v: T) -> Self {
        Self {
            value: vec![v; len],
            grad: vec![T::zero(); len],
        }
    }

    /// Zero-mean normal initialization with the given standard deviation.
    pub fn normal<R: Rng>(len: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            value: (0..len).map(|_| T::from_f64(dist.sample(rng))).collect(),
            grad: vec![T::zero(); len],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Unfolds 3x3 neighbourhoods (zero padding 1) of one `c x h x w` sample
/// into a `(c * 9) x (h * w)` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `c x h x w` sample.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch, in_ch * 9]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * 9;
        Self {
            in_ch,
            out_ch,
            weight: Param::normal(out_ch * fan_in, (2.0 / fan_in as f64).sqrt(), rng),
            bias: Param::zeros(out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_ch, "conv input channels");
        let hw = h * w;
        let mut col = vec![T::zero(); c * 9 * hw];
        let mut y = Tensor::zeros([n, self.out_ch, h, w]);
        for i in 0..n {
            im2col(x.sample(i), c, h, w, &mut col);
            let out = y.sample_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(*b);
            }
            T::gemm(self.out_ch, c * 9, hw, &self.weight.value, false, &col, false, T::one(), out);
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let mut col = vec![T::zero(); c * 9 * hw];
        let mut dcol = vec![T::zero(); c * 9 * hw];
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let g = dy.sample(i);
            for (o, db) in self.bias.grad.iter_mut().enumerate() {
                *db += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            im2col(x.sample(i), c, h, w, &mut col);
            T::gemm(self.out_ch, hw, c * 9, g, false, &col, true, T::one(), &mut self.weight.grad);
            T::gemm(c * 9, self.out_ch, hw, &self.weight.value, true, g, false, T::zero(), &mut dcol);
            col2im(&dcol, c, h, w, dx.sample_mut(i));
        }
        dx
    }
}

/// 1x1 convolution (per-pixel linear map), used by the output heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch, in_ch]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv1x1<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: Param::normal(out_ch * in_ch, (1.0 / in_ch as f64).sqrt(), rng),
            bias: Param::zeros(out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_ch, "1x1 conv input channels");
        let hw = h * w;
        let mut y = Tensor::zeros([n, self.out_ch, h, w]);
        for i in 0..n {
            let out = y.sample_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(*b);
            }
            T::gemm(self.out_ch, c, hw, &self.weight.value, false, x.sample(i), false, T::one(), out);
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let g = dy.sample(i);
            for (o, db) in self.bias.grad.iter_mut().enumerate() {
                *db += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            T::gemm(self.out_ch, hw, c, g, false, x.sample(i), true, T::one(), &mut self.weight.grad);
            T::gemm(c, self.out_ch, hw, &self.weight.value, true, g, false, T::zero(), dx.sample_mut(i));
        }
        dx
    }
}

/// 2x2 transposed convolution with stride 2: doubles the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2x2<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[in_ch, out_ch * 4]`, kernel offsets `(dy, dx)` flattened as `2 * dy + dx`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: Param::normal(in_ch * out_ch * 4, (2.0 / in_ch as f64).sqrt(), rng),
            bias: Param::zeros(out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_ch, "transposed conv input channels");
        let (hw, k4) = (h * w, self.out_ch * 4);
        let mut cols = vec![T::zero(); k4 * hw];
        let mut y = Tensor::zeros([n, self.out_ch, 2 * h, 2 * w]);
        for i in 0..n {
            T::gemm(k4, c, hw, &self.weight.value, true, x.sample(i), false, T::zero(), &mut cols);
            let out = y.sample_mut(i);
            for o in 0..self.out_ch {
                let b = self.bias.value[o];
                let plane = &mut out[o * 4 * hw..(o + 1) * 4 * hw];
                for k in 0..4 {
                    let (ky, kx) = (k / 2, k % 2);
                    let src = &cols[(o * 4 + k) * hw..][..hw];
                    for yy in 0..h {
                        let row = &mut plane[(2 * yy + ky) * 2 * w..][..2 * w];
                        for xx in 0..w {
                            row[2 * xx + kx] = src[yy * w + xx] + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let (hw, k4) = (h * w, self.out_ch * 4);
        let mut dcols = vec![T::zero(); k4 * hw];
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let g = dy.sample(i);
            for o in 0..self.out_ch {
                let plane = &g[o * 4 * hw..(o + 1) * 4 * hw];
                self.bias.grad[o] += plane.iter().copied().sum::<T>();
                for k in 0..4 {
                    let (ky, kx) = (k / 2, k % 2);
                    let dst = &mut dcols[(o * 4 + k) * hw..][..hw];
                    for yy in 0..h {
                        let row = &plane[(2 * yy + ky) * 2 * w..][..2 * w];
                        for xx in 0..w {
                            dst[yy * w + xx] = row[2 * xx + kx];
                        }
                    }
                }
            }
            T::gemm(c, hw, k4, x.sample(i), false, &dcols, true, T::one(), &mut self.weight.grad);
            T::gemm(c, k4, hw, &self.weight.value, false, &dcols, false, T::zero(), dx.sample_mut(i));
        }
        dx
    }
}

/// Per-channel batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics, applied to the running estimates after the step.
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Param::filled(ch, T::one()),
            beta: Param::zeros(ch),
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one(); ch],
        }
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::from_f64(BN_EPS);
        let mut y = x.clone();
        let (c, hw) = (x.channels(), x.plane());
        for i in 0..x.batch() {
            let s = y.sample_mut(i);
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var[ch] + eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                s[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Normalizes with the batch statistics.
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BatchNormCache<T>) {
        let eps = T::from_f64(BN_EPS);
        let (n, c, hw) = (x.batch(), x.channels(), x.plane());
        let count = T::from_f64((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += x.sample(i)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for i in 0..n {
                v += x.sample(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&a| (a - m) * (a - m))
                    .sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            let xs = xhat.sample_mut(i);
            for ch in 0..c {
                xs[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
            }
            let ys = y.sample_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                ys[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .zip(&xs[ch * hw..(ch + 1) * hw])
                    .for_each(|(o, xh)| *o = g * *xh + b);
            }
        }
        (y, BatchNormCache { xhat, inv_std, mean, var })
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, hw) = (dy.batch(), dy.channels(), dy.plane());
        let count = T::from_f64((n * hw) as f64);
        let mut dx = Tensor::zeros(dy.shape);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for i in 0..n {
                let g = &dy.sample(i)[ch * hw..(ch + 1) * hw];
                let xh = &cache.xhat.sample(i)[ch * hw..(ch + 1) * hw];
                for (a, b) in g.iter().zip(xh) {
                    sum_dy += *a;
                    sum_dy_xhat += *a * *b;
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for i in 0..n {
                let g = &dy.sample(i)[ch * hw..(ch + 1) * hw];
                let xh = &cache.xhat.sample(i)[ch * hw..(ch + 1) * hw];
                let out = &mut dx.sample_mut(i)[ch * hw..(ch + 1) * hw];
                for ((o, a), b) in out.iter_mut().zip(g).zip(xh) {
                    *o = k * (count * *a - sum_dy - *b * sum_dy_xhat);
                }
            }
        }
        dx
    }

    /// Exponential moving average of the batch statistics; the variance
    /// estimate uses the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>, count: usize) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if count > 1 {
            T::from_f64(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] = keep * self.running_mean[ch] + m * cache.mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + m * cache.var[ch] * unbias;
        }
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = *v * slope
        }
    });
    y
}

/// Backward of [`leaky_relu`] given its output (sign-preserving for slope > 0).
pub fn leaky_relu_backward<T: Scalar>(out: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut dx = dy.clone();
    dx.data.iter_mut().zip(&out.data).for_each(|(g, o)| {
        if *o < T::zero() {
            *g = *g * slope
        }
    });
    dx
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the selected input element.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut idx = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let base = nc * h * w;
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * yy * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * yy + dy) * w + 2 * xx + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = (nc * oh + yy) * ow + xx;
                y.data[o] = x.data[best];
                idx[o] = best;
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<T: Scalar>(input_shape: [usize; 4], idx: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (o, &j) in idx.iter().enumerate() {
        dx.data[j] += dy.data[o];
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..shape.iter().product()).map(|_| r.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Direct 3x3 convolution by definition.
    fn conv_reference(conv: &Conv3x3<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape;
        let mut y = Tensor::zeros([n, conv.out_ch, h, w]);
        for i in 0..n {
            for o in 0..conv.out_ch {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut s = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (yy as isize + ky - 1, xx as isize + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[o * c * 9 + ci * 9 + (ky * 3 + kx) as usize];
                                    s += wv * x.at(i, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        y.data[((i * conv.out_ch + o) * h + yy) * w + xx] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut conv = Conv3x3::<f64>::new(3, 4, &mut rng());
        conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
        let x = random_tensor([2, 3, 5, 6], 4);
        let y = conv.forward(&x);
        assert!(y.max_abs_diff(&conv_reference(&conv, &x)) < 1e-12);
    }

    #[test]
    fn conv_of_zero_input_is_zero_with_zero_bias() {
        let conv = Conv3x3::<f32>::new(3, 8, &mut rng());
        let y = conv.forward(&Tensor::zeros([1, 3, 8, 8]));
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    /// Checks `<dy, f(x)>` gradients against central differences.
    fn check_input_grad(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, backward: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>, x: Tensor<f64>) {
        let y = f(&x);
        let dy = random_tensor(y.shape, 99);
        let dx = backward(&x, &dy);
        let h = 1e-6;
        for j in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            let fp: f64 = f(&xp).data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&xm).data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - dx.data[j]).abs() < 1e-6 * (1.0 + fd.abs()), "j={j} fd={fd} an={}", dx.data[j]);
        }
    }

    #[test]
    fn conv_input_gradient() {
        let conv = Conv3x3::<f64>::new(2, 3, &mut rng());
        let c2 = std::cell::RefCell::new(conv.clone());
        check_input_grad(|x| conv.forward(x), |x, dy| c2.borrow_mut().backward(x, dy), random_tensor([2, 2, 4, 5], 3));
    }

    #[test]
    fn transposed_conv_input_gradient_and_shape() {
        let up = ConvTranspose2x2::<f64>::new(4, 2, &mut rng());
        let x = random_tensor([2, 4, 3, 5], 8);
        assert_eq!(up.forward(&x).shape, [2, 2, 6, 10]);
        let u2 = std::cell::RefCell::new(up.clone());
        check_input_grad(|x| up.forward(x), |x, dy| u2.borrow_mut().backward(x, dy), x);
    }

    #[test]
    fn batchnorm_input_gradient() {
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma.value = vec![1.5, 0.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.2];
        let b2 = std::cell::RefCell::new(bn.clone());
        check_input_grad(
            |x| bn.forward_train(x).0,
            |x, dy| {
                let cache = b2.borrow().forward_train(x).1;
                b2.borrow_mut().backward(&cache, dy)
            },
            random_tensor([2, 3, 3, 4], 5),
        );
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::<f32>::from_vec(vec![-1.0, 0.0, 2.0, -4.0], [1, 1, 2, 2]).unwrap();
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data, vec![-0.01, 0.0, 2.0, -0.04]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec(
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0],
            [1, 1, 2, 4],
        )
        .unwrap();
        let (y, idx) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 9.0]);
        let dx = max_pool2_backward(x.shape, &idx, &Tensor::from_vec(vec![1.0, 2.0], [1, 1, 1, 2]).unwrap());
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
