use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, BatchNorm, BatchNormCache, Conv1x1, Conv3x3,
    ConvTranspose2x2, Param,
};
use super::tensor::{concat_channels, split_channels, Scalar, Tensor};
use crate::scenegen::class;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of 2x down-sampling stages in the encoder.
    pub depth_levels: usize,
    /// Channels of the first stage; doubled at every level.
    pub base_channels: usize,
    pub leaky_slope: f64,
    /// `[height, width]`, both divisible by `2^depth_levels`.
    pub input_size: [usize; 2],
    pub num_classes: usize,
    /// Depth in mm represented by a normalized depth of 1.
    pub depth_scale_mm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth_levels: 4,
            base_channels: 32,
            leaky_slope: 0.01,
            input_size: [512, 512],
            num_classes: class::COUNT,
            depth_scale_mm: 300.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.depth_levels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("depth_levels and base_channels must be positive"));
        }
        let div = 1usize << self.depth_levels;
        if self.input_size.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::invalid(format!(
                "input size {:?} not divisible by 2^{} = {div}",
                self.input_size, self.depth_levels
            )));
        }
        if self.num_classes != class::COUNT {
            return Err(Error::invalid("num_classes must be 3"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky_slope must lie in (0, 1)"));
        }
        if !(self.depth_scale_mm > 0.0) {
            return Err(Error::invalid("depth_scale_mm must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// The three disjoint parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    SegDecoder,
    DepthDecoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::SegDecoder, ParamGroup::DepthDecoder];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::SegDecoder => "seg_decoder",
            ParamGroup::DepthDecoder => "depth_decoder",
        }
    }
}

/// Named view of one parameter-like buffer.
pub struct ParamRef<'a, T> {
    pub name: String,
    /// Trainable parameters have gradients; batch-norm running statistics do not.
    pub param: Option<&'a mut Param<T>>,
    pub buffer: Option<&'a mut Vec<T>>,
}

impl<T> ParamRef<'_, T> {
    pub fn values(&self) -> &[T] {
        match (&self.param, &self.buffer) {
            (Some(p), _) => &p.value,
            (_, Some(b)) => b,
            _ => unreachable!("empty parameter reference"),
        }
    }

    pub fn values_mut(&mut self) -> &mut Vec<T> {
        match (&mut self.param, &mut self.buffer) {
            (Some(p), _) => &mut p.value,
            (_, Some(b)) => b,
            _ => unreachable!("empty parameter reference"),
        }
    }
}

/// Two conv + batch-norm + LeakyReLU layers followed by 2x2 max pooling.
/// The bottleneck block is the same without pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage<T> {
    pub conv1: Conv3x3<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv3x3<T>,
    pub bn2: BatchNorm<T>,
}

pub struct EncoderStageCache<T> {
    input: Tensor<T>,
    bn1: BatchNormCache<T>,
    act1: Tensor<T>,
    bn2: BatchNormCache<T>,
    /// Pre-pooling activation, also the skip connection.
    pub act2: Tensor<T>,
    pool_idx: Option<Vec<usize>>,
}

impl<T: Scalar> EncoderStage<T> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv3x3::new(in_ch, out_ch, rng),
            bn1: BatchNorm::new(out_ch),
            conv2: Conv3x3::new(out_ch, out_ch, rng),
            bn2: BatchNorm::new(out_ch),
        }
    }

    /// Returns `(pooled, skip)` using running batch-norm statistics.
    pub fn forward(&self, x: &Tensor<T>, slope: T, pool: bool) -> Result<(Tensor<T>, Tensor<T>), Error> {
        if pool && (x.height() % 2 != 0 || x.width() % 2 != 0) {
            return Err(Error::shape(format!("encoder stage needs even spatial dims, got {:?}", x.shape)));
        }
        let a1 = leaky_relu(&self.bn1.forward_eval(&self.conv1.forward(x)), slope);
        let skip = leaky_relu(&self.bn2.forward_eval(&self.conv2.forward(&a1)), slope);
        let out = if pool { max_pool2(&skip).0 } else { skip.clone() };
        Ok((out, skip))
    }

    fn forward_train(&self, x: &Tensor<T>, slope: T, pool: bool) -> (Tensor<T>, EncoderStageCache<T>) {
        let (b1, bn1) = self.bn1.forward_train(&self.conv1.forward(x));
        let act1 = leaky_relu(&b1, slope);
        let (b2, bn2) = self.bn2.forward_train(&self.conv2.forward(&act1));
        let act2 = leaky_relu(&b2, slope);
        let (out, pool_idx) = if pool {
            let (p, idx) = max_pool2(&act2);
            (p, Some(idx))
        } else {
            (act2.clone(), None)
        };
        let cache = EncoderStageCache { input: x.clone(), bn1, act1, bn2, act2, pool_idx };
        (out, cache)
    }

    /// `d_out` is the gradient w.r.t. the stage output, `d_skip` w.r.t. the
    /// pre-pooling activation.
    fn backward(&mut self, cache: &EncoderStageCache<T>, d_out: &Tensor<T>, d_skip: Option<&Tensor<T>>, slope: T) -> Tensor<T> {
        let mut d_act2 = match &cache.pool_idx {
            Some(idx) => max_pool2_backward(cache.act2.shape, idx, d_out),
            None => d_out.clone(),
        };
        if let Some(ds) = d_skip {
            assert_eq!(ds.shape, d_act2.shape, "skip gradient does not match its encoder level");
            d_act2.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
        }
        let d_b2 = leaky_relu_backward(&cache.act2, &d_act2, slope);
        let d_c2 = self.bn2.backward(&cache.bn2, &d_b2);
        let d_act1 = self.conv2.backward(&cache.act1, &d_c2);
        let d_b1 = leaky_relu_backward(&cache.act1, &d_act1, slope);
        let d_c1 = self.bn1.backward(&cache.bn1, &d_b1);
        self.conv1.backward(&cache.input, &d_c1)
    }

    fn update_running(&mut self, cache: &EncoderStageCache<T>) {
        let count = cache.act2.batch() * cache.act2.plane();
        self.bn1.update_running(&cache.bn1, count);
        self.bn2.update_running(&cache.bn2, count);
    }
}

/// Transposed-conv up-sampling, skip concatenation, then two conv +
/// LeakyReLU layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage<T> {
    pub up: ConvTranspose2x2<T>,
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
}

struct DecoderStageCache<T> {
    input: Tensor<T>,
    cat: Tensor<T>,
    act1: Tensor<T>,
    act2: Tensor<T>,
}

impl<T: Scalar> DecoderStage<T> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: ConvTranspose2x2::new(in_ch, out_ch, rng),
            conv1: Conv3x3::new(2 * out_ch, out_ch, rng),
            conv2: Conv3x3::new(out_ch, out_ch, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>, slope: T) -> Result<Tensor<T>, Error> {
        if skip.height() != 2 * x.height() || skip.width() != 2 * x.width() {
            return Err(Error::shape(format!(
                "skip {:?} is not twice the spatial size of {:?}",
                skip.shape, x.shape
            )));
        }
        let cat = concat_channels(&self.up.forward(x), skip)?;
        let a1 = leaky_relu(&self.conv1.forward(&cat), slope);
        Ok(leaky_relu(&self.conv2.forward(&a1), slope))
    }

    fn forward_train(&self, x: &Tensor<T>, skip: &Tensor<T>, slope: T) -> (Tensor<T>, DecoderStageCache<T>) {
        let cat = concat_channels(&self.up.forward(x), skip).expect("shapes checked by the network");
        let act1 = leaky_relu(&self.conv1.forward(&cat), slope);
        let act2 = leaky_relu(&self.conv2.forward(&act1), slope);
        (act2.clone(), DecoderStageCache { input: x.clone(), cat, act1, act2 })
    }

    /// Returns `(d_input, d_skip)`.
    fn backward(&mut self, cache: &DecoderStageCache<T>, d_out: &Tensor<T>, slope: T) -> (Tensor<T>, Tensor<T>) {
        let d_c2 = leaky_relu_backward(&cache.act2, d_out, slope);
        let d_act1 = self.conv2.backward(&cache.act1, &d_c2);
        let d_c1 = leaky_relu_backward(&cache.act1, &d_act1, slope);
        let d_cat = self.conv1.backward(&cache.cat, &d_c1);
        let (d_up, d_skip) = split_channels(&d_cat, self.up.out_ch);
        (self.up.backward(&cache.input, &d_up), d_skip)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<EncoderStage<T>>,
    pub bottleneck: EncoderStage<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    /// Ordered from the deepest level up to full resolution.
    pub stages: Vec<DecoderStage<T>>,
    pub head: Conv1x1<T>,
}

struct DecoderCache<T> {
    stages: Vec<DecoderStageCache<T>>,
    head_input: Tensor<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new(config: &ModelConfig, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let stages = (0..config.depth_levels)
            .rev()
            .map(|l| DecoderStage::new(config.channels(l + 1), config.channels(l), rng))
            .collect();
        Self {
            stages,
            head: Conv1x1::new(config.channels(0), out_ch, rng),
        }
    }

    /// Head pre-activations.
    fn forward(&self, bottom: &Tensor<T>, skips: &[Tensor<T>], slope: T) -> Result<Tensor<T>, Error> {
        let mut x = bottom.clone();
        for (stage, skip) in self.stages.iter().zip(skips.iter().rev()) {
            x = stage.forward(&x, skip, slope)?;
        }
        Ok(self.head.forward(&x))
    }

    fn forward_train(&self, bottom: &Tensor<T>, skips: &[Tensor<T>], slope: T) -> (Tensor<T>, DecoderCache<T>) {
        let mut x = bottom.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for (stage, skip) in self.stages.iter().zip(skips.iter().rev()) {
            let (y, c) = stage.forward_train(&x, skip, slope);
            caches.push(c);
            x = y;
        }
        (self.head.forward(&x), DecoderCache { stages: caches, head_input: x })
    }

    /// Returns `(d_bottom, d_skips)` with `d_skips` ordered like the encoder levels.
    fn backward(&mut self, cache: &DecoderCache<T>, d_logits: &Tensor<T>, slope: T) -> (Tensor<T>, Vec<Tensor<T>>) {
        let mut d = self.head.backward(&cache.head_input, d_logits);
        let mut d_skips = Vec::with_capacity(self.stages.len());
        for (stage, c) in self.stages.iter_mut().zip(&cache.stages).rev() {
            let (dx, ds) = stage.backward(c, &d, slope);
            d_skips.push(ds);
            d = dx;
        }
        (d, d_skips)
    }
}

/// Network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// `[n, 3, h, w]`, softmax over the class axis.
    pub seg_probs: Tensor<T>,
    /// `[n, 1, h, w]` in `[0, 1]`; millimetres are `depth_norm * depth_scale_mm`.
    pub depth_norm: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    /// Per-pixel argmax class map of sample `n` (ties go to the lower id).
    pub fn argmax(&self, n: usize) -> Vec<u8> {
        let hw = self.seg_probs.plane();
        let probs = self.seg_probs.sample(n);
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.seg_probs.channels() {
                    if probs[c * hw + p] > probs[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn depth_mm(&self, n: usize, depth_scale_mm: f64) -> Vec<f64> {
        self.depth_norm.sample(n).iter().map(|d| d.as_f64() * depth_scale_mm).collect()
    }
}

pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape;
    let hw = h * w;
    let mut out = logits.clone();
    for i in 0..n {
        let s = out.sample_mut(i);
        for p in 0..hw {
            let max = (0..c).map(|k| s[k * hw + p]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..c {
                let e = (s[k * hw + p] - max).exp();
                s[k * hw + p] = e;
                total += e;
            }
            for k in 0..c {
                s[k * hw + p] = s[k * hw + p] / total;
            }
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
    y
}

/// Intermediate values of a training-mode forward pass.
pub struct ForwardCache<T> {
    encoder: Vec<EncoderStageCache<T>>,
    bottleneck: EncoderStageCache<T>,
    seg: DecoderCache<T>,
    depth: DecoderCache<T>,
}

/// Shared encoder with a segmentation decoder and a depth decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub seg_decoder: Decoder<T>,
    pub depth_decoder: Decoder<T>,
}

impl<T: Scalar> Network<T> {
    /// He-normal initialization (fan-in scaled) from `seed`; biases zero,
    /// batch-norm scale one.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..config.depth_levels)
            .map(|l| {
                let in_ch = if l == 0 { 3 } else { config.channels(l - 1) };
                EncoderStage::new(in_ch, config.channels(l), &mut rng)
            })
            .collect();
        let bottleneck = EncoderStage::new(
            config.channels(config.depth_levels - 1),
            config.channels(config.depth_levels),
            &mut rng,
        );
        let seg_decoder = Decoder::new(config, config.num_classes, &mut rng);
        let depth_decoder = Decoder::new(config, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder: Encoder { stages, bottleneck },
            seg_decoder,
            depth_decoder,
        })
    }

    fn slope(&self) -> T {
        T::from_f64(self.config.leaky_slope)
    }

    fn check_input(&self, rgb: &Tensor<T>) -> Result<(), Error> {
        let [_, c, h, w] = rgb.shape;
        if c != 3 || [h, w] != self.config.input_size {
            return Err(Error::shape(format!(
                "expected input [n, 3, {}, {}], got {:?}",
                self.config.input_size[0], self.config.input_size[1], rgb.shape
            )));
        }
        Ok(())
    }

    /// Inference with running batch-norm statistics.
    pub fn forward(&self, rgb: &Tensor<T>) -> Result<Prediction<T>, Error> {
        self.check_input(rgb)?;
        let slope = self.slope();
        let mut skips = Vec::with_capacity(self.config.depth_levels);
        let mut x = rgb.clone();
        for stage in &self.encoder.stages {
            let (out, skip) = stage.forward(&x, slope, true)?;
            skips.push(skip);
            x = out;
        }
        let (bottom, _) = self.encoder.bottleneck.forward(&x, slope, false)?;
        let seg = self.seg_decoder.forward(&bottom, &skips, slope)?;
        let depth = self.depth_decoder.forward(&bottom, &skips, slope)?;
        Ok(Prediction {
            seg_probs: softmax_channels(&seg),
            depth_norm: sigmoid(&depth),
        })
    }

    /// Training-mode forward (batch statistics). The depth decoder is
    /// skipped when `with_depth` is false.
    pub fn forward_train(&self, rgb: &Tensor<T>, with_depth: bool) -> Result<(Prediction<T>, ForwardCache<T>), Error> {
        self.check_input(rgb)?;
        let slope = self.slope();
        let mut caches = Vec::with_capacity(self.config.depth_levels);
        let mut x = rgb.clone();
        for stage in &self.encoder.stages {
            let (out, cache) = stage.forward_train(&x, slope, true);
            caches.push(cache);
            x = out;
        }
        let (bottom, bottleneck) = self.encoder.bottleneck.forward_train(&x, slope, false);
        let skips: Vec<Tensor<T>> = caches.iter().map(|c| c.act2.clone()).collect();
        let (seg_logits, seg) = self.seg_decoder.forward_train(&bottom, &skips, slope);
        let (depth_pre, depth) = if with_depth {
            self.depth_decoder.forward_train(&bottom, &skips, slope)
        } else {
            let [n, _, h, w] = rgb.shape;
            (Tensor::zeros([n, 1, h, w]), DecoderCache { stages: Vec::new(), head_input: Tensor::zeros([0, 0, 0, 0]) })
        };
        let pred = Prediction {
            seg_probs: softmax_channels(&seg_logits),
            depth_norm: sigmoid(&depth_pre),
        };
        Ok((pred, ForwardCache { encoder: caches, bottleneck, seg, depth }))
    }

    /// Accumulates parameter gradients given the gradients of the loss with
    /// respect to the segmentation logits and the depth pre-activations.
    pub fn backward(&mut self, cache: &ForwardCache<T>, d_seg_logits: &Tensor<T>, d_depth_pre: Option<&Tensor<T>>) {
        let slope = self.slope();
        let (mut d_bottom, mut d_skips) = self.seg_decoder.backward(&cache.seg, d_seg_logits, slope);
        if let Some(dd) = d_depth_pre {
            let (db, ds) = self.depth_decoder.backward(&cache.depth, dd, slope);
            d_bottom.data.iter_mut().zip(&db.data).for_each(|(a, b)| *a += *b);
            for (a, b) in d_skips.iter_mut().zip(&ds) {
                a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
            }
        }
        let mut d = self.encoder.bottleneck.backward(&cache.bottleneck, &d_bottom, None, slope);
        for (level, stage) in self.encoder.stages.iter_mut().enumerate().rev() {
            d = stage.backward(&cache.encoder[level], &d, Some(&d_skips[level]), slope);
        }
    }

    /// Folds the batch statistics of a training step into the running estimates.
    pub fn update_batch_norm(&mut self, cache: &ForwardCache<T>) {
        for (stage, c) in self.encoder.stages.iter_mut().zip(&cache.encoder) {
            stage.update_running(c);
        }
        self.encoder.bottleneck.update_running(&cache.bottleneck);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, _, r| {
            if let Some(p) = r.param {
                p.zero_grad();
            }
        });
    }

    /// Visits every parameter and batch-norm buffer in a fixed order.
    pub fn visit(&mut self, f: &mut dyn FnMut(ParamGroup, &str, ParamRef<'_, T>)) {
        fn conv<T>(f: &mut dyn FnMut(ParamGroup, &str, ParamRef<'_, T>), g: ParamGroup, prefix: &str, w: &mut Param<T>, b: &mut Param<T>) {
            f(g, prefix, ParamRef { name: format!("{prefix}.weight"), param: Some(w), buffer: None });
            f(g, prefix, ParamRef { name: format!("{prefix}.bias"), param: Some(b), buffer: None });
        }
        fn bn<T>(f: &mut dyn FnMut(ParamGroup, &str, ParamRef<'_, T>), prefix: &str, b: &mut BatchNorm<T>) {
            let g = ParamGroup::Encoder;
            f(g, prefix, ParamRef { name: format!("{prefix}.gamma"), param: Some(&mut b.gamma), buffer: None });
            f(g, prefix, ParamRef { name: format!("{prefix}.beta"), param: Some(&mut b.beta), buffer: None });
            f(g, prefix, ParamRef { name: format!("{prefix}.running_mean"), param: None, buffer: Some(&mut b.running_mean) });
            f(g, prefix, ParamRef { name: format!("{prefix}.running_var"), param: None, buffer: Some(&mut b.running_var) });
        }
        fn enc_stage<T>(f: &mut dyn FnMut(ParamGroup, &str, ParamRef<'_, T>), prefix: &str, s: &mut EncoderStage<T>) {
            let g = ParamGroup::Encoder;
            conv(f, g, &format!("{prefix}.conv1"), &mut s.conv1.weight, &mut s.conv1.bias);
            bn(f, &format!("{prefix}.bn1"), &mut s.bn1);
            conv(f, g, &format!("{prefix}.conv2"), &mut s.conv2.weight, &mut s.conv2.bias);
            bn(f, &format!("{prefix}.bn2"), &mut s.bn2);
        }
        fn decoder<T>(f: &mut dyn FnMut(ParamGroup, &str, ParamRef<'_, T>), g: ParamGroup, d: &mut Decoder<T>) {
            let root = g.name();
            for (i, s) in d.stages.iter_mut().enumerate() {
                conv(f, g, &format!("{root}.stage{i}.up"), &mut s.up.weight, &mut s.up.bias);
                conv(f, g, &format!("{root}.stage{i}.conv1"), &mut s.conv1.weight, &mut s.conv1.bias);
                conv(f, g, &format!("{root}.stage{i}.conv2"), &mut s.conv2.weight, &mut s.conv2.bias);
            }
            conv(f, g, &format!("{root}.head"), &mut d.head.weight, &mut d.head.bias);
        }

        for (i, s) in self.encoder.stages.iter_mut().enumerate() {
            enc_stage(f, &format!("encoder.stage{i}"), s);
        }
        enc_stage(f, "encoder.bottleneck", &mut self.encoder.bottleneck);
        decoder(f, ParamGroup::SegDecoder, &mut self.seg_decoder);
        decoder(f, ParamGroup::DepthDecoder, &mut self.depth_decoder);
    }

    /// Flattened copy of every value (parameters and buffers) of one group.
    pub fn group_values(&mut self, group: ParamGroup) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |g, _, r| {
            if g == group {
                out.extend_from_slice(r.values());
            }
        });
        out
    }

    /// Sum of squared gradients of the trainable parameters of one group.
    pub fn group_grad_norm(&mut self, group: ParamGroup) -> f64 {
        let mut s = 0.0f64;
        self.visit(&mut |g, _, r| {
            if let (true, Some(p)) = (g == group, r.param) {
                s += p.grad.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
        });
        s.sqrt()
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, r| {
            if let Some(p) = r.param {
                n += p.value.len();
            }
        });
        n
    }

    /// Converts every value to another precision.
    pub fn cast<U: Scalar>(&mut self) -> Network<U> {
        let mut values: Vec<Vec<f64>> = Vec::new();
        self.visit(&mut |_, _, r| values.push(r.values().iter().map(|v| v.as_f64()).collect()));
        let mut out = Network::<U>::new(&self.config, 0).expect("config already validated");
        let mut it = values.into_iter();
        out.visit(&mut |_, _, mut r| {
            let src = it.next().expect("identical layout");
            *r.values_mut() = src.into_iter().map(U::from_f64).collect();
        });
        out
    }
}
