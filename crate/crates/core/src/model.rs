//! Conditioned encoder/generator and conditioned patch discriminator.
//!
//! The generator is an encoder–decoder: encoder level `ℓ` is
//! `Conv(4×4, stride 2) → BatchNorm → LeakyReLU` and halves the resolution;
//! decoder level `ℓ` is `Upsample(×2, nearest) → Conv(3×3) → BatchNorm →
//! LeakyReLU` and restores it. Encoder features of every configured skip
//! level are channel-concatenated into the decoder at equal resolution. A
//! final `Conv(3×3) → sigmoid` emits RGB in `[0, 1]`.
//!
//! The discriminator mirrors the encoder on `[candidate | context]` and ends
//! in a one-channel `Conv(3×3) → sigmoid` score map at `size / 2^depth`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ConditionedInput;
use crate::error::{ensure, Error, Result};
use crate::image::RgbImage;
use crate::nn::{
    concat_channels, leaky_relu, leaky_relu_backward, prefixed, sigmoid, sigmoid_backward,
    split_channels, upsample_nearest2x, upsample_nearest2x_backward, BatchNorm2d, Conv2d, Float,
    Mode, Module, Param, Tensor,
};

const INIT_STD: f64 = 0.02;
const BN_MOMENTUM: f64 = 0.9;

/// Architecture hyper-parameters shared by generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub leaky_slope: f64,
    /// Encoder levels (in `1..depth`) whose features feed the decoder.
    pub skip_levels: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    /// CPU-trainable default: 64×64 input, 16 base channels, 4 levels.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            depth: 4,
            leaky_slope: 0.2,
            skip_levels: vec![1, 2, 3],
        }
    }

    /// Full-resolution preset (512×512): a 39.0M-parameter generator
    /// (15.4M more in the discriminator), 4×4 bottleneck.
    pub fn full_scale() -> Self {
        Self {
            image_size: 512,
            base_channels: 64,
            depth: 7,
            leaky_slope: 0.2,
            skip_levels: (1..7).collect(),
        }
    }

    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            base_channels: 4,
            depth: 2,
            leaky_slope: 0.2,
            skip_levels: vec![1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 2, Config, "depth must be >= 2, got {}", self.depth);
        ensure!(
            self.depth < usize::BITS as usize && self.image_size % (1 << self.depth) == 0,
            Config,
            "image_size {} not divisible by 2^{}",
            self.image_size,
            self.depth
        );
        ensure!(self.image_size > 0, Config, "image_size must be positive");
        ensure!(self.base_channels >= 1, Config, "base_channels must be >= 1");
        ensure!(
            self.leaky_slope > 0.0 && self.leaky_slope < 1.0,
            Config,
            "leaky_slope must be in (0, 1), got {}",
            self.leaky_slope
        );
        for &l in &self.skip_levels {
            ensure!(
                l >= 1 && l < self.depth,
                Config,
                "skip level {l} outside 1..{}",
                self.depth
            );
        }
        Ok(())
    }

    /// Channel width at level `ℓ`: `base · 2^ℓ`, capped at `8 · base`;
    /// level 0 (full resolution) uses `base`.
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            return self.base_channels;
        }
        let cap = 8 * self.base_channels;
        (self.base_channels << level.min(3)).min(cap)
    }

    /// Discriminator width at level `ℓ ≥ 1`: `base · 2^(ℓ−1)`, capped at `8 · base`.
    pub fn disc_channels(&self, level: usize) -> usize {
        (self.base_channels << (level - 1).min(3)).min(8 * self.base_channels)
    }

    pub fn score_size(&self) -> usize {
        self.image_size >> self.depth
    }

    fn is_skip(&self, level: usize) -> bool {
        self.skip_levels.contains(&level)
    }
}

/// `[Upsample →] Conv → [BatchNorm →] LeakyReLU`.
#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm2d<T>>,
    upsample: bool,
    slope: T,
    pre_act: Option<Tensor<T>>,
}

impl<T: Float> ConvBlock<T> {
    fn down(in_ch: usize, out_ch: usize, norm: bool, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, 4, 2, 1, !norm, INIT_STD, rng),
            bn: norm.then(|| BatchNorm2d::new(out_ch, BN_MOMENTUM)),
            upsample: false,
            slope: T::from_f64_lossy(slope),
            pre_act: None,
        }
    }

    fn up(in_ch: usize, out_ch: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, false, INIT_STD, rng),
            bn: Some(BatchNorm2d::new(out_ch, BN_MOMENTUM)),
            upsample: true,
            slope: T::from_f64_lossy(slope),
            pre_act: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let up;
        let x = if self.upsample {
            up = upsample_nearest2x(x);
            &up
        } else {
            x
        };
        let mut h = self.conv.forward(x, mode);
        if let Some(bn) = &mut self.bn {
            h = bn.forward(&h, mode);
        }
        let out = leaky_relu(&h, self.slope);
        self.pre_act = (mode == Mode::Train).then_some(h);
        out
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let up;
        let x = if self.upsample {
            up = upsample_nearest2x(x);
            &up
        } else {
            x
        };
        let mut h = self.conv.infer(x);
        if let Some(bn) = &self.bn {
            h = bn.infer(&h);
        }
        leaky_relu(&h, self.slope)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let pre = self
            .pre_act
            .take()
            .expect("ConvBlock::backward without a training-mode forward");
        let mut d = leaky_relu_backward(&pre, dy, self.slope);
        if let Some(bn) = &mut self.bn {
            d = bn.backward(&d);
        }
        d = self.conv.backward(&d);
        if self.upsample {
            upsample_nearest2x_backward(&d)
        } else {
            d
        }
    }

    fn params(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v: Vec<_> = prefixed("conv", self.conv.params()).collect();
        if let Some(bn) = &mut self.bn {
            v.extend(prefixed("bn", bn.params()));
        }
        v
    }

    fn buffers(&mut self) -> Vec<(String, &mut Vec<T>)> {
        match &mut self.bn {
            Some(bn) => prefixed("bn", bn.buffers()).collect(),
            None => Vec::new(),
        }
    }
}

fn check_input<T: Float>(x: &Tensor<T>, channels: usize, size: usize, what: &str) -> Result<()> {
    let [n, c, h, w] = x.shape();
    ensure!(
        n >= 1 && c == channels && h == size && w == size,
        Validation,
        "{what} expects [N, {channels}, {size}, {size}], got {:?}",
        [n, c, h, w]
    );
    Ok(())
}

/// Encoder + decoder with skip conditioning. Holds θ_g.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    config: ArchConfig,
    encoder: Vec<ConvBlock<T>>,
    /// `decoder[i]` serves level `depth − i`.
    decoder: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    output: Option<Tensor<T>>,
}

impl<T: Float> Generator<T> {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = config.depth;
        let slope = config.leaky_slope;
        let encoder = (1..=depth)
            .map(|l| {
                let in_ch = if l == 1 { 6 } else { config.channels(l - 1) };
                ConvBlock::down(in_ch, config.channels(l), true, slope, &mut rng)
            })
            .collect();
        let decoder = (1..=depth)
            .rev()
            .map(|l| {
                let in_ch = if l == depth {
                    config.channels(depth)
                } else if config.is_skip(l) {
                    2 * config.channels(l)
                } else {
                    config.channels(l)
                };
                ConvBlock::up(in_ch, config.channels(l - 1), slope, &mut rng)
            })
            .collect();
        let head = Conv2d::new(config.channels(0), 3, 3, 1, 1, true, INIT_STD, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
            output: None,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    /// Training/evaluation forward pass on a `[N, 6, S, S]` batch.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_input(x, 6, self.config.image_size, "generator")?;
        let out = self.run(x, mode);
        self.output = (mode == Mode::Train).then(|| out.clone());
        Ok(out)
    }

    /// Evaluation-mode forward that needs only shared access.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, 6, self.config.image_size, "generator")?;
        Ok(self.run_shared(x, &[]))
    }

    fn run(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let depth = self.config.depth;
        let mut feats: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut h = x.clone();
        for blk in &mut self.encoder {
            h = blk.forward(&h, mode);
            feats.push(h.clone());
        }
        for (i, blk) in self.decoder.iter_mut().enumerate() {
            let level = depth - i;
            let input = if level < depth && self.config.skip_levels.contains(&level) {
                concat_channels(&h, &feats[level - 1])
            } else {
                h
            };
            h = blk.forward(&input, mode);
        }
        sigmoid(&self.head.forward(&h, mode))
    }

    /// Evaluation pass; skip tensors of the levels in `zeroed` are replaced by zeros.
    fn run_shared(&self, x: &Tensor<T>, zeroed: &[usize]) -> Tensor<T> {
        let depth = self.config.depth;
        let mut feats: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut h = x.clone();
        for blk in &self.encoder {
            h = blk.infer(&h);
            feats.push(h.clone());
        }
        for (i, blk) in self.decoder.iter().enumerate() {
            let level = depth - i;
            let input = if level < depth && self.config.skip_levels.contains(&level) {
                let skip = &feats[level - 1];
                if zeroed.contains(&level) {
                    concat_channels(&h, &skip.map(|_| T::zero()))
                } else {
                    concat_channels(&h, skip)
                }
            } else {
                h
            };
            h = blk.infer(&input);
        }
        sigmoid(&self.head.infer(&h))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the generated image) through
    /// the last training-mode forward. Accumulates θ_g gradients and returns
    /// the gradient w.r.t. the 6-channel input.
    pub fn backward(&mut self, d_out: &Tensor<T>) -> Tensor<T> {
        let out = self
            .output
            .take()
            .expect("Generator::backward without a training-mode forward");
        let depth = self.config.depth;
        let mut d = sigmoid_backward(&out, d_out);
        d = self.head.backward(&d);
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for i in (0..depth).rev() {
            let level = depth - i;
            let d_in = self.decoder[i].backward(&d);
            if level < depth && self.config.skip_levels.contains(&level) {
                let main = self.config.channels(level);
                let (dh, ds) = split_channels(&d_in, main);
                skip_grads[level - 1] = Some(ds);
                d = dh;
            } else {
                d = d_in;
            }
        }
        // `d` now holds the gradient of the deepest encoder output.
        for level in (1..=depth).rev() {
            if level < depth {
                if let Some(s) = skip_grads[level - 1].take() {
                    d.add_assign(&s);
                }
            }
            d = self.encoder[level - 1].backward(&d);
        }
        d
    }

    /// Convenience: evaluation-mode generation for a single conditioned input.
    pub fn generate_image(&self, input: &ConditionedInput) -> Result<RgbImage> {
        let x = input.to_tensor::<T>();
        let y = self.infer(&x)?;
        tensor_to_rgb(&y, 0)
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            v.extend(prefixed(&format!("enc{}", i + 1), b.params()));
        }
        let depth = self.config.depth;
        for (i, b) in self.decoder.iter_mut().enumerate() {
            v.extend(prefixed(&format!("dec{}", depth - i), b.params()));
        }
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            v.extend(prefixed(&format!("enc{}", i + 1), b.buffers()));
        }
        let depth = self.config.depth;
        for (i, b) in self.decoder.iter_mut().enumerate() {
            v.extend(prefixed(&format!("dec{}", depth - i), b.buffers()));
        }
        v
    }
}

/// Conditioned patch discriminator. Holds θ_d.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    config: ArchConfig,
    blocks: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    output: Option<Tensor<T>>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (1..=config.depth)
            .map(|l| {
                let in_ch = if l == 1 { 6 } else { config.disc_channels(l - 1) };
                ConvBlock::down(in_ch, config.disc_channels(l), l > 1, config.leaky_slope, &mut rng)
            })
            .collect();
        let head = Conv2d::new(config.disc_channels(config.depth), 1, 3, 1, 1, true, INIT_STD, &mut rng);
        Ok(Self {
            config: config.clone(),
            blocks,
            head,
            output: None,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    fn pair(&self, candidate: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        check_input(candidate, 3, s, "discriminator candidate")?;
        check_input(context, 3, s, "discriminator context")?;
        ensure!(
            candidate.batch() == context.batch(),
            Validation,
            "candidate batch {} != context batch {}",
            candidate.batch(),
            context.batch()
        );
        Ok(concat_channels(candidate, context))
    }

    /// Score map `[N, 1, S/2^depth, S/2^depth]` with values in `[0, 1]`.
    pub fn forward(&mut self, candidate: &Tensor<T>, context: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = self.pair(candidate, context)?;
        for blk in &mut self.blocks {
            h = blk.forward(&h, mode);
        }
        let out = sigmoid(&self.head.forward(&h, mode));
        self.output = (mode == Mode::Train).then(|| out.clone());
        Ok(out)
    }

    pub fn infer(&self, candidate: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.pair(candidate, context)?;
        for blk in &self.blocks {
            h = blk.infer(&h);
        }
        Ok(sigmoid(&self.head.infer(&h)))
    }

    /// Backpropagates a score-map gradient. Returns the gradient w.r.t. the
    /// candidate image (the context gradient is discarded).
    pub fn backward(&mut self, d_scores: &Tensor<T>) -> Tensor<T> {
        let out = self
            .output
            .take()
            .expect("Discriminator::backward without a training-mode forward");
        let mut d = sigmoid_backward(&out, d_scores);
        d = self.head.backward(&d);
        for blk in self.blocks.iter_mut().rev() {
            d = blk.backward(&d);
        }
        split_channels(&d, 3).0
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("blk{}", i + 1), b.params()));
        }
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("blk{}", i + 1), b.buffers()));
        }
        v
    }
}

/// Trainable-parameter counts of both networks, computed from the layer
/// table without allocating weights.
pub fn param_counts(config: &ArchConfig) -> Result<(usize, usize)> {
    config.validate()?;
    let d = config.depth;
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
    let mut g = 0;
    for l in 1..=d {
        let cin = if l == 1 { 6 } else { config.channels(l - 1) };
        g += conv(cin, config.channels(l), 4, false) + 2 * config.channels(l);
    }
    for l in (1..=d).rev() {
        let cin = if l == d {
            config.channels(d)
        } else if config.is_skip(l) {
            2 * config.channels(l)
        } else {
            config.channels(l)
        };
        g += conv(cin, config.channels(l - 1), 3, false) + 2 * config.channels(l - 1);
    }
    g += conv(config.channels(0), 3, 3, true);
    let mut disc = 0;
    for l in 1..=d {
        let cin = if l == 1 { 6 } else { config.disc_channels(l - 1) };
        let norm = l > 1;
        disc += conv(cin, config.disc_channels(l), 4, !norm) + if norm { 2 * config.disc_channels(l) } else { 0 };
    }
    disc += conv(config.disc_channels(d), 1, 3, true);
    Ok((g, disc))
}

/// Extracts batch item `n` of a `[N, 3, H, W]` tensor as an image (clamped).
pub fn tensor_to_rgb<T: Float>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(Error::Validation(format!("expected 3 channels, got {c}")));
    }
    let item = t.item(n);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            data.push(item[ch * h * w + i].to_f64_lossy() as f32);
        }
    }
    RgbImage::from_clamped(h, w, data)
}

/// Planar `[1, 3, H, W]` tensor from an image.
pub fn rgb_to_tensor<T: Float>(img: &RgbImage) -> Tensor<T> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = T::from_f64_lossy(px[ch] as f64);
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}
