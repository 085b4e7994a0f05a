//! Noise-conditioned generation and quantization to label maps.
//!
//! At inference the generator's source channels carry Gaussian noise
//! (mean 0.5, σ 0.25, clipped to `[0, 1]`) and the context channels carry
//! the road scene. Batch normalization runs on its running statistics, so
//! each item's output depends only on its own context and seed.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{make_conditioned_input, save_rgb_png};
use crate::error::{Error, Result};
use crate::image::{LabelImage, RgbImage};
use crate::model::{tensor_to_rgb, Generator};
use crate::nn::Tensor;
use crate::palette::ClassPalette;

pub const NOISE_MEAN: f64 = 0.5;
pub const NOISE_STD: f64 = 0.25;

/// Gaussian noise image, reproducible from `(seed, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseImage(pub RgbImage);

impl NoiseImage {
    pub fn sample(seed: u64, height: usize, width: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(&mut rng, height, width)
    }

    /// Draws from an existing generator (used by noise-mode training).
    pub fn sample_with(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Result<Self> {
        let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid normal");
        let data = (0..height * width * 3)
            .map(|_| normal.sample(rng).clamp(0.0, 1.0) as f32)
            .collect();
        Ok(Self(RgbImage::new(height, width, data)?))
    }

    pub fn image(&self) -> &RgbImage {
        &self.0
    }
}

fn forward(
    generator: &Generator<f32>,
    context: &RgbImage,
    seed: u64,
    palette: &ClassPalette,
) -> Result<(RgbImage, LabelImage)> {
    let size = generator.config().image_size;
    if context.height() != size || context.width() != size {
        return Err(Error::Validation(format!(
            "context is {}x{}, model expects {size}x{size}",
            context.height(),
            context.width()
        )));
    }
    let noise = NoiseImage::sample(seed, size, size)?;
    let input = make_conditioned_input(noise.image(), context)?;
    let out = generator.infer(&input.to_tensor::<f32>())?;
    let rgb = tensor_to_rgb(&out, 0)?;
    let labels = palette.quantize(&rgb);
    Ok((rgb, labels))
}

/// `O = G([noise(seed) | context])` and its quantized label map.
pub fn generate(
    generator: &Generator<f32>,
    context: &RgbImage,
    seed: u64,
    palette: &ClassPalette,
) -> Result<(RgbImage, LabelImage)> {
    forward(generator, context, seed, palette)
}

/// Generates every context; item `k` uses seed `seed + k`.
pub fn generate_batch(
    generator: &Generator<f32>,
    contexts: &[&RgbImage],
    seed: u64,
    palette: &ClassPalette,
) -> Result<Vec<(RgbImage, LabelImage)>> {
    if let Some(first) = contexts.first() {
        if let Some(bad) = contexts.iter().find(|c| !c.same_size(first)) {
            return Err(Error::Validation(format!(
                "mixed context sizes in batch: {}x{} and {}x{}",
                first.height(),
                first.width(),
                bad.height(),
                bad.width()
            )));
        }
    }
    let start = Instant::now();
    let out = contexts
        .iter()
        .enumerate()
        .map(|(k, c)| forward(generator, c, seed.wrapping_add(k as u64), palette))
        .collect::<Result<Vec<_>>>()?;
    if !contexts.is_empty() {
        let ms = start.elapsed().as_secs_f64() * 1e3 / contexts.len() as f64;
        log::info!("generated {} images, {ms:.1} ms/image", contexts.len());
    }
    Ok(out)
}

/// Fraction of pixels whose class agrees between two noise seeds; a
/// diagnostic of how much the output depends on the noise draw.
pub fn noise_agreement(
    generator: &Generator<f32>,
    context: &RgbImage,
    seeds: (u64, u64),
    palette: &ClassPalette,
) -> Result<f64> {
    let (_, a) = forward(generator, context, seeds.0, palette)?;
    let (_, b) = forward(generator, context, seeds.1, palette)?;
    let same = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.pixel_count() as f64)
}

/// Writes `<stem>.gen.png` and `<stem>.label.png` (palette-rendered) into `dir`.
pub fn write_outputs(
    dir: &Path,
    stem: &str,
    generated: &RgbImage,
    labels: &LabelImage,
    palette: &ClassPalette,
) -> Result<()> {
    save_rgb_png(&dir.join(format!("{stem}.gen.png")), generated)?;
    save_rgb_png(&dir.join(format!("{stem}.label.png")), &palette.render(labels)?)
}

/// Planar `[N, 3, S, S]` batch of noise images drawn from `rng`.
pub(crate) fn noise_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Result<Tensor<f32>> {
    let items = (0..n)
        .map(|_| NoiseImage::sample_with(rng, size, size).map(|z| crate::model::rgb_to_tensor(&z.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&items))
}
