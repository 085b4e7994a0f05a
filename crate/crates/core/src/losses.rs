//! Generator and discriminator objectives.
//!
//! * generative loss: per image `(1/N) Σ_i ‖G_i − π_i‖²` over the `N` pixels,
//!   the squared norm summing the three channels; averaged over the batch.
//! * adversarial loss (generator side): mean over score elements of `(1 − s)²`.
//! * discriminator loss: `mean (1 − real)² + mean fake²`.
//!
//! Every loss has a matching `*_grad` returning the gradient w.r.t. its
//! tensor inputs.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::RgbImage;
use crate::nn::{Float, Tensor};

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Validation,
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn pixel_norm<T: Float>(t: &Tensor<T>) -> T {
    // batch × pixels; channels are summed inside the squared norm
    T::from_usize(t.batch() * t.height() * t.width()).expect("count fits")
}

/// Mean squared pixel-vector error between generated and target images.
pub fn generative_loss<T: Float>(generated: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape(generated, target, "generative loss")?;
    let sum: T = generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(&g, &t)| (g - t) * (g - t))
        .sum();
    Ok(sum / pixel_norm(generated))
}

pub fn generative_loss_grad<T: Float>(generated: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(generated, target, "generative loss")?;
    let scale = T::from_f64_lossy(2.0) / pixel_norm(generated);
    let data = generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(&g, &t)| scale * (g - t))
        .collect();
    Ok(Tensor::from_vec(generated.shape(), data))
}

/// Image-level convenience wrapper of [`generative_loss`].
pub fn generative_loss_images(generated: &RgbImage, target: &RgbImage) -> Result<f64> {
    ensure!(
        generated.same_size(target),
        Validation,
        "generative loss: {}x{} vs {}x{}",
        generated.height(),
        generated.width(),
        target.height(),
        target.width()
    );
    let sum: f64 = generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(&g, &t)| {
            let d = g as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / generated.pixel_count() as f64)
}

/// Soft adversarial loss of the generator: mean `(1 − s)²`.
pub fn adversarial_loss_g<T: Float>(scores: &Tensor<T>) -> T {
    let n = T::from_usize(scores.len()).expect("count fits");
    scores
        .data()
        .iter()
        .map(|&s| (T::one() - s) * (T::one() - s))
        .sum::<T>()
        / n
}

pub fn adversarial_loss_g_grad<T: Float>(scores: &Tensor<T>) -> Tensor<T> {
    let k = T::from_f64_lossy(-2.0) / T::from_usize(scores.len()).expect("count fits");
    scores.map(|s| k * (T::one() - s))
}

/// `mean (1 − real)² + mean fake²`.
pub fn discriminator_loss<T: Float>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
    same_shape(real, fake, "discriminator loss")?;
    let n = T::from_usize(fake.len()).expect("count fits");
    let fake_term = fake.data().iter().map(|&s| s * s).sum::<T>() / n;
    Ok(adversarial_loss_g(real) + fake_term)
}

/// Gradients of [`discriminator_loss`] w.r.t. `(real, fake)`.
pub fn discriminator_loss_grad<T: Float>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape(real, fake, "discriminator loss")?;
    let k = T::from_f64_lossy(2.0) / T::from_usize(fake.len()).expect("count fits");
    Ok((adversarial_loss_g_grad(real), fake.map(|s| k * s)))
}

/// Weights of the combined generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 100.0,
            adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.mse >= 0.0 && self.adv >= 0.0 && self.mse.is_finite() && self.adv.is_finite(),
            Config,
            "loss weights must be finite and nonnegative, got mse={} adv={}",
            self.mse,
            self.adv
        );
        Ok(())
    }
}

/// All loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_adv: f64,
    pub l_total_g: f64,
    pub l_d: f64,
    pub lambda_mse: f64,
    pub lambda_adv: f64,
}

/// Combines the generator terms; `l_d` is left at 0 for the caller to fill.
pub fn total_generator_loss(l_mse: f64, l_adv: f64, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        l_mse,
        l_adv,
        l_total_g: weights.mse * l_mse + weights.adv * l_adv,
        l_d: 0.0,
        lambda_mse: weights.mse,
        lambda_adv: weights.adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v)
    }

    /// Hand-rolled loop over pixels and channels, planar layout.
    fn mse_loop(g: &Tensor<f64>, tg: &Tensor<f64>) -> f64 {
        let [n, c, h, w] = g.shape();
        let mut total = 0.0;
        for b in 0..n {
            let mut img = 0.0;
            for p in 0..h * w {
                let mut sq = 0.0;
                for ch in 0..c {
                    let i = (b * c + ch) * h * w + p;
                    sq += (g.data()[i] - tg.data()[i]).powi(2);
                }
                img += sq;
            }
            total += img / (h * w) as f64;
        }
        total / n as f64
    }

    #[test]
    fn generative_loss_examples() {
        let z = t([1, 3, 2, 2], vec![0.3; 12]);
        assert_eq!(generative_loss(&z, &z).unwrap(), 0.0);

        let mut a = vec![0.0; 12];
        a[5] = 0.5;
        let a = t([1, 3, 2, 2], a);
        let b = t([1, 3, 2, 2], vec![0.0; 12]);
        assert_eq!(mse_loop(&a, &b), 0.0625);
        assert_eq!(generative_loss(&a, &b).unwrap(), 0.0625);

        let ones = t([1, 3, 4, 4], vec![1.0; 48]);
        let zeros = t([1, 3, 4, 4], vec![0.0; 48]);
        assert_eq!(mse_loop(&ones, &zeros), 3.0);
        assert_eq!(generative_loss(&ones, &zeros).unwrap(), 3.0);

        assert!(generative_loss(&ones, &a).is_err());
    }

    #[test]
    fn generative_loss_on_images() {
        let a = RgbImage::filled(2, 2, [1.0, 1.0, 1.0]).unwrap();
        let b = RgbImage::filled(2, 2, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(generative_loss_images(&a, &b).unwrap(), 3.0);
        let c = RgbImage::filled(2, 3, [0.0; 3]).unwrap();
        assert!(generative_loss_images(&a, &c).is_err());
    }

    #[test]
    fn adversarial_loss_examples() {
        assert_eq!(adversarial_loss_g(&t([1, 1, 2, 2], vec![1.0; 4])), 0.0);
        assert_eq!(adversarial_loss_g(&t([1, 1, 2, 2], vec![0.0; 4])), 1.0);
        assert_eq!(adversarial_loss_g(&t([1, 1, 1, 2], vec![0.5, 1.0])), 0.125);
    }

    #[test]
    fn discriminator_loss_examples() {
        let ones = t([1, 1, 2, 2], vec![1.0; 4]);
        let zeros = t([1, 1, 2, 2], vec![0.0; 4]);
        let half = t([1, 1, 2, 2], vec![0.5; 4]);
        assert_eq!(discriminator_loss(&ones, &zeros).unwrap(), 0.0);
        assert_eq!(discriminator_loss(&zeros, &ones).unwrap(), 2.0);
        assert_eq!(discriminator_loss(&half, &half).unwrap(), 0.5);
        assert!(discriminator_loss(&ones, &t([1, 1, 1, 4], vec![0.0; 4])).is_err());
    }

    #[test]
    fn total_loss_combination() {
        let w = LossWeights { mse: 100.0, adv: 1.0 };
        let lb = total_generator_loss(0.01, 0.5, w).unwrap();
        assert!((lb.l_total_g - 1.5).abs() < 1e-12);
        assert_eq!(total_generator_loss(0.0, 0.0, w).unwrap().l_total_g, 0.0);
        let off = LossWeights { mse: 100.0, adv: 0.0 };
        assert_eq!(total_generator_loss(0.02, 0.7, off).unwrap().l_total_g, 100.0 * 0.02);
        assert!(total_generator_loss(0.1, 0.1, LossWeights { mse: -1.0, adv: 1.0 }).is_err());
    }
}
