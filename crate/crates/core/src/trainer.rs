//! Alternating adversarial training: one discriminator update, then one
//! generator update, per mini-batch.
//!
//! The discriminator sees `(rendered target | context)` as real and
//! `(generated | context)` as fake, with the generated image detached. The
//! generator then minimises `λ_mse·L_mse + λ_adv·L_adv` against the updated
//! discriminator. With the adversarial switch off the discriminator is never
//! run and `L_adv` is reported as 0.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataio::{DatasetSplit, SamplePair};
use crate::error::{ensure, Error, Result};
use crate::inference::noise_batch;
use crate::losses::{
    adversarial_loss_g, adversarial_loss_g_grad, generative_loss, generative_loss_grad,
    LossBreakdown, LossWeights,
};
use crate::model::{rgb_to_tensor, ArchConfig, Discriminator, Generator};
use crate::nn::{concat_channels, Mode, Module, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::palette::ClassPalette;

/// What the generator's source channels carry during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceMode {
    /// The rendered ground-truth target (inference still uses noise).
    #[default]
    Teacher,
    /// Gaussian noise, as at inference.
    Noise,
}

impl std::str::FromStr for SourceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "noise" => Ok(Self::Noise),
            other => Err(Error::Config(format!(
                "unknown source mode `{other}` (expected teacher or noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adversarial_enabled: bool,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    pub source_mode: SourceMode,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Permit training with no checkpoint directory, or past a failed write.
    pub allow_no_persistence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 16,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epochs: 200,
            seed: 0,
            adversarial_enabled: true,
            weights: LossWeights::default(),
            arch: ArchConfig::desk(),
            source_mode: SourceMode::Teacher,
            checkpoint_every: 0,
            allow_no_persistence: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        self.adam().validate()?;
        self.weights.validate()?;
        self.arch.validate()
    }

    /// `λ_adv` in effect (0 when the adversarial term is switched off).
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            mse: self.weights.mse,
            adv: if self.adversarial_enabled { self.weights.adv } else { 0.0 },
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub rng: ChaCha8Rng,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut generator = Generator::new(&config.arch, derive_seed(config.seed, 1))?;
        let mut discriminator = Discriminator::new(&config.arch, derive_seed(config.seed, 2))?;
        let opt_g = Adam::new(config.adam(), &mut generator);
        let opt_d = Adam::new(config.adam(), &mut discriminator);
        Ok(Self {
            epoch: 0,
            step: 0,
            generator,
            discriminator,
            opt_g,
            opt_d,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3)),
        })
    }

    /// SHA-256 over the generator's parameters and running statistics.
    pub fn generator_checksum(&mut self) -> String {
        module_checksum(&mut self.generator)
    }

    pub fn discriminator_checksum(&mut self) -> String {
        module_checksum(&mut self.discriminator)
    }
}

/// Hex SHA-256 of a module's parameter values and buffers, in order.
pub fn module_checksum(module: &mut impl Module<f32>) -> String {
    let mut h = Sha256::new();
    for (name, p) in module.params_mut() {
        h.update(name.as_bytes());
        p.value.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    for (name, b) in module.buffers_mut() {
        h.update(name.as_bytes());
        b.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    hex::encode(h.finalize())
}

fn check_finite(term: &'static str, step: u64, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, step, value })
    }
}

/// Planar `[N, 3, S, S]` tensors of the contexts and rendered targets.
fn batch_tensors(batch: &[&SamplePair], palette: &ClassPalette) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut ctx = Vec::with_capacity(batch.len());
    let mut tgt = Vec::with_capacity(batch.len());
    for s in batch {
        ctx.push(rgb_to_tensor(&s.context));
        tgt.push(rgb_to_tensor(&palette.render(&s.target)?));
    }
    Ok((Tensor::stack(&ctx), Tensor::stack(&tgt)))
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&SamplePair],
    config: &TrainConfig,
    palette: &ClassPalette,
) -> Result<LossBreakdown> {
    ensure!(!batch.is_empty(), Validation, "empty training batch");
    let size = config.arch.image_size;
    for s in batch {
        ensure!(
            s.size() == (size, size),
            Validation,
            "sample `{}` is {:?}, model expects {size}x{size}",
            s.id,
            s.size()
        );
    }
    let step = state.step + 1;
    let weights = config.effective_weights();
    let (context, target) = batch_tensors(batch, palette)?;
    let source = match config.source_mode {
        SourceMode::Teacher => target.clone(),
        SourceMode::Noise => noise_batch(&mut state.rng, batch.len(), size)?,
    };
    let fake = state
        .generator
        .forward(&concat_channels(&source, &context), Mode::Train)?;

    let mut l_d = 0.0;
    if config.adversarial_enabled {
        let d = &mut state.discriminator;
        d.zero_grad();
        let real = d.forward(&target, &context, Mode::Train)?;
        let real_term = adversarial_loss_g(&real) as f64;
        d.backward(&adversarial_loss_g_grad(&real));
        let scores = d.forward(&fake, &context, Mode::Train)?;
        let n = scores.len() as f32;
        let fake_term = scores.data().iter().map(|&s| s * s).sum::<f32>() as f64 / n as f64;
        d.backward(&scores.map(|s| 2.0 * s / n));
        l_d = check_finite("l_d", step, real_term + fake_term)?;
        state.opt_d.step(d);
    }

    let g = &mut state.generator;
    g.zero_grad();
    let l_mse = check_finite("l_mse", step, generative_loss(&fake, &target)? as f64)?;
    let mut d_fake = generative_loss_grad(&fake, &target)?.map(|v| v * weights.mse as f32);
    let mut l_adv = 0.0;
    if config.adversarial_enabled {
        let d = &mut state.discriminator;
        let scores = d.forward(&fake, &context, Mode::Train)?;
        l_adv = check_finite("l_adv", step, adversarial_loss_g(&scores) as f64)?;
        let lam = weights.adv as f32;
        let d_cand = d.backward(&adversarial_loss_g_grad(&scores).map(|v| v * lam));
        d_fake.add_assign(&d_cand);
        // gradients reaching θ_d here belong to the generator's objective
        d.zero_grad();
    }
    let l_total_g = check_finite("l_total_g", step, weights.mse * l_mse + weights.adv * l_adv)?;
    g.backward(&d_fake);
    state.opt_g.step(g);
    state.step = step;
    Ok(LossBreakdown {
        l_mse,
        l_adv,
        l_total_g,
        l_d,
        lambda_mse: weights.mse,
        lambda_adv: weights.adv,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,epoch,l_mse,l_adv,l_total_g,l_d";

    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.epoch, l.l_mse, l.l_adv, l.l_total_g, l.l_d
        )
    }
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Run directory receiving `train_log.csv` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Visiting order of epoch `epoch` (0-based), a seed-derived permutation.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn persist(result: Result<()>, config: &TrainConfig) -> Result<()> {
    match result {
        Err(e) if config.allow_no_persistence => {
            log::warn!("continuing without persistence: {e}");
            Ok(())
        }
        r => r,
    }
}

/// Trains from `state` (fresh or resumed) up to `config.epochs`, returning
/// the final state and the log rows produced by this call.
pub fn train(
    split: &DatasetSplit,
    config: &TrainConfig,
    palette: &ClassPalette,
    mut state: TrainState,
    options: &TrainOptions,
) -> Result<(TrainState, Vec<LogRow>)> {
    config.validate()?;
    ensure!(!split.is_empty(), Dataset, "training split `{}` is empty", split.name);
    ensure!(
        split.image_size == config.arch.image_size,
        Config,
        "split images are {}px, architecture expects {}px",
        split.image_size,
        config.arch.image_size
    );
    if options.out_dir.is_none() && !config.allow_no_persistence {
        return Err(Error::Config(
            "training without an output directory disables checkpoints; set allow_no_persistence to permit it".into(),
        ));
    }
    let mut log_file = match &options.out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let opened = fs::create_dir_all(dir)
                .and_then(|_| {
                    let fresh = state.step == 0 || !path.exists();
                    let mut f = OpenOptions::new()
                        .create(true)
                        .append(!fresh)
                        .write(true)
                        .truncate(fresh)
                        .open(&path)?;
                    if fresh {
                        writeln!(f, "{}", LogRow::CSV_HEADER)?;
                    }
                    Ok(f)
                })
                .map_err(|e| Error::io(&path, e));
            match opened {
                Ok(f) => Some(f),
                Err(e) => {
                    persist(Err(e), config)?;
                    None
                }
            }
        }
        None => None,
    };

    let mut rows = Vec::new();
    for epoch in state.epoch..config.epochs {
        let order = epoch_order(config.seed, epoch, split.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &split.samples[i]).collect();
            let losses = train_step(&mut state, &batch, config, palette)?;
            let row = LogRow {
                step: state.step,
                epoch: epoch + 1,
                losses,
            };
            if let Some(f) = log_file.as_mut() {
                let path = options.out_dir.as_deref().expect("log implies dir").join(LOG_FILE);
                persist(
                    writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&path, e)),
                    config,
                )?;
            }
            rows.push(row);
        }
        state.epoch = epoch + 1;
        log::info!(
            "epoch {}/{} step {} l_mse {:.5} l_adv {:.4} l_d {:.4}",
            state.epoch,
            config.epochs,
            state.step,
            rows.last().map_or(0.0, |r| r.losses.l_mse),
            rows.last().map_or(0.0, |r| r.losses.l_adv),
            rows.last().map_or(0.0, |r| r.losses.l_d)
        );
        if let Some(dir) = &options.out_dir {
            if config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0 {
                let path = checkpoint_path(dir, state.epoch);
                persist(checkpoint::save(&mut state, config, &path), config)?;
            }
        }
    }
    if let Some(dir) = &options.out_dir {
        persist(checkpoint::save(&mut state, config, &dir.join(FINAL_CHECKPOINT)), config)?;
    }
    Ok((state, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_scene;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            arch: ArchConfig::tiny(),
            allow_no_persistence: true,
            ..TrainConfig::default()
        }
    }

    fn tiny_split(n: usize) -> DatasetSplit {
        let p = ClassPalette::default();
        let samples = (0..n)
            .map(|i| {
                let mut s = synth_scene(i as u64, &p, 16).unwrap();
                s.id = format!("s{i}");
                s
            })
            .collect();
        DatasetSplit::new("train", samples, 16).unwrap()
    }

    #[test]
    fn one_epoch_of_eight_in_fours_is_two_steps() {
        let cfg = tiny_config();
        let state = TrainState::new(&cfg).unwrap();
        let (state, rows) =
            train(&tiny_split(8), &cfg, &ClassPalette::default(), state, &TrainOptions::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((state.step, state.epoch), (2, 1));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        for e in 0..5 {
            let mut o = epoch_order(7, e, 13);
            o.sort_unstable();
            assert_eq!(o, (0..13).collect::<Vec<_>>());
        }
        assert_ne!(epoch_order(7, 0, 13), epoch_order(7, 1, 13));
    }

    #[test]
    fn ablation_leaves_discriminator_untouched() {
        let cfg = TrainConfig {
            adversarial_enabled: false,
            ..tiny_config()
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.discriminator_checksum();
        let split = tiny_split(4);
        let batch: Vec<&SamplePair> = split.samples.iter().collect();
        let lb = train_step(&mut state, &batch, &cfg, &ClassPalette::default()).unwrap();
        assert_eq!((lb.l_adv, lb.l_d, lb.lambda_adv), (0.0, 0.0, 0.0));
        assert_eq!(state.discriminator_checksum(), before);
    }

    #[test]
    fn adversarial_step_updates_both_networks() {
        let cfg = tiny_config();
        let mut state = TrainState::new(&cfg).unwrap();
        let (g0, d0) = (state.generator_checksum(), state.discriminator_checksum());
        let split = tiny_split(2);
        let batch: Vec<&SamplePair> = split.samples.iter().collect();
        let lb = train_step(&mut state, &batch, &cfg, &ClassPalette::default()).unwrap();
        assert!(lb.l_adv > 0.0 && lb.l_d > 0.0);
        assert_ne!(state.generator_checksum(), g0);
        assert_ne!(state.discriminator_checksum(), d0);
    }

    #[test]
    fn same_seed_same_losses() {
        let cfg = TrainConfig {
            epochs: 2,
            source_mode: SourceMode::Noise,
            ..tiny_config()
        };
        let run = || {
            let s = TrainState::new(&cfg).unwrap();
            train(&tiny_split(6), &cfg, &ClassPalette::default(), s, &TrainOptions::default())
                .unwrap()
                .1
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn refuses_to_train_without_persistence_by_default() {
        let cfg = TrainConfig {
            allow_no_persistence: false,
            ..tiny_config()
        };
        let s = TrainState::new(&cfg).unwrap();
        let r = train(&tiny_split(2), &cfg, &ClassPalette::default(), s, &TrainOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_config_and_wrong_sizes() {
        assert!(TrainConfig { batch_size: 0, ..tiny_config() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..tiny_config() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..tiny_config() }.validate().is_err());
        let cfg = tiny_config();
        let mut state = TrainState::new(&cfg).unwrap();
        let big = synth_scene(0, &ClassPalette::default(), 32).unwrap();
        assert!(train_step(&mut state, &[&big], &cfg, &ClassPalette::default()).is_err());
        assert!(train_step(&mut state, &[], &cfg, &ClassPalette::default()).is_err());
    }
}
