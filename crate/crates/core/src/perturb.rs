//! Adverse-condition test sets: additive Gaussian noise, random gamma, and
//! removal of marking components by neighbourhood fill.
//!
//! Perturbations touch only the context image; ground-truth labels are
//! copied unchanged so evaluation measures how well the generator restores
//! markings it can no longer see clearly.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{write_split, DatasetSplit, SamplePair};
use crate::error::{ensure, Error, Result};
use crate::image::{LabelImage, RgbImage};
use crate::palette::ClassPalette;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Noise,
    Gamma,
    Occlusion,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [PerturbKind::Noise, PerturbKind::Gamma, PerturbKind::Occlusion];

    /// Name of the materialized split.
    pub fn set_name(self) -> &'static str {
        match self {
            PerturbKind::Noise => "adverse_noise",
            PerturbKind::Gamma => "adverse_gamma",
            PerturbKind::Occlusion => "adverse_occl",
        }
    }

    /// Suffix appended to sample ids.
    pub fn suffix(self) -> &'static str {
        match self {
            PerturbKind::Noise => "noise",
            PerturbKind::Gamma => "gamma",
            PerturbKind::Occlusion => "occl",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Strengths of the three perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbParams {
    pub noise_sigma: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub removal_fraction: f64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            gamma_lo: 0.4,
            gamma_hi: 2.5,
            removal_fraction: 0.5,
        }
    }
}

impl PerturbParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Config,
            "noise_sigma must be >= 0, got {}",
            self.noise_sigma
        );
        ensure!(
            self.gamma_lo > 0.0 && self.gamma_lo <= self.gamma_hi && self.gamma_hi.is_finite(),
            Config,
            "gamma range must satisfy 0 < lo <= hi, got [{}, {}]",
            self.gamma_lo,
            self.gamma_hi
        );
        ensure!(
            (0.0..=1.0).contains(&self.removal_fraction),
            Config,
            "removal_fraction must be in [0, 1], got {}",
            self.removal_fraction
        );
        Ok(())
    }
}

/// One perturbation kind with its seed and strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub seed: u64,
    pub params: PerturbParams,
}

impl PerturbationSpec {
    /// Perturbs the context of `pair`; `index` decorrelates images.
    pub fn apply(&self, pair: &SamplePair, index: usize) -> Result<RgbImage> {
        self.params.validate()?;
        let seed = image_seed(self.seed, self.kind, index);
        match self.kind {
            PerturbKind::Noise => apply_gaussian_noise(&pair.context, self.params.noise_sigma, seed),
            PerturbKind::Gamma => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (lo, hi) = (self.params.gamma_lo, self.params.gamma_hi);
                let gamma = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                apply_gamma(&pair.context, gamma)
            }
            PerturbKind::Occlusion => {
                occlude_components(&pair.context, &pair.target, self.params.removal_fraction, seed)
            }
        }
    }
}

fn image_seed(seed: u64, kind: PerturbKind, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(kind.stream().to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// `clip(image + n)`, `n ~ N(0, σ²)` i.i.d. per channel.
pub fn apply_gaussian_noise(image: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), Validation, "noise sigma must be >= 0, got {sigma}");
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let data = image
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    RgbImage::new(image.height(), image.width(), data)
}

/// Per-channel power law `v^γ`.
pub fn apply_gamma(image: &RgbImage, gamma: f64) -> Result<RgbImage> {
    ensure!(gamma > 0.0 && gamma.is_finite(), Validation, "gamma must be > 0, got {gamma}");
    Ok(image.map_values(|v| (v as f64).powf(gamma) as f32))
}

/// 8-connected components of non-background pixels, each as a list of
/// flat indices, in raster order of their first pixel.
pub fn marking_components(labels: &LabelImage) -> Vec<Vec<usize>> {
    let (h, w) = (labels.height(), labels.width());
    let data = labels.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for j in neighbours(i, h, w) {
                if data[j] != 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((i / w) as isize, (i % w) as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dy, dx)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dy, dx)| {
            let (ny, nx) = (y + dy, x + dx);
            (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w)
                .then(|| ny as usize * w + nx as usize)
        })
}

/// Median of `values`; the mean of the two middle values for even counts.
fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Replaces the context pixels of `⌈fraction · count⌉` seeded-chosen
/// marking components with the per-channel median of each component's
/// one-pixel boundary ring. Labels are not touched.
pub fn occlude_components(
    context: &RgbImage,
    labels: &LabelImage,
    fraction: f64,
    seed: u64,
) -> Result<RgbImage> {
    ensure!(
        (0.0..=1.0).contains(&fraction),
        Validation,
        "removal fraction must be in [0, 1], got {fraction}"
    );
    ensure!(
        context.height() == labels.height() && context.width() == labels.width(),
        Validation,
        "context {}x{} vs labels {}x{}",
        context.height(),
        context.width(),
        labels.height(),
        labels.width()
    );
    let comps = marking_components(labels);
    let take = ((fraction * comps.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (h, w) = (context.height(), context.width());
    let src = context.data();
    let mut out = src.to_vec();
    let mut in_comp = vec![false; h * w];
    for &c in order.iter().take(take) {
        let comp = &comps[c];
        comp.iter().for_each(|&i| in_comp[i] = true);
        let mut ring: Vec<usize> = comp
            .iter()
            .flat_map(|&i| neighbours(i, h, w))
            .filter(|&j| !in_comp[j])
            .collect();
        ring.sort_unstable();
        ring.dedup();
        if !ring.is_empty() {
            let mut fill = [0f32; 3];
            for (ch, f) in fill.iter_mut().enumerate() {
                let mut vals: Vec<f32> = ring.iter().map(|&j| src[3 * j + ch]).collect();
                *f = median(&mut vals);
            }
            for &i in comp {
                out[3 * i..3 * i + 3].copy_from_slice(&fill);
            }
        }
        comp.iter().for_each(|&i| in_comp[i] = false);
    }
    RgbImage::new(h, w, out)
}

/// Splits `split` into three disjoint thirds perturbed by noise, gamma and
/// occlusion respectively. A size not divisible by three uses the largest
/// balanced prefix.
pub fn build_adverse_sets(split: &DatasetSplit, params: &PerturbParams, seed: u64) -> Result<[DatasetSplit; 3]> {
    params.validate()?;
    let third = split.len() / 3;
    ensure!(
        third > 0,
        Dataset,
        "split `{}` has {} samples, at least 3 are needed",
        split.name,
        split.len()
    );
    if split.len() % 3 != 0 {
        log::warn!(
            "split `{}` has {} samples, not divisible by 3; using the first {}",
            split.name,
            split.len(),
            3 * third
        );
    }
    let mut sets = Vec::with_capacity(3);
    for (k, kind) in PerturbKind::ALL.into_iter().enumerate() {
        let spec = PerturbationSpec { kind, seed, params: *params };
        let samples = split.samples[k * third..(k + 1) * third]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let context = spec.apply(s, k * third + i)?;
                SamplePair::new(format!("{}_{}", s.id, kind.suffix()), context, s.target.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(DatasetSplit::new(kind.set_name(), samples, split.image_size)?);
    }
    let [a, b, c]: [DatasetSplit; 3] = sets
        .try_into()
        .map_err(|_| Error::Validation("expected three adverse sets".into()))?;
    Ok([a, b, c])
}

/// Writes the three sets in the standard layout under `root`.
pub fn write_adverse_sets(root: &Path, sets: &[DatasetSplit; 3], palette: &ClassPalette) -> Result<()> {
    sets.iter().try_for_each(|s| write_split(root, s, palette))
}
