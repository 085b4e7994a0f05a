//! Procedural road scenes with pixel-exact lane and symbol labels.
//!
//! Each scene is a pure function of `(seed, palette, image_size)`: a
//! perspective road with 2–4 lane lines (solid or dashed), an optional
//! zebra crossing, an optional stop line and an optional arrow symbol. The
//! context image gets sky, shoulder and textured asphalt plus photometric
//! jitter; the target marks every painted pixel with its class.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::dataio::{write_split, Dataset, DatasetSplit, SamplePair};
use crate::error::{ensure, Error, Result};
use crate::image::{LabelImage, RgbImage};
use crate::palette::{unit_to_rgb8, ClassPalette};

/// Class ids the generator paints, resolved from palette names.
#[derive(Debug, Clone, Copy)]
struct Roles {
    dividing: u8,
    guiding: u8,
    symbol: u8,
    crossing: Option<u8>,
    stop: Option<u8>,
}

impl Roles {
    fn resolve(palette: &ClassPalette) -> Result<Self> {
        let need = |name: &str| {
            palette.id_of(name).ok_or_else(|| {
                Error::Config(format!(
                    "synthetic scenes need background, two lane classes and a symbol class; \
                     palette has no `{name}` class"
                ))
            })
        };
        let roles = Self {
            dividing: need("dividing_lane")?,
            guiding: need("guiding_lane")?,
            symbol: need("turn_symbol")?,
            crossing: palette.id_of("crossing"),
            stop: palette.id_of("stop_lane"),
        };
        ensure!(
            roles.dividing != 0 && roles.guiding != 0 && roles.symbol != 0,
            Config,
            "lane and symbol roles must not map to background"
        );
        Ok(roles)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Paint {
    White,
    Yellow,
}

#[derive(Debug, Clone)]
struct LaneLine {
    /// x where the line meets the bottom edge (pixels, may be off-image).
    bottom_x: f32,
    dashed: bool,
    dash_phase: f32,
    class: u8,
    paint: Paint,
}

#[derive(Debug, Clone, Copy)]
enum ArrowKind {
    Straight,
    Left,
    Right,
}

#[derive(Debug, Clone)]
struct Arrow {
    center_x: f32,
    bottom_y: f32,
    height: f32,
    half_width: f32,
    kind: ArrowKind,
}

impl Arrow {
    /// Local coordinates: `a ∈ [-1, 1]` across, `b ∈ [0, 1]` upwards.
    fn contains(&self, px: f32, py: f32) -> bool {
        let a = (px - self.center_x) / self.half_width;
        let b = (self.bottom_y - py) / self.height;
        if !(0.0..=1.0).contains(&b) || a.abs() > 1.0 {
            return false;
        }
        match self.kind {
            ArrowKind::Straight => {
                (a.abs() < 0.25 && b < 0.6) || (b >= 0.6 && a.abs() < (1.0 - b) / 0.4)
            }
            ArrowKind::Left | ArrowKind::Right => {
                let a = if matches!(self.kind, ArrowKind::Left) { -a } else { a };
                let shaft = a.abs() < 0.25 && b < 0.8;
                let arm = (0.55..0.8).contains(&b) && (0.0..0.6).contains(&a);
                let head = a >= 0.6 && (b - 0.675).abs() < 0.325 * (1.0 - a) / 0.4;
                shaft || arm || head
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Scene {
    roles: Roles,
    size: usize,
    horizon: f32,
    vanish_x: f32,
    lanes: Vec<LaneLine>,
    road_left: f32,
    road_right: f32,
    line_width: f32,
    crossing: Option<(f32, f32, f32)>,
    stop: Option<(f32, f32, f32, f32)>,
    arrow: Option<Arrow>,
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, size: usize, roles: &Roles) -> Self {
        let s = size as f32;
        let horizon = s * rng.random_range(0.32..0.45);
        let vanish_x = s * rng.random_range(0.4..0.6);
        let lane_w = s * rng.random_range(0.3..0.42);
        let center = s * rng.random_range(0.42..0.58);
        let n_lines = rng.random_range(2..=4usize);
        let div_idx = (n_lines - 1) / 2;
        let lanes: Vec<LaneLine> = (0..n_lines)
            .map(|i| {
                let off = i as f32 - (n_lines as f32 - 1.0) / 2.0;
                let dividing = i == div_idx;
                LaneLine {
                    bottom_x: center + off * lane_w,
                    dashed: if dividing { rng.random_bool(0.25) } else { rng.random_bool(0.5) },
                    dash_phase: rng.random_range(0.0..1.0),
                    class: if dividing { roles.dividing } else { roles.guiding },
                    paint: if dividing { Paint::Yellow } else { Paint::White },
                }
            })
            .collect();
        let road_left = lanes[0].bottom_x - 0.2 * lane_w;
        let road_right = lanes[n_lines - 1].bottom_x + 0.2 * lane_w;
        let line_width = s * rng.random_range(0.03..0.045);

        let crossing = (roles.crossing.is_some() && rng.random_bool(0.4)).then(|| {
            let t0 = rng.random_range(0.62..0.8);
            (t0, t0 + rng.random_range(0.1..0.16), lane_w * rng.random_range(0.14..0.2))
        });
        let stop = (roles.stop.is_some() && rng.random_bool(0.4)).then(|| {
            let t = match crossing {
                Some((t0, _, _)) => t0 - rng.random_range(0.06..0.1),
                None => rng.random_range(0.6..0.85),
            };
            let lane = rng.random_range(0..n_lines - 1);
            (t, rng.random_range(0.03..0.05), lanes[lane].bottom_x, lanes[lane + 1].bottom_x)
        });
        let arrow = rng.random_bool(0.65).then(|| {
            let lane = rng.random_range(0..n_lines - 1);
            let mid = 0.5 * (lanes[lane].bottom_x + lanes[lane + 1].bottom_x);
            let t = rng.random_range(0.55..0.8);
            let kind = match rng.random_range(0..3) {
                0 => ArrowKind::Straight,
                1 => ArrowKind::Left,
                _ => ArrowKind::Right,
            };
            Arrow {
                center_x: vanish_x + (mid - vanish_x) * t,
                bottom_y: horizon + (s - horizon) * t,
                height: s * 0.5 * t * rng.random_range(0.35..0.5),
                half_width: lane_w * t * rng.random_range(0.22..0.3),
                kind,
            }
        });
        Self {
            roles: *roles,
            size,
            horizon,
            vanish_x,
            lanes,
            road_left,
            road_right,
            line_width,
            crossing,
            stop,
            arrow,
        }
    }

    /// Perspective depth parameter for a pixel row center: 0 at the horizon,
    /// 1 at the bottom edge.
    fn depth_t(&self, py: f32) -> f32 {
        (py - self.horizon) / (self.size as f32 - self.horizon)
    }

    /// x of a ground line through `bottom_x` at depth `t`.
    fn project_x(&self, bottom_x: f32, t: f32) -> f32 {
        self.vanish_x + (bottom_x - self.vanish_x) * t
    }

    fn on_road(&self, px: f32, t: f32) -> bool {
        px >= self.project_x(self.road_left, t) && px <= self.project_x(self.road_right, t)
    }

    /// Painted class and paint at a pixel center, if any.
    fn marking(&self, px: f32, py: f32) -> Option<(u8, Paint)> {
        let t = self.depth_t(py);
        if t <= 0.1 {
            return None;
        }
        if self.arrow.as_ref().is_some_and(|a| a.contains(px, py)) {
            return Some((self.roles.symbol, Paint::White));
        }
        if let (Some((t0, t1, period)), Some(class)) = (self.crossing, self.roles.crossing) {
            if t >= t0 && t <= t1 && self.on_road(px, t) {
                let u = (px - self.vanish_x) / t;
                if (u / period).rem_euclid(1.0) < 0.5 {
                    return Some((class, Paint::White));
                }
                return None;
            }
        }
        if let (Some((ts, thick, xa, xb)), Some(class)) = (self.stop, self.roles.stop) {
            if t >= ts && t <= ts + thick && px >= self.project_x(xa, t) && px <= self.project_x(xb, t) {
                return Some((class, Paint::White));
            }
        }
        let half = (0.5 * self.line_width * t).max(0.5);
        for lane in &self.lanes {
            let cx = self.project_x(lane.bottom_x, t);
            if (px - cx).abs() <= half {
                if lane.dashed && ((1.0 / t) * 0.9 + lane.dash_phase).rem_euclid(1.0) >= 0.5 {
                    continue;
                }
                return Some((lane.class, lane.paint));
            }
        }
        None
    }
}

/// Photometric parameters of one rendering.
#[derive(Debug, Clone)]
struct Look {
    brightness: f32,
    contrast: f32,
    cast: [f32; 3],
    asphalt: f32,
    shoulder: [f32; 3],
    sky_top: [f32; 3],
    sky_low: [f32; 3],
    paint_strength: f32,
    texture_sigma: f32,
    sensor_sigma: f32,
}

impl Look {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let g = rng.random_range(0.0..0.06f32);
        Self {
            brightness: rng.random_range(0.8..1.2),
            contrast: rng.random_range(0.85..1.15),
            cast: [
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
            ],
            asphalt: rng.random_range(0.22..0.42),
            shoulder: [0.28 + g, 0.4 + g, 0.18],
            sky_top: [0.45, 0.62, rng.random_range(0.8..0.95)],
            sky_low: [0.78, 0.82, 0.88],
            paint_strength: rng.random_range(0.75..1.0),
            texture_sigma: rng.random_range(0.02..0.045),
            sensor_sigma: rng.random_range(0.005..0.02),
        }
    }
}

/// Renders one synthetic sample. Pure in `(seed, palette, image_size)`.
pub fn synth_scene(seed: u64, palette: &ClassPalette, image_size: usize) -> Result<SamplePair> {
    synth_scene_with_id(seed, palette, image_size, format!("synth_{seed}"))
}

fn synth_scene_with_id(
    seed: u64,
    palette: &ClassPalette,
    image_size: usize,
    id: String,
) -> Result<SamplePair> {
    ensure!(image_size >= 8, Config, "image_size must be >= 8, got {image_size}");
    let roles = Roles::resolve(palette)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::sample(&mut rng, image_size, &roles);
    let look = Look::sample(&mut rng);
    let texture = Normal::new(0.0f32, look.texture_sigma).expect("valid sigma");
    let sensor = Normal::new(0.0f32, look.sensor_sigma).expect("valid sigma");

    let n = image_size;
    let mut ctx = vec![0.0f32; n * n * 3];
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        let py = y as f32 + 0.5;
        for x in 0..n {
            let px = x as f32 + 0.5;
            let i = y * n + x;
            let mut rgb;
            if py < scene.horizon {
                let k = py / scene.horizon;
                rgb = [0, 1, 2].map(|c| look.sky_top[c] + (look.sky_low[c] - look.sky_top[c]) * k);
            } else {
                let t = scene.depth_t(py).max(1e-3);
                let grain = texture.sample(&mut rng);
                rgb = if scene.on_road(px, t) {
                    [look.asphalt + grain; 3]
                } else {
                    look.shoulder.map(|v| v + grain)
                };
                if let Some((class, paint)) = scene.marking(px, py) {
                    labels[i] = class;
                    let color = match paint {
                        Paint::White => [0.92, 0.92, 0.9],
                        Paint::Yellow => [0.92, 0.76, 0.18],
                    };
                    let s = look.paint_strength;
                    rgb = [0, 1, 2].map(|c| rgb[c] * (1.0 - s) + color[c] * s + 0.5 * grain);
                }
            }
            for c in 0..3 {
                let v = (rgb[c] - 0.5) * look.contrast + 0.5;
                let v = v * look.brightness + look.cast[c] + sensor.sample(&mut rng);
                ctx[i * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    let context = RgbImage::new(n, n, ctx)?;
    let target = LabelImage::new(n, n, labels)?;
    SamplePair::new(id, context, target)
}

/// Sample counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl std::str::FromStr for SplitCounts {
    type Err = Error;

    /// Parses `train,val,test`, e.g. `8,2,2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("invalid counts `{s}`, expected `train,val,test`")))?;
        ensure!(parts.len() == 3, Config, "invalid counts `{s}`, expected `train,val,test`");
        Ok(Self {
            train: parts[0],
            val: parts[1],
            test: parts[2],
        })
    }
}

const SPLIT_STRIDE: u64 = 1 << 28;

/// Seed of sample `index` in split `split_index` (0 train, 1 val, 2 test).
/// Splits draw from disjoint seed ranges.
pub fn scene_seed(seed: u64, split_index: u64, index: usize) -> u64 {
    seed.wrapping_mul(4 * SPLIT_STRIDE)
        .wrapping_add(split_index * SPLIT_STRIDE)
        .wrapping_add(index as u64)
}

/// Generates train/val/test splits in memory.
pub fn synth_dataset(
    seed: u64,
    counts: SplitCounts,
    palette: &ClassPalette,
    image_size: usize,
) -> Result<Dataset> {
    let all = [counts.train, counts.val, counts.test];
    ensure!(
        all.iter().all(|&c| c > 0 && (c as u64) < SPLIT_STRIDE),
        Config,
        "split counts must be positive, got {all:?}"
    );
    let mut splits = Vec::with_capacity(3);
    for (k, (name, count)) in ["train", "val", "test"].iter().zip(all).enumerate() {
        let samples = (0..count)
            .map(|i| {
                synth_scene_with_id(
                    scene_seed(seed, k as u64, i),
                    palette,
                    image_size,
                    format!("{name}_{i:05}"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        splits.push(DatasetSplit::new(*name, samples, image_size)?);
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        train: it.next().expect("train"),
        val: it.next().expect("val"),
        test: it.next().expect("test"),
    })
}

/// Generates and writes a dataset under `root` in the standard layout.
pub fn synth_dataset_to_disk(
    root: &Path,
    seed: u64,
    counts: SplitCounts,
    palette: &ClassPalette,
    image_size: usize,
) -> Result<Dataset> {
    let ds = synth_dataset(seed, counts, palette, image_size)?;
    for split in ds.splits() {
        write_split(root, split, palette)?;
    }
    Ok(ds)
}

/// SHA-256 over the 8-bit context bytes and the label bytes of a pair.
pub fn pair_digest(pair: &SamplePair) -> String {
    let mut h = Sha256::new();
    h.update((pair.context.height() as u32).to_le_bytes());
    h.update((pair.context.width() as u32).to_le_bytes());
    for px in pair.context.pixels() {
        h.update(unit_to_rgb8(px));
    }
    h.update(pair.target.data());
    hex::encode(h.finalize())
}
