//! Dataset layout, PNG I/O, resizing and 6-channel input conditioning.
//!
//! On disk a dataset is `<root>/<split>/{images,labels}/<stem>.png`. Labels
//! are stored palette-rendered and quantized back to class ids on load.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::image::{LabelImage, RgbImage};
use crate::nn::{Float, Tensor};
use crate::palette::{unit_to_rgb8, ClassPalette};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// A road scene with its ground-truth lane/symbol labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub context: RgbImage,
    pub target: LabelImage,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, context: RgbImage, target: LabelImage) -> Result<Self> {
        let id = id.into();
        ensure!(
            context.height() == target.height() && context.width() == target.width(),
            Validation,
            "sample {id}: context {}x{} and target {}x{} differ in size",
            context.height(),
            context.width(),
            target.height(),
            target.width()
        );
        Ok(Self {
            id,
            context,
            target,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.context.height(), self.context.width())
    }
}

/// Named, ordered collection of samples at a common square resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub samples: Vec<SamplePair>,
    pub image_size: usize,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, samples: Vec<SamplePair>, image_size: usize) -> Result<Self> {
        let name = name.into();
        let mut seen = HashSet::new();
        for s in &samples {
            ensure!(
                seen.insert(s.id.as_str()),
                Dataset,
                "duplicate sample id `{}` in split `{name}`",
                s.id
            );
            ensure!(
                s.size() == (image_size, image_size),
                Dataset,
                "sample `{}` is {:?}, split `{name}` expects {image_size}x{image_size}",
                s.id,
                s.size()
            );
        }
        Ok(Self {
            name,
            samples,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }
}

/// Train/val/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn splits(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn split(&self, name: &str) -> Option<&DatasetSplit> {
        self.splits().into_iter().find(|s| s.name == name)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for split in self.splits() {
            for id in split.ids() {
                if let Some(prev) = owner.insert(id, &split.name) {
                    return Err(Error::Dataset(format!(
                        "sample id `{id}` appears in both `{prev}` and `{}`",
                        split.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Six-channel generator input: `[source | context]`, planar `[6, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ConditionedInput {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        6
    }

    /// Value of channel `c` at pixel `(y, x)`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 6, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    /// Splits back into `(source, context)`.
    pub fn split(&self) -> (RgbImage, RgbImage) {
        let hw = self.height * self.width;
        let plane = |start: usize| {
            let mut d = Vec::with_capacity(hw * 3);
            for i in 0..hw {
                for c in 0..3 {
                    d.push(self.data[(start + c) * hw + i]);
                }
            }
            RgbImage::new(self.height, self.width, d).expect("channels were valid images")
        };
        (plane(0), plane(3))
    }
}

/// Concatenates `source` and `context` along channels.
pub fn make_conditioned_input(source: &RgbImage, context: &RgbImage) -> Result<ConditionedInput> {
    ensure!(
        source.same_size(context),
        Validation,
        "source {}x{} and context {}x{} differ in size",
        source.height(),
        source.width(),
        context.height(),
        context.width()
    );
    let (h, w) = (source.height(), source.width());
    let hw = h * w;
    let mut data = vec![0.0f32; 6 * hw];
    for (img, base) in [(source, 0usize), (context, 3)] {
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(base + c) * hw + i] = px[c];
            }
        }
    }
    Ok(ConditionedInput {
        height: h,
        width: w,
        data,
    })
}

/// Stacks conditioned inputs into a `[N, 6, H, W]` batch.
pub fn batch_inputs<T: Float>(inputs: &[ConditionedInput]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = inputs.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&items)
}

/// Bilinear resize with half-pixel centers (non-square inputs are squashed).
pub fn resize_bilinear(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if img.height() == height && img.width() == width {
        return img.clone();
    }
    let (sh, sw) = (img.height(), img.width());
    let sy = sh as f32 / height as f32;
    let sx = sw as f32 / width as f32;
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let (a, b, c, d) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * tx;
                let bot = c[ch] + (d[ch] - c[ch]) * tx;
                data.push((top + (bot - top) * ty).clamp(0.0, 1.0));
            }
        }
    }
    RgbImage::new(height, width, data).expect("bilinear output stays in range")
}

/// Nearest-neighbor label resize; never introduces new class ids.
pub fn resize_labels_nearest(labels: &LabelImage, height: usize, width: usize) -> LabelImage {
    if labels.height() == height && labels.width() == width {
        return labels.clone();
    }
    let (sh, sw) = (labels.height(), labels.width());
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let syi = ((y * 2 + 1) * sh / (2 * height)).min(sh - 1);
        for x in 0..width {
            let sxi = ((x * 2 + 1) * sw / (2 * width)).min(sw - 1);
            data.push(labels.get(syi, sxi));
        }
    }
    LabelImage::new(height, width, data).expect("positive size")
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut raw = Vec::with_capacity(img.pixel_count() * 3);
    for px in img.pixels() {
        raw.extend_from_slice(&unit_to_rgb8(px));
    }
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer matches dimensions");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Loads one split directory (`<dir>/{images,labels}`), resizing to
/// `image_size`. The split takes the directory's file name.
pub fn load_split(dir: &Path, palette: &ClassPalette, image_size: usize) -> Result<DatasetSplit> {
    ensure!(image_size > 0, Config, "image_size must be positive");
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("split")
        .to_string();
    let images = png_stems(&dir.join("images"))?;
    let labels = png_stems(&dir.join("labels"))?;
    let img_keys: BTreeSet<&String> = images.keys().collect();
    let lbl_keys: BTreeSet<&String> = labels.keys().collect();
    let orphans: Vec<&str> = img_keys
        .symmetric_difference(&lbl_keys)
        .map(|s| s.as_str())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "split `{name}` has unpaired files for stems: {}",
            orphans.join(", ")
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let context = load_rgb_png(img_path)?;
        let label_rgb = load_rgb_png(&labels[stem])?;
        let target = palette.quantize(&label_rgb);
        let context = resize_bilinear(&context, image_size, image_size);
        let target = resize_labels_nearest(&target, image_size, image_size);
        samples.push(SamplePair::new(stem.clone(), context, target)?);
    }
    DatasetSplit::new(name, samples, image_size)
}

/// Loads `train/`, `val/` and `test/` under `root`.
pub fn load_dataset(root: &Path, palette: &ClassPalette, image_size: usize) -> Result<Dataset> {
    let mut splits = SPLIT_NAMES
        .iter()
        .map(|n| load_split(&root.join(n), palette, image_size))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let ds = Dataset {
        train: splits.next().expect("three splits"),
        val: splits.next().expect("three splits"),
        test: splits.next().expect("three splits"),
    };
    ds.check_disjoint()?;
    Ok(ds)
}

/// Writes a split as `<root>/<split.name>/{images,labels}/<id>.png`.
pub fn write_split(root: &Path, split: &DatasetSplit, palette: &ClassPalette) -> Result<()> {
    let dir = root.join(&split.name);
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &split.samples {
        save_rgb_png(&dir.join("images").join(format!("{}.png", s.id)), &s.context)?;
        save_rgb_png(
            &dir.join("labels").join(format!("{}.png", s.id)),
            &palette.render(&s.target)?,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> RgbImage {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                d.extend_from_slice(&[x as f32 / w as f32, y as f32 / h as f32, 0.25]);
            }
        }
        RgbImage::new(h, w, d).unwrap()
    }

    #[test]
    fn conditioned_input_shape_and_order() {
        let src = RgbImage::filled(64, 64, [0.0, 0.0, 0.0]).unwrap();
        let ctx = gradient(64, 64);
        let ci = make_conditioned_input(&src, &ctx).unwrap();
        assert_eq!((ci.height(), ci.width(), ci.channels()), (64, 64, 6));
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(ci.at(4, y, x), ctx.get(y, x)[1]);
                for c in 0..3 {
                    assert_eq!(ci.at(c, y, x), 0.0);
                    assert_eq!(ci.at(3 + c, y, x), ctx.get(y, x)[c]);
                }
            }
        }
        let (s2, c2) = ci.split();
        assert_eq!(s2, src);
        assert_eq!(c2, ctx);
    }

    #[test]
    fn conditioned_input_size_mismatch() {
        let a = RgbImage::filled(4, 4, [0.0; 3]).unwrap();
        let b = RgbImage::filled(4, 5, [0.0; 3]).unwrap();
        assert!(matches!(make_conditioned_input(&a, &b), Err(Error::Validation(_))));
    }

    #[test]
    fn bilinear_preserves_constant_images() {
        let img = RgbImage::filled(9, 16, [0.2, 0.4, 0.6]).unwrap();
        let out = resize_bilinear(&img, 8, 8);
        assert!(out.pixels().all(|p| (p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6));
    }

    #[test]
    fn nearest_label_resize_picks_source_pixels() {
        let l = LabelImage::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = resize_labels_nearest(&l, 4, 4);
        assert_eq!(up.data(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        let down = resize_labels_nearest(&up, 2, 2);
        assert_eq!(down, l);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let ctx = RgbImage::filled(2, 2, [0.0; 3]).unwrap();
        let tgt = LabelImage::filled(2, 2, 0).unwrap();
        let s = SamplePair::new("a", ctx, tgt).unwrap();
        assert!(DatasetSplit::new("train", vec![s.clone(), s], 2).is_err());
    }
}
