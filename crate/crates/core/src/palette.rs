//! Class palette: the mapping between lane/symbol classes and RGB colors.
//!
//! The generator emits a continuous RGB image; [`ClassPalette::quantize`]
//! snaps every pixel to the class whose color is nearest in Euclidean RGB
//! distance (ties go to the lowest class id). [`ClassPalette::render`] is the
//! inverse used to turn ground-truth labels into generator targets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelImage, RgbImage};

/// One palette row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub color: [f32; 3],
}

/// Ordered class set. Ids are contiguous from 0; class 0 is black background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPalette {
    entries: Vec<ClassEntry>,
}

impl ClassPalette {
    /// Validates and builds a palette. Entries may come in any order; they
    /// are stored sorted by id.
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        validate(&entries).map_err(|(_, msg)| Error::Validation(msg))?;
        Ok(Self { entries })
    }

    /// Background plus six lane/symbol classes, on corners of the
    /// RGB cube (minimum pairwise distance 1.0).
    pub fn default_lanes() -> Self {
        let rows: [(&str, [u8; 3]); 7] = [
            ("background", [0, 0, 0]),
            ("dividing_lane", [255, 255, 255]),
            ("guiding_lane", [0, 255, 0]),
            ("crossing", [255, 0, 0]),
            ("stop_lane", [0, 0, 255]),
            ("turn_symbol", [255, 255, 0]),
            ("no_parking", [255, 0, 255]),
        ];
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, (name, c))| ClassEntry {
                id: i as u8,
                name: (*name).to_string(),
                color: rgb8_to_unit(*c),
            })
            .collect();
        Self::new(entries).expect("default palette is valid")
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class_id: u8) -> bool {
        (class_id as usize) < self.entries.len()
    }

    pub fn color(&self, class_id: u8) -> Option<[f32; 3]> {
        self.entries.get(class_id as usize).map(|e| e.color)
    }

    pub fn name(&self, class_id: u8) -> Option<&str> {
        self.entries.get(class_id as usize).map(|e| e.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    /// Smallest Euclidean distance between any two class colors.
    pub fn min_separation(&self) -> f32 {
        let mut best = f32::INFINITY;
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                best = best.min(dist2(a.color, b.color).sqrt() as f32);
            }
        }
        best
    }

    /// Checks that every pixel of `labels` names a palette class.
    pub fn check_labels(&self, labels: &LabelImage) -> Result<()> {
        if let Some(pos) = labels.data().iter().position(|&c| !self.contains(c)) {
            return Err(Error::Validation(format!(
                "unknown class id {} at pixel (row {}, col {})",
                labels.data()[pos],
                pos / labels.width(),
                pos % labels.width()
            )));
        }
        Ok(())
    }

    /// Paints each pixel with its class color.
    pub fn render(&self, labels: &LabelImage) -> Result<RgbImage> {
        self.check_labels(labels)?;
        let mut data = Vec::with_capacity(labels.pixel_count() * 3);
        for &c in labels.data() {
            data.extend_from_slice(&self.entries[c as usize].color);
        }
        RgbImage::new(labels.height(), labels.width(), data)
    }

    /// Nearest-color class for a single pixel.
    #[inline]
    pub fn nearest(&self, rgb: [f32; 3]) -> u8 {
        let mut best_id = 0u8;
        let mut best = f64::INFINITY;
        for e in &self.entries {
            let d = dist2(rgb, e.color);
            // strict: equal distances keep the lower id seen first
            if d < best {
                best = d;
                best_id = e.id;
            }
        }
        best_id
    }

    /// Maps every pixel to its nearest palette class.
    pub fn quantize(&self, image: &RgbImage) -> LabelImage {
        let data = image.pixels().map(|p| self.nearest(p)).collect();
        LabelImage::new(image.height(), image.width(), data).expect("same size as a valid image")
    }

    /// Reads the CSV palette format (`class_id,name,R,G,B`, 8-bit channels).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let fail = |msg: String| Error::PaletteFormat { line: line_no, msg };
            if fields.len() != 5 {
                return Err(fail(format!(
                    "expected 5 fields `class_id,name,R,G,B`, found {}",
                    fields.len()
                )));
            }
            let id: u8 = fields[0]
                .parse()
                .map_err(|_| fail(format!("invalid class id `{}`", fields[0])))?;
            let mut rgb = [0u8; 3];
            for (c, f) in fields[2..].iter().enumerate() {
                let v: i64 = f
                    .parse()
                    .map_err(|_| fail(format!("invalid channel value `{f}`")))?;
                if !(0..=255).contains(&v) {
                    return Err(fail(format!("channel value {v} outside 0..=255")));
                }
                rgb[c] = v as u8;
            }
            entries.push(ClassEntry {
                id,
                name: fields[1].to_string(),
                color: rgb8_to_unit(rgb),
            });
            lines.push(line_no);
        }
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&i| entries[i].id);
        let sorted: Vec<ClassEntry> = order.iter().map(|&i| entries[i].clone()).collect();
        validate(&sorted).map_err(|(bad, msg)| Error::PaletteFormat {
            line: lines[order[bad]],
            msg,
        })?;
        Ok(Self { entries: sorted })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# class_id,name,R,G,B\n");
        for e in &self.entries {
            let [r, g, b] = unit_to_rgb8(e.color);
            let _ = writeln!(out, "{},{},{},{},{}", e.id, e.name, r, g, b);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

impl Default for ClassPalette {
    fn default() -> Self {
        Self::default_lanes()
    }
}

/// Returns the index of the offending entry (in id order) with a message.
fn validate(sorted: &[ClassEntry]) -> std::result::Result<(), (usize, String)> {
    if sorted.is_empty() {
        return Err((0, "palette has no classes".into()));
    }
    for (i, e) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1].id == e.id {
            return Err((i, format!("duplicate class id {}", e.id)));
        }
        if e.id as usize != i {
            return Err((i, format!("class ids must be contiguous from 0; expected {i}, found {}", e.id)));
        }
        if e.name.is_empty() || e.name.contains(',') {
            return Err((i, format!("invalid class name `{}`", e.name)));
        }
        if e.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err((i, format!("color of class {} outside [0, 1]", e.id)));
        }
    }
    if sorted[0].color != [0.0, 0.0, 0.0] {
        return Err((0, "class 0 must be background with color (0,0,0)".into()));
    }
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if sorted[i].color == sorted[j].color {
                return Err((
                    j,
                    format!(
                        "duplicate color for classes {} and {}",
                        sorted[i].id, sorted[j].id
                    ),
                ));
            }
        }
    }
    Ok(())
}

#[inline]
fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let mut s = 0.0f64;
    for c in 0..3 {
        let d = a[c] as f64 - b[c] as f64;
        s += d * d;
    }
    s
}

pub fn rgb8_to_unit(c: [u8; 3]) -> [f32; 3] {
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

pub fn unit_to_rgb8(c: [f32; 3]) -> [u8; 3] {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(c[0]), q(c[1]), q(c[2])]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> ClassPalette {
        ClassPalette::parse("0,background,0,0,0\n1,red,255,0,0\n").unwrap()
    }

    #[test]
    fn render_all_background_is_black() {
        let p = ClassPalette::default();
        let img = p.render(&LabelImage::filled(3, 4, 0).unwrap()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_single_pixel_lookup() {
        let p = ClassPalette::default();
        assert_eq!(p.color(2), Some([0.0, 1.0, 0.0]));
        let img = p.render(&LabelImage::filled(1, 1, 2).unwrap()).unwrap();
        assert_eq!(img.get(0, 0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn render_unknown_class_names_location() {
        let p = two_class();
        let l = LabelImage::new(2, 2, vec![0, 1, 0, 5]).unwrap();
        let msg = p.render(&l).unwrap_err().to_string();
        assert!(msg.contains("class id 5") && msg.contains("row 1, col 1"), "{msg}");
    }

    #[test]
    fn quantize_exact_and_nearest() {
        let p = two_class();
        assert_eq!(p.nearest([1.0, 0.0, 0.0]), 1);
        assert_eq!(p.nearest([0.6, 0.0, 0.0]), 1);
        // equidistant: lowest id wins
        assert_eq!(p.nearest([0.5, 0.0, 0.0]), 0);
        assert_eq!(ClassPalette::default().nearest([0.0, 0.0, 1.0]), 4);
    }

    #[test]
    fn parse_normalizes_channels() {
        let p = ClassPalette::parse("# header\n0,background,0,0,0\n\n1,dividing_lane,255,255,255\n")
            .unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.color(1), Some([1.0, 1.0, 1.0]));
        assert_eq!(p.name(1), Some("dividing_lane"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("0,bg,0,0,0\n1,a,9,9,9\n2,b,9,9,9\n", 3, "duplicate color"),
            ("0,bg,0,0,0\n1,a,9,9,9\n1,b,8,8,8\n", 3, "duplicate class id"),
            ("0,bg,0,0,0\n# c\n2,a,9,9,9\n", 3, "contiguous"),
            ("0,bg,0,0,0\n1,a,9,300,9\n", 2, "outside 0..=255"),
            ("0,bg,0,0,0\n1,a,9,9\n", 2, "5 fields"),
            ("0,bg,0,0,1\n", 1, "background"),
        ];
        for (text, line, needle) in cases {
            match ClassPalette::parse(text) {
                Err(Error::PaletteFormat { line: l, msg }) => {
                    assert_eq!(l, line, "{text}: {msg}");
                    assert!(msg.contains(needle), "{msg}");
                }
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn default_palette_is_well_separated() {
        let p = ClassPalette::default();
        assert_eq!(p.len(), 7);
        assert!((p.min_separation() - 1.0).abs() < 1e-6);
        assert_eq!(p.id_of("turn_symbol"), Some(5));
    }

    #[test]
    fn csv_round_trip_on_default() {
        let p = ClassPalette::default();
        assert_eq!(ClassPalette::parse(&p.to_csv()).unwrap(), p);
    }
}
