//! Per-class IOU, precision and recall plus overall pixel accuracy.
//!
//! Means are taken over non-background classes. A class whose denominator
//! is zero for some metric is excluded from that mean and listed in
//! [`MetricsReport::undefined`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::LabelImage;
use crate::palette::ClassPalette;

/// Pixel tallies per class. `tn` is implied by `total − tp − fp − fn`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total: u64,
    pub samples: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            total: 0,
            samples: 0,
        }
    }

    pub fn for_palette(palette: &ClassPalette) -> Self {
        Self::new(palette.len())
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn tn(&self, class: usize) -> u64 {
        self.total - self.tp[class] - self.fp[class] - self.fn_[class]
    }

    /// Adds the tallies of one predicted/ground-truth pair.
    pub fn accumulate(&mut self, predicted: &LabelImage, truth: &LabelImage) -> Result<()> {
        ensure!(
            predicted.same_size(truth),
            Validation,
            "prediction {}x{} vs ground truth {}x{}",
            predicted.height(),
            predicted.width(),
            truth.height(),
            truth.width()
        );
        let k = self.num_classes();
        for (what, img) in [("prediction", predicted), ("ground truth", truth)] {
            if let Some(&bad) = img.data().iter().find(|&&c| c as usize >= k) {
                return Err(Error::Validation(format!(
                    "{what} contains class {bad}, outside the {k}-class palette"
                )));
            }
        }
        for (&p, &t) in predicted.data().iter().zip(truth.data()) {
            if p == t {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
        self.total += predicted.pixel_count() as u64;
        self.samples += 1;
        Ok(())
    }

    /// Merges partial counts (accumulation is associative and commutative).
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        ensure!(
            self.num_classes() == other.num_classes(),
            Validation,
            "cannot merge counts over {} and {} classes",
            self.num_classes(),
            other.num_classes()
        );
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.total += other.total;
        self.samples += other.samples;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: u8,
    pub name: String,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_iou: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub samples: u64,
    /// `class:metric` pairs left undefined by a zero denominator.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Turns counts into rates; class names come from `palette` when given.
pub fn report(counts: &ConfusionCounts, palette: Option<&ClassPalette>) -> MetricsReport {
    let mut undefined = Vec::new();
    let classes: Vec<ClassMetrics> = (0..counts.num_classes())
        .map(|c| {
            let (tp, fp, fn_) = (counts.tp[c], counts.fp[c], counts.fn_[c]);
            let name = palette
                .and_then(|p| p.name(c as u8))
                .map_or_else(|| format!("class_{c}"), str::to_string);
            let m = ClassMetrics {
                id: c as u8,
                iou: ratio(tp, tp + fp + fn_),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                name,
                tp,
                fp,
                fn_,
                tn: counts.tn(c),
            };
            if c > 0 {
                for (metric, v) in [("iou", m.iou), ("precision", m.precision), ("recall", m.recall)] {
                    if v.is_none() {
                        undefined.push(format!("{}:{metric}", m.name));
                    }
                }
            }
            m
        })
        .collect();
    let fg = || classes.iter().filter(|m| m.id > 0);
    MetricsReport {
        mean_iou: mean(fg().map(|m| m.iou)),
        mean_precision: mean(fg().map(|m| m.precision)),
        mean_recall: mean(fg().map(|m| m.recall)),
        pixel_accuracy: ratio(counts.tp.iter().sum(), counts.total),
        samples: counts.samples,
        classes,
        undefined,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// `class,iou,precision,recall`: one row per non-background class, then `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,precision,recall\n");
        for m in self.classes.iter().filter(|m| m.id > 0) {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.name,
                fmt_opt(m.iou),
                fmt_opt(m.precision),
                fmt_opt(m.recall)
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{},{}",
            fmt_opt(self.mean_iou),
            fmt_opt(self.mean_precision),
            fmt_opt(self.mean_recall)
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }

    pub fn class(&self, id: u8) -> Option<&ClassMetrics> {
        self.classes.get(id as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(h: usize, w: usize, d: &[u8]) -> LabelImage {
        LabelImage::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let t = lbl(2, 3, &[0, 1, 2, 2, 1, 0]);
        let mut c = ConfusionCounts::new(3);
        c.accumulate(&t, &t).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&v| v == 0));
        let r = report(&c, None);
        for m in &r.classes {
            assert_eq!((m.iou, m.precision, m.recall), (Some(1.0), Some(1.0), Some(1.0)));
        }
        assert_eq!(r.mean_iou, Some(1.0));
        assert_eq!(r.pixel_accuracy, Some(1.0));
    }

    #[test]
    fn four_by_four_brute_force_example() {
        // class 1: predicted at 2 px, true at 3 px, overlap 1
        let mut p = vec![0u8; 16];
        let mut t = vec![0u8; 16];
        p[0] = 1;
        p[5] = 1;
        t[0] = 1;
        t[1] = 1;
        t[2] = 1;
        let mut c = ConfusionCounts::new(2);
        c.accumulate(&lbl(4, 4, &p), &lbl(4, 4, &t)).unwrap();
        assert_eq!((c.tp[1], c.fp[1], c.fn_[1], c.tn(1)), (1, 1, 2, 12));
        let r = report(&c, None);
        let m = r.class(1).unwrap();
        assert_eq!(m.iou, Some(0.25));
        assert_eq!(m.precision, Some(0.5));
        assert!((m.recall.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_has_zero_iou() {
        let mut c = ConfusionCounts::new(2);
        c.accumulate(&lbl(1, 4, &[1, 1, 0, 0]), &lbl(1, 4, &[0, 0, 1, 1])).unwrap();
        assert_eq!(report(&c, None).class(1).unwrap().iou, Some(0.0));
    }

    #[test]
    fn absent_class_is_flagged_and_excluded() {
        let p = ClassPalette::default();
        let t = lbl(1, 3, &[0, 1, 1]);
        let mut c = ConfusionCounts::for_palette(&p);
        c.accumulate(&t, &t).unwrap();
        let r = report(&c, Some(&p));
        assert_eq!(r.mean_iou, Some(1.0));
        assert!(r.undefined.contains(&"guiding_lane:iou".to_string()));
        assert!(r.to_csv().contains("guiding_lane,NA,NA,NA"));
        assert_eq!(r.to_csv().lines().count(), 1 + 6 + 1);
    }

    #[test]
    fn order_independent() {
        let a = (lbl(1, 4, &[0, 1, 2, 1]), lbl(1, 4, &[0, 1, 1, 2]));
        let b = (lbl(1, 4, &[2, 2, 0, 1]), lbl(1, 4, &[2, 0, 0, 1]));
        let mut x = ConfusionCounts::new(3);
        x.accumulate(&a.0, &a.1).unwrap();
        x.accumulate(&b.0, &b.1).unwrap();
        let mut y = ConfusionCounts::new(3);
        y.accumulate(&b.0, &b.1).unwrap();
        y.accumulate(&a.0, &a.1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn mismatches_are_rejected() {
        let mut c = ConfusionCounts::new(2);
        assert!(c.accumulate(&lbl(1, 2, &[0, 0]), &lbl(2, 1, &[0, 0])).is_err());
        assert!(c.accumulate(&lbl(1, 2, &[0, 3]), &lbl(1, 2, &[0, 0])).is_err());
        assert!(c.merge(&ConfusionCounts::new(3)).is_err());
    }
}
