//! Confusion-matrix accumulation and per-class segmentation scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K x K` counts, rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.num_classes)
    }

    /// Count every pixel whose label is not `ignore_index`.
    pub fn update(&mut self, pred: &Tensor<u8>, label: &Tensor<u8>, ignore_index: u8) -> Result<()> {
        if pred.shape() != label.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} and label {:?} shapes differ",
                pred.shape(),
                label.shape()
            )));
        }
        let k = self.num_classes;
        // validate first so a bad map leaves the matrix untouched
        for (&p, &t) in pred.data().iter().zip(label.data()) {
            if t == ignore_index {
                continue;
            }
            if p as usize >= k {
                return Err(Error::Label(format!("predicted class {p} outside [0, {k})")));
            }
            if t as usize >= k {
                return Err(Error::Label(format!("label {t} outside [0, {k}) and not ignored")));
            }
        }
        for (&p, &t) in pred.data().iter().zip(label.data()) {
            if t != ignore_index {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Usage(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// The class appears in neither truth nor prediction; all scores are 0.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassScore {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScore {
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_),
            undefined: tp + fp + fn_ == 0,
        }
    }
}

pub fn per_class_stats(cm: &ConfusionMatrix) -> Vec<ClassScore> {
    let k = cm.num_classes();
    (0..k)
        .map(|i| {
            let tp = cm.get(i, i);
            let row: u64 = (0..k).map(|j| cm.get(i, j)).sum();
            let col: u64 = (0..k).map(|j| cm.get(j, i)).sum();
            ClassScore::from_counts(tp, col - tp, row - tp)
        })
        .collect()
}

/// Unweighted `(mF1, mIoU)` over the classes in `subset`.
pub fn mean_scores(scores: &[ClassScore], subset: &[usize]) -> Result<(f64, f64)> {
    if subset.is_empty() {
        return Err(Error::Usage("mean over an empty class subset".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::Usage(format!("class {bad} outside [0, {})", scores.len())));
    }
    let n = subset.len() as f64;
    let f1 = subset.iter().map(|&i| scores[i].f1).sum::<f64>() / n;
    let iou = subset.iter().map(|&i| scores[i].iou).sum::<f64>() / n;
    Ok((f1, iou))
}

/// Which classes enter the means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricScope {
    /// Every class except the last, which holds clutter/background.
    #[default]
    Foreground,
    AllClasses,
}

impl MetricScope {
    pub fn classes(self, num_classes: usize) -> Vec<usize> {
        match self {
            MetricScope::Foreground => (0..num_classes.saturating_sub(1)).collect(),
            MetricScope::AllClasses => (0..num_classes).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub scores: Vec<ClassScore>,
    pub scope: MetricScope,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub pixels: u64,
}

impl Report {
    pub fn new(cm: &ConfusionMatrix, scope: MetricScope) -> Result<Self> {
        let scores = per_class_stats(cm);
        let (mean_f1, mean_iou) = mean_scores(&scores, &scope.classes(cm.num_classes()))?;
        Ok(Report {
            scores,
            scope,
            mean_f1,
            mean_iou,
            pixels: cm.total(),
        })
    }

    /// Aligned text table: one `F1/IoU` column per class (percent), then the
    /// means. Classes absent from truth and prediction are marked `*`.
    pub fn table(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let cells: Vec<String> = self
            .scores
            .iter()
            .map(|s| {
                let mark = if s.undefined { "*" } else { "" };
                format!("{:.2}/{:.2}{mark}", 100.0 * s.f1, 100.0 * s.iou)
            })
            .collect();
        let widths: Vec<usize> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.len().max(name(i).len()))
            .collect();
        let mut head = String::new();
        let mut row = String::new();
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(head, "{:>w$}  ", name(i), w = widths[i]);
            let _ = write!(row, "{:>w$}  ", c, w = widths[i]);
        }
        let _ = write!(head, "{:>6}  {:>6}", "mF1", "mIoU");
        let _ = write!(row, "{:>6.2}  {:>6.2}", 100.0 * self.mean_f1, 100.0 * self.mean_iou);
        let mut out = format!("{head}\n{row}\n");
        if self.scores.iter().any(|s| s.undefined) {
            out.push_str("* class absent from both truth and prediction\n");
        }
        out
    }

    /// `key=value` lines, one per score.
    pub fn key_values(&self) -> String {
        let scope = match self.scope {
            MetricScope::Foreground => "foreground",
            MetricScope::AllClasses => "all-classes",
        };
        let mut out = format!("pixels={}\nscope={scope}\n", self.pixels);
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(
                out,
                "class{i}.precision={:.6}\nclass{i}.recall={:.6}\nclass{i}.f1={:.6}\nclass{i}.iou={:.6}\nclass{i}.undefined={}",
                s.precision, s.recall, s.f1, s.iou, s.undefined
            );
        }
        let _ = writeln!(out, "mf1={:.6}\nmiou={:.6}", self.mean_f1, self.mean_iou);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(shape: &[usize], v: Vec<u8>) -> Tensor<u8> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn perfect_and_ignored_pixels() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&map(&[2, 2], vec![0; 4]), &map(&[2, 2], vec![0; 4]), 255).unwrap();
        assert_eq!(cm.rows().collect::<Vec<_>>(), vec![&[4, 0][..], &[0, 0][..]]);
        let before = cm.clone();
        cm.update(&map(&[2, 2], vec![1; 4]), &map(&[2, 2], vec![255; 4]), 255).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn out_of_range_prediction_is_label_error() {
        let mut cm = ConfusionMatrix::new(3);
        let r = cm.update(&map(&[1, 2], vec![0, 3]), &map(&[1, 2], vec![0, 1]), 255);
        assert!(matches!(r, Err(Error::Label(_))));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn hand_computed_class_scores() {
        let s = ClassScore::from_counts(5, 3, 2);
        assert_eq!(s.precision, 0.625);
        assert!((s.recall - 5.0 / 7.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.iou, 0.5);
        assert!(!s.undefined);
        let absent = ClassScore::from_counts(0, 0, 0);
        assert!(absent.undefined && absent.f1 == 0.0 && absent.iou == 0.0);
    }

    #[test]
    fn brute_force_oracle_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = 5;
        for _ in 0..200 {
            let pred: Vec<u8> = (0..256).map(|_| rng.random_range(0..k as u8)).collect();
            let label: Vec<u8> = (0..256)
                .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k as u8) })
                .collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.update(&map(&[16, 16], pred.clone()), &map(&[16, 16], label.clone()), 255).unwrap();
            for t in 0..k {
                for p in 0..k {
                    let brute = pred
                        .iter()
                        .zip(&label)
                        .filter(|&(&pp, &ll)| ll as usize == t && pp as usize == p)
                        .count() as u64;
                    assert_eq!(cm.get(t, p), brute);
                }
            }
            for s in per_class_stats(&cm) {
                assert!((s.iou - s.f1 / (2.0 - s.f1)).abs() < 1e-12);
                for v in [s.precision, s.recall, s.f1, s.iou] {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn tile_accumulation_equals_whole_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let label: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let mut whole = ConfusionMatrix::new(3);
        whole.update(&map(&[8, 8], pred.clone()), &map(&[8, 8], label.clone()), 255).unwrap();
        let mut tiled = ConfusionMatrix::new(3);
        for half in [0..32, 32..64] {
            let mut part = ConfusionMatrix::new(3);
            part.update(&map(&[4, 8], pred[half.clone()].to_vec()), &map(&[4, 8], label[half].to_vec()), 255)
                .unwrap();
            tiled.merge(&part).unwrap();
        }
        assert_eq!(whole, tiled);
    }

    fn with_f1(values: &[f64]) -> Vec<ClassScore> {
        values
            .iter()
            .map(|&f1| ClassScore { precision: 0.0, recall: 0.0, f1, iou: f1 / (2.0 - f1), undefined: false })
            .collect()
    }

    #[test]
    fn published_class_means() {
        let ppmamba = with_f1(&[91.86, 95.94, 79.04, 90.23, 84.61]);
        let (mf1, _) = mean_scores(&ppmamba, &[0, 1, 2, 3, 4]).unwrap();
        assert!((mf1 - 88.34).abs() <= 0.01, "{mf1}");
        let abcnet = with_f1(&[89.68, 93.72, 77.93, 89.81, 73.46]);
        let (mf1, _) = mean_scores(&abcnet, &[0, 1, 2, 3, 4]).unwrap();
        assert!((mf1 - 84.92).abs() <= 0.01, "{mf1}");
        assert!(matches!(mean_scores(&abcnet, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn report_formats() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&map(&[1, 4], vec![0, 0, 1, 1]), &map(&[1, 4], vec![0, 0, 1, 1]), 255).unwrap();
        let r = Report::new(&cm, MetricScope::Foreground).unwrap();
        assert_eq!((r.mean_f1, r.mean_iou), (1.0, 1.0));
        let table = r.table(&[]);
        assert!(table.contains("100.00/100.00") && table.contains("0.00/0.00*") && table.contains("mIoU"));
        let kv = r.key_values();
        assert!(kv.contains("class2.undefined=true") && kv.contains("mf1=1.000000"));
        let all = Report::new(&cm, MetricScope::AllClasses).unwrap();
        assert!((all.mean_f1 - 2.0 / 3.0).abs() < 1e-15);
    }
}
