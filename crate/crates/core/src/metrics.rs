//! Confusion-matrix accumulation and the six evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::{ClassSchema, LabelMask, IGNORE_INDEX};
use crate::error::{Error, Result};

/// `counts[g * n + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Input(format!(
                "{} counts do not form a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(Self {
            n: num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; pixels with ignored ground
    /// truth are skipped. The matrix is untouched on error.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let pairs: Vec<(usize, usize)> = gt
            .classes()
            .iter()
            .zip(pred.classes().iter())
            .filter(|(&g, _)| g != IGNORE_INDEX)
            .map(|(&g, &p)| (g as usize, p as usize))
            .collect();
        if let Some(&(g, p)) = pairs.iter().find(|(g, p)| *g >= self.n || *p >= self.n) {
            let value = if g >= self.n { g } else { p };
            return Err(Error::IllegalClass {
                value: value as u8,
                context: format!("evaluation with {} classes", self.n),
            });
        }
        for (g, p) in pairs {
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n, other.n
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Conventional overall accuracy, trace / total.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.nonempty_total()?;
        let trace: u64 = (0..self.n).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    fn nonempty_total(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("confusion matrix is empty".into())),
            t => Ok(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub index: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Ratios whose denominator was zero; they are reported as 0.
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "mPre")]
    pub m_pre: f64,
    #[serde(rename = "mRecall")]
    pub m_recall: f64,
    #[serde(rename = "mF1")]
    pub m_f1: f64,
    #[serde(rename = "mIoU")]
    pub m_iou: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "Kappa")]
    pub kappa: f64,
    pub pixel_accuracy: f64,
    pub total_pixels: u64,
    #[serde(rename = "class")]
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metric report serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("bad metric report: {e}")))
    }
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.nonempty_total()?;
    let n = cm.n;
    let schema = ClassSchema::default();
    let row = |i: usize| (0..n).map(|p| cm.get(i, p)).sum::<u64>();
    let col = |i: usize| (0..n).map(|g| cm.get(g, i)).sum::<u64>();

    let mut per_class = Vec::with_capacity(n);
    let mut oa = 0.0;
    for i in 0..n {
        let tp = cm.get(i, i);
        let fp = col(i) - tp;
        let fn_ = row(i) - tp;
        let tn = total - tp - fp - fn_;
        let mut undefined = Vec::new();
        let precision = ratio(tp, tp + fp, "precision", &mut undefined);
        let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_, "f1", &mut undefined);
        let iou = ratio(tp, tp + fp + fn_, "iou", &mut undefined);
        oa += (tp + tn) as f64 / total as f64;
        per_class.push(ClassMetrics {
            index: i,
            name: schema.names.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string()),
            precision,
            recall,
            f1,
            iou,
            undefined,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;

    let t = total as f64;
    let p_o = (0..n).map(|i| cm.get(i, i)).sum::<u64>() as f64 / t;
    let p_e = (0..n).map(|i| row(i) as f64 * col(i) as f64).sum::<f64>() / (t * t);
    // All mass in one row and one column: agreement is perfect or zero.
    let kappa = if p_e >= 1.0 {
        if p_o >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    Ok(MetricReport {
        m_pre: mean(|c| c.precision),
        m_recall: mean(|c| c.recall),
        m_f1: mean(|c| c.f1),
        m_iou: mean(|c| c.iou),
        oa: oa / n as f64,
        kappa,
        pixel_accuracy: p_o,
        total_pixels: total,
        per_class,
    })
}
