//! Classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::config::Average;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1-IS", skip_serializing_if = "Option::is_none", default)]
    pub f1_is: Option<f64>,
    #[serde(rename = "F1-OS", skip_serializing_if = "Option::is_none", default)]
    pub f1_os: Option<f64>,
    pub average: Average,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("predictions", truth.len(), predicted.len()));
    }
    let mut c = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::LabelMismatch(format!("class index outside {classes} classes")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

impl MetricsReport {
    /// Averages run over the classes that occur in the truth or the
    /// predictions. With `oos` set, F1-IS averages the other classes and
    /// F1-OS is the F1 of that class.
    pub fn from_confusion(
        confusion: Vec<Vec<usize>>,
        labels: &[String],
        average: Average,
        oos: Option<usize>,
    ) -> Result<Self> {
        let k = confusion.len();
        if labels.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", labels.len(), k));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("metrics over an empty split"));
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|i| {
                let support: usize = confusion[i].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[i]).sum();
                let p = ratio(confusion[i][i], predicted);
                let r = ratio(confusion[i][i], support);
                ClassMetrics {
                    label: labels[i].clone(),
                    precision: p,
                    recall: r,
                    f1: f1(p, r),
                    support,
                }
            })
            .collect();
        let present: Vec<usize> = (0..k)
            .filter(|&i| per_class[i].support > 0 || confusion.iter().any(|r| r[i] > 0))
            .collect();
        let avg = |classes: &[usize], field: fn(&ClassMetrics) -> f64| -> f64 {
            match average {
                Average::Macro => {
                    if classes.is_empty() {
                        0.0
                    } else {
                        classes.iter().map(|&i| field(&per_class[i])).sum::<f64>() / classes.len() as f64
                    }
                }
                Average::Weighted => {
                    let w: usize = classes.iter().map(|&i| per_class[i].support).sum();
                    if w == 0 {
                        0.0
                    } else {
                        classes
                            .iter()
                            .map(|&i| field(&per_class[i]) * per_class[i].support as f64)
                            .sum::<f64>()
                            / w as f64
                    }
                }
            }
        };
        let (f1_is, f1_os) = match oos {
            Some(o) if o < k => {
                let inscope: Vec<usize> = present.iter().copied().filter(|&i| i != o).collect();
                (Some(avg(&inscope, |c| c.f1)), Some(per_class[o].f1))
            }
            Some(o) => return Err(Error::LabelMismatch(format!("OOS index {o} outside {k} classes"))),
            None => (None, None),
        };
        Ok(Self {
            acc: ratio(correct, total),
            f1: avg(&present, |c| c.f1),
            precision: avg(&present, |c| c.precision),
            recall: avg(&present, |c| c.recall),
            f1_is,
            f1_os,
            average,
            per_class,
            confusion,
        })
    }

    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        labels: &[String],
        average: Average,
        oos: Option<usize>,
    ) -> Result<Self> {
        let c = confusion_matrix(truth, predicted, labels.len())?;
        Self::from_confusion(c, labels, average, oos)
    }
}
