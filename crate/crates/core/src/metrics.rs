//! Overall accuracy and mean intersection-over-union from a confusion matrix.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::raster::LabelMap;

/// `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::dims(
                "evaluate",
                &[truth.height(), truth.width()],
                &[pred.height(), pred.width()],
            ));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.n_classes || t >= self.n_classes {
                return Err(Error::contract(format!(
                    "label {} outside {} classes",
                    p.max(t),
                    self.n_classes
                )));
            }
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn report(&self) -> MetricsReport {
        let k = self.n_classes;
        let total = self.total();
        let correct: u64 = (0..k).map(|c| self.counts[c][c]).sum();
        let ratios: Vec<Option<BigRational>> = (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let truth: u64 = self.counts[c].iter().sum();
                let pred: u64 = self.counts.iter().map(|row| row[c]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| BigRational::new(BigInt::from(tp), BigInt::from(union)))
            })
            .collect();
        let per_class_iou = ratios
            .iter()
            .map(|r| r.as_ref().map(|r| r.to_f64().expect("ratio in [0, 1]")))
            .collect();
        // exact mean, rounded once
        let present: Vec<&BigRational> = ratios.iter().flatten().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            let sum = present.iter().fold(BigRational::zero(), |acc, r| acc + *r);
            (sum / BigInt::from(present.len())).to_f64().expect("ratio in [0, 1]")
        };
        MetricsReport {
            oa: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class_iou,
            miou,
            confusion: self.counts.clone(),
        }
    }
}

/// `per_class_iou[c]` is `None` for a class absent from both prediction and
/// truth; such classes are left out of `miou`. Every ratio is the nearest
/// `f64` to the exact value.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn csv_header(n_classes: usize) -> String {
        let mut s = String::from("split,oa,miou");
        for c in 0..n_classes {
            let _ = write!(s, ",iou_{c}");
        }
        s
    }

    pub fn csv_row(&self, split: &str) -> String {
        let mut s = format!("{split},{:.6},{:.6}", self.oa, self.miou);
        for iou in &self.per_class_iou {
            match iou {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        s
    }
}

/// Metrics over paired prediction and truth maps.
pub fn evaluate_maps<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    n_classes: usize,
) -> Result<MetricsReport> {
    let mut confusion = Confusion::new(n_classes);
    let mut any = false;
    for (pred, truth) in pairs {
        confusion.add(pred, truth)?;
        any = true;
    }
    if !any {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    Ok(confusion.report())
}
