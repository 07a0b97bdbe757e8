//! Pixel confusion counts and the derived change-detection scores.

use std::fmt;
use std::ops::AddAssign;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per-pixel counts of a predicted mask against ground truth, both in {0, 1}.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::Input(format!("mask values ({p}, {g}) are not binary"))),
        }
    }
    Ok(c)
}

/// Scores in `[0, 1]`. A ratio whose denominator is zero is reported as 0 and
/// sets `degenerate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub degenerate: bool,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let oa = ratio(c.tp + c.tn, c.total());
    // Zero when both are zero; that case is a genuine score of 0, not 0/0 in
    // the counts.
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        precision,
        recall,
        f1,
        iou,
        oa,
        degenerate,
    }
}

impl fmt::Display for Metrics {
    /// Percentages with two decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Pre {:.2}  Rec {:.2}  F1 {:.2}  IoU {:.2}  OA {:.2}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            100.0 * self.iou,
            100.0 * self.oa
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_counts() {
        let c = confusion(&[1, 1, 0, 1], &[1, 0, 0, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 2, tn: 1, fn_: 0 });
        let ones = confusion(&[1; 9], &[1; 9]).unwrap();
        assert_eq!(ones, ConfusionCounts { tp: 9, ..Default::default() });
    }

    #[test]
    fn worked_metrics() {
        let m = metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 6 });
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!((m.iou, m.oa, m.degenerate), (0.5, 0.8, false));
        let perfect = metrics(&ConfusionCounts { tp: 5, tn: 3, ..Default::default() });
        assert_eq!(
            [perfect.precision, perfect.recall, perfect.f1, perfect.iou, perfect.oa],
            [1.0; 5]
        );
    }

    #[test]
    fn degenerate_denominators_are_flagged() {
        let m = metrics(&ConfusionCounts { tn: 10, ..Default::default() });
        assert!(m.degenerate);
        assert_eq!((m.precision, m.recall, m.f1, m.iou, m.oa), (0.0, 0.0, 0.0, 0.0, 1.0));
        let empty = metrics(&ConfusionCounts::default());
        assert!(empty.degenerate && empty.oa == 0.0);
    }

    #[test]
    fn confusion_rejects_bad_masks() {
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[2], &[0]).is_err());
    }

    #[test]
    fn display_uses_two_decimal_percentages() {
        let m = metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 6 });
        assert_eq!(m.to_string(), "Pre 66.67  Rec 66.67  F1 66.67  IoU 50.00  OA 80.00");
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_consistent(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let m = metrics(&c);
            for v in [m.precision, m.recall, m.f1, m.iou, m.oa] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.iou <= m.f1 + 1e-15);
            if m.f1 > 0.0 {
                prop_assert!((m.iou - m.f1 / (2.0 - m.f1)).abs() < 1e-12);
            }
        }

        #[test]
        fn counts_partition_the_pixels(pairs in prop::collection::vec((0u8..2, 0u8..2), 0..300)) {
            let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let c = confusion(&p, &g).unwrap();
            prop_assert_eq!(c.total(), p.len() as u64);
        }
    }
}
