//! Temporal IoU, all-point average precision and mAP over IoU grids.

use std::cmp::Ordering;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::data::Segment;
use crate::error::{Error, Result};
use crate::localizer::Detection;

/// `|a ∩ b| / |a ∪ b|` on inclusive integer intervals.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let len = |s: usize, e: usize| (e + 1).saturating_sub(s) as f64;
    let inter = len(a.0.max(b.0), a.1.min(b.1));
    let union = len(a.0, a.1) + len(b.0, b.1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Confidence descending, then earlier start, then lower video id.
fn ranking(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.start.cmp(&b.start))
        .then_with(|| a.video.cmp(&b.video))
        .then(a.end.cmp(&b.end))
}

/// Ground-truth instance with its video.
pub type GroundTruth = (String, Segment);

/// All-point AP of single-class detections against that class's ground
/// truth. Returns 0 when there is no ground truth.
///
/// The precision sum is accumulated as an exact rational and rounded once.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| ranking(a, b));
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut sum = BigRational::zero();
    for (rank, d) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, (video, seg)) in gts.iter().enumerate() {
            if matched[g] || *video != d.video {
                continue;
            }
            let o = iou((d.start, d.end), (seg.start, seg.end));
            if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
            sum += BigRational::new(BigInt::from(tp), BigInt::from(rank + 1));
        }
    }
    (sum / BigInt::from(gts.len())).to_f64().unwrap_or(0.0)
}

/// Per-threshold, per-class AP with the derived means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub num_classes: usize,
    /// `ap[t][j]`; `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean AP per threshold over classes with ground truth.
    pub map: Vec<f64>,
    /// Mean of `map` over the grid.
    pub average: f64,
}

pub const REPORT_BLOCK_BEGIN: &str = "# BEGIN AP";
pub const REPORT_BLOCK_END: &str = "# END AP";

/// AP for every class and threshold.
pub fn map_over_thresholds(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    grid: &[f64],
) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(Error::invalid("empty IoU grid"));
    }
    if let Some(d) = dets.iter().find(|d| d.class >= num_classes) {
        return Err(Error::invalid(format!(
            "detection class {} exceeds the {num_classes} classes of the ground truth",
            d.class + 1
        )));
    }
    if let Some((v, g)) = gts.iter().find(|(_, g)| g.class >= num_classes) {
        return Err(Error::invalid(format!("ground truth of {v} has class {}", g.class + 1)));
    }
    let per_class_dets: Vec<Vec<Detection>> = (0..num_classes)
        .map(|j| dets.iter().filter(|d| d.class == j).cloned().collect())
        .collect();
    let per_class_gts: Vec<Vec<GroundTruth>> = (0..num_classes)
        .map(|j| gts.iter().filter(|(_, g)| g.class == j).cloned().collect())
        .collect();
    let present: Vec<usize> = (0..num_classes).filter(|&j| !per_class_gts[j].is_empty()).collect();
    if present.is_empty() {
        return Err(Error::invalid("no ground-truth segments to evaluate against"));
    }

    let mut ap = Vec::with_capacity(grid.len());
    let mut map = Vec::with_capacity(grid.len());
    for &thr in grid {
        let row: Vec<Option<f64>> = (0..num_classes)
            .map(|j| {
                (!per_class_gts[j].is_empty())
                    .then(|| average_precision(&per_class_dets[j], &per_class_gts[j], thr))
            })
            .collect();
        map.push(present.iter().map(|&j| row[j].unwrap_or(0.0)).sum::<f64>() / present.len() as f64);
        ap.push(row);
    }
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: grid.to_vec(),
        num_classes,
        ap,
        map,
        average,
    })
}

impl EvalReport {
    /// mAP at the grid entry closest to `threshold`.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    /// Aligned table followed by a tab-delimited `threshold class ap` block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>6}  {:>7}", "IoU", "mAP");
        for j in 0..self.num_classes {
            let _ = write!(s, "  {:>7}", format!("c{}", j + 1));
        }
        s.push('\n');
        for (t, thr) in self.thresholds.iter().enumerate() {
            let _ = write!(s, "{thr:>6.2}  {:>7.4}", self.map[t]);
            for v in &self.ap[t] {
                match v {
                    Some(v) => {
                        let _ = write!(s, "  {v:>7.4}");
                    }
                    None => {
                        let _ = write!(s, "  {:>7}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "average mAP {:.4}", self.average);
        let _ = writeln!(s, "{REPORT_BLOCK_BEGIN}");
        let _ = writeln!(s, "threshold\tclass\tap");
        for (t, thr) in self.thresholds.iter().enumerate() {
            for (j, v) in self.ap[t].iter().enumerate() {
                if let Some(v) = v {
                    let _ = writeln!(s, "{thr}\t{}\t{v:.6}", j + 1);
                }
            }
            let _ = writeln!(s, "{thr}\tmAP\t{:.6}", self.map[t]);
        }
        let _ = writeln!(s, "average\tmAP\t{:.6}", self.average);
        let _ = writeln!(s, "{REPORT_BLOCK_END}");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(video: &str, start: usize, end: usize, confidence: f64) -> Detection {
        Detection {
            video: video.into(),
            class: 0,
            start,
            end,
            confidence,
        }
    }

    fn gt(video: &str, start: usize, end: usize) -> GroundTruth {
        (video.into(), Segment { class: 0, start, end })
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou((3, 7), (3, 7)), 1.0);
        assert_eq!(iou((0, 2), (5, 9)), 0.0);
        assert_eq!(iou((1, 2), (2, 3)), 1.0 / 3.0);
        assert_eq!(iou((2, 2), (2, 2)), 1.0);
    }

    #[test]
    fn ap_examples() {
        let g = vec![gt("a", 0, 4)];
        assert_eq!(average_precision(&[det("a", 0, 4, 0.5)], &g, 0.5), 1.0);
        assert_eq!(average_precision(&[det("a", 10, 14, 0.5)], &g, 0.5), 0.0);
        assert_eq!(average_precision(&[det("b", 0, 4, 0.5)], &g, 0.5), 0.0);
        assert_eq!(average_precision(&[det("a", 0, 4, 0.5)], &[], 0.5), 0.0);
        let g = vec![gt("a", 0, 4), gt("a", 10, 14)];
        let d = vec![det("a", 0, 4, 0.9), det("a", 20, 24, 0.8), det("a", 10, 14, 0.7)];
        assert_eq!(average_precision(&d, &g, 0.5), 5.0 / 6.0);
    }

    #[test]
    fn one_gt_matches_at_most_once() {
        let g = vec![gt("a", 0, 4)];
        let d = vec![det("a", 0, 4, 0.9), det("a", 0, 4, 0.8)];
        assert_eq!(average_precision(&d, &g, 0.5), 1.0);
        let d = vec![det("a", 0, 4, 0.7), det("a", 0, 4, 0.8), det("a", 30, 34, 0.9)];
        assert_eq!(average_precision(&d, &g, 0.5), 0.5);
    }

    #[test]
    fn grid_reports() {
        let grid = crate::config::parse_grid("0.1:0.1:0.9").unwrap();
        let gts = vec![gt("a", 0, 4), ("b".into(), Segment { class: 2, start: 3, end: 6 })];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|(v, s)| Detection {
                video: v.clone(),
                class: s.class,
                start: s.start,
                end: s.end,
                confidence: 1.0,
            })
            .collect();
        let r = map_over_thresholds(&perfect, &gts, 3, &grid).unwrap();
        assert!(r.map.iter().all(|&m| m == 1.0));
        assert_eq!(r.average, 1.0);
        assert_eq!(r.ap[0][1], None);
        let r = map_over_thresholds(&[], &gts, 3, &grid).unwrap();
        assert!(r.map.iter().all(|&m| m == 0.0));
        assert!(map_over_thresholds(&perfect, &gts, 2, &grid).is_err());
        assert!(map_over_thresholds(&perfect, &[], 3, &grid).is_err());
        let text = r.to_text();
        assert!(text.contains(REPORT_BLOCK_BEGIN) && text.contains("0.5\t1\t0.000000"));
        assert_eq!(r.map_at(0.5), Some(0.0));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
        let seg = (0usize..8, 0usize..4);
        let d = prop::collection::vec((prop::bool::ANY, seg.clone(), 0u8..4), 0..6).prop_map(|v| {
            v.into_iter()
                .map(|(b, (s, len), c)| det(if b { "a" } else { "b" }, s, s + len, c as f64 / 4.0))
                .collect::<Vec<_>>()
        });
        let g = prop::collection::vec((prop::bool::ANY, seg), 1..4).prop_map(|v| {
            v.into_iter()
                .map(|(b, (s, len))| gt(if b { "a" } else { "b" }, s, s + len))
                .collect::<Vec<_>>()
        });
        (d, g)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn monotone_confidence_transform((d, g) in arb_case(), thr in 0.05f64..1.0) {
            let squashed: Vec<Detection> = d
                .iter()
                .map(|x| Detection { confidence: (3.0 * x.confidence).exp() + 1.0, ..x.clone() })
                .collect();
            prop_assert_eq!(average_precision(&d, &g, thr), average_precision(&squashed, &g, thr));
        }

        #[test]
        fn ap_nonincreasing_in_threshold((d, g) in arb_case(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(average_precision(&d, &g, hi) <= average_precision(&d, &g, lo) + 1e-12);
        }

        #[test]
        fn ap_in_unit_interval((d, g) in arb_case(), thr in 0.05f64..1.0) {
            let ap = average_precision(&d, &g, thr);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
