//! TAP-Vid and BADJA style accuracy metrics.
//!
//! Position errors for the TAP-Vid metrics are measured after rescaling both
//! prediction and ground truth to a 256x256 frame. Thresholds are strict: an
//! error exactly equal to a threshold is a miss. When a ratio has an empty
//! denominator (nothing to get right or wrong) it is reported as 1.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{GroundTruth, GtPoint};
use crate::tracker::Trajectory;
use crate::types::Point2;

pub const THRESHOLDS_PX: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const EVAL_RESOLUTION: f64 = 256.0;
/// BADJA segment threshold is this factor times the square root of the mask area.
pub const SEG_AREA_FACTOR: f64 = 0.2;
pub const BADJA_PIXEL_THRESHOLD: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground truth are misaligned: {0}")]
    Misaligned(String),
    #[error("no (query, frame) pairs to evaluate")]
    Empty,
    #[error("missing mask area for query {query}, frame {frame}")]
    MissingArea { query: usize, frame: usize },
}

/// One aligned prediction/ground-truth pair in native image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPair {
    pub query: usize,
    pub frame: usize,
    pub pred: Point2,
    pub pred_visible: bool,
    pub gt: Point2,
    pub gt_visible: bool,
}

/// Native image size used to rescale errors to the evaluation resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    pub width: f64,
    pub height: f64,
}

impl Resolution {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
        }
    }

    fn eval_error(&self, pred: Point2, gt: Point2) -> f64 {
        let d = pred - gt;
        Point2::new(
            d.x * EVAL_RESOLUTION / self.width,
            d.y * EVAL_RESOLUTION / self.height,
        )
        .norm()
    }
}

/// Pairs every predicted frame with its ground truth. Both sides must cover
/// the same queries (by id) and the same number of frames per query.
pub fn align(pred: &[Trajectory], gt: &GroundTruth) -> Result<Vec<EvalPair>, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Misaligned(format!(
            "{} predicted queries vs {} ground-truth queries",
            pred.len(),
            gt.len()
        )));
    }
    let mut pairs = Vec::new();
    for traj in pred {
        let track = gt.get(traj.query_id).ok_or_else(|| {
            MetricsError::Misaligned(format!("query {} has no ground truth", traj.query_id))
        })?;
        if track.len() != traj.states.len() {
            return Err(MetricsError::Misaligned(format!(
                "query {}: {} predicted frames vs {} ground-truth frames",
                traj.query_id,
                traj.states.len(),
                track.len()
            )));
        }
        for (frame, (s, g)) in traj.states.iter().zip(track).enumerate() {
            pairs.push(EvalPair {
                query: traj.query_id,
                frame,
                pred: s.estimate.mean,
                pred_visible: s.visible,
                gt: g.position,
                gt_visible: g.visible,
            });
        }
    }
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut seen: Vec<usize> = pred.iter().map(|t| t.query_id).collect();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(MetricsError::Misaligned("duplicate query ids".into()));
    }
    Ok(pairs)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64; 5]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdCurve {
    pub per_threshold: [f64; 5],
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JaccardCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JaccardCurve {
    pub per_threshold: [f64; 5],
    pub mean: f64,
    pub counts: [JaccardCounts; 5],
}

/// Fraction of ground-truth-visible pairs predicted visible within each
/// threshold, plus the mean over thresholds.
pub fn delta_avg(pairs: &[EvalPair], res: Resolution) -> ThresholdCurve {
    let mut hits = [0usize; 5];
    let mut visible = 0usize;
    for p in pairs.iter().filter(|p| p.gt_visible) {
        visible += 1;
        if !p.pred_visible {
            continue;
        }
        let err = res.eval_error(p.pred, p.gt);
        for (h, &tau) in hits.iter_mut().zip(&THRESHOLDS_PX) {
            if err < tau {
                *h += 1;
            }
        }
    }
    let per_threshold = hits.map(|h| ratio(h, visible));
    ThresholdCurve {
        per_threshold,
        mean: mean(&per_threshold),
    }
}

/// Fraction of all pairs whose predicted visibility matches ground truth.
pub fn occlusion_accuracy(pairs: &[EvalPair]) -> f64 {
    ratio(
        pairs
            .iter()
            .filter(|p| p.pred_visible == p.gt_visible)
            .count(),
        pairs.len(),
    )
}

/// Jaccard index per threshold. A visible prediction farther than the
/// threshold from a visible ground truth counts as both a false positive and
/// a false negative.
pub fn average_jaccard(pairs: &[EvalPair], res: Resolution) -> JaccardCurve {
    let mut counts = [JaccardCounts::default(); 5];
    for p in pairs {
        match (p.gt_visible, p.pred_visible) {
            (false, false) => {}
            (false, true) => counts.iter_mut().for_each(|c| c.false_positive += 1),
            (true, false) => counts.iter_mut().for_each(|c| c.false_negative += 1),
            (true, true) => {
                let err = res.eval_error(p.pred, p.gt);
                for (c, &tau) in counts.iter_mut().zip(&THRESHOLDS_PX) {
                    if err < tau {
                        c.true_positive += 1;
                    } else {
                        c.false_positive += 1;
                        c.false_negative += 1;
                    }
                }
            }
        }
    }
    let per_threshold = counts.map(|c| {
        ratio(
            c.true_positive,
            c.true_positive + c.false_positive + c.false_negative,
        )
    });
    JaccardCurve {
        per_threshold,
        mean: mean(&per_threshold),
        counts,
    }
}

/// BADJA accuracies in native pixels: within `0.2·sqrt(area)` of ground truth
/// and within 3 px. `area(query, frame)` gives the object mask area.
pub fn badja_metrics(
    pairs: &[EvalPair],
    area: impl Fn(usize, usize) -> Option<f64>,
) -> Result<(f64, f64), MetricsError> {
    let (mut seg, mut px3, mut visible) = (0usize, 0usize, 0usize);
    for p in pairs.iter().filter(|p| p.gt_visible) {
        let a = area(p.query, p.frame).ok_or(MetricsError::MissingArea {
            query: p.query,
            frame: p.frame,
        })?;
        visible += 1;
        if !p.pred_visible {
            continue;
        }
        let err = p.pred.distance(&p.gt);
        if err < SEG_AREA_FACTOR * a.sqrt() {
            seg += 1;
        }
        if err < BADJA_PIXEL_THRESHOLD {
            px3 += 1;
        }
    }
    Ok((ratio(seg, visible), ratio(px3, visible)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub delta: ThresholdCurve,
    pub occlusion_accuracy: f64,
    pub jaccard: JaccardCurve,
    /// Present when mask areas were available.
    pub badja: Option<(f64, f64)>,
    pub num_pairs: usize,
}

impl MetricReport {
    pub fn delta_avg_x(&self) -> f64 {
        self.delta.mean
    }

    pub fn average_jaccard(&self) -> f64 {
        self.jaccard.mean
    }

    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs          {}", self.num_pairs);
        let _ = writeln!(s, "delta_avg_x    {:.6}", self.delta.mean);
        let _ = writeln!(s, "occlusion_acc  {:.6}", self.occlusion_accuracy);
        let _ = writeln!(s, "average_jacc   {:.6}", self.jaccard.mean);
        if let Some((seg, px3)) = self.badja {
            let _ = writeln!(s, "delta_seg      {seg:.6}");
            let _ = writeln!(s, "delta_3px      {px3:.6}");
        }
        for (k, tau) in THRESHOLDS_PX.iter().enumerate() {
            let c = self.jaccard.counts[k];
            let _ = writeln!(
                s,
                "  <{tau:>2} px  delta {:.6}  jaccard {:.6}  tp {} fp {} fn {}",
                self.delta.per_threshold[k],
                self.jaccard.per_threshold[k],
                c.true_positive,
                c.false_positive,
                c.false_negative
            );
        }
        s
    }

    /// Machine-readable `metric\tthreshold\tvalue` rows; `threshold` is `-`
    /// for aggregate values.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tthreshold\tvalue\n");
        let _ = writeln!(s, "pairs\t-\t{}", self.num_pairs);
        let _ = writeln!(s, "delta_avg_x\t-\t{}", self.delta.mean);
        let _ = writeln!(s, "occlusion_accuracy\t-\t{}", self.occlusion_accuracy);
        let _ = writeln!(s, "average_jaccard\t-\t{}", self.jaccard.mean);
        if let Some((seg, px3)) = self.badja {
            let _ = writeln!(s, "delta_seg\t-\t{seg}");
            let _ = writeln!(s, "delta_3px\t-\t{px3}");
        }
        for (k, tau) in THRESHOLDS_PX.iter().enumerate() {
            let c = self.jaccard.counts[k];
            let _ = writeln!(s, "delta\t{tau}\t{}", self.delta.per_threshold[k]);
            let _ = writeln!(s, "jaccard\t{tau}\t{}", self.jaccard.per_threshold[k]);
            let _ = writeln!(s, "tp\t{tau}\t{}", c.true_positive);
            let _ = writeln!(s, "fp\t{tau}\t{}", c.false_positive);
            let _ = writeln!(s, "fn\t{tau}\t{}", c.false_negative);
        }
        s
    }
}

/// Aligns and computes every metric. `areas`, when given, is indexed
/// `[query][frame]` and enables the BADJA metrics.
pub fn evaluate(
    pred: &[Trajectory],
    gt: &GroundTruth,
    res: Resolution,
    areas: Option<&[Vec<f64>]>,
) -> Result<MetricReport, MetricsError> {
    let pairs = align(pred, gt)?;
    let badja = areas
        .map(|a| badja_metrics(&pairs, |q, t| a.get(q).and_then(|r| r.get(t)).copied()))
        .transpose()?;
    Ok(MetricReport {
        delta: delta_avg(&pairs, res),
        occlusion_accuracy: occlusion_accuracy(&pairs),
        jaccard: average_jaccard(&pairs, res),
        badja,
        num_pairs: pairs.len(),
    })
}

/// Ground-truth point helper for building fixtures.
pub fn gt_point(x: f64, y: f64, visible: bool) -> GtPoint {
    GtPoint {
        position: Point2::new(x, y),
        visible,
    }
}
