//! Evaluation: decoding of raw predictions, heatmap AUC, gaze distances,
//! ranked average precision and the composite head-gaze-following mAP.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SceneLabels, SceneRecord};
use crate::geometry::{heatmap_argmax, iou, Box, Heatmap, Point2D};
use crate::model::{GtrModel, PredictionSet};
use crate::{Error, Result};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const HEAD_AP_IOU: f64 = 0.7;

/// The decoded view of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedDetection {
    /// Query index the detection came from; used as a stable tie-break.
    pub query: usize,
    pub head_box: Box,
    pub head_score: f64,
    pub watch_inside_score: f64,
    pub heatmap: Heatmap,
    pub gaze_point: Point2D,
    pub gaze_object: Option<DecodedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedObject {
    pub bbox: Box,
    /// 1-based, as in annotations.
    pub category: u32,
    pub score: f64,
}

/// Keeps queries whose is-head probability reaches `threshold`.
pub fn decode(preds: &PredictionSet, threshold: f64) -> Vec<DecodedDetection> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.head_conf[0] >= threshold)
        .map(|(query, p)| {
            let (best, score) = p
                .gaze_class
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let no_object = p.gaze_class.len() - 1;
            DecodedDetection {
                query,
                head_box: p.head_box,
                head_score: p.head_conf[0],
                watch_inside_score: p.watch[0],
                heatmap: p.heatmap.clone(),
                gaze_point: heatmap_argmax(&p.heatmap),
                gaze_object: (best != no_object).then_some(DecodedObject {
                    bbox: p.gaze_box,
                    category: best as u32 + 1,
                    score,
                }),
            }
        })
        .collect()
}

/// ROC AUC of heatmap cells as scores, with the cells holding a
/// ground-truth point as positives. Ties count one half. `None` when every
/// cell is positive or none is.
pub fn heatmap_auc(h: &Heatmap, gt_points: &[Point2D]) -> Option<f64> {
    let n = h.values().len();
    let mut positive = vec![false; n];
    for p in gt_points {
        let (r, c) = h.cell_of(*p);
        positive[r * h.width() + c] = true;
    }
    let n_pos = positive.iter().filter(|&&b| b).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mann-Whitney: sum of positive ranks with ties sharing their mean rank.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h.values()[a].total_cmp(&h.values()[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && h.values()[order[j + 1]] == h.values()[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Distance to the centroid of the ground-truth points and to the nearest one.
pub fn gaze_distances(pred: Point2D, gt_points: &[Point2D]) -> (f64, f64) {
    assert!(!gt_points.is_empty(), "gaze_distances needs at least one point");
    let k = gt_points.len() as f64;
    let centroid = Point2D::new(
        gt_points.iter().map(|p| p.x).sum::<f64>() / k,
        gt_points.iter().map(|p| p.y).sum::<f64>() / k,
    );
    let min = gt_points.iter().map(|p| pred.distance(p)).fold(f64::INFINITY, f64::min);
    (pred.distance(&centroid), min)
}

/// A scored decision in a ranked list. Ties in score are broken by `key`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub score: f64,
    pub key: (String, usize),
    pub true_positive: bool,
}

/// All-point interpolated average precision: the area under the
/// precision-recall curve after replacing each precision by the maximum
/// precision at any higher recall. `None` without positives.
pub fn ranked_ap(entries: &[Ranked], total_positives: usize) -> Option<f64> {
    if total_positives == 0 {
        return None;
    }
    let mut sorted: Vec<&Ranked> = entries.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key)));
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (i, e) in sorted.iter().enumerate() {
        if e.true_positive {
            tp += 1;
        }
        recall.push(tp as f64 / total_positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// True-positive rule of the composite mAP. `None` fields are not checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgfThresholds {
    pub head_iou: f64,
    /// Maximum gaze-point distance for in-frame gazes. When checked, an
    /// out-of-frame ground truth instead needs an outside prediction.
    pub gaze_distance: Option<f64>,
    /// Minimum class confidence and box IoU for annotated gaze objects.
    pub object_confidence: Option<f64>,
    pub object_iou: Option<f64>,
}

impl Default for HgfThresholds {
    fn default() -> Self {
        Self {
            head_iou: 0.5,
            gaze_distance: Some(0.15),
            object_confidence: Some(0.75),
            object_iou: Some(0.5),
        }
    }
}

impl HgfThresholds {
    /// Only the head criterion; the composite mAP then equals head AP at this IoU.
    pub fn head_only(head_iou: f64) -> Self {
        Self {
            head_iou,
            gaze_distance: None,
            object_confidence: None,
            object_iou: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub hgf: HgfThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            hgf: HgfThresholds::default(),
        }
    }
}

fn hgf_criterion(d: &DecodedDetection, gt: &crate::data::HgfAnnotation, t: &HgfThresholds) -> bool {
    if let Some(max_dist) = t.gaze_distance {
        match gt.gaze_point {
            Some(p) if gt.watch_inside => {
                if gaze_distances(d.gaze_point, &[p]).0 >= max_dist {
                    return false;
                }
            }
            _ => {
                if d.watch_inside_score >= 0.5 {
                    return false;
                }
            }
        }
    }
    if let Some(obj) = &gt.gaze_object {
        if t.object_confidence.is_some() || t.object_iou.is_some() {
            let Some(pred) = &d.gaze_object else { return false };
            if pred.category != obj.category {
                return false;
            }
            if t.object_confidence.is_some_and(|c| pred.score <= c) || t.object_iou.is_some_and(|th| iou(&pred.bbox, &obj.bbox) <= th) {
                return false;
            }
        }
    }
    true
}

/// Greedy association in the given detection order: each detection takes the
/// unclaimed ground truth with the highest head IoU above `min_iou`, and
/// claims it only when `accept` holds.
fn greedy_match<F>(
    dets: &[&DecodedDetection],
    gts: &[crate::data::HgfAnnotation],
    min_iou: f64,
    accept: F,
) -> Vec<bool>
where
    F: Fn(&DecodedDetection, &crate::data::HgfAnnotation) -> bool,
{
    let mut claimed = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, _)| !claimed[*i])
                .map(|(i, g)| (i, iou(&d.head_box, &g.head_box)))
                .filter(|&(_, v)| v > min_iou)
                .fold(None::<(usize, f64)>, |acc, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((i, _)) if accept(d, &gts[i]) => {
                    claimed[i] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

fn by_score(dets: &[DecodedDetection]) -> Vec<&DecodedDetection> {
    let mut v: Vec<&DecodedDetection> = dets.iter().collect();
    v.sort_by(|a, b| b.head_score.total_cmp(&a.head_score).then(a.query.cmp(&b.query)));
    v
}

fn ranked(scene: &str, dets: &[&DecodedDetection], tps: &[bool]) -> Vec<Ranked> {
    dets.iter()
        .zip(tps)
        .map(|(d, &tp)| Ranked {
            score: d.head_score,
            key: (scene.to_string(), d.query),
            true_positive: tp,
        })
        .collect()
}

/// Composite mAP over several images.
pub fn hgf_map(images: &[(SceneLabels, Vec<DecodedDetection>)], t: &HgfThresholds) -> Option<f64> {
    let mut entries = Vec::new();
    let mut positives = 0;
    for (labels, dets) in images {
        let order = by_score(dets);
        let tps = greedy_match(&order, &labels.annotations, t.head_iou, |d, g| hgf_criterion(d, g, t));
        entries.extend(ranked(&labels.scene_id, &order, &tps));
        positives += labels.annotations.len();
    }
    ranked_ap(&entries, positives)
}

/// Head-detection AP with IoU strictly above `min_iou`.
pub fn head_ap(images: &[(SceneLabels, Vec<DecodedDetection>)], min_iou: f64) -> Option<f64> {
    hgf_map(images, &HgfThresholds::head_only(min_iou))
}

const GO_IOUS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Gaze-object AP at one IoU threshold, averaged over categories with at
/// least one annotated instance.
pub fn gaze_object_ap(images: &[(SceneLabels, Vec<DecodedDetection>)], min_iou: f64) -> Option<f64> {
    let mut per_class: BTreeMap<u32, (Vec<Ranked>, usize)> = BTreeMap::new();
    for (labels, _) in images {
        for a in &labels.annotations {
            if let Some(o) = &a.gaze_object {
                per_class.entry(o.category).or_default().1 += 1;
            }
        }
    }
    for (labels, dets) in images {
        for (&cat, (entries, _)) in per_class.iter_mut() {
            let mut cands: Vec<(&DecodedDetection, DecodedObject)> = dets
                .iter()
                .filter_map(|d| d.gaze_object.filter(|o| o.category == cat).map(|o| (d, o)))
                .collect();
            cands.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.query.cmp(&b.0.query)));
            let gts: Vec<Box> = labels
                .annotations
                .iter()
                .filter_map(|a| a.gaze_object.filter(|o| o.category == cat).map(|o| o.bbox))
                .collect();
            let mut claimed = vec![false; gts.len()];
            for (d, o) in cands {
                let best = gts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !claimed[*i])
                    .map(|(i, g)| (i, iou(&o.bbox, g)))
                    .fold(None::<(usize, f64)>, |acc, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    });
                let tp = match best {
                    Some((i, v)) if v >= min_iou => {
                        claimed[i] = true;
                        true
                    }
                    _ => false,
                };
                entries.push(Ranked {
                    score: o.score,
                    key: (labels.scene_id.clone(), d.query),
                    true_positive: tp,
                });
            }
        }
    }
    let aps: Vec<f64> = per_class.values().filter_map(|(e, n)| ranked_ap(e, *n)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Per-image values behind the report, also written as a detail file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetail {
    pub scene_id: String,
    pub num_gt: usize,
    pub num_detections: usize,
    /// One entry per in-frame ground truth, in annotation order.
    pub auc: Vec<Option<f64>>,
    pub avg_dist: Vec<f64>,
    pub min_dist: Vec<f64>,
}

/// The detection with the largest head IoU for a ground-truth head, if any overlaps.
fn associate<'a>(dets: &'a [DecodedDetection], head: &Box) -> Option<&'a DecodedDetection> {
    dets.iter()
        .map(|d| (d, iou(&d.head_box, head)))
        .filter(|(_, v)| *v > 0.0)
        .fold(None::<(&DecodedDetection, f64)>, |acc, x| match acc {
            Some(a) if a.1 >= x.1 => Some(a),
            _ => Some(x),
        })
        .map(|(d, _)| d)
}

fn image_detail(labels: &SceneLabels, dets: &[DecodedDetection]) -> ImageDetail {
    let mut detail = ImageDetail {
        scene_id: labels.scene_id.clone(),
        num_gt: labels.annotations.len(),
        num_detections: dets.len(),
        auc: vec![],
        avg_dist: vec![],
        min_dist: vec![],
    };
    for a in &labels.annotations {
        let Some(p) = a.gaze_point.filter(|_| a.watch_inside) else { continue };
        let (auc, pred) = match associate(dets, &a.head_box) {
            Some(d) => (heatmap_auc(&d.heatmap, &[p]), d.gaze_point),
            // No detection covers this head: chance-level ranking and a
            // guess at the image center.
            None => (Some(0.5), Point2D::new(0.5, 0.5)),
        };
        let (avg, min) = gaze_distances(pred, &[p]);
        detail.auc.push(auc);
        detail.avg_dist.push(avg);
        detail.min_dist.push(min);
    }
    detail
}

/// Watch-in-out AP with out-of-frame gazes as the positive class. Each
/// ground truth is scored by its associated detection's outside probability.
pub fn watch_io_ap(images: &[(SceneLabels, Vec<DecodedDetection>)]) -> Option<f64> {
    let mut entries = Vec::new();
    let mut positives = 0;
    for (labels, dets) in images {
        for (i, a) in labels.annotations.iter().enumerate() {
            let score = associate(dets, &a.head_box).map_or(0.0, |d| 1.0 - d.watch_inside_score);
            if !a.watch_inside {
                positives += 1;
            }
            entries.push(Ranked {
                score,
                key: (labels.scene_id.clone(), i),
                true_positive: !a.watch_inside,
            });
        }
    }
    ranked_ap(&entries, positives)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub avg_dist: Option<f64>,
    pub min_dist: Option<f64>,
    pub watch_io_ap: Option<f64>,
    pub head_ap_70: Option<f64>,
    pub go_ap: Option<f64>,
    pub go_ap50: Option<f64>,
    pub go_ap75: Option<f64>,
    pub hgf_map: Option<f64>,
}

impl MetricReport {
    pub fn entries(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("auc", self.auc),
            ("avg_dist", self.avg_dist),
            ("min_dist", self.min_dist),
            ("watch_io_ap", self.watch_io_ap),
            ("head_ap_70", self.head_ap_70),
            ("go_ap", self.go_ap),
            ("go_ap50", self.go_ap50),
            ("go_ap75", self.go_ap75),
            ("hgf_map", self.hgf_map),
        ]
    }

    /// `key = value` lines; missing values print as `nan`.
    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| match v {
                Some(x) => format!("{k} = {x}\n"),
                None => format!("{k} = nan\n"),
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("report line {}", n + 1), "expected `key = value`"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("report line {}", n + 1), format!("`{}` is not a number", v.trim())))?;
            values.insert(k.trim().to_string(), (!v.is_nan()).then_some(v));
        }
        let get = |k: &str| values.get(k).copied().flatten();
        Ok(Self {
            auc: get("auc"),
            avg_dist: get("avg_dist"),
            min_dist: get("min_dist"),
            watch_io_ap: get("watch_io_ap"),
            head_ap_70: get("head_ap_70"),
            go_ap: get("go_ap"),
            go_ap50: get("go_ap50"),
            go_ap75: get("go_ap75"),
            hgf_map: get("hgf_map"),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8}", "metric", "value")?;
        for (k, v) in self.entries() {
            match v {
                Some(x) => writeln!(f, "{k:<12} {x:>8.4}")?,
                None => writeln!(f, "{k:<12} {:>8}", "-")?,
            }
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Full report over already decoded detections. Images are processed in
/// scene-id order so the result does not depend on input order.
pub fn evaluate_detections(
    images: &[(SceneLabels, Vec<DecodedDetection>)],
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<ImageDetail>)> {
    if images.is_empty() {
        return Err(Error::validation("evaluation", "the dataset is empty"));
    }
    let mut sorted: Vec<(SceneLabels, Vec<DecodedDetection>)> = images.to_vec();
    sorted.sort_by(|a, b| a.0.scene_id.cmp(&b.0.scene_id));
    let details: Vec<ImageDetail> = sorted.iter().map(|(l, d)| image_detail(l, d)).collect();
    let go: Vec<Option<f64>> = GO_IOUS.iter().map(|&t| gaze_object_ap(&sorted, t)).collect();
    let report = MetricReport {
        auc: mean(details.iter().flat_map(|d| d.auc.iter().flatten().copied())),
        avg_dist: mean(details.iter().flat_map(|d| d.avg_dist.iter().copied())),
        min_dist: mean(details.iter().flat_map(|d| d.min_dist.iter().copied())),
        watch_io_ap: watch_io_ap(&sorted),
        head_ap_70: head_ap(&sorted, HEAD_AP_IOU),
        go_ap: if go.iter().all(Option::is_some) { mean(go.iter().flatten().copied()) } else { None },
        go_ap50: go[0],
        go_ap75: go[5],
        hgf_map: hgf_map(&sorted, &cfg.hgf),
    };
    Ok((report, details))
}

/// Runs the model over records in batches and evaluates the decoded output.
pub fn evaluate_model(
    model: &GtrModel,
    records: &[SceneRecord],
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<(MetricReport, Vec<ImageDetail>)> {
    let decoded = predict_records(model, records, cfg.score_threshold, batch_size)?;
    evaluate_detections(&decoded, cfg)
}

/// Decoded detections for every record.
pub fn predict_records(
    model: &GtrModel,
    records: &[SceneRecord],
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<(SceneLabels, Vec<DecodedDetection>)>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|r| &r.image).collect();
        for (rec, preds) in chunk.iter().zip(model.predict(&images)?) {
            out.push((rec.labels(), decode(&preds, threshold)));
        }
    }
    Ok(out)
}

pub fn write_report(report: &MetricReport, details: &[ImageDetail], report_path: &Path, details_path: &Path) -> Result<()> {
    std::fs::write(report_path, report.to_text()).map_err(|e| Error::io(report_path, e))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(details_path).map_err(|e| Error::io(details_path, e))?);
    for d in details {
        let line = serde_json::to_string(d).map_err(|e| Error::validation("detail", e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(details_path, e))?;
    }
    f.flush().map_err(|e| Error::io(details_path, e))?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{GazeObject, HgfAnnotation};
    use crate::geometry::render_gaussian_heatmap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn entry(score: f64, tp: bool, i: usize) -> Ranked {
        Ranked {
            score,
            key: (String::new(), i),
            true_positive: tp,
        }
    }

    /// Precision envelope evaluated at every cutoff of the ranking.
    pub(crate) fn ap_oracle(entries: &[Ranked], positives: usize) -> f64 {
        let mut s = entries.to_vec();
        s.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let points: Vec<(f64, f64)> = (1..=s.len())
            .map(|k| {
                let tp = s[..k].iter().filter(|e| e.true_positive).count() as f64;
                (tp / positives as f64, tp / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &points {
            if r > prev {
                let best = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
                ap += (r - prev) * best;
                prev = r;
            }
        }
        ap
    }

    /// ROC by sweeping every distinct threshold, trapezoid integration.
    pub(crate) fn auc_oracle(values: &[f64], positive: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = values.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = positive.iter().filter(|&&p| p).count() as f64;
        let n_neg = positive.len() as f64 - n_pos;
        let mut pts = vec![(0.0, 0.0)];
        for t in thresholds {
            let tp = values.iter().zip(positive).filter(|(v, p)| **v >= t && **p).count() as f64;
            let fp = values.iter().zip(positive).filter(|(v, p)| **v >= t && !**p).count() as f64;
            pts.push((fp / n_neg, tp / n_pos));
        }
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ranked_ap(&[entry(0.9, true, 0)], 1), Some(1.0));
        let e = [entry(0.9, true, 0), entry(0.8, false, 1), entry(0.7, true, 2)];
        // Precision 1 at recall 1/2, then 2/3 at recall 1.
        let ap = ranked_ap(&e, 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12, "{ap}");
        assert_eq!(ranked_ap(&e, 0), None);
        assert_eq!(ranked_ap(&[], 3), Some(0.0));
    }

    #[test]
    fn ap_agrees_with_cutoff_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..50);
            let e: Vec<Ranked> = (0..n).map(|i| entry(rng.random(), rng.random_bool(0.4), i)).collect();
            let tps = e.iter().filter(|x| x.true_positive).count();
            let positives = tps + rng.random_range(0..4);
            if positives == 0 {
                continue;
            }
            assert!((ranked_ap(&e, positives).unwrap() - ap_oracle(&e, positives)).abs() < 1e-9);
        }
    }

    #[test]
    fn auc_examples() {
        let p = Point2D::new(0.3, 0.6);
        let mut h = Heatmap::zeros(8, 8);
        let (r, c) = h.cell_of(p);
        h.set(r, c, 1.0);
        assert_eq!(heatmap_auc(&h, &[p]), Some(1.0));
        assert_eq!(heatmap_auc(&Heatmap::from_values(8, 8, vec![0.3; 64]), &[p]), Some(0.5));
        assert_eq!(heatmap_auc(&Heatmap::zeros(1, 1), &[p]), None);
        assert_eq!(heatmap_auc(&h, &[]), None);
    }

    #[test]
    fn auc_agrees_with_threshold_sweep() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for case in 0..50 {
            // Coarse values in half the cases to exercise ties.
            let values: Vec<f64> = (0..64)
                .map(|_| if case % 2 == 0 { rng.random() } else { rng.random_range(0..4) as f64 })
                .collect();
            let h = Heatmap::from_values(8, 8, values.clone());
            let pts: Vec<Point2D> = (0..rng.random_range(1..4)).map(|_| Point2D::new(rng.random(), rng.random())).collect();
            let mut positive = vec![false; 64];
            for p in &pts {
                let (r, c) = h.cell_of(*p);
                positive[r * 8 + c] = true;
            }
            let got = heatmap_auc(&h, &pts).unwrap();
            assert!((got - auc_oracle(&values, &positive)).abs() < 1e-9);
        }
    }

    #[test]
    fn distance_examples() {
        let p = Point2D::new(0.2, 0.3);
        assert_eq!(gaze_distances(p, &[p]), (0.0, 0.0));
        let (avg, min) = gaze_distances(Point2D::new(0.5, 0.5), &[Point2D::new(0.0, 0.0), Point2D::new(1.0, 1.0)]);
        assert!(avg.abs() < 1e-12);
        assert!((min - 0.5f64.sqrt()).abs() < 1e-12);
    }

    pub(crate) fn annotation(head: Box, gaze: Option<Point2D>, object: Option<(Box, u32)>) -> HgfAnnotation {
        HgfAnnotation {
            head_box: head,
            watch_inside: gaze.is_some(),
            gaze_point: gaze,
            gaze_object: object.map(|(bbox, category)| GazeObject { bbox, category }),
        }
    }

    /// A detection that reproduces a ground truth exactly, scored `score`.
    pub(crate) fn replay(a: &HgfAnnotation, query: usize, score: f64) -> DecodedDetection {
        let heatmap = match a.gaze_point {
            Some(p) => render_gaussian_heatmap(p, 64, 64, 3.0),
            None => Heatmap::zeros(64, 64),
        };
        DecodedDetection {
            query,
            head_box: a.head_box,
            head_score: score,
            watch_inside_score: if a.watch_inside { 1.0 } else { 0.0 },
            gaze_point: a.gaze_point.unwrap_or(Point2D::new(-1.0, -1.0)),
            heatmap,
            gaze_object: a.gaze_object.map(|o| DecodedObject {
                bbox: o.bbox,
                category: o.category,
                score: 1.0,
            }),
        }
    }

    fn labels(id: &str, annotations: Vec<HgfAnnotation>) -> SceneLabels {
        SceneLabels {
            scene_id: id.into(),
            width: 256,
            height: 256,
            annotations,
        }
    }

    #[test]
    fn composite_rule() {
        let gt = annotation(Box::new(0.1, 0.1, 0.3, 0.3), Some(Point2D::new(0.7, 0.7)), None);
        let l = labels("a", vec![gt.clone()]);
        let perfect = replay(&gt, 0, 0.9);
        assert_eq!(hgf_map(&[(l.clone(), vec![perfect.clone()])], &HgfThresholds::default()), Some(1.0));

        // Head IoU 0.6 passes the head test but the gaze is 0.2 away.
        let mut d = perfect.clone();
        d.head_box = Box::new(0.1, 0.1, 0.3, 0.22);
        assert!((iou(&d.head_box, &gt.head_box) - 0.6).abs() < 1e-9);
        d.gaze_point = Point2D::new(0.7, 0.9);
        assert_eq!(hgf_map(&[(l.clone(), vec![d.clone()])], &HgfThresholds::default()), Some(0.0));
        d.gaze_point = Point2D::new(0.7, 0.8);
        assert_eq!(hgf_map(&[(l, vec![d])], &HgfThresholds::default()), Some(1.0));
    }

    #[test]
    fn object_and_outside_rules() {
        let obj = annotation(Box::new(0.1, 0.1, 0.3, 0.3), Some(Point2D::new(0.7, 0.7)), Some((Box::new(0.6, 0.6, 0.8, 0.8), 2)));
        let out = annotation(Box::new(0.5, 0.1, 0.7, 0.3), None, None);
        let l = labels("a", vec![obj.clone(), out.clone()]);
        let t = HgfThresholds::default();
        let ok = vec![replay(&obj, 0, 0.9), replay(&out, 1, 0.8)];
        assert_eq!(hgf_map(&[(l.clone(), ok.clone())], &t), Some(1.0));

        let mut weak = ok.clone();
        weak[0].gaze_object.as_mut().unwrap().score = 0.7;
        let mut wrong_class = ok.clone();
        wrong_class[0].gaze_object.as_mut().unwrap().category = 1;
        let mut inside = ok.clone();
        inside[1].watch_inside_score = 0.6;
        // A top-ranked miss halves the precision of the later hit.
        for dets in [weak, wrong_class] {
            assert_eq!(hgf_map(&[(l.clone(), dets)], &t), Some(0.25));
        }
        assert_eq!(hgf_map(&[(l, inside)], &t), Some(0.5));
    }

    #[test]
    fn relaxed_composite_is_head_ap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut images = vec![];
        for k in 0..20 {
            let gts: Vec<_> = (0..3)
                .map(|_| {
                    let x = rng.random_range(0.0..0.7);
                    annotation(Box::new(x, 0.2, x + 0.2, 0.4), Some(Point2D::new(0.5, 0.9)), Some((Box::new(0.1, 0.7, 0.3, 0.9), 1)))
                })
                .collect();
            let dets: Vec<_> = (0..4)
                .map(|q| {
                    let mut d = replay(&gts[q % 3], q, rng.random());
                    d.head_box = d.head_box.translate(rng.random_range(-0.1..0.1), 0.0);
                    d.gaze_point = Point2D::new(rng.random(), rng.random());
                    d.gaze_object = None;
                    d
                })
                .collect();
            images.push((labels(&format!("s{k}"), gts), dets));
        }
        let relaxed = hgf_map(&images, &HgfThresholds::head_only(0.5));
        assert_eq!(relaxed, head_ap(&images, 0.5));
        assert!(relaxed.unwrap() > hgf_map(&images, &HgfThresholds::default()).unwrap());
    }

    #[test]
    fn decode_thresholds() {
        use crate::model::PredictionRow;
        let row = |s: f64, gc: Vec<f64>| PredictionRow {
            head_box: Box::new(0.1, 0.1, 0.2, 0.2),
            head_conf: [s, 1.0 - s],
            watch: [0.7, 0.3],
            heatmap: render_gaussian_heatmap(Point2D::new(0.33, 0.66), 8, 8, 1.0),
            gaze_box: Box::new(0.4, 0.4, 0.5, 0.5),
            gaze_class: gc,
        };
        let preds = vec![row(0.2, vec![0.1, 0.7, 0.2]), row(0.6, vec![0.1, 0.1, 0.8]), row(1.0, vec![0.5, 0.3, 0.2])];
        assert_eq!(decode(&preds, 0.0).len(), 3);
        assert!(decode(&preds, 1.0 + 1e-9).is_empty());
        let d = decode(&preds, 0.5);
        assert_eq!(d.iter().map(|x| x.query).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(d[0].gaze_object, None);
        assert_eq!(d[1].gaze_object.unwrap().category, 1);
        assert_eq!(d[0].gaze_point, Point2D::new(2.5 / 8.0, 5.5 / 8.0));
    }

    pub(crate) fn replay_fixture() -> Vec<(SceneLabels, Vec<DecodedDetection>)> {
        let scene = |id: &str, anns: Vec<HgfAnnotation>| {
            let dets = anns.iter().enumerate().map(|(q, a)| replay(a, q, 1.0 - 0.1 * q as f64)).collect();
            (labels(id, anns), dets)
        };
        vec![
            scene(
                "s1",
                vec![
                    annotation(Box::new(0.1, 0.1, 0.2, 0.2), Some(Point2D::new(0.61, 0.72)), Some((Box::new(0.5, 0.6, 0.7, 0.8), 1))),
                    annotation(Box::new(0.7, 0.1, 0.8, 0.2), None, None),
                ],
            ),
            scene(
                "s2",
                vec![
                    annotation(Box::new(0.4, 0.05, 0.5, 0.15), Some(Point2D::new(0.21, 0.83)), Some((Box::new(0.1, 0.7, 0.3, 0.95), 2))),
                    annotation(Box::new(0.6, 0.3, 0.7, 0.4), Some(Point2D::new(0.9, 0.9)), None),
                ],
            ),
            scene(
                "s3",
                vec![annotation(Box::new(0.2, 0.2, 0.35, 0.35), None, None)],
            ),
        ]
    }

    #[test]
    fn ground_truth_replay_is_perfect() {
        let (r, details) = evaluate_detections(&replay_fixture(), &EvalConfig::default()).unwrap();
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.avg_dist, Some(0.0));
        assert_eq!(r.min_dist, Some(0.0));
        for v in [r.watch_io_ap, r.head_ap_70, r.go_ap, r.go_ap50, r.go_ap75, r.hgf_map] {
            assert_eq!(v, Some(1.0), "{r:?}");
        }
        assert_eq!(details.len(), 3);
    }

    #[test]
    fn report_ignores_image_order_and_round_trips() {
        let mut images = replay_fixture();
        for (_, dets) in images.iter_mut() {
            for d in dets.iter_mut() {
                d.head_box = d.head_box.translate(0.01 * d.query as f64, 0.0);
                d.gaze_point = Point2D::new(d.gaze_point.x * 0.9, d.gaze_point.y);
            }
        }
        let (a, da) = evaluate_detections(&images, &EvalConfig::default()).unwrap();
        images.reverse();
        let (b, db) = evaluate_detections(&images, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert_eq!(MetricReport::from_text(&a.to_text()).unwrap(), a);
        let missing = MetricReport { go_ap: None, ..a };
        assert!(missing.to_text().contains("go_ap = nan"));
        assert_eq!(MetricReport::from_text(&missing.to_text()).unwrap(), missing);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(evaluate_detections(&[], &EvalConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn ap_monotone_under_extreme_additions(scores in prop::collection::vec((0.01f64..0.99, any::<bool>()), 1..30), extra in 0usize..3) {
            let e: Vec<Ranked> = scores.iter().enumerate().map(|(i, &(s, t))| entry(s, t, i)).collect();
            let positives = e.iter().filter(|x| x.true_positive).count() + 1 + extra;
            let base = ranked_ap(&e, positives).unwrap();
            let mut top = e.clone();
            top.push(entry(1.0, true, 999));
            prop_assert!(ranked_ap(&top, positives).unwrap() >= base - 1e-12);
            let mut bottom = e.clone();
            bottom.push(entry(0.0, false, 999));
            prop_assert!(ranked_ap(&bottom, positives).unwrap() <= base + 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn auc_is_one_iff_positives_outrank(values in prop::collection::vec(0u8..6, 16), cell in 0usize..16) {
            let h = Heatmap::from_values(4, 4, values.iter().map(|&v| v as f64).collect());
            let p = h.cell_center(cell / 4, cell % 4);
            let auc = heatmap_auc(&h, &[p]).unwrap();
            let strict = values.iter().enumerate().all(|(i, &v)| i == cell || v < values[cell]);
            prop_assert!((0.0..=1.0).contains(&auc));
            prop_assert_eq!(auc == 1.0, strict);
        }
    }
}
