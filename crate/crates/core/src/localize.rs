//! Test-time localization and evaluation.
//!
//! Class-agnostic proposals come from thresholding the attention at several
//! levels; each run is scored per selected class with the outer-inner
//! contrast of its class probability, then pruned by per-class NMS.
//! Detection quality is mean average precision over temporal IoU levels.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{collect_instance_mask, InstanceMask};
use crate::autodiff::Tensor2;
use crate::datamodel::{GtSegment, VideoSample};
use crate::error::{Error, Result};
use crate::losses::{topk_k, video_class_probs_of};
use crate::network::ModelParams;

/// Weight of the video-level class probability in the proposal score.
pub const CLASS_SCORE_WEIGHT: f64 = 0.2;

/// A scored detection `[start, end)` of `class`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub class_threshold: f64,
    pub attention_thresholds: Vec<f64>,
    pub nms_iou: f64,
    /// Contrast against the flanks only instead of the whole inflated window.
    pub outer_only: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.2,
            attention_thresholds: default_thresholds(),
            nms_iou: 0.45,
            outer_only: false,
        }
    }
}

/// `0.10, 0.15, …, 0.90`.
pub fn default_thresholds() -> Vec<f64> {
    (2..=18).map(|i| i as f64 * 0.05).collect()
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.class_threshold) {
            return Err(Error::invalid("class_threshold must lie in [0, 1)"));
        }
        if self.attention_thresholds.is_empty() {
            return Err(Error::invalid("attention_thresholds must not be empty"));
        }
        if self.attention_thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("attention thresholds must be finite"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("nms_iou must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Action classes whose video-level probability exceeds `threshold`. The
/// last entry of `probs` is background.
pub fn select_classes(probs: &[f64], threshold: f64) -> Vec<usize> {
    let actions = probs.len().saturating_sub(1);
    (0..actions).filter(|&c| probs[c] > threshold).collect()
}

/// Maximal runs of `a[t] > theta`.
pub fn attention_runs(a: &[f64], theta: f64) -> Vec<(usize, usize)> {
    let mask = InstanceMask(a.iter().map(|&v| v > theta).collect());
    crate::augment::mask_to_instances(&mask)
}

/// Mean of `xs − reference`.
fn centered_mean<'a>(xs: impl Iterator<Item = &'a f64>, reference: f64) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), &x| (s + (x - reference), n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Inner mean minus the mean over `[s−l, e+l)` clamped to the video, plus
/// `0.2·p̂`, with `l = max(1, round((e−s)/4))`. `outer_only` replaces the
/// second mean by the mean over the two flanks; empty flanks count as 0.
///
/// Both means are taken relative to `col[start]`, so a flat column scores
/// exactly `0.2·p̂`.
pub fn outer_inner_score(col: &[f64], start: usize, end: usize, p_hat: f64, outer_only: bool) -> f64 {
    assert!(start < end && end <= col.len(), "proposal [{start}, {end}) outside 0..{}", col.len());
    let l = (((end - start) as f64 * 0.25).round() as usize).max(1);
    let lo = start.saturating_sub(l);
    let hi = (end + l).min(col.len());
    let reference = col[start];
    let inner = centered_mean(col[start..end].iter(), reference).expect("non-empty proposal");
    let outer = if outer_only {
        centered_mean(col[lo..start].iter().chain(&col[end..hi]), reference).unwrap_or(-reference)
    } else {
        centered_mean(col[lo..hi].iter(), reference).expect("window contains the proposal")
    };
    inner - outer + CLASS_SCORE_WEIGHT * p_hat
}

/// Multi-threshold proposals for the given classes.
///
/// `probs` is the row-softmax of the suppressed T-CAM and `video_probs` the
/// video-level class distribution. Identical `(class, start, end)` triples
/// are kept once with their best score.
pub fn generate_proposals(
    a: &[f64],
    probs: &Tensor2,
    classes: &[usize],
    video_probs: &[f64],
    cfg: &LocalizeConfig,
) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = Vec::new();
    let columns: Vec<(usize, Vec<f64>)> = classes.iter().map(|&c| (c, probs.col_vec(c))).collect();
    for &theta in &cfg.attention_thresholds {
        for (s, e) in attention_runs(a, theta) {
            for (c, col) in &columns {
                let conf = outer_inner_score(col, s, e, video_probs[*c], cfg.outer_only);
                match out.iter_mut().find(|p| p.class == *c && p.start == s && p.end == e) {
                    Some(p) => p.conf = p.conf.max(conf),
                    None => out.push(Proposal {
                        class: *c,
                        start: s,
                        end: e,
                        conf,
                    }),
                }
            }
        }
    }
    out
}

/// Intersection over union of two half-open intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    if a.0 >= a.1 || b.0 >= b.1 {
        return Err(Error::invalid(format!("degenerate interval in IoU: {a:?}, {b:?}")));
    }
    Ok(iou(a, b))
}

fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = a.1.max(b.1) - a.0.min(b.0);
    inter as f64 / union as f64
}

/// Descending confidence; equal scores keep their input order.
fn by_conf_desc(a: f64, b: f64) -> std::cmp::Ordering {
    b.partial_cmp(&a).expect("finite confidences")
}

/// Greedy per-class non-maximum suppression. The result is sorted by
/// descending confidence.
pub fn nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(|a, b| {
        by_conf_desc(a.conf, b.conf)
            .then(a.class.cmp(&b.class))
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        let clash = kept
            .iter()
            .any(|k| k.class == p.class && iou((k.start, k.end), (p.start, p.end)) > iou_threshold);
        if !clash {
            kept.push(p);
        }
    }
    kept
}

/// Full test-time pipeline for one video.
pub fn localize_video(params: &ModelParams, video: &VideoSample, cfg: &LocalizeConfig) -> Result<Vec<Proposal>> {
    let out = params.infer(&video.features)?;
    let video_probs = video_class_probs_of(&out.s_bar, topk_k(video.len()))?;
    let classes = select_classes(&video_probs, cfg.class_threshold);
    let probs = out.s_bar.softmax_rows();
    let proposals = generate_proposals(out.a.data(), &probs, &classes, &video_probs, cfg);
    Ok(nms(&proposals, cfg.nms_iou))
}

/// A proposal tagged with its video.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub proposal: Proposal,
}

pub fn localize_videos(params: &ModelParams, videos: &[VideoSample], cfg: &LocalizeConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for v in videos {
        for p in localize_video(params, v, cfg)? {
            out.push(Detection {
                video_id: v.id.clone(),
                proposal: p,
            });
        }
    }
    Ok(out)
}

/// A ground-truth interval tagged with its video.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub segment: GtSegment,
}

pub fn ground_truth_of(videos: &[VideoSample]) -> Vec<GroundTruth> {
    videos
        .iter()
        .flat_map(|v| {
            v.gt_segments.iter().map(|s| GroundTruth {
                video_id: v.id.clone(),
                segment: *s,
            })
        })
        .collect()
}

/// mAP per IoU threshold and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub per_threshold: Vec<(f64, f64)>,
    pub average: f64,
}

impl MapReport {
    pub fn at(&self, iou: f64) -> Option<f64> {
        self.per_threshold.iter().find(|(t, _)| (t - iou).abs() < 1e-12).map(|&(_, m)| m)
    }
}

/// Average precision of one class at one IoU level.
///
/// Detections are visited by descending confidence (ties keep input order)
/// and each claims the unmatched ground truth of its video with the highest
/// IoU at or above `threshold`. `AP = Σ Δrecall · precision` over ranks.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_conf_desc(dets[a].proposal.conf, dets[b].proposal.conf));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let d = dets[i];
        let span = (d.proposal.start, d.proposal.end);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.video_id != d.video_id {
                continue;
            }
            let o = iou(span, (gt.segment.start, gt.segment.end));
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        let hit = best.is_some();
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
        ap += f64::from(u8::from(hit)) * (tp as f64 / (rank + 1) as f64);
    }
    ap / gts.len() as f64
}

/// Mean over classes present in the ground truth of the per-class AP.
pub fn evaluate_map(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, thresholds: &[f64]) -> MapReport {
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..num_classes {
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.segment.class == c).collect();
            if g.is_empty() {
                continue;
            }
            let d: Vec<&Detection> = dets.iter().filter(|d| d.proposal.class == c).collect();
            sum += average_precision(&d, &g, thr);
            present += 1;
        }
        per_threshold.push((thr, if present == 0 { 0.0 } else { sum / present as f64 }));
    }
    let average = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|&(_, m)| m).sum::<f64>() / per_threshold.len() as f64
    };
    MapReport { per_threshold, average }
}

/// Foreground hits and total positives of a pseudo-label mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrecisionCount {
    pub hits: usize,
    pub positives: usize,
}

impl PrecisionCount {
    pub fn of(mask: &InstanceMask, gt: &[GtSegment]) -> Self {
        let mut c = Self::default();
        for (t, &on) in mask.0.iter().enumerate() {
            if on {
                c.positives += 1;
                if gt.iter().any(|g| g.contains(t)) {
                    c.hits += 1;
                }
            }
        }
        c
    }

    pub fn add(&mut self, other: PrecisionCount) {
        self.hits += other.hits;
        self.positives += other.positives;
    }

    /// `hits / positives`, 1 for an empty mask.
    pub fn precision(&self) -> f64 {
        if self.positives == 0 {
            1.0
        } else {
            self.hits as f64 / self.positives as f64
        }
    }
}

/// Fraction of mask positives lying inside ground truth; 1 when empty.
pub fn pseudo_precision(mask: &InstanceMask, gt: &[GtSegment]) -> f64 {
    PrecisionCount::of(mask, gt).precision()
}

/// Pseudo-label precision pooled over all positives of `videos`.
pub fn dataset_pseudo_precision(params: &ModelParams, videos: &[VideoSample], gamma: f64) -> Result<f64> {
    let mut total = PrecisionCount::default();
    for v in videos {
        let out = params.infer(&v.features)?;
        let mask = collect_instance_mask(&out.s_bar, gamma)?;
        total.add(PrecisionCount::of(&mask, &v.gt_segments));
    }
    if total.positives == 0 {
        log::info!("pseudo-label mask is empty; precision is vacuously 1");
    }
    Ok(total.precision())
}

/// Fraction of co-scene segments that the model would mark as action at
/// threshold `gamma`. `None` when the videos have no co-scene segment.
pub fn co_scene_false_positive_rate(params: &ModelParams, videos: &[VideoSample], gamma: f64) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for v in videos {
        let co = v.co_scene_mask();
        if !co.iter().any(|&b| b) {
            continue;
        }
        let out = params.infer(&v.features)?;
        let mask = collect_instance_mask(&out.s_bar, gamma)?;
        for (&is_co, &fired) in co.iter().zip(&mask.0) {
            if is_co {
                total += 1;
                hits += usize::from(fired);
            }
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    video_id: String,
    class: usize,
    start: usize,
    end: usize,
    conf: f64,
}

/// Writes `video_id,class,start,end,conf`.
pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if dets.is_empty() {
        w.write_record(["video_id", "class", "start", "end", "conf"])?;
    }
    for d in dets {
        w.serialize(DetectionRow {
            video_id: d.video_id.clone(),
            class: d.proposal.class,
            start: d.proposal.start,
            end: d.proposal.end,
            conf: d.proposal.conf,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: DetectionRow = row?;
        if row.start >= row.end || !row.conf.is_finite() {
            return Err(Error::Malformed(format!(
                "bad detection {}: [{}, {}) conf {}",
                row.video_id, row.start, row.end, row.conf
            )));
        }
        out.push(Detection {
            video_id: row.video_id,
            proposal: Proposal {
                class: row.class,
                start: row.start,
                end: row.end,
                conf: row.conf,
            },
        });
    }
    Ok(out)
}

/// Writes `iou,map` rows followed by an `avg` row.
pub fn write_map_report(path: impl AsRef<Path>, report: &MapReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iou", "map"])?;
    for (iou, m) in &report.per_threshold {
        w.write_record([format!("{iou:.2}"), format!("{m:.6}")])?;
    }
    w.write_record(["avg".to_string(), format!("{:.6}", report.average)])?;
    w.flush()?;
    Ok(())
}
