//! Tracking evaluation: CLEAR metrics (MOTA, FP, FN, identity switches,
//! mostly-tracked/lost), identity-level IDF1, and HOTA with its detection
//! and association factors.

use std::collections::BTreeMap;

use crate::hungarian::hungarian;
use crate::losses::iou_value;
use crate::synth::MotRecord;

/// One identity's boxes by frame. Ground truth and predictions share this
/// shape; boxes are (cx, cy, w, h) in any consistent coordinate space.
#[derive(Clone, Debug, Default)]
pub struct TrackSeq {
    pub id: u64,
    pub boxes: BTreeMap<u64, [f64; 4]>,
}

/// Group MOT records into per-identity sequences, sorted by id.
pub fn tracks_from_records(records: &[MotRecord]) -> Vec<TrackSeq> {
    let mut map: BTreeMap<u64, TrackSeq> = BTreeMap::new();
    for r in records {
        let entry = map.entry(r.id).or_insert_with(|| TrackSeq {
            id: r.id,
            boxes: BTreeMap::new(),
        });
        entry.boxes.insert(
            r.frame,
            [
                r.left + r.width / 2.0,
                r.top + r.height / 2.0,
                r.width,
                r.height,
            ],
        );
    }
    map.into_values().collect()
}

/// Cost used to reject pairs below the IoU threshold in frame matching.
const INFEASIBLE: f64 = 1e6;

fn frames_union(gt: &[TrackSeq], pred: &[TrackSeq]) -> Vec<u64> {
    let mut frames: Vec<u64> = gt
        .iter()
        .chain(pred)
        .flat_map(|t| t.boxes.keys().copied())
        .collect();
    frames.sort_unstable();
    frames.dedup();
    frames
}

fn boxes_at(tracks: &[TrackSeq], frame: u64) -> Vec<(u64, [f64; 4])> {
    tracks
        .iter()
        .filter_map(|t| t.boxes.get(&frame).map(|b| (t.id, *b)))
        .collect()
}

/// Per-frame matching: previously matched pairs are kept while they still
/// overlap, then the rest is assigned by Hungarian on 1 - IoU restricted to
/// pairs at or above the threshold. Returns (gt_id, pred_id) pairs.
fn match_frame(
    gts: &[(u64, [f64; 4])],
    preds: &[(u64, [f64; 4])],
    carry: &BTreeMap<u64, u64>,
    iou_thr: f64,
) -> Vec<(u64, u64)> {
    let mut pairs = Vec::new();
    let mut gt_free: Vec<usize> = Vec::new();
    let mut pred_used = vec![false; preds.len()];

    for (gi, (gid, gbox)) in gts.iter().enumerate() {
        let kept = carry.get(gid).and_then(|pid| {
            preds
                .iter()
                .position(|(p, _)| p == pid)
                .filter(|&pj| !pred_used[pj] && iou_value(gbox, &preds[pj].1) >= iou_thr)
        });
        match kept {
            Some(pj) => {
                pred_used[pj] = true;
                pairs.push((*gid, preds[pj].0));
            }
            None => gt_free.push(gi),
        }
    }

    let pred_free: Vec<usize> = (0..preds.len()).filter(|&j| !pred_used[j]).collect();
    if !gt_free.is_empty() && !pred_free.is_empty() {
        let mut cost = Vec::with_capacity(gt_free.len() * pred_free.len());
        for &gi in &gt_free {
            for &pj in &pred_free {
                let iou = iou_value(&gts[gi].1, &preds[pj].1);
                cost.push(if iou >= iou_thr { 1.0 - iou } else { INFEASIBLE });
            }
        }
        for (r, c) in hungarian(&cost, gt_free.len(), pred_free.len()) {
            if cost[r * pred_free.len() + c] < INFEASIBLE / 2.0 {
                pairs.push((gts[gt_free[r]].0, preds[pred_free[c]].0));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClearReport {
    /// None when the ground truth is empty (MOTA undefined).
    pub mota: Option<f64>,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub mt_pct: f64,
    pub ml_pct: f64,
    pub gt_total: usize,
    pub matches: usize,
}

/// CLEAR evaluation at one IoU threshold with match-continuity preference.
pub fn clear_mot(gt: &[TrackSeq], pred: &[TrackSeq], iou_thr: f64) -> ClearReport {
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut idsw = 0usize;
    let mut gt_total = 0usize;
    let mut matches = 0usize;
    let mut carry: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut tracked_frames: BTreeMap<u64, usize> = BTreeMap::new();

    for frame in frames_union(gt, pred) {
        let gts = boxes_at(gt, frame);
        let preds = boxes_at(pred, frame);
        let pairs = match_frame(&gts, &preds, &carry, iou_thr);
        for &(gid, pid) in &pairs {
            if let Some(&prev) = last_match.get(&gid) {
                if prev != pid {
                    idsw += 1;
                }
            }
            last_match.insert(gid, pid);
            *tracked_frames.entry(gid).or_insert(0) += 1;
        }
        matches += pairs.len();
        gt_total += gts.len();
        fp += preds.len() - pairs.len();
        fn_ += gts.len() - pairs.len();
        carry = pairs.into_iter().collect();
    }

    let mut mt = 0usize;
    let mut ml = 0usize;
    let gt_tracks: Vec<&TrackSeq> = gt.iter().filter(|t| !t.boxes.is_empty()).collect();
    for t in &gt_tracks {
        let span = t.boxes.len();
        let tracked = tracked_frames.get(&t.id).copied().unwrap_or(0);
        let ratio = tracked as f64 / span as f64;
        if ratio >= 0.8 {
            mt += 1;
        }
        if ratio <= 0.2 {
            ml += 1;
        }
    }
    let n_tracks = gt_tracks.len();
    ClearReport {
        mota: (gt_total > 0).then(|| 1.0 - (fp + fn_ + idsw) as f64 / gt_total as f64),
        fp,
        fn_,
        idsw,
        mt_pct: if n_tracks > 0 { 100.0 * mt as f64 / n_tracks as f64 } else { 0.0 },
        ml_pct: if n_tracks > 0 { 100.0 * ml as f64 / n_tracks as f64 } else { 0.0 },
        gt_total,
        matches,
    }
}

/// Frames where both identities hold a box with IoU at or above threshold.
fn overlap_counts(gt: &[TrackSeq], pred: &[TrackSeq], iou_thr: f64) -> Vec<Vec<usize>> {
    let mut co = vec![vec![0usize; pred.len()]; gt.len()];
    for (gi, g) in gt.iter().enumerate() {
        for (pj, p) in pred.iter().enumerate() {
            for (frame, gbox) in &g.boxes {
                if let Some(pbox) = p.boxes.get(frame) {
                    if iou_value(gbox, pbox) >= iou_thr {
                        co[gi][pj] += 1;
                    }
                }
            }
        }
    }
    co
}

/// Identity-level F1: a single whole-sequence bipartite matching between
/// ground-truth and predicted identities maximizing correctly identified
/// detections. None when the ground truth is empty.
pub fn idf1(gt: &[TrackSeq], pred: &[TrackSeq], iou_thr: f64) -> Option<f64> {
    let gt_dets: usize = gt.iter().map(|t| t.boxes.len()).sum();
    let pred_dets: usize = pred.iter().map(|t| t.boxes.len()).sum();
    if gt_dets == 0 {
        return None;
    }
    let co = overlap_counts(gt, pred, iou_thr);
    let mut idtp = 0usize;
    if !pred.is_empty() {
        let mut cost = Vec::with_capacity(gt.len() * pred.len());
        for row in &co {
            for &c in row {
                cost.push(-(c as f64));
            }
        }
        for (r, c) in hungarian(&cost, gt.len(), pred.len()) {
            idtp += co[r][c];
        }
    }
    let idfn = gt_dets - idtp;
    let idfp = pred_dets - idtp;
    Some(2.0 * idtp as f64 / (2 * idtp + idfp + idfn) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HotaReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
}

/// HOTA averaged over IoU thresholds 0.05..=0.95 (step 0.05). Per
/// threshold, detections are matched frame by frame preferring pairs whose
/// identities associate well globally; each true positive then contributes
/// its pair's association Jaccard score.
pub fn hota(gt: &[TrackSeq], pred: &[TrackSeq]) -> Option<HotaReport> {
    let gt_dets: usize = gt.iter().map(|t| t.boxes.len()).sum();
    if gt_dets == 0 {
        return None;
    }
    let mut hota_sum = 0.0;
    let mut deta_sum = 0.0;
    let mut assa_sum = 0.0;
    let mut n_alphas = 0.0;
    for step in 1..=19 {
        let alpha = step as f64 * 0.05;
        let (h, d, a) = hota_single(gt, pred, alpha);
        hota_sum += h;
        deta_sum += d;
        assa_sum += a;
        n_alphas += 1.0;
    }
    Some(HotaReport {
        hota: hota_sum / n_alphas,
        deta: deta_sum / n_alphas,
        assa: assa_sum / n_alphas,
    })
}

fn hota_single(gt: &[TrackSeq], pred: &[TrackSeq], alpha: f64) -> (f64, f64, f64) {
    let co = overlap_counts(gt, pred, alpha);
    let gt_counts: Vec<usize> = gt.iter().map(|t| t.boxes.len()).collect();
    let pred_counts: Vec<usize> = pred.iter().map(|t| t.boxes.len()).collect();
    let gt_index: BTreeMap<u64, usize> = gt.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let pred_index: BTreeMap<u64, usize> =
        pred.iter().enumerate().map(|(i, t)| (t.id, i)).collect();

    // Matched-frame counts per (gt, pred) pair, filled by the frame loop.
    let mut tpa = vec![vec![0usize; pred.len()]; gt.len()];
    let mut tp_pairs: Vec<(usize, usize)> = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;

    for frame in frames_union(gt, pred) {
        let gts = boxes_at(gt, frame);
        let preds = boxes_at(pred, frame);
        let mut matched = Vec::new();
        if !gts.is_empty() && !preds.is_empty() {
            let mut cost = Vec::with_capacity(gts.len() * preds.len());
            for (gid, gbox) in &gts {
                for (pid, pbox) in &preds {
                    let iou = iou_value(gbox, pbox);
                    if iou >= alpha {
                        let gi = gt_index[gid];
                        let pj = pred_index[pid];
                        let pot = co[gi][pj] as f64
                            / (gt_counts[gi] + pred_counts[pj] - co[gi][pj]) as f64;
                        cost.push(-(pot + iou * 1e-3));
                    } else {
                        cost.push(INFEASIBLE);
                    }
                }
            }
            for (r, c) in hungarian(&cost, gts.len(), preds.len()) {
                if cost[r * preds.len() + c] < INFEASIBLE / 2.0 {
                    matched.push((gt_index[&gts[r].0], pred_index[&preds[c].0]));
                }
            }
        }
        tp += matched.len();
        fp += preds.len() - matched.len();
        fn_ += gts.len() - matched.len();
        for (gi, pj) in matched {
            if tpa[gi][pj] == 0 {
                tp_pairs.push((gi, pj));
            }
            tpa[gi][pj] += 1;
        }
    }

    if tp == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mut ass_sum = 0.0;
    for &(gi, pj) in &tp_pairs {
        // A(c) = TPA / (gt dets + pred dets - TPA), the association Jaccard,
        // contributed once per matched detection of the pair.
        let t = tpa[gi][pj] as f64;
        let a_c = t / (gt_counts[gi] as f64 + pred_counts[pj] as f64 - t);
        ass_sum += t * a_c;
    }
    let denom = (tp + fp + fn_) as f64;
    let deta = tp as f64 / denom;
    let assa = ass_sum / tp as f64;
    ((deta * assa).sqrt(), deta, assa)
}

/// Re-link bookkeeping for scripted occlusions: an occlusion is re-linked
/// when the identity's best-overlap prediction id is the same in the last
/// matched frame before the gap and the first matched frame after it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelinkStats {
    pub total: usize,
    pub relinked: usize,
}

impl RelinkStats {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.relinked as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, other: &RelinkStats) {
        self.total += other.total;
        self.relinked += other.relinked;
    }
}

/// `scripts` entries are (identity, start frame, duration) using the same
/// 1-based frame numbering as the track sequences.
pub fn occlusion_relink(
    gt: &[TrackSeq],
    pred: &[TrackSeq],
    scripts: &[(u64, u64, u64)],
    iou_thr: f64,
) -> RelinkStats {
    let mut stats = RelinkStats::default();
    for &(identity, start, duration) in scripts {
        stats.total += 1;
        let Some(track) = gt.iter().find(|t| t.id == identity) else {
            continue;
        };
        let best_pred_at = |frame: u64, gbox: &[f64; 4]| -> Option<u64> {
            let mut best: Option<(f64, u64)> = None;
            for p in pred {
                if let Some(pbox) = p.boxes.get(&frame) {
                    let iou = iou_value(gbox, pbox);
                    if iou >= iou_thr && best.map_or(true, |(b, _)| iou > b) {
                        best = Some((iou, p.id));
                    }
                }
            }
            best.map(|(_, id)| id)
        };
        let before = track
            .boxes
            .range(..start)
            .rev()
            .find_map(|(f, b)| best_pred_at(*f, b));
        let after = track
            .boxes
            .range(start + duration..)
            .find_map(|(f, b)| best_pred_at(*f, b));
        if let (Some(a), Some(b)) = (before, after) {
            if a == b {
                stats.relinked += 1;
            }
        }
    }
    stats
}
