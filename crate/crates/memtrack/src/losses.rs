//! Ground-truth assignment and the loss terms: bipartite matching of
//! proposals to ground-truth boxes, focal/L1/generalized-IoU tracking loss,
//! the auxiliary detection loss, and the normalized clip loss.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::hungarian::hungarian;
use crate::memory::TrackId;
use crate::tensor::{NodeId, Tape, Tensor};

const FOCAL_CLAMP: f64 = 1e-7;

/// Ground-truth object in one frame; box is normalized (cx, cy, w, h).
#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub identity: u64,
    pub bbox: [f64; 4],
    pub visible: bool,
}

/// Where a decoded entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntrySource {
    Proposal(usize),
    /// Track entry; carries the ground-truth identity the track is bound to
    /// during training (tracker-internal id kept separately).
    Track {
        track: TrackId,
        gt_identity: u64,
    },
}

/// Value view of one decoded entry, enough to run assignment.
#[derive(Clone, Debug)]
pub struct EntryPrediction {
    pub source: EntrySource,
    pub obj: f64,
    pub bbox: [f64; 4],
}

/// Supervision target produced by [`assign_targets`].
#[derive(Clone, Debug, PartialEq)]
pub struct EntryTarget {
    pub obj: bool,
    pub uni: bool,
    pub bbox: Option<[f64; 4]>,
    pub matched_gt: Option<u64>,
}

/// Loss coefficients. Defaults: classification 2, L1 5, IoU 2, detection and
/// tracking balance 1 each, focal alpha 0.25 / gamma 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub det: f64,
    pub tck: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            iou: 2.0,
            det: 1.0,
            tck: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

// ── Box geometry (value level) ──────────────────────────────────────────

fn corners(b: &[f64; 4]) -> (f64, f64, f64, f64) {
    (
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    )
}

/// Plain intersection-over-union of two (cx, cy, w, h) boxes.
pub fn iou_value(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in [-1, 1]: IoU minus the fraction of the enclosing hull
/// not covered by the union. Zero-area boxes are a caller bug.
pub fn giou_value(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    assert!(
        a[2] > 0.0 && a[3] > 0.0 && b[2] > 0.0 && b[3] > 0.0,
        "giou requires positive box extents, got {a:?} {b:?}"
    );
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

// ── Tape-level loss primitives ──────────────────────────────────────────

fn scalar_const(tape: &mut Tape, v: f64) -> NodeId {
    tape.constant(Tensor::scalar(v))
}

/// Differentiable generalized IoU of two 1 x 4 (cx, cy, w, h) box nodes.
pub fn giou_node(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(tape.shape(a), (1, 4));
    assert_eq!(tape.shape(b), (1, 4));
    let split = |tape: &mut Tape, n: NodeId| {
        let cx = tape.slice_cols(n, 0, 1);
        let cy = tape.slice_cols(n, 1, 1);
        let w = tape.slice_cols(n, 2, 1);
        let h = tape.slice_cols(n, 3, 1);
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        let x1 = tape.sub(cx, hw);
        let y1 = tape.sub(cy, hh);
        let x2 = tape.add(cx, hw);
        let y2 = tape.add(cy, hh);
        (x1, y1, x2, y2, w, h)
    };
    let (ax1, ay1, ax2, ay2, aw, ah) = split(tape, a);
    let (bx1, by1, bx2, by2, bw, bh) = split(tape, b);

    let ix2 = tape.minimum(ax2, bx2);
    let ix1 = tape.maximum(ax1, bx1);
    let iwr = tape.sub(ix2, ix1);
    let iw = tape.relu(iwr);
    let iy2 = tape.minimum(ay2, by2);
    let iy1 = tape.maximum(ay1, by1);
    let ihr = tape.sub(iy2, iy1);
    let ih = tape.relu(ihr);
    let inter = tape.mul(iw, ih);

    let area_a = tape.mul(aw, ah);
    let area_b = tape.mul(bw, bh);
    let areas = tape.add(area_a, area_b);
    let union = tape.sub(areas, inter);

    let hx2 = tape.maximum(ax2, bx2);
    let hx1 = tape.minimum(ax1, bx1);
    let hw_ = tape.sub(hx2, hx1);
    let hy2 = tape.maximum(ay2, by2);
    let hy1 = tape.minimum(ay1, by1);
    let hh_ = tape.sub(hy2, hy1);
    let hull = tape.mul(hw_, hh_);

    let iou = tape.div(inter, union);
    let gap = tape.sub(hull, union);
    let pen = tape.div(gap, hull);
    tape.sub(iou, pen)
}

/// Focal loss on a scalar probability node. The probability is clamped to
/// [1e-7, 1 - 1e-7] before the logarithm.
pub fn focal_node(tape: &mut Tape, p: NodeId, target: bool, alpha: f64, gamma: f64) -> NodeId {
    assert_eq!(tape.value(p).numel(), 1, "focal loss takes a scalar probability");
    let lo = scalar_const(tape, FOCAL_CLAMP);
    let hi = scalar_const(tape, 1.0 - FOCAL_CLAMP);
    let p1 = tape.maximum(p, lo);
    let pc = tape.minimum(p1, hi);
    let one = scalar_const(tape, 1.0);
    if target {
        let omp = tape.sub(one, pc);
        let pw = tape.powf(omp, gamma);
        let lg = tape.ln(pc);
        let prod = tape.mul(pw, lg);
        tape.scale(prod, -alpha)
    } else {
        let pw = tape.powf(pc, gamma);
        let omp = tape.sub(one, pc);
        let lg = tape.ln(omp);
        let prod = tape.mul(pw, lg);
        tape.scale(prod, -(1.0 - alpha))
    }
}

/// L1 distance between two 1 x 4 box nodes.
pub fn l1_box_node(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.sum_all(ad)
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    match nodes.split_first() {
        None => scalar_const(tape, 0.0),
        Some((&first, rest)) => {
            let mut acc = first;
            for &n in rest {
                acc = tape.add(acc, n);
            }
            acc
        }
    }
}

// ── Ground-truth assignment ─────────────────────────────────────────────

/// Matching cost between one predicted entry and one ground-truth box:
/// `cls * (1 - o) + l1 * |b - b*|_1 + iou * (1 - giou)`.
pub fn match_cost(pred: &EntryPrediction, gt: &GtObject, w: &LossWeights) -> f64 {
    let l1: f64 = pred
        .bbox
        .iter()
        .zip(&gt.bbox)
        .map(|(a, b)| (a - b).abs())
        .sum();
    w.cls * (1.0 - pred.obj) + w.l1 * l1 + w.iou * (1.0 - giou_value(&pred.bbox, &gt.bbox))
}

/// Assign supervision targets to every entry of one frame.
///
/// Track entries are scored by whether their bound identity is visible.
/// Proposals are Hungarian-matched against all visible ground-truth boxes,
/// tracked or not; a match to an already-tracked identity is supervised as
/// suppressed (uniqueness 0), a match to an unseen identity as a new object,
/// and unmatched proposals as background.
pub fn assign_targets(
    entries: &[EntryPrediction],
    gt: &[GtObject],
    live_gt: &BTreeSet<u64>,
) -> Result<Vec<EntryTarget>> {
    let mut seen = BTreeSet::new();
    for g in gt {
        if !seen.insert(g.identity) {
            return Err(Error::Parse(format!(
                "duplicate ground-truth identity {} in frame",
                g.identity
            )));
        }
    }

    let visible: Vec<&GtObject> = gt.iter().filter(|g| g.visible).collect();
    let proposal_idx: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.source, EntrySource::Proposal(_)))
        .map(|(i, _)| i)
        .collect();

    // Hungarian over visible GT rows x proposal columns.
    let mut matched_for_prop: Vec<Option<&GtObject>> = vec![None; proposal_idx.len()];
    if !visible.is_empty() && !proposal_idx.is_empty() {
        let w = LossWeights::default();
        let mut cost = Vec::with_capacity(visible.len() * proposal_idx.len());
        for g in &visible {
            for &pi in &proposal_idx {
                cost.push(match_cost(&entries[pi], g, &w));
            }
        }
        for (gi, pi) in hungarian(&cost, visible.len(), proposal_idx.len()) {
            matched_for_prop[pi] = Some(visible[gi]);
        }
    }

    let mut targets = Vec::with_capacity(entries.len());
    let mut prop_cursor = 0usize;
    for e in entries {
        match e.source {
            EntrySource::Track { gt_identity, .. } => {
                let gt_obj = gt.iter().find(|g| g.identity == gt_identity && g.visible);
                match gt_obj {
                    Some(g) => targets.push(EntryTarget {
                        obj: true,
                        uni: true,
                        bbox: Some(g.bbox),
                        matched_gt: Some(g.identity),
                    }),
                    None => targets.push(EntryTarget {
                        obj: false,
                        uni: true,
                        bbox: None,
                        matched_gt: None,
                    }),
                }
            }
            EntrySource::Proposal(_) => {
                let m = matched_for_prop[prop_cursor];
                prop_cursor += 1;
                match m {
                    Some(g) if live_gt.contains(&g.identity) => targets.push(EntryTarget {
                        obj: true,
                        uni: false,
                        bbox: Some(g.bbox),
                        matched_gt: Some(g.identity),
                    }),
                    Some(g) => targets.push(EntryTarget {
                        obj: true,
                        uni: true,
                        bbox: Some(g.bbox),
                        matched_gt: Some(g.identity),
                    }),
                    None => targets.push(EntryTarget {
                        obj: false,
                        uni: true,
                        bbox: None,
                        matched_gt: None,
                    }),
                }
            }
        }
    }
    Ok(targets)
}

// ── Loss terms ──────────────────────────────────────────────────────────

/// Per-entry prediction nodes for loss evaluation. `uni` is absent in
/// single-confidence mode, which drops the uniqueness focal term.
#[derive(Clone, Copy, Debug)]
pub struct EntryNodes {
    pub obj: NodeId,
    pub uni: Option<NodeId>,
    pub bbox: NodeId,
}

/// Tracking loss summed over one frame's entries: focal terms on objectness
/// and uniqueness scaled by `cls`, plus L1 and (1 - GIoU) box terms wherever
/// a target box exists.
pub fn tracking_loss(
    tape: &mut Tape,
    entries: &[EntryNodes],
    targets: &[EntryTarget],
    w: &LossWeights,
) -> NodeId {
    assert_eq!(entries.len(), targets.len());
    let mut terms = Vec::new();
    for (e, t) in entries.iter().zip(targets) {
        let fo = focal_node(tape, e.obj, t.obj, w.focal_alpha, w.focal_gamma);
        let mut cls_term = fo;
        if let Some(uni) = e.uni {
            let fu = focal_node(tape, uni, t.uni, w.focal_alpha, w.focal_gamma);
            cls_term = tape.add(fo, fu);
        }
        terms.push(tape.scale(cls_term, w.cls));
        if let Some(gt_box) = t.bbox {
            let gtn = tape.constant(Tensor::matrix(1, 4, gt_box.to_vec()));
            let l1 = l1_box_node(tape, e.bbox, gtn);
            terms.push(tape.scale(l1, w.l1));
            let gi = giou_node(tape, e.bbox, gtn);
            let one = scalar_const(tape, 1.0);
            let gl = tape.sub(one, gi);
            terms.push(tape.scale(gl, w.iou));
        }
    }
    sum_nodes(tape, &terms)
}

/// Auxiliary detection loss over the proposal head outputs: its own
/// Hungarian matching of visible ground truth against the auxiliary
/// objectness/boxes, focal + L1 + (1 - GIoU) on matches, focal-to-zero on
/// the rest. No uniqueness term.
pub fn detection_loss(
    tape: &mut Tape,
    aux_obj: &[NodeId],
    aux_box: &[NodeId],
    gt: &[GtObject],
    w: &LossWeights,
) -> NodeId {
    assert_eq!(aux_obj.len(), aux_box.len());
    let visible: Vec<&GtObject> = gt.iter().filter(|g| g.visible).collect();
    let mut matched: Vec<Option<&GtObject>> = vec![None; aux_obj.len()];
    if !visible.is_empty() && !aux_obj.is_empty() {
        let mut cost = Vec::with_capacity(visible.len() * aux_obj.len());
        for g in &visible {
            for (o, b) in aux_obj.iter().zip(aux_box) {
                let pred = EntryPrediction {
                    source: EntrySource::Proposal(0),
                    obj: tape.value(*o).data[0],
                    bbox: [
                        tape.value(*b).data[0],
                        tape.value(*b).data[1],
                        tape.value(*b).data[2],
                        tape.value(*b).data[3],
                    ],
                };
                cost.push(match_cost(&pred, g, w));
            }
        }
        for (gi, pi) in hungarian(&cost, visible.len(), aux_obj.len()) {
            matched[pi] = Some(visible[gi]);
        }
    }
    let mut terms = Vec::new();
    for ((&o, &b), m) in aux_obj.iter().zip(aux_box).zip(&matched) {
        match m {
            Some(g) => {
                let fo = focal_node(tape, o, true, w.focal_alpha, w.focal_gamma);
                terms.push(tape.scale(fo, w.cls));
                let gtn = tape.constant(Tensor::matrix(1, 4, g.bbox.to_vec()));
                let l1 = l1_box_node(tape, b, gtn);
                terms.push(tape.scale(l1, w.l1));
                let gi = giou_node(tape, b, gtn);
                let one = scalar_const(tape, 1.0);
                let gl = tape.sub(one, gi);
                terms.push(tape.scale(gl, w.iou));
            }
            None => {
                let fo = focal_node(tape, o, false, w.focal_alpha, w.focal_gamma);
                terms.push(tape.scale(fo, w.cls));
            }
        }
    }
    sum_nodes(tape, &terms)
}

/// Clip loss: tracking losses summed over frames and entries, normalized by
/// the total visible-object count; detection losses averaged per frame with
/// a 1/N_t inner normalization. Frames with zero visible objects contribute
/// nothing to the detection average and are excluded from it; an all-empty
/// clip normalizes tracking by 1.
pub fn clip_loss(
    tape: &mut Tape,
    frame_tracking: &[NodeId],
    frame_detection: &[NodeId],
    object_counts: &[usize],
    w: &LossWeights,
) -> NodeId {
    assert!(!frame_tracking.is_empty(), "clip loss needs at least one frame");
    assert_eq!(frame_tracking.len(), frame_detection.len());
    assert_eq!(frame_tracking.len(), object_counts.len());

    let tck_sum = sum_nodes(tape, frame_tracking);
    let total: usize = object_counts.iter().sum();
    let tck_term = tape.scale(tck_sum, w.tck / total.max(1) as f64);

    let det_terms: Vec<NodeId> = frame_detection
        .iter()
        .zip(object_counts)
        .filter(|(_, &n)| n > 0)
        .map(|(&d, &n)| tape.scale(d, 1.0 / n as f64))
        .collect();
    if det_terms.is_empty() {
        return tck_term;
    }
    let det_sum = sum_nodes(tape, &det_terms);
    let det_term = tape.scale(det_sum, w.det / det_terms.len() as f64);
    tape.add(tck_term, det_term)
}
