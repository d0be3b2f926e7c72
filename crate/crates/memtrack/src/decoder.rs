//! Memory decoding: proposals and track embeddings jointly query the
//! encoded frame, then per-entry heads predict a box anchored at a
//! reference point, an objectness score, a uniqueness score, and the
//! unified confidence (their product). `select` turns scored entries into
//! track updates, births, and discards.

use rand::Rng;

use crate::hypothesis::{anchor_query_pos, spread_anchor_logits};
use crate::memory::TrackId;
use crate::nn::{sinusoidal_point, sinusoidal_positions, DecoderLayer, Linear, Mlp};
use crate::runtime::TrackerState;
use crate::tensor::{Bindings, NodeId, ParamStore, PId, Tape, Tensor};

/// Provenance of one decoded entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryOrigin {
    Proposal(usize),
    Track(TrackId),
}

/// One decoded entry with both tape nodes (for losses) and plain values
/// (for thresholds and export). The confidence is exactly `obj * uni`. The
/// center logits become the entry's reference point in the next frame when
/// it continues as a track.
#[derive(Clone, Debug)]
pub struct DecodedEntry {
    pub origin: EntryOrigin,
    pub embed: NodeId,
    pub bbox_node: NodeId,
    pub obj_node: NodeId,
    pub uni_node: Option<NodeId>,
    pub center_logit_node: NodeId,
    pub center_logit: [f64; 2],
    pub bbox: [f64; 4],
    pub obj: f64,
    pub uni: f64,
    pub score: f64,
}

/// Outcome counts of one selection pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionSummary {
    pub updates: Vec<TrackId>,
    pub births: Vec<TrackId>,
    /// Track entries below threshold, written to memory as absent.
    pub absents: Vec<TrackId>,
    /// Proposals below threshold.
    pub discarded: usize,
    /// Births dropped because the track buffer was full.
    pub dropped_births: usize,
}

pub struct MemoryDecoder {
    pub layers: Vec<DecoderLayer>,
    /// Learned proposal reference anchors (logits of normalized x, y); kept
    /// separate from the hypothesis generator's anchors.
    pub prop_ref_logits: PId,
    pub box_head: Mlp,
    pub obj_head: Linear,
    pub uni_head: Linear,
    pub d: usize,
    pub n_pro: usize,
}

const MIN_BOX_EXTENT: f64 = 1e-6;

impl MemoryDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
        n_pro: usize,
    ) -> Self {
        MemoryDecoder {
            layers: (0..layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("dec.layer{i}"), d, heads, d_ff))
                .collect(),
            prop_ref_logits: store.add("dec.prop_ref_logits", spread_anchor_logits(n_pro)),
            box_head: Mlp::new(store, rng, "dec.box_head", d, d, 4),
            obj_head: Linear::new(store, rng, "dec.obj_head", d, 1),
            uni_head: Linear::new(store, rng, "dec.uni_head", d, 1),
            d,
            n_pro,
        }
    }

    /// All reference logits for one frame: the learned proposal anchors
    /// followed by the live tracks' carried logits.
    pub fn ref_logits_all(&self, tape: &mut Tape, bind: &Bindings, track_refs: Option<NodeId>) -> NodeId {
        let prop = bind.node(self.prop_ref_logits);
        match track_refs {
            Some(t) => {
                assert_eq!(tape.shape(t).1, 2, "track reference logits must be n x 2");
                tape.concat_rows(&[prop, t])
            }
            None => prop,
        }
    }

    /// Joint decoding: the concatenated proposal and track queries
    /// self-attend (inter-object relations) and cross-attend into the
    /// encoded frame. Every query position is the sinusoidal embedding of
    /// its reference point: learned anchors for proposals, the previous
    /// predicted box center for tracks.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        q_pro: NodeId,
        q_tck: Option<NodeId>,
        z1: NodeId,
        grid_h: usize,
        grid_w: usize,
        ref_logits: NodeId,
    ) -> NodeId {
        assert!(self.n_pro >= 1, "decoder needs at least one proposal query");
        assert_eq!(tape.shape(q_pro), (self.n_pro, self.d));
        let queries = match q_tck {
            Some(tck) => {
                assert_eq!(tape.shape(tck).1, self.d);
                tape.concat_rows(&[q_pro, tck])
            }
            None => q_pro,
        };
        assert_eq!(
            tape.shape(ref_logits).0,
            tape.shape(queries).0,
            "one reference point per query"
        );
        let query_pos = anchor_query_pos(tape, ref_logits, grid_h, grid_w, self.d);
        let mem_pos = tape.constant(sinusoidal_positions(grid_h, grid_w, self.d));
        let mut x = queries;
        for layer in &self.layers {
            x = layer.forward(tape, bind, x, query_pos, z1, mem_pos, None);
        }
        x
    }

    /// Head pass: boxes as sigmoid of reference logit plus predicted
    /// offsets, objectness and uniqueness through their own heads, and the
    /// unified confidence as their product. In single-score mode the
    /// uniqueness head is unused and uniqueness is exactly 1.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        q_hat: NodeId,
        track_ids: &[TrackId],
        ref_logits: NodeId,
        single_score: bool,
    ) -> Vec<DecodedEntry> {
        let (n, _) = tape.shape(q_hat);
        assert_eq!(n, self.n_pro + track_ids.len());
        assert_eq!(tape.shape(ref_logits), (n, 2));

        let offsets = self.box_head.forward(tape, bind, q_hat);
        let xy_off = tape.slice_cols(offsets, 0, 2);
        let wh_off = tape.slice_cols(offsets, 2, 2);
        let center_logits = tape.add(xy_off, ref_logits);
        let centers = tape.sigmoid(center_logits);
        let sizes_raw = tape.sigmoid(wh_off);
        let floor = tape.constant(Tensor::matrix(n, 2, vec![MIN_BOX_EXTENT; n * 2]));
        let sizes = tape.maximum(sizes_raw, floor);
        let boxes = tape.concat_cols(&[centers, sizes]);

        let obj_logits = self.obj_head.forward(tape, bind, q_hat);
        let obj = tape.sigmoid(obj_logits);
        let uni = if single_score {
            None
        } else {
            let uni_logits = self.uni_head.forward(tape, bind, q_hat);
            Some(tape.sigmoid(uni_logits))
        };

        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let origin = if i < self.n_pro {
                EntryOrigin::Proposal(i)
            } else {
                EntryOrigin::Track(track_ids[i - self.n_pro])
            };
            let embed = tape.slice_rows(q_hat, i, 1);
            let bbox_node = tape.slice_rows(boxes, i, 1);
            let obj_node = tape.slice_rows(obj, i, 1);
            let uni_node = uni.map(|u| tape.slice_rows(u, i, 1));
            let center_logit_node = tape.slice_rows(center_logits, i, 1);
            let cl = tape.value(center_logit_node);
            let center_logit = [cl.data[0], cl.data[1]];
            let bbox_v = tape.value(bbox_node);
            let bbox = [bbox_v.data[0], bbox_v.data[1], bbox_v.data[2], bbox_v.data[3]];
            let o = tape.value(obj_node).data[0];
            let u = uni_node.map_or(1.0, |un| tape.value(un).data[0]);
            entries.push(DecodedEntry {
                origin,
                embed,
                bbox_node,
                obj_node,
                uni_node,
                center_logit_node,
                center_logit,
                bbox,
                obj: o,
                uni: u,
                score: o * u,
            });
        }
        entries
    }
}

/// Threshold entries into tracker-state mutations: confident track entries
/// extend their trajectory and memory, unconfident ones write an absent
/// slot; confident proposals become new tracks; the rest is dropped with no
/// further post-processing. A full track buffer downgrades a birth to a
/// warning and drops the entry.
pub fn select(
    tape: &Tape,
    entries: &[DecodedEntry],
    state: &mut TrackerState,
    dmat_seed: &(Vec<f64>, Option<NodeId>),
    eps_pro: f64,
    eps_tck: f64,
) -> crate::error::Result<SelectionSummary> {
    let frame = state.frame;
    let mut summary = SelectionSummary::default();
    for e in entries {
        match e.origin {
            EntryOrigin::Track(id) => {
                if e.score >= eps_tck {
                    let embed = tape.value(e.embed).data.clone();
                    state.record_update(id, frame, e, embed, Some(e.embed))?;
                    summary.updates.push(id);
                } else {
                    state.record_absent(id, frame)?;
                    summary.absents.push(id);
                }
            }
            EntryOrigin::Proposal(_) => {
                if e.score >= eps_pro {
                    let embed = tape.value(e.embed).data.clone();
                    match state.birth(frame, e, embed, Some(e.embed), None, dmat_seed.0.clone(), dmat_seed.1)
                    {
                        Ok(id) => summary.births.push(id),
                        Err(err) => {
                            eprintln!("warning: dropping birth at frame {frame}: {err}");
                            summary.dropped_births += 1;
                        }
                    }
                } else {
                    summary.discarded += 1;
                }
            }
        }
    }
    Ok(summary)
}
