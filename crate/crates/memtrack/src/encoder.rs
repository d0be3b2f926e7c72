//! Memory encoding: condense each track's memory window into one track
//! embedding through a short-term branch queried by the latest state, a
//! long-term branch queried by a dynamically updated aggregation token
//! (DMAT), and a fusion self-attention layer over the two branch outputs.
//! Pooling and single-branch variants exist as ablation modes.

use std::collections::BTreeMap;

use rand::Rng;

use crate::memory::{MemoryWindow, SpatioTemporalMemory, TrackId};
use crate::nn::{token_init, Attention, EncoderLayer};
use crate::tensor::{Bindings, NodeId, ParamStore, PId, Tape, Tensor};

/// What queries each cross-attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// The track's most recent present state.
    Latest,
    /// A learned token: the DMAT for the long branch, a dedicated learned
    /// token for the short branch.
    Learned,
}

/// Memory aggregation strategy. `Attention` is the full short/long/fusion
/// design; the rest reproduce ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Attention {
        short_query: QuerySource,
        long_query: QuerySource,
    },
    /// Arithmetic mean of the present states in the long window.
    AvgPool,
    /// The present state with the largest norm in the long window.
    MaxNormPool,
    /// One cross-attention over the long window queried by the latest state.
    SingleAttention,
    /// The short-branch output queries the long window.
    LongAfterShort,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::Attention {
            short_query: QuerySource::Latest,
            long_query: QuerySource::Learned,
        }
    }
}

/// Per-track dynamic memory aggregation token.
#[derive(Clone, Debug)]
pub struct DmatEntry {
    pub data: Vec<f64>,
    pub node: Option<NodeId>,
}

/// DMAT bank, one entry per live track. Newborn tracks start from the one
/// shared learned token.
#[derive(Clone, Debug, Default)]
pub struct DmatState {
    entries: BTreeMap<TrackId, DmatEntry>,
}

impl DmatState {
    pub fn init_track(&mut self, id: TrackId, data: Vec<f64>, node: Option<NodeId>) {
        self.entries.insert(id, DmatEntry { data, node });
    }

    pub fn get(&self, id: TrackId) -> Option<&DmatEntry> {
        self.entries.get(&id)
    }

    pub fn remove(&mut self, id: TrackId) {
        self.entries.remove(&id);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<TrackId> {
        self.entries.keys().copied().collect()
    }

    pub fn clear_nodes(&mut self) {
        for e in self.entries.values_mut() {
            e.node = None;
        }
    }

    fn update(&mut self, id: TrackId, data: Vec<f64>, node: Option<NodeId>) {
        self.entries.insert(id, DmatEntry { data, node });
    }
}

/// Attention weights recorded for one track at one step, for inspection
/// exports: (memory frame, weight) pairs per branch.
#[derive(Clone, Debug, Default)]
pub struct TrackTrace {
    pub track: TrackId,
    pub short: Vec<(u64, f64)>,
    pub long: Vec<(u64, f64)>,
}

pub struct EncodeOptions {
    pub t_s: usize,
    pub t_l: usize,
    pub aggregation: Aggregation,
    /// When false the DMAT stays frozen at the shared initial token.
    pub dmat_update: bool,
    pub trace: bool,
}

pub struct EncodeOutput {
    /// Live tracks in allocation order, one row of `q_tck` each.
    pub order: Vec<TrackId>,
    /// N_tck x d track embeddings; None when there are no live tracks.
    pub q_tck: Option<NodeId>,
    pub traces: Vec<TrackTrace>,
}

pub struct MemoryEncoder {
    pub short: Attention,
    pub long: Attention,
    pub fusion: EncoderLayer,
    pub dmat_init: PId,
    pub slot_enc: PId,
    pub short_token: PId,
    pub d: usize,
}

impl MemoryEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, heads: usize, d_ff: usize) -> Self {
        MemoryEncoder {
            short: Attention::new(store, rng, "enc.short", d, heads),
            long: Attention::new(store, rng, "enc.long", d, heads),
            fusion: EncoderLayer::new(store, rng, "enc.fusion", d, heads, d_ff),
            dmat_init: store.add("enc.dmat_init", token_init(rng, 1, d)),
            slot_enc: store.add("enc.slot_enc", token_init(rng, 2, d)),
            short_token: store.add("enc.short_token", token_init(rng, 1, d)),
            d,
        }
    }

    /// The shared initial DMAT value for newborn tracks, with its node when
    /// a training tape is active.
    pub fn dmat_seed(&self, bind: &Bindings, store: &ParamStore) -> (Vec<f64>, Option<NodeId>) {
        let data = store.value(self.dmat_init).data.clone();
        let node = bind.trainable.then(|| bind.node(self.dmat_init));
        (data, node)
    }

    /// Short-term aggregation: cross-attention of a 1 x d query over the
    /// window rows, absent slots masked.
    pub fn aggregate_short(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        query: NodeId,
        window: NodeId,
        mask: &[bool],
        weights: Option<&mut Vec<f64>>,
    ) -> NodeId {
        match weights {
            Some(w) => self
                .short
                .forward_with_weights(tape, bind, query, window, window, Some(mask), w),
            None => self.short.forward(tape, bind, query, window, window, Some(mask)),
        }
    }

    /// Long-term aggregation over the long window.
    pub fn aggregate_long(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        query: NodeId,
        window: NodeId,
        mask: &[bool],
        weights: Option<&mut Vec<f64>>,
    ) -> NodeId {
        match weights {
            Some(w) => self
                .long
                .forward_with_weights(tape, bind, query, window, window, Some(mask), w),
            None => self.long.forward(tape, bind, query, window, window, Some(mask)),
        }
    }

    /// Fuse the branch tokens through one self-attention layer with learned
    /// slot encodings. Row 0 becomes the track embedding, row 1 the updated
    /// DMAT.
    pub fn fuse(&self, tape: &mut Tape, bind: &Bindings, ast: NodeId, alt: NodeId) -> (NodeId, NodeId) {
        let tokens = tape.concat_rows(&[ast, alt]);
        let fused = self.fusion.forward(tape, bind, tokens, bind.node(self.slot_enc));
        let track = tape.slice_rows(fused, 0, 1);
        let dmat = tape.slice_rows(fused, 1, 1);
        (track, dmat)
    }

    /// Encode every live track independently, in allocation order, updating
    /// the DMAT bank in place.
    pub fn encode_all(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        memory: &SpatioTemporalMemory,
        dmat: &mut DmatState,
        opts: &EncodeOptions,
    ) -> EncodeOutput {
        assert!(opts.t_s >= 1 && opts.t_s <= opts.t_l, "need 1 <= t_s <= t_l");
        let order = memory.live_ids();
        let mut rows = Vec::with_capacity(order.len());
        let mut traces = Vec::new();
        for &id in &order {
            let (embed, trace) = self.encode_track(tape, bind, memory, dmat, id, opts);
            rows.push(embed);
            if let Some(t) = trace {
                traces.push(t);
            }
        }
        EncodeOutput {
            order,
            q_tck: (!rows.is_empty()).then(|| tape.concat_rows(&rows)),
            traces,
        }
    }

    fn encode_track(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        memory: &SpatioTemporalMemory,
        dmat: &mut DmatState,
        id: TrackId,
        opts: &EncodeOptions,
    ) -> (NodeId, Option<TrackTrace>) {
        let long = window_node(tape, memory, id, opts.t_l);
        let latest = latest_present_node(tape, memory, id);

        match opts.aggregation {
            Aggregation::AvgPool => {
                let present: Vec<usize> = long
                    .mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| i)
                    .collect();
                if present.is_empty() {
                    return (latest, None);
                }
                let rows: Vec<NodeId> = present
                    .iter()
                    .map(|&i| tape.slice_rows(long.node, i, 1))
                    .collect();
                let stacked = tape.concat_rows(&rows);
                (tape.mean_rows(stacked), None)
            }
            Aggregation::MaxNormPool => {
                let mut best: Option<(f64, usize)> = None;
                for (i, &m) in long.mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &tape.value(long.node).data[i * self.d..(i + 1) * self.d];
                    let norm = row.iter().map(|v| v * v).sum::<f64>();
                    if best.map_or(true, |(b, _)| norm > b) {
                        best = Some((norm, i));
                    }
                }
                match best {
                    Some((_, i)) => (tape.slice_rows(long.node, i, 1), None),
                    None => (latest, None),
                }
            }
            Aggregation::SingleAttention => {
                let out = self.aggregate_short(tape, bind, latest, long.node, &long.mask, None);
                (out, None)
            }
            Aggregation::Attention { short_query, long_query } => {
                let short = window_node(tape, memory, id, opts.t_s);
                let mut trace = opts.trace.then(TrackTrace::default);
                let mut short_w = Vec::new();
                let mut long_w = Vec::new();

                let short_q = match short_query {
                    QuerySource::Latest => latest,
                    QuerySource::Learned => bind.node(self.short_token),
                };
                let ast = self.aggregate_short(
                    tape,
                    bind,
                    short_q,
                    short.node,
                    &short.mask,
                    trace.is_some().then_some(&mut short_w),
                );

                let long_q = match long_query {
                    QuerySource::Latest => latest,
                    QuerySource::Learned => dmat_node(tape, dmat, id),
                };
                let alt = self.aggregate_long(
                    tape,
                    bind,
                    long_q,
                    long.node,
                    &long.mask,
                    trace.is_some().then_some(&mut long_w),
                );

                let (track_embed, new_dmat) = self.fuse(tape, bind, ast, alt);
                if opts.dmat_update && long_query == QuerySource::Learned {
                    dmat.update(
                        id,
                        tape.value(new_dmat).data.clone(),
                        bind.trainable.then_some(new_dmat),
                    );
                }
                if let Some(t) = trace.as_mut() {
                    t.track = id;
                    t.short = zip_weights(&short_w, &short.frames);
                    t.long = zip_weights(&long_w, &long.frames);
                }
                (track_embed, trace)
            }
            Aggregation::LongAfterShort => {
                let short = window_node(tape, memory, id, opts.t_s);
                let ast = self.aggregate_short(tape, bind, latest, short.node, &short.mask, None);
                let alt = self.aggregate_long(tape, bind, ast, long.node, &long.mask, None);
                let (track_embed, _) = self.fuse(tape, bind, ast, alt);
                (track_embed, None)
            }
        }
    }
}

struct WindowNode {
    node: NodeId,
    mask: Vec<bool>,
    frames: Vec<Option<u64>>,
}

/// Materialize a memory window on the tape, reusing training-time nodes
/// where present so gradients flow back through earlier writes. A window
/// with no present slot falls back to the most recent present state, which
/// keeps the branch queryable through long occlusions.
fn window_node(tape: &mut Tape, memory: &SpatioTemporalMemory, id: TrackId, len: usize) -> WindowNode {
    let w: MemoryWindow = memory.window(id, len).expect("window of a live track");
    if w.mask.iter().any(|&m| m) {
        let rows: Vec<NodeId> = (0..len)
            .map(|i| match w.nodes[i] {
                Some(n) => n,
                None => tape.constant(Tensor::matrix(1, w.d, w.embeds[i * w.d..(i + 1) * w.d].to_vec())),
            })
            .collect();
        WindowNode {
            node: tape.concat_rows(&rows),
            mask: w.mask,
            frames: w.frames,
        }
    } else {
        let node = latest_present_node(tape, memory, id);
        let frame = memory
            .latest_present(id)
            .ok()
            .flatten()
            .map(|s| s.frame);
        WindowNode {
            node,
            mask: vec![true],
            frames: vec![frame],
        }
    }
}

fn latest_present_node(tape: &mut Tape, memory: &SpatioTemporalMemory, id: TrackId) -> NodeId {
    let state = memory
        .latest_present(id)
        .expect("live track")
        .expect("track retired before its history emptied");
    match state.node {
        Some(n) => n,
        None => tape.constant(Tensor::matrix(1, state.embed.len(), state.embed)),
    }
}

fn dmat_node(tape: &mut Tape, dmat: &DmatState, id: TrackId) -> NodeId {
    let entry = dmat.get(id).expect("DMAT entry for every live track");
    match entry.node {
        Some(n) => n,
        None => tape.constant(Tensor::matrix(1, entry.data.len(), entry.data.clone())),
    }
}

fn zip_weights(weights: &[f64], frames: &[Option<u64>]) -> Vec<(u64, f64)> {
    weights
        .iter()
        .zip(frames)
        .filter_map(|(&w, f)| f.map(|frame| (frame, w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const D: usize = 4;

    fn setup() -> (ParamStore, MemoryEncoder) {
        let mut rng = StdRng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = MemoryEncoder::new(&mut store, &mut rng, D, 2, 8);
        (store, enc)
    }

    fn opts() -> EncodeOptions {
        EncodeOptions {
            t_s: 3,
            t_l: 5,
            aggregation: Aggregation::default(),
            dmat_update: true,
            trace: false,
        }
    }

    fn filled_memory(rng: &mut StdRng, tracks: usize, steps: u64) -> (SpatioTemporalMemory, DmatState) {
        let mut mem = SpatioTemporalMemory::new(8, 6, D);
        let mut dmat = DmatState::default();
        for _ in 0..tracks {
            let id = mem.allocate_track().unwrap();
            dmat.init_track(id, vec![0.1; D], None);
            for f in 0..steps {
                let embed: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
                mem.append(id, f, embed, None).unwrap();
            }
        }
        (mem, dmat)
    }

    #[test]
    fn zero_tracks_produce_empty_output() {
        let (store, enc) = setup();
        let mem = SpatioTemporalMemory::new(4, 6, D);
        let mut dmat = DmatState::default();
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let out = enc.encode_all(&mut tape, &bind, &mem, &mut dmat, &opts());
        assert!(out.order.is_empty());
        assert!(out.q_tck.is_none());
    }

    #[test]
    fn single_track_yields_one_row() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(4);
        let (mem, mut dmat) = filled_memory(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let out = enc.encode_all(&mut tape, &bind, &mem, &mut dmat, &opts());
        assert_eq!(out.order, vec![0]);
        assert_eq!(tape.shape(out.q_tck.unwrap()), (1, D));
    }

    #[test]
    fn per_track_independence_is_bitwise() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(5);
        let (mem, dmat0) = filled_memory(&mut rng, 3, 5);

        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let mut dmat_all = dmat0.clone();
        let all = enc.encode_all(&mut tape, &bind, &mem, &mut dmat_all, &opts());
        let all_rows = tape.value(all.q_tck.unwrap()).data.clone();

        // Re-encode each track in isolation on its own memory copy.
        for (i, id) in all.order.iter().enumerate() {
            let mut solo_mem = mem.clone();
            for other in mem.live_ids() {
                if other != *id {
                    solo_mem.retire(other).unwrap();
                }
            }
            let mut tape2 = Tape::new();
            let bind2 = store.bind_all(&mut tape2, false);
            let mut dmat2 = dmat0.clone();
            let solo = enc.encode_all(&mut tape2, &bind2, &solo_mem, &mut dmat2, &opts());
            let row = tape2.value(solo.q_tck.unwrap()).data.clone();
            assert_eq!(&all_rows[i * D..(i + 1) * D], row.as_slice());
        }
    }

    #[test]
    fn newborn_track_uses_shared_initial_token_and_single_state() {
        let (store, enc) = setup();
        let mut mem = SpatioTemporalMemory::new(4, 6, D);
        let mut dmat = DmatState::default();
        let id = mem.allocate_track().unwrap();
        let state = vec![0.3, -0.2, 0.5, 0.1];
        mem.append(id, 0, state.clone(), None).unwrap();
        let seed = store.value(enc.dmat_init).data.clone();
        dmat.init_track(id, seed.clone(), None);

        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let out = enc.encode_all(&mut tape, &bind, &mem, &mut dmat, &opts());
        let got = tape.value(out.q_tck.unwrap()).data.clone();

        // Oracle: single-key attention on the lone state from both branches,
        // fused. AST and ALT are each OutProj(ValueProj(state)).
        let sn = tape.constant(Tensor::matrix(1, D, state));
        let qn = tape.constant(Tensor::matrix(1, D, seed));
        let ast = enc.short.forward(&mut tape, &bind, sn, sn, sn, None);
        let alt = enc.long.forward(&mut tape, &bind, qn, sn, sn, None);
        let (expect, _) = enc.fuse(&mut tape, &bind, ast, alt);
        assert_eq!(got, tape.value(expect).data);
    }

    #[test]
    fn identical_present_states_equal_single_state_attention() {
        let (store, enc) = setup();
        let mut mem = SpatioTemporalMemory::new(4, 6, D);
        let state = vec![0.4, 0.1, -0.3, 0.2];
        let id = mem.allocate_track().unwrap();
        for f in 0..3 {
            mem.append(id, f, state.clone(), None).unwrap();
        }
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let w3 = window_node(&mut tape, &mem, id, 3);
        let latest = latest_present_node(&mut tape, &mem, id);
        let got = enc.aggregate_short(&mut tape, &bind, latest, w3.node, &w3.mask, None);
        let single = enc.short.forward(&mut tape, &bind, latest, latest, latest, None);
        for (a, b) in tape.value(got).data.iter().zip(&tape.value(single).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_history_slots_do_not_contribute() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(6);
        let query: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut window: Vec<f64> = (0..3 * D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = vec![true, false, true];

        let run = |window: &[f64]| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let q = tape.constant(Tensor::matrix(1, D, query.clone()));
            let w = tape.constant(Tensor::matrix(3, D, window.to_vec()));
            let short = enc.aggregate_short(&mut tape, &bind, q, w, &mask, None);
            let long = enc.aggregate_long(&mut tape, &bind, q, w, &mask, None);
            (tape.value(short).data.clone(), tape.value(long).data.clone())
        };
        let before = run(&window);
        for v in window[D..2 * D].iter_mut() {
            *v += 42.0; // poke the masked middle slot
        }
        let after = run(&window);
        assert_eq!(before, after);
    }

    #[test]
    fn fully_masked_window_falls_back_to_latest_present() {
        let (store, enc) = setup();
        let mut mem = SpatioTemporalMemory::new(4, 8, D);
        let id = mem.allocate_track().unwrap();
        let state = vec![0.7, -0.1, 0.2, 0.0];
        mem.append(id, 0, state.clone(), None).unwrap();
        for f in 1..=3 {
            mem.append_absent(id, f).unwrap();
        }
        let mut dmat = DmatState::default();
        dmat.init_track(id, vec![0.0; D], None);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        // Short window of the last 3 slots is fully absent.
        let raw = mem.window(id, 3).unwrap();
        assert!(raw.mask.iter().all(|&m| !m));
        let out = enc.encode_all(
            &mut tape,
            &bind,
            &mem,
            &mut dmat,
            &EncodeOptions { t_s: 3, t_l: 8, ..opts() },
        );
        assert!(out.q_tck.is_some(), "occluded track must still encode");
    }

    #[test]
    fn fuse_swapping_slot_encodings_swaps_roles() {
        let (mut store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(8);
        let a: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |store: &ParamStore, x: &[f64], y: &[f64]| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let xn = tape.constant(Tensor::matrix(1, D, x.to_vec()));
            let yn = tape.constant(Tensor::matrix(1, D, y.to_vec()));
            let (track, dmat) = enc.fuse(&mut tape, &bind, xn, yn);
            (tape.value(track).data.clone(), tape.value(dmat).data.clone())
        };
        let (track1, dmat1) = run(&store, &a, &b);
        // Swap the two slot encodings and the two inputs: outputs swap.
        let old = store.value(enc.slot_enc).clone();
        let mut swapped = old.data[D..].to_vec();
        swapped.extend_from_slice(&old.data[..D]);
        store.value_mut(enc.slot_enc).data = swapped;
        let (track2, dmat2) = run(&store, &b, &a);
        for (x, y) in track1.iter().zip(&dmat2) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in dmat1.iter().zip(&track2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_composed_primitives() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(9);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let a = tape.constant(Tensor::matrix(1, D, (0..D).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let b = tape.constant(Tensor::matrix(1, D, (0..D).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let (track, dmat) = enc.fuse(&mut tape, &bind, a, b);
        assert_eq!(tape.shape(track), (1, D));
        assert_eq!(tape.shape(dmat), (1, D));
        let tokens = tape.concat_rows(&[a, b]);
        let fused = enc.fusion.forward(&mut tape, &bind, tokens, bind.node(enc.slot_enc));
        let expect_track = tape.slice_rows(fused, 0, 1);
        assert_eq!(tape.value(track).data, tape.value(expect_track).data);
    }

    #[test]
    fn random_windows_match_dense_attention_oracle() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(10);
        let (mem, _) = filled_memory(&mut rng, 1, 5);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let w = window_node(&mut tape, &mem, 0, 3);
        let latest = latest_present_node(&mut tape, &mem, 0);
        let got = enc.aggregate_short(&mut tape, &bind, latest, w.node, &w.mask, None);
        // Oracle: the same dense formula through the generic attention.
        let expect = enc.short.forward(&mut tape, &bind, latest, w.node, w.node, Some(&w.mask));
        assert_eq!(tape.value(got).data, tape.value(expect).data);

        let w5 = window_node(&mut tape, &mem, 0, 5);
        let dq = tape.constant(Tensor::matrix(1, D, vec![0.2; D]));
        let got_l = enc.aggregate_long(&mut tape, &bind, dq, w5.node, &w5.mask, None);
        let expect_l = enc.long.forward(&mut tape, &bind, dq, w5.node, w5.node, Some(&w5.mask));
        assert_eq!(tape.value(got_l).data, tape.value(expect_l).data);
    }

    #[test]
    fn dmat_update_changes_second_step_outputs() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(11);
        let run = |update: bool| {
            let mut mem = SpatioTemporalMemory::new(4, 6, D);
            let mut dmat = DmatState::default();
            let id = mem.allocate_track().unwrap();
            dmat.init_track(id, store.value(enc.dmat_init).data.clone(), None);
            let mut rng2 = StdRng::seed_from_u64(99);
            let mut last = Vec::new();
            for f in 0..2 {
                mem.append(id, f, (0..D).map(|_| rng2.random_range(-1.0..1.0)).collect(), None).unwrap();
                let mut tape = Tape::new();
                let bind = store.bind_all(&mut tape, false);
                let out = enc.encode_all(
                    &mut tape,
                    &bind,
                    &mem,
                    &mut dmat,
                    &EncodeOptions { dmat_update: update, ..opts() },
                );
                last = tape.value(out.q_tck.unwrap()).data.clone();
            }
            last
        };
        let _ = &mut rng;
        let with_update = run(true);
        let frozen = run(false);
        assert_ne!(with_update, frozen, "freezing the DMAT must change step-2 output");
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(12);
        let (mem, dmat) = filled_memory(&mut rng, 2, 4);
        let run = || {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let mut dm = dmat.clone();
            let out = enc.encode_all(&mut tape, &bind, &mem, &mut dm, &opts());
            tape.value(out.q_tck.unwrap()).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pooling_modes_produce_track_rows() {
        let (store, enc) = setup();
        let mut rng = StdRng::seed_from_u64(13);
        let (mem, dmat) = filled_memory(&mut rng, 2, 4);
        for mode in [Aggregation::AvgPool, Aggregation::MaxNormPool, Aggregation::SingleAttention, Aggregation::LongAfterShort] {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let mut dm = dmat.clone();
            let out = enc.encode_all(
                &mut tape,
                &bind,
                &mem,
                &mut dm,
                &EncodeOptions { aggregation: mode, ..opts() },
            );
            assert_eq!(tape.shape(out.q_tck.unwrap()), (2, D), "{mode:?}");
        }
    }

    #[test]
    fn avg_pool_is_mean_of_present_states() {
        let (store, enc) = setup();
        let mut mem = SpatioTemporalMemory::new(4, 6, D);
        let id = mem.allocate_track().unwrap();
        mem.append(id, 0, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        mem.append_absent(id, 1).unwrap();
        mem.append(id, 2, vec![3.0, 4.0, 5.0, 6.0], None).unwrap();
        let mut dmat = DmatState::default();
        dmat.init_track(id, vec![0.0; D], None);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let out = enc.encode_all(
            &mut tape,
            &bind,
            &mem,
            &mut dmat,
            &EncodeOptions { aggregation: Aggregation::AvgPool, ..opts() },
        );
        assert_eq!(tape.value(out.q_tck.unwrap()).data, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn encoder_branch_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let enc = MemoryEncoder::new(&mut store, &mut rng, D, 2, 8);
        let n_params = store.total_elems();
        let window_len = 3;
        let mut point = store.flatten();
        point.extend((0..(window_len + 1) * D).map(|_| rng.random_range(-1.0..1.0)));
        let mask = vec![true, false, true];
        let err = check_gradients(
            |t, flat| {
                let params = t.slice_cols(flat, 0, n_params);
                let bind = store.bind_from_flat(t, params);
                let q = t.slice_cols(flat, n_params, D);
                let w = t.slice_cols(flat, n_params + D, window_len * D);
                let w = t.reshape(w, window_len, D);
                let ast = enc.aggregate_short(t, &bind, q, w, &mask, None);
                let alt = enc.aggregate_long(t, &bind, q, w, &mask, None);
                let (track, dmat) = enc.fuse(t, &bind, ast, alt);
                let both = t.concat_rows(&[track, dmat]);
                let sq = t.mul(both, both);
                t.sum_all(sq)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }
}
