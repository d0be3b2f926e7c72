//! Tracker orchestration: per-frame inference steps over a sequence and
//! clip-centric training with gradient flow through the memory rollout.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::decoder::{select, DecodedEntry, EntryOrigin, SelectionSummary};
use crate::encoder::{DmatState, EncodeOptions, TrackTrace};
use crate::error::Result;
use crate::losses::{
    assign_targets, clip_loss, detection_loss, tracking_loss, EntryNodes, EntryPrediction,
    EntrySource, EntryTarget, LossWeights,
};
use crate::memory::{SpatioTemporalMemory, TrackId};
use crate::metrics::TrackSeq;
use crate::model::Model;
use crate::synth::{flip_horizontal, GtFrame, Image};
use crate::tensor::{AdamW, Bindings, NodeId, ParamStore, Tape};

/// One output record of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub frame: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Ordered per-identity output records; append-only, frames strictly
/// increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub identity: TrackId,
    pub records: Vec<TrajectoryRecord>,
}

/// Per-track runtime bookkeeping beyond the memory ring.
#[derive(Clone, Debug)]
pub struct TrackInfo {
    /// Ground-truth identity this track is bound to (training only).
    pub gt_identity: Option<u64>,
    /// Last predicted box.
    pub last_box: [f64; 4],
    /// Center logits of the last confident prediction: the reference point
    /// for the next frame's track query.
    pub ref_logit: [f64; 2],
    /// Tape node of those logits during a training rollout, so reference
    /// propagation stays differentiable across frames.
    pub ref_node: Option<NodeId>,
    pub absent_streak: usize,
}

/// All mutable tracker state for one sequence: the memory buffer, the DMAT
/// bank, per-track info, trajectories, and the frame counter. Live memory
/// tracks and DMAT entries stay one-to-one because every mutation goes
/// through the methods here.
#[derive(Clone)]
pub struct TrackerState {
    pub memory: SpatioTemporalMemory,
    pub dmat: DmatState,
    pub info: BTreeMap<TrackId, TrackInfo>,
    pub trajectories: BTreeMap<TrackId, Trajectory>,
    pub frame: u64,
    pub patience: usize,
}

impl TrackerState {
    pub fn new(n_max: usize, t_max: usize, d: usize, patience: usize) -> Self {
        TrackerState {
            memory: SpatioTemporalMemory::new(n_max, t_max, d),
            dmat: DmatState::default(),
            info: BTreeMap::new(),
            trajectories: BTreeMap::new(),
            frame: 0,
            patience,
        }
    }

    /// Reference logits for live tracks in the given order, as one n x 2
    /// node; reuses training-time nodes where available.
    pub fn track_ref_node(&self, tape: &mut Tape, order: &[TrackId]) -> Option<NodeId> {
        if order.is_empty() {
            return None;
        }
        let rows: Vec<NodeId> = order
            .iter()
            .map(|id| {
                let info = &self.info[id];
                match info.ref_node {
                    Some(n) => n,
                    None => tape.constant(crate::tensor::Tensor::matrix(
                        1,
                        2,
                        info.ref_logit.to_vec(),
                    )),
                }
            })
            .collect();
        Some(tape.concat_rows(&rows))
    }

    /// Ground-truth identities bound to live tracks (training).
    pub fn live_gt_identities(&self) -> std::collections::BTreeSet<u64> {
        self.memory
            .live_ids()
            .iter()
            .filter_map(|id| self.info[id].gt_identity)
            .collect()
    }

    /// Extend a live track with a confident prediction: memory state,
    /// trajectory record, and reference point move together.
    pub fn record_update(
        &mut self,
        id: TrackId,
        frame: u64,
        entry: &DecodedEntry,
        embed: Vec<f64>,
        node: Option<NodeId>,
    ) -> Result<()> {
        self.memory.append(id, frame, embed, node)?;
        let info = self.info.get_mut(&id).expect("info for live track");
        info.last_box = entry.bbox;
        info.ref_logit = entry.center_logit;
        info.ref_node = node.map(|_| entry.center_logit_node);
        info.absent_streak = 0;
        self.trajectories
            .get_mut(&id)
            .expect("trajectory exists from birth")
            .records
            .push(TrajectoryRecord { frame, bbox: entry.bbox, score: entry.score });
        Ok(())
    }

    /// Below-threshold or occluded frame: a zero slot in memory, no
    /// trajectory record.
    pub fn record_absent(&mut self, id: TrackId, frame: u64) -> Result<()> {
        self.memory.append_absent(id, frame)?;
        self.info.get_mut(&id).expect("info for live track").absent_streak += 1;
        Ok(())
    }

    /// Start a new track from a confident proposal.
    #[allow(clippy::too_many_arguments)]
    pub fn birth(
        &mut self,
        frame: u64,
        entry: &DecodedEntry,
        embed: Vec<f64>,
        node: Option<NodeId>,
        gt_identity: Option<u64>,
        dmat_seed: Vec<f64>,
        dmat_node: Option<NodeId>,
    ) -> Result<TrackId> {
        let id = self.memory.allocate_track()?;
        self.memory.append(id, frame, embed, node)?;
        self.dmat.init_track(id, dmat_seed, dmat_node);
        self.info.insert(
            id,
            TrackInfo {
                gt_identity,
                last_box: entry.bbox,
                ref_logit: entry.center_logit,
                ref_node: node.map(|_| entry.center_logit_node),
                absent_streak: 0,
            },
        );
        self.trajectories.insert(
            id,
            Trajectory {
                identity: id,
                records: vec![TrajectoryRecord { frame, bbox: entry.bbox, score: entry.score }],
            },
        );
        Ok(id)
    }

    /// Retire every track whose absent streak reached the patience limit.
    /// Trajectories stay in the output set.
    pub fn apply_retirement(&mut self) -> Vec<TrackId> {
        let doomed: Vec<TrackId> = self
            .memory
            .live_ids()
            .into_iter()
            .filter(|id| self.info[id].absent_streak >= self.patience)
            .collect();
        for &id in &doomed {
            self.memory.retire(id).expect("retiring a live track");
            self.dmat.remove(id);
            self.info.remove(&id);
        }
        doomed
    }

    /// Drop every tape node reference after a tape is torn down.
    pub fn clear_tape_nodes(&mut self) {
        self.memory.clear_nodes();
        self.dmat.clear_nodes();
        for info in self.info.values_mut() {
            info.ref_node = None;
        }
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.trajectories.values().cloned().collect()
    }

    /// Trajectories as metric sequences, frames shifted to 1-based to match
    /// the MOT text convention.
    pub fn track_seqs(&self) -> Vec<TrackSeq> {
        self.trajectories
            .values()
            .map(|t| TrackSeq {
                id: t.identity,
                boxes: t.records.iter().map(|r| (r.frame + 1, r.bbox)).collect(),
            })
            .collect()
    }
}

/// Value-only view of a decoded entry for output and export.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedEntry {
    pub origin: EntryOrigin,
    pub bbox: [f64; 4],
    pub obj: f64,
    pub uni: f64,
    pub score: f64,
}

/// Per-frame tracker output.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub frame: u64,
    pub entries: Vec<PredictedEntry>,
    pub updates: Vec<TrackId>,
    pub births: Vec<TrackId>,
    pub absents: Vec<TrackId>,
    pub traces: Vec<TrackTrace>,
}

impl PartialEq<TrackTrace> for TrackTrace {
    fn eq(&self, other: &TrackTrace) -> bool {
        self.track == other.track && self.short == other.short && self.long == other.long
    }
}

/// Everything the losses need from one forward pass.
pub struct FrameForward {
    pub entries: Vec<DecodedEntry>,
    pub order: Vec<TrackId>,
    pub q_pro: NodeId,
    pub traces: Vec<TrackTrace>,
}

/// One full network pass: hypothesis generation, memory encoding (DMAT
/// updated in place), joint decoding, prediction heads.
pub fn forward_frame(
    tape: &mut Tape,
    bind: &Bindings,
    model: &Model,
    state: &mut TrackerState,
    img: &Image,
    trace: bool,
) -> FrameForward {
    let cfg = &model.cfg;
    let feat = model.hyp.forward_features(tape, bind, img);
    let q_pro = model.hyp.decode_proposals(tape, bind, &feat);
    let enc_out = model.enc.encode_all(
        tape,
        bind,
        &state.memory,
        &mut state.dmat,
        &EncodeOptions {
            t_s: cfg.t_s,
            t_l: cfg.t_l,
            aggregation: cfg.aggregation,
            dmat_update: cfg.dmat_update,
            trace,
        },
    );
    let track_refs = state.track_ref_node(tape, &enc_out.order);
    let refs_all = model.dec.ref_logits_all(tape, bind, track_refs);
    let q_hat = model.dec.decode(
        tape,
        bind,
        q_pro,
        enc_out.q_tck,
        feat.z1,
        feat.grid_h,
        feat.grid_w,
        refs_all,
    );
    let entries = model
        .dec
        .predict(tape, bind, q_hat, &enc_out.order, refs_all, cfg.single_score);
    FrameForward {
        entries,
        order: enc_out.order,
        q_pro,
        traces: enc_out.traces,
    }
}

/// One online inference step. On error the state rolls back to its
/// pre-frame snapshot.
pub fn step(
    model: &Model,
    store: &ParamStore,
    state: &mut TrackerState,
    img: &Image,
    trace: bool,
) -> Result<FramePrediction> {
    let snapshot = state.clone();
    match step_inner(model, store, state, img, trace) {
        Ok(pred) => Ok(pred),
        Err(e) => {
            *state = snapshot;
            Err(e)
        }
    }
}

fn step_inner(
    model: &Model,
    store: &ParamStore,
    state: &mut TrackerState,
    img: &Image,
    trace: bool,
) -> Result<FramePrediction> {
    let mut tape = Tape::new();
    let bind = store.bind_all(&mut tape, false);
    let fwd = forward_frame(&mut tape, &bind, model, state, img, trace);
    let seed = model.enc.dmat_seed(&bind, store);
    let summary: SelectionSummary = select(
        &tape,
        &fwd.entries,
        state,
        &seed,
        model.cfg.eps_pro,
        model.cfg.eps_tck,
    )?;
    state.apply_retirement();
    state.clear_tape_nodes();
    let frame = state.frame;
    state.frame += 1;
    Ok(FramePrediction {
        frame,
        entries: fwd
            .entries
            .iter()
            .map(|e| PredictedEntry {
                origin: e.origin,
                bbox: e.bbox,
                obj: e.obj,
                uni: e.uni,
                score: e.score,
            })
            .collect(),
        updates: summary.updates,
        births: summary.births,
        absents: summary.absents,
        traces: fwd.traces,
    })
}

/// Strictly online fold of `step` over a frame sequence, starting from an
/// empty state.
pub fn run_sequence(
    model: &Model,
    store: &ParamStore,
    frames: &[Image],
    trace: bool,
) -> Result<(Vec<Trajectory>, Vec<FramePrediction>)> {
    let cfg = &model.cfg;
    let mut state = TrackerState::new(cfg.n_max, cfg.t_max, cfg.d, cfg.patience);
    let mut preds = Vec::with_capacity(frames.len());
    for img in frames {
        preds.push(step(model, store, &mut state, img, trace)?);
    }
    Ok((state.trajectories(), preds))
}

/// Training-time options for the clip rollout.
#[derive(Clone, Copy, Debug)]
pub struct ClipOptions {
    pub weights: LossWeights,
    /// Cut gradient flow through memory writes (ablation switch; default
    /// keeps full backpropagation through time within the clip).
    pub detach_memory: bool,
}

impl Default for ClipOptions {
    fn default() -> Self {
        ClipOptions {
            weights: LossWeights::default(),
            detach_memory: false,
        }
    }
}

pub struct ClipStats {
    pub loss: f64,
    pub tracking: f64,
    pub detection: f64,
}

/// Roll the tracker through a clip with ground-truth-gated memory writes,
/// accumulate the normalized clip loss, and backpropagate through the whole
/// rollout (including memory reads). Gradients are added into the store.
pub fn train_clip(
    model: &Model,
    store: &mut ParamStore,
    clip: &[(Image, GtFrame)],
    opts: &ClipOptions,
) -> Result<ClipStats> {
    assert!(!clip.is_empty(), "training clip must not be empty");
    let cfg = &model.cfg;
    let mut tape = Tape::new();
    let bind = store.bind_all(&mut tape, true);
    let mut state = TrackerState::new(cfg.n_max, cfg.t_max, cfg.d, cfg.patience);

    let mut frame_tck = Vec::with_capacity(clip.len());
    let mut frame_det = Vec::with_capacity(clip.len());
    let mut counts = Vec::with_capacity(clip.len());

    for (img, gt) in clip {
        let fwd = forward_frame(&mut tape, &bind, model, &mut state, img, false);

        let views: Vec<EntryPrediction> = fwd
            .entries
            .iter()
            .map(|e| EntryPrediction {
                source: match e.origin {
                    EntryOrigin::Proposal(i) => EntrySource::Proposal(i),
                    EntryOrigin::Track(id) => EntrySource::Track {
                        track: id,
                        gt_identity: state.info[&id]
                            .gt_identity
                            .expect("training tracks are bound to ground truth"),
                    },
                },
                obj: e.obj,
                bbox: e.bbox,
            })
            .collect();
        let live_gt = state.live_gt_identities();
        let targets = assign_targets(&views, &gt.objects, &live_gt)?;

        let nodes: Vec<EntryNodes> = fwd
            .entries
            .iter()
            .map(|e| EntryNodes {
                obj: e.obj_node,
                uni: e.uni_node,
                bbox: e.bbox_node,
            })
            .collect();
        frame_tck.push(tracking_loss(&mut tape, &nodes, &targets, &opts.weights));

        let (aux_obj, aux_box) = model.hyp.aux_heads(&mut tape, &bind, fwd.q_pro);
        frame_det.push(detection_loss(&mut tape, &aux_obj, &aux_box, &gt.objects, &opts.weights));
        counts.push(gt.objects.iter().filter(|o| o.visible).count());

        apply_training_writes(&mut tape, model, &bind, store, &mut state, &fwd.entries, &targets, opts)?;
        state.apply_retirement();
        state.frame += 1;
    }

    let loss = clip_loss(&mut tape, &frame_tck, &frame_det, &counts, &opts.weights);
    tape.backward(loss);
    store.accumulate_grads(&tape, &bind);

    let tracking = frame_tck.iter().map(|&n| tape.value(n).data[0]).sum();
    let detection = frame_det.iter().map(|&n| tape.value(n).data[0]).sum();
    Ok(ClipStats {
        loss: tape.value(loss).data[0],
        tracking,
        detection,
    })
}

/// Training writes share the inference append code paths but are gated by
/// assignment instead of thresholds: a track entry writes its embedding
/// when its identity is visible and an absent slot otherwise; a proposal
/// matched to a first-appearance identity becomes a new track.
#[allow(clippy::too_many_arguments)]
fn apply_training_writes(
    tape: &mut Tape,
    model: &Model,
    bind: &Bindings,
    store: &ParamStore,
    state: &mut TrackerState,
    entries: &[DecodedEntry],
    targets: &[EntryTarget],
    opts: &ClipOptions,
) -> Result<()> {
    let frame = state.frame;
    let seed = model.enc.dmat_seed(bind, store);
    for (e, t) in entries.iter().zip(targets) {
        let node = (!opts.detach_memory).then_some(e.embed);
        match e.origin {
            EntryOrigin::Track(id) => {
                if t.obj {
                    let embed = tape.value(e.embed).data.clone();
                    state.record_update(id, frame, e, embed, node)?;
                } else {
                    state.record_absent(id, frame)?;
                }
            }
            EntryOrigin::Proposal(_) => {
                if t.obj && t.uni {
                    let embed = tape.value(e.embed).data.clone();
                    let gt_id = t.matched_gt.expect("new-object target carries its identity");
                    let dmat_node = if opts.detach_memory { None } else { seed.1 };
                    if let Err(err) =
                        state.birth(frame, e, embed, node, Some(gt_id), seed.0.clone(), dmat_node)
                    {
                        eprintln!("warning: dropping training birth at frame {frame}: {err}");
                    }
                }
            }
        }
    }
    Ok(())
}

/// Clip length schedule: `base + stride * floor(epoch / every)`.
pub fn curriculum(epoch: usize, base: usize, stride: usize, every: usize) -> usize {
    base + stride * (epoch / every.max(1))
}

/// Training schedule settings.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch at which the learning rate drops by 10x; defaults to the
    /// halfway point when None.
    pub lr_decay_epoch: Option<usize>,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub curriculum_base: usize,
    pub curriculum_stride: usize,
    pub curriculum_every: usize,
    pub max_clip_len: usize,
    pub max_sample_interval: usize,
    /// Clips whose gradients accumulate into one optimizer step.
    pub batch_clips: usize,
    pub augment_flip: bool,
    pub detach_memory: bool,
    pub weights: LossWeights,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 120,
            lr: 2e-4,
            lr_decay_epoch: None,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            curriculum_base: 2,
            curriculum_stride: 4,
            curriculum_every: 20,
            max_clip_len: 10,
            max_sample_interval: 10,
            batch_clips: 1,
            augment_flip: true,
            detach_memory: false,
            weights: LossWeights::default(),
        }
    }
}

/// Per-epoch summary handed to the progress callback.
pub struct EpochLog {
    pub epoch: usize,
    pub clip_len: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_tracking: f64,
    pub mean_detection: f64,
}

/// Train over pre-generated scenario frame sequences, one sampled clip per
/// scenario per epoch. Deterministic for a fixed seed: the per-epoch RNG
/// stream depends only on (seed, epoch), so resumed runs match full runs.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    optimizer: &mut AdamW,
    scenarios: &[Vec<(Image, GtFrame)>],
    settings: &TrainSettings,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    assert!(!scenarios.is_empty(), "training needs at least one scenario");
    let decay_at = settings.lr_decay_epoch.unwrap_or(settings.epochs / 2);
    let clip_opts = ClipOptions {
        weights: settings.weights,
        detach_memory: settings.detach_memory,
    };
    for epoch in start_epoch..settings.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(
            settings
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch as u64),
        );
        let lr = if epoch >= decay_at { settings.lr * 0.1 } else { settings.lr };
        let clip_len = curriculum(
            epoch,
            settings.curriculum_base,
            settings.curriculum_stride,
            settings.curriculum_every,
        )
        .min(settings.max_clip_len);

        let mut sum_loss = 0.0;
        let mut sum_tck = 0.0;
        let mut sum_det = 0.0;
        let batch = settings.batch_clips.max(1);
        store.zero_grads();
        let mut pending = 0usize;
        for frames in scenarios {
            let clip = sample_clip(frames, clip_len, settings.max_sample_interval, &mut rng);
            let clip = if settings.augment_flip && rng.random_bool(0.5) {
                clip.iter().map(|(i, g)| flip_horizontal(i, g)).collect()
            } else {
                clip
            };
            let stats = train_clip(model, store, &clip, &clip_opts)?;
            pending += 1;
            if pending == batch {
                if settings.grad_clip > 0.0 {
                    store.clip_grad_norm(settings.grad_clip);
                }
                optimizer.step(store, lr);
                store.zero_grads();
                pending = 0;
            }
            sum_loss += stats.loss;
            sum_tck += stats.tracking;
            sum_det += stats.detection;
        }
        if pending > 0 {
            if settings.grad_clip > 0.0 {
                store.clip_grad_norm(settings.grad_clip);
            }
            optimizer.step(store, lr);
            store.zero_grads();
        }
        let n = scenarios.len() as f64;
        on_epoch(&EpochLog {
            epoch,
            clip_len,
            lr,
            mean_loss: sum_loss / n,
            mean_tracking: sum_tck / n,
            mean_detection: sum_det / n,
        });
    }
    Ok(())
}

/// Sample a clip of `len` frames with a random stride in
/// [1, max_interval], clamped to what the sequence allows.
fn sample_clip(
    frames: &[(Image, GtFrame)],
    len: usize,
    max_interval: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<(Image, GtFrame)> {
    let len = len.max(1).min(frames.len());
    if len == 1 {
        let at = rng.random_range(0..frames.len());
        return vec![frames[at].clone()];
    }
    let widest = (frames.len() - 1) / (len - 1);
    let interval = rng.random_range(1..=max_interval.min(widest).max(1));
    let last_start = frames.len() - 1 - (len - 1) * interval;
    let start = rng.random_range(0..=last_start);
    (0..len)
        .map(|i| frames[start + i * interval].clone())
        .collect()
}
