//! Bounded FIFO memory of identity embeddings: one ring of per-frame states
//! per live track, zero-padded where the object was absent.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::NodeId;

/// Identity handle for a track; monotonically increasing, never reused.
pub type TrackId = u64;

/// One remembered timestep of a track. `present == false` always pairs with
/// an all-zero embedding.
#[derive(Clone, Debug)]
pub struct TimestepState {
    pub frame: u64,
    pub present: bool,
    pub embed: Vec<f64>,
    /// Tape node of the embedding when written during a training rollout,
    /// so gradients can flow through later reads. Absent at inference.
    pub node: Option<NodeId>,
}

#[derive(Clone, Debug)]
struct TrackRing {
    id: TrackId,
    states: VecDeque<TimestepState>,
}

/// A window over the most recent `len` states, zero-padded at the old end.
#[derive(Clone, Debug)]
pub struct MemoryWindow {
    /// Row-major len x d embedding block, oldest row first.
    pub embeds: Vec<f64>,
    /// One flag per row: true for a real present state, false for padding
    /// and absent slots.
    pub mask: Vec<bool>,
    /// Frame index per row where the slot is real.
    pub frames: Vec<Option<u64>>,
    /// Tape nodes per row where available (training-time reads).
    pub nodes: Vec<Option<NodeId>>,
    pub d: usize,
}

/// FIFO memory buffer for at most `n_max` live tracks and `t_max` timesteps
/// per track.
#[derive(Clone, Debug)]
pub struct SpatioTemporalMemory {
    n_max: usize,
    t_max: usize,
    d: usize,
    tracks: Vec<TrackRing>,
    next_identity: TrackId,
}

impl SpatioTemporalMemory {
    pub fn new(n_max: usize, t_max: usize, d: usize) -> Self {
        assert!(n_max > 0 && t_max > 0 && d > 0);
        SpatioTemporalMemory {
            n_max,
            t_max,
            d,
            tracks: Vec::new(),
            next_identity: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.n_max
    }

    pub fn horizon(&self) -> usize {
        self.t_max
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn live_count(&self) -> usize {
        self.tracks.len()
    }

    /// Live identities in allocation order.
    pub fn live_ids(&self) -> Vec<TrackId> {
        self.tracks.iter().map(|t| t.id).collect()
    }

    pub fn is_live(&self, id: TrackId) -> bool {
        self.tracks.iter().any(|t| t.id == id)
    }

    /// Reserve a fresh identity with an empty history.
    pub fn allocate_track(&mut self) -> Result<TrackId> {
        if self.tracks.len() >= self.n_max {
            return Err(Error::Memory(format!(
                "track capacity {} exhausted",
                self.n_max
            )));
        }
        let id = self.next_identity;
        self.next_identity += 1;
        self.tracks.push(TrackRing {
            id,
            states: VecDeque::new(),
        });
        Ok(id)
    }

    fn ring_mut(&mut self, id: TrackId) -> Result<&mut TrackRing> {
        self.tracks
            .iter_mut()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Memory(format!("unknown or retired track {id}")))
    }

    fn ring(&self, id: TrackId) -> Result<&TrackRing> {
        self.tracks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Memory(format!("unknown or retired track {id}")))
    }

    /// Append a present state for `frame`. Frames must be strictly
    /// increasing per track; once the ring exceeds the horizon the single
    /// oldest entry graduates out.
    pub fn append(
        &mut self,
        id: TrackId,
        frame: u64,
        embed: Vec<f64>,
        node: Option<NodeId>,
    ) -> Result<()> {
        assert_eq!(embed.len(), self.d, "embedding width {} != {}", embed.len(), self.d);
        self.push_state(
            id,
            TimestepState {
                frame,
                present: true,
                embed,
                node,
            },
        )
    }

    /// Append an absent slot (zero embedding, present = false) for `frame`.
    pub fn append_absent(&mut self, id: TrackId, frame: u64) -> Result<()> {
        let d = self.d;
        self.push_state(
            id,
            TimestepState {
                frame,
                present: false,
                embed: vec![0.0; d],
                node: None,
            },
        )
    }

    fn push_state(&mut self, id: TrackId, state: TimestepState) -> Result<()> {
        let t_max = self.t_max;
        let ring = self.ring_mut(id)?;
        if let Some(last) = ring.states.back() {
            if state.frame <= last.frame {
                return Err(Error::Memory(format!(
                    "non-monotonic append for track {id}: frame {} after {}",
                    state.frame, last.frame
                )));
            }
        }
        ring.states.push_back(state);
        if ring.states.len() > t_max {
            ring.states.pop_front();
        }
        Ok(())
    }

    /// The most recent `len` states, zero-padded at the old end so the
    /// window is always exactly `len` rows. Tracks always hold at least one
    /// state after birth; an empty ring is a caller bug.
    pub fn window(&self, id: TrackId, len: usize) -> Result<MemoryWindow> {
        assert!(len >= 1, "window length must be at least 1");
        let ring = self.ring(id)?;
        assert!(
            !ring.states.is_empty(),
            "window on track {id} with empty history"
        );
        let take = len.min(ring.states.len());
        let pad = len - take;
        let mut embeds = vec![0.0; len * self.d];
        let mut mask = vec![false; len];
        let mut frames = vec![None; len];
        let mut nodes = vec![None; len];
        for (i, s) in ring.states.iter().skip(ring.states.len() - take).enumerate() {
            let row = pad + i;
            embeds[row * self.d..(row + 1) * self.d].copy_from_slice(&s.embed);
            mask[row] = s.present;
            frames[row] = Some(s.frame);
            nodes[row] = s.node;
        }
        Ok(MemoryWindow {
            embeds,
            mask,
            frames,
            nodes,
            d: self.d,
        })
    }

    /// Most recent state that was actually present, if any survives in the
    /// ring.
    pub fn latest_present(&self, id: TrackId) -> Result<Option<TimestepState>> {
        let ring = self.ring(id)?;
        Ok(ring.states.iter().rev().find(|s| s.present).cloned())
    }

    pub fn last_frame(&self, id: TrackId) -> Result<Option<u64>> {
        Ok(self.ring(id)?.states.back().map(|s| s.frame))
    }

    /// Remove a track from the live set. Its trajectory records, kept
    /// elsewhere, are unaffected.
    pub fn retire(&mut self, id: TrackId) -> Result<()> {
        let idx = self
            .tracks
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| Error::Memory(format!("retire of unknown or retired track {id}")))?;
        self.tracks.remove(idx);
        Ok(())
    }

    /// Drop every tape node reference, keeping raw embedding data. Called
    /// when a training tape is torn down or when memory writes are detached.
    pub fn clear_nodes(&mut self) {
        for track in &mut self.tracks {
            for s in &mut track.states {
                s.node = None;
            }
        }
    }

    /// Debug dump: per-track CSV lines of (frame, present, embedding norm).
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("track,frame,present,embed_norm\n");
        for track in &self.tracks {
            for s in &track.states {
                let norm = s.embed.iter().map(|v| v * v).sum::<f64>().sqrt();
                let _ = writeln!(out, "{},{},{},{}", track.id, s.frame, u8::from(s.present), norm);
            }
        }
        out
    }
}
