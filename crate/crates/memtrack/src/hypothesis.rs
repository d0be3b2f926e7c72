//! Frame-level hypothesis generation: a learned strided patch embedder in
//! place of a pretrained backbone, a transformer encoder over the token
//! grid, and learnable object queries decoded into proposal embeddings.
//! Auxiliary objectness/box heads exist for training only.

use rand::Rng;

use crate::nn::{sinusoidal_embed_node, sinusoidal_positions, token_init, DecoderLayer, EncoderLayer, Linear, Mlp};
use crate::synth::Image;
use crate::tensor::{Bindings, NodeId, ParamStore, PId, Tape, Tensor};

/// Evenly spread reference anchors for `n` object queries, as logits.
/// Anchored queries localize far faster than free ones at desk scale.
pub fn spread_anchor_logits(n: usize) -> Tensor {
    let side = (n as f64).sqrt().ceil() as usize;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut data = Vec::with_capacity(n * 2);
    for i in 0..n {
        let (r, c) = (i / side, i % side);
        let y = (r as f64 + 0.5) / side as f64;
        let x = (c as f64 + 0.5) / side as f64;
        data.push(logit(x));
        data.push(logit(y));
    }
    Tensor::matrix(n, 2, data)
}

/// Sinusoidal embeddings of sigmoid(ref logits) mapped to grid coordinates;
/// fully differentiable so anchors learn through their query positions too.
pub fn anchor_query_pos(tape: &mut Tape, ref_node: NodeId, grid_h: usize, grid_w: usize, d: usize) -> NodeId {
    let s = tape.sigmoid(ref_node);
    let x = tape.slice_cols(s, 0, 1);
    let y = tape.slice_cols(s, 1, 1);
    let xg_raw = tape.scale(x, grid_w as f64);
    let xg = tape.add_const(xg_raw, -0.5);
    let yg_raw = tape.scale(y, grid_h as f64);
    let yg = tape.add_const(yg_raw, -0.5);
    let points = tape.concat_cols(&[xg, yg]);
    sinusoidal_embed_node(tape, points, d)
}

/// Encoded frame: raw patch tokens, encoded tokens, and the grid shape.
pub struct FrameFeature {
    /// HW x C patch tokens (z0 with tokens as rows).
    pub z0: NodeId,
    /// HW x d encoded tokens.
    pub z1: NodeId,
    pub grid_h: usize,
    pub grid_w: usize,
}

pub struct HypothesisGenerator {
    pub patch: Linear,
    pub input_proj: Linear,
    pub enc_layers: Vec<EncoderLayer>,
    pub query_embed: PId,
    /// Learned per-query reference anchors (logits of normalized x, y).
    pub ref_logits: PId,
    pub dec_layers: Vec<DecoderLayer>,
    pub aux_obj: Linear,
    pub aux_box: Mlp,
    pub stride: usize,
    pub channels: usize,
    pub d: usize,
    pub n_pro: usize,
}

impl HypothesisGenerator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        stride: usize,
        channels: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
        enc_layers: usize,
        dec_layers: usize,
        n_pro: usize,
    ) -> Self {
        assert!(n_pro >= 1, "at least one object query is required");
        let patch_dim = stride * stride * 3;
        HypothesisGenerator {
            patch: Linear::new(store, rng, "hyp.patch", patch_dim, channels),
            input_proj: Linear::new(store, rng, "hyp.proj", channels, d),
            enc_layers: (0..enc_layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("hyp.enc{i}"), d, heads, d_ff))
                .collect(),
            query_embed: store.add("hyp.query_embed", token_init(rng, n_pro, d)),
            ref_logits: store.add("hyp.ref_logits", spread_anchor_logits(n_pro)),
            dec_layers: (0..dec_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("hyp.dec{i}"), d, heads, d_ff))
                .collect(),
            aux_obj: Linear::new(store, rng, "hyp.aux_obj", d, 1),
            aux_box: Mlp::new(store, rng, "hyp.aux_box", d, d, 4),
            stride,
            channels,
            d,
            n_pro,
        }
    }

    /// Flatten an image into strided patch tokens (host side; images carry
    /// no gradient).
    pub fn patch_tokens(&self, img: &Image) -> Tensor {
        assert!(
            img.width % self.stride == 0 && img.height % self.stride == 0,
            "image {}x{} not divisible by patch stride {}",
            img.width,
            img.height,
            self.stride
        );
        let gw = img.width / self.stride;
        let gh = img.height / self.stride;
        let patch_dim = self.stride * self.stride * 3;
        let mut data = Vec::with_capacity(gw * gh * patch_dim);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..self.stride {
                    for px in 0..self.stride {
                        let p = img.pixel(gx * self.stride + px, gy * self.stride + py);
                        data.extend_from_slice(&p);
                    }
                }
            }
        }
        Tensor::matrix(gh * gw, patch_dim, data)
    }

    /// Strided patch projection: one token per grid cell.
    pub fn embed_frame(&self, tape: &mut Tape, bind: &Bindings, img: &Image) -> (NodeId, usize, usize) {
        let tokens = self.patch_tokens(img);
        let gh = img.height / self.stride;
        let gw = img.width / self.stride;
        let tn = tape.constant(tokens);
        let z0 = self.patch.forward(tape, bind, tn);
        (z0, gh, gw)
    }

    /// Width-project and run the encoder stack with sinusoidal positions.
    pub fn encode(&self, tape: &mut Tape, bind: &Bindings, z0: NodeId, grid_h: usize, grid_w: usize) -> NodeId {
        let mut x = self.input_proj.forward(tape, bind, z0);
        let pos = tape.constant(sinusoidal_positions(grid_h, grid_w, self.d));
        for layer in &self.enc_layers {
            x = layer.forward(tape, bind, x, pos);
        }
        x
    }

    pub fn forward_features(&self, tape: &mut Tape, bind: &Bindings, img: &Image) -> FrameFeature {
        let (z0, grid_h, grid_w) = self.embed_frame(tape, bind, img);
        let z1 = self.encode(tape, bind, z0, grid_h, grid_w);
        FrameFeature {
            z0,
            z1,
            grid_h,
            grid_w,
        }
    }

    /// Cross-attend the learned object queries into the encoded frame.
    /// Query positions are the sinusoidal embeddings of the current anchors.
    pub fn decode_proposals(&self, tape: &mut Tape, bind: &Bindings, feat: &FrameFeature) -> NodeId {
        let mut q = bind.node(self.query_embed);
        let qpos = anchor_query_pos(tape, bind.node(self.ref_logits), feat.grid_h, feat.grid_w, self.d);
        let mem_pos = tape.constant(sinusoidal_positions(feat.grid_h, feat.grid_w, self.d));
        for layer in &self.dec_layers {
            q = layer.forward(tape, bind, q, qpos, feat.z1, mem_pos, None);
        }
        q
    }

    /// Training-only heads on the proposal embeddings: per-proposal
    /// objectness probability and a box whose center offsets the query's
    /// anchor. Never used at inference.
    pub fn aux_heads(&self, tape: &mut Tape, bind: &Bindings, q_pro: NodeId) -> (Vec<NodeId>, Vec<NodeId>) {
        let logits = self.aux_obj.forward(tape, bind, q_pro);
        let probs = tape.sigmoid(logits);
        let offsets = self.aux_box.forward(tape, bind, q_pro);
        let xy_off = tape.slice_cols(offsets, 0, 2);
        let wh_off = tape.slice_cols(offsets, 2, 2);
        let center_logits = tape.add(xy_off, bind.node(self.ref_logits));
        let centers = tape.sigmoid(center_logits);
        let sizes = tape.sigmoid(wh_off);
        let boxes = tape.concat_cols(&[centers, sizes]);
        let n = tape.shape(q_pro).0;
        let mut obj = Vec::with_capacity(n);
        let mut bx = Vec::with_capacity(n);
        for i in 0..n {
            obj.push(tape.slice_rows(probs, i, 1));
            bx.push(tape.slice_rows(boxes, i, 1));
        }
        (obj, bx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tiny_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut img = Image::filled(w, h, 0.0);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    fn build(stride: usize, c: usize, d: usize, enc: usize, dec: usize, n_pro: usize) -> (ParamStore, HypothesisGenerator) {
        let mut rng = StdRng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let hyp = HypothesisGenerator::new(&mut store, &mut rng, stride, c, d, 2, 2 * d, enc, dec, n_pro);
        (store, hyp)
    }

    #[test]
    fn patch_grid_shapes_are_consistent() {
        let (store, hyp) = build(8, 6, 8, 1, 1, 4);
        let img = tiny_image(64, 64, 1);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let (z0, gh, gw) = hyp.embed_frame(&mut tape, &bind, &img);
        assert_eq!((gh, gw), (8, 8));
        assert_eq!(tape.shape(z0), (64, 6));
        let z1 = hyp.encode(&mut tape, &bind, z0, gh, gw);
        assert_eq!(tape.shape(z1), (64, 8));
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn indivisible_image_dims_panic() {
        let (store, hyp) = build(8, 6, 8, 0, 1, 4);
        let img = tiny_image(60, 64, 2);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        hyp.embed_frame(&mut tape, &bind, &img);
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_tokens() {
        let (mut store, hyp) = build(4, 5, 8, 0, 1, 3);
        store.value_mut(hyp.patch.b).data.iter_mut().for_each(|v| *v = 0.0);
        let img = Image::filled(16, 16, 0.0);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let (z0, _, _) = hyp.embed_frame(&mut tape, &bind, &img);
        assert!(tape.value(z0).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embedding_matches_sliding_window_oracle() {
        let (store, hyp) = build(4, 3, 8, 0, 1, 2);
        let img = tiny_image(16, 16, 3);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let (z0, gh, gw) = hyp.embed_frame(&mut tape, &bind, &img);
        assert_eq!((gh, gw), (4, 4));
        let w = store.value(hyp.patch.w);
        let b = store.value(hyp.patch.b);
        // Direct sliding-window oracle: dot each patch with each filter column.
        for gy in 0..4 {
            for gx in 0..4 {
                for ch in 0..3usize {
                    let mut acc = b.data[ch];
                    let mut k = 0usize;
                    for py in 0..4 {
                        for px in 0..4 {
                            let p = img.pixel(gx * 4 + px, gy * 4 + py);
                            for c in 0..3 {
                                acc += p[c] * w.get(k, ch);
                                k += 1;
                            }
                        }
                    }
                    let got = tape.value(z0).get(gy * 4 + gx, ch);
                    assert!((got - acc).abs() < 1e-12, "cell ({gy},{gx}) ch {ch}");
                }
            }
        }
    }

    #[test]
    fn zero_encoder_layers_reduce_to_width_projection() {
        let (store, hyp) = build(8, 6, 8, 0, 1, 4);
        let img = tiny_image(32, 32, 4);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let (z0, gh, gw) = hyp.embed_frame(&mut tape, &bind, &img);
        let z1 = hyp.encode(&mut tape, &bind, z0, gh, gw);
        let expect = hyp.input_proj.forward(&mut tape, &bind, z0);
        assert_eq!(tape.value(z1).data, tape.value(expect).data);
    }

    #[test]
    fn one_encoder_layer_matches_composed_oracle_on_2x2_grid() {
        let (store, hyp) = build(8, 6, 8, 1, 1, 4);
        let img = tiny_image(16, 16, 5);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let (z0, gh, gw) = hyp.embed_frame(&mut tape, &bind, &img);
        assert_eq!((gh, gw), (2, 2));
        let z1 = hyp.encode(&mut tape, &bind, z0, gh, gw);
        let proj = hyp.input_proj.forward(&mut tape, &bind, z0);
        let pos = tape.constant(sinusoidal_positions(2, 2, 8));
        let expect = hyp.enc_layers[0].forward(&mut tape, &bind, proj, pos);
        assert_eq!(tape.value(z1).data, tape.value(expect).data);
    }

    #[test]
    fn proposal_count_is_fixed_regardless_of_content() {
        let (store, hyp) = build(8, 6, 8, 1, 1, 5);
        for seed in [6, 7] {
            let img = tiny_image(32, 32, seed);
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let feat = hyp.forward_features(&mut tape, &bind, &img);
            let q = hyp.decode_proposals(&mut tape, &bind, &feat);
            assert_eq!(tape.shape(q), (5, 8));
        }
    }

    #[test]
    fn query_permutation_carries_through_proposals() {
        let (mut store, hyp) = build(8, 6, 8, 0, 1, 3);
        let img = tiny_image(32, 32, 8);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let feat = hyp.forward_features(&mut tape, &bind, &img);
            let q = hyp.decode_proposals(&mut tape, &bind, &feat);
            tape.value(q).data.clone()
        };
        let base = run(&store);
        // Rotate queries and their anchors together.
        let perm = [2usize, 0, 1];
        for (pid, width) in [(hyp.query_embed, 8), (hyp.ref_logits, 2)] {
            let old = store.value(pid).clone();
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(&old.data[i * width..(i + 1) * width]);
            }
            store.value_mut(pid).data = data;
        }
        let permuted = run(&store);
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = permuted[row * 8 + c];
                let b = base[src * 8 + c];
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn toy_proposal_decode_matches_composed_oracle() {
        let (store, hyp) = build(8, 6, 8, 0, 1, 2);
        let img = tiny_image(16, 16, 9);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let feat = hyp.forward_features(&mut tape, &bind, &img);
        let got = hyp.decode_proposals(&mut tape, &bind, &feat);
        let qpos = anchor_query_pos(&mut tape, bind.node(hyp.ref_logits), 2, 2, 8);
        let qemb = bind.node(hyp.query_embed);
        let mem_pos = tape.constant(sinusoidal_positions(2, 2, 8));
        let expect = hyp.dec_layers[0].forward(&mut tape, &bind, qemb, qpos, feat.z1, mem_pos, None);
        assert_eq!(tape.value(got).data, tape.value(expect).data);
    }

    #[test]
    fn aux_heads_only_touch_aux_parameters() {
        let (mut store, hyp) = build(8, 6, 8, 1, 1, 4);
        let img = tiny_image(32, 32, 10);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let feat = hyp.forward_features(&mut tape, &bind, &img);
            let q = hyp.decode_proposals(&mut tape, &bind, &feat);
            tape.value(q).data.clone()
        };
        let before = run(&store);
        for pid in [hyp.aux_obj.w, hyp.aux_obj.b, hyp.aux_box.l1.w, hyp.aux_box.l1.b, hyp.aux_box.l2.w, hyp.aux_box.l2.b] {
            store.value_mut(pid).data.iter_mut().for_each(|v| *v = 9.9);
        }
        let after = run(&store);
        assert_eq!(before, after, "inference path must ignore auxiliary heads");
    }

    #[test]
    fn full_generator_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let hyp = HypothesisGenerator::new(&mut store, &mut rng, 4, 4, 4, 1, 8, 1, 1, 2);
        let img = tiny_image(8, 8, 12);
        let point = store.flatten();
        let err = check_gradients(
            |t, flat| {
                let bind = store.bind_from_flat(t, flat);
                let feat = hyp.forward_features(t, &bind, &img);
                let q = hyp.decode_proposals(t, &bind, &feat);
                let (obj, boxes) = hyp.aux_heads(t, &bind, q);
                let mut acc = t.sum_all(q);
                for n in obj.into_iter().chain(boxes) {
                    let s = t.sum_all(n);
                    acc = t.add(acc, s);
                }
                acc
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-3, "rel err {err}");
    }
}
