//! Transformer building blocks shared by the hypothesis generator, memory
//! encoder, and memory decoder: multi-head attention, post-norm
//! encoder/decoder layers, feed-forward sublayers, and 2-D sinusoidal
//! positional encodings.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Bindings, NodeId, ParamStore, PId, Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const POS_TEMPERATURE: f64 = 1000.0;

/// Xavier-uniform weight matrix.
pub fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Small-scale normal init for learned tokens and embeddings.
pub fn token_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 0.02).unwrap();
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

/// y = x W + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), xavier(rng, d_in, d_out));
        let b = store.add(&format!("{name}.b"), Tensor::matrix(1, d_out, vec![0.0; d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: NodeId) -> NodeId {
        let p = tape.matmul(x, bind.node(self.w));
        tape.add_row(p, bind.node(self.b))
    }
}

/// Two-layer MLP head: d_in -> hidden -> d_out with ReLU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_in, hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: NodeId) -> NodeId {
        let h = self.l1.forward(tape, bind, x);
        let h = tape.relu(h);
        self.l2.forward(tape, bind, h)
    }
}

/// Multi-head attention parameters: composite d x d projections split into
/// `heads` equal column blocks, plus the output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Attention {
            wq: Linear::new(store, rng, &format!("{name}.q"), d, d),
            wk: Linear::new(store, rng, &format!("{name}.k"), d, d),
            wv: Linear::new(store, rng, &format!("{name}.v"), d, d),
            wo: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
            d,
        }
    }

    /// Scaled dot-product attention. Masked keys receive exactly zero weight;
    /// callers must leave at least one key unmasked.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
        key_mask: Option<&[bool]>,
    ) -> NodeId {
        self.forward_inner(tape, bind, queries, keys, values, key_mask, None)
    }

    /// Same as [`forward`](Self::forward) but also averages the per-head
    /// attention weights into `weights_out` (n_q x n_k, row-major).
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
        key_mask: Option<&[bool]>,
        weights_out: &mut Vec<f64>,
    ) -> NodeId {
        self.forward_inner(tape, bind, queries, keys, values, key_mask, Some(weights_out))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_inner(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
        key_mask: Option<&[bool]>,
        mut weights_out: Option<&mut Vec<f64>>,
    ) -> NodeId {
        let (n_q, dq) = tape.shape(queries);
        let (n_k, dk) = tape.shape(keys);
        assert_eq!(dq, self.d, "query width {dq} != model width {}", self.d);
        assert_eq!(dk, self.d, "key width {dk} != model width {}", self.d);
        assert_eq!(tape.shape(values), (n_k, self.d), "values must be {n_k}x{}", self.d);
        if let Some(m) = key_mask {
            assert_eq!(m.len(), n_k, "key mask length {} != {n_k}", m.len());
            assert!(m.iter().any(|&v| v), "all keys masked for every query");
        }
        let dh = self.d / self.heads;
        let q = self.wq.forward(tape, bind, queries);
        let k = self.wk.forward(tape, bind, keys);
        let v = self.wv.forward(tape, bind, values);
        if let Some(w) = weights_out.as_deref_mut() {
            w.clear();
            w.resize(n_q * n_k, 0.0);
        }
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax(scaled, 1, key_mask);
            if let Some(w) = weights_out.as_deref_mut() {
                for (acc, got) in w.iter_mut().zip(&tape.value(attn).data) {
                    *acc += got / self.heads as f64;
                }
            }
            head_outs.push(tape.matmul(attn, vh));
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)
        };
        self.wo.forward(tape, bind, merged)
    }
}

/// Feed-forward sublayer: d -> d_ff -> d with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            l1: Linear::new(store, rng, &format!("{name}.ff1"), d, d_ff),
            l2: Linear::new(store, rng, &format!("{name}.ff2"), d_ff, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: NodeId) -> NodeId {
        let h = self.l1.forward(tape, bind, x);
        let h = tape.relu(h);
        self.l2.forward(tape, bind, h)
    }
}

/// Layer-norm parameter pair.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: PId,
    pub beta: PId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::matrix(1, d, vec![1.0; d])),
            beta: store.add(&format!("{name}.beta"), Tensor::matrix(1, d, vec![0.0; d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: NodeId) -> NodeId {
        tape.layer_norm(x, bind.node(self.gamma), bind.node(self.beta), LAYER_NORM_EPS)
    }
}

/// Post-norm encoder layer: self-attention then FFN, residuals around both.
/// Positions are added to queries and keys only, never to values.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        EncoderLayer {
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d_ff),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: NodeId, pos: NodeId) -> NodeId {
        assert_eq!(tape.shape(pos), tape.shape(x), "pos shape must equal input shape");
        let qk = tape.add(x, pos);
        let attn = self.attn.forward(tape, bind, qk, qk, x, None);
        let res = tape.add(x, attn);
        let x1 = self.norm1.forward(tape, bind, res);
        let ff = self.ffn.forward(tape, bind, x1);
        let res2 = tape.add(x1, ff);
        self.norm2.forward(tape, bind, res2)
    }
}

/// Post-norm decoder layer: query self-attention, cross-attention into a
/// memory sequence, then FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross_attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        DecoderLayer {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), d, heads),
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross"), d, heads),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d_ff),
            norm3: Norm::new(store, &format!("{name}.norm3"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        queries: NodeId,
        query_pos: NodeId,
        memory: NodeId,
        memory_pos: NodeId,
        key_mask: Option<&[bool]>,
    ) -> NodeId {
        assert_eq!(tape.shape(query_pos), tape.shape(queries));
        assert_eq!(tape.shape(memory_pos), tape.shape(memory));
        let qk = tape.add(queries, query_pos);
        let sa = self.self_attn.forward(tape, bind, qk, qk, queries, None);
        let res = tape.add(queries, sa);
        let y1 = self.norm1.forward(tape, bind, res);

        let q2 = tape.add(y1, query_pos);
        let k2 = tape.add(memory, memory_pos);
        let ca = self.cross_attn.forward(tape, bind, q2, k2, memory, key_mask);
        let res2 = tape.add(y1, ca);
        let y2 = self.norm2.forward(tape, bind, res2);

        let ff = self.ffn.forward(tape, bind, y2);
        let res3 = tape.add(y2, ff);
        self.norm3.forward(tape, bind, res3)
    }
}

/// Sinusoidal encoding of one continuous 2-D position. The first d/2
/// channels encode the row coordinate as alternating sine/cosine pairs over
/// d/4 geometric frequencies, the rest encode the column coordinate.
pub fn sinusoidal_point(y: f64, x: f64, d: usize) -> Vec<f64> {
    assert!(d >= 4 && d % 4 == 0, "positional width must be divisible by 4, got {d}");
    let freqs = d / 4;
    let mut out = Vec::with_capacity(d);
    for (coord, _) in [(y, 0), (x, 1)] {
        for i in 0..freqs {
            let omega = POS_TEMPERATURE.powf(-(i as f64) / freqs as f64);
            out.push((coord * omega).sin());
            out.push((coord * omega).cos());
        }
    }
    out
}

/// Deterministic 2-D sinusoidal grid encoding, one row per cell in row-major
/// order: HW x d.
pub fn sinusoidal_positions(h: usize, w: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            data.extend(sinusoidal_point(r as f64, c as f64, d));
        }
    }
    Tensor::matrix(h * w, d, data)
}

/// Differentiable sinusoidal embedding of continuous grid points. `points`
/// is n x 2 with columns (x, y); the output matches [`sinusoidal_point`]
/// channel for channel.
pub fn sinusoidal_embed_node(tape: &mut Tape, points: NodeId, d: usize) -> NodeId {
    assert!(d >= 4 && d % 4 == 0, "positional width must be divisible by 4, got {d}");
    let (_, cols) = tape.shape(points);
    assert_eq!(cols, 2, "points must be n x 2 (x, y)");
    let freqs = d / 4;
    let x = tape.slice_cols(points, 0, 1);
    let y = tape.slice_cols(points, 1, 1);
    let mut channels = Vec::with_capacity(d);
    for coord in [y, x] {
        for i in 0..freqs {
            let omega = POS_TEMPERATURE.powf(-(i as f64) / freqs as f64);
            let scaled = tape.scale(coord, omega);
            channels.push(tape.sin(scaled));
            channels.push(tape.cos(scaled));
        }
    }
    tape.concat_cols(&channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn test_store(d: usize, heads: usize) -> (ParamStore, Attention) {
        let mut rng = StdRng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "attn", d, heads);
        (store, attn)
    }

    fn rand_tensor(rng: &mut StdRng, r: usize, c: usize) -> Tensor {
        use rand::Rng;
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_key_output_ignores_query_content() {
        let (store, attn) = test_store(4, 2);
        let mut rng = StdRng::seed_from_u64(1);
        let kv = rand_tensor(&mut rng, 1, 4);
        let run = |qdata: Tensor| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let q = tape.constant(qdata);
            let k = tape.constant(kv.clone());
            let v = tape.constant(kv.clone());
            let out = attn.forward(&mut tape, &bind, q, k, v, None);
            tape.value(out).data.clone()
        };
        let a = run(rand_tensor(&mut rng, 1, 4));
        let b = run(rand_tensor(&mut rng, 1, 4));
        assert_eq!(a, b);

        // And it equals OutProj(ValueProj(v)).
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let v = tape.constant(kv.clone());
        let vp = attn.wv.forward(&mut tape, &bind, v);
        let expect = attn.wo.forward(&mut tape, &bind, vp);
        for (x, y) in a.iter().zip(&tape.value(expect).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_all_but_one_equals_single_key_call() {
        let (store, attn) = test_store(4, 2);
        let mut rng = StdRng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, 2, 4);
        let keys = rand_tensor(&mut rng, 3, 4);
        let j = 1usize;

        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let qn = tape.constant(q.clone());
        let kn = tape.constant(keys.clone());
        let masked = attn.forward(&mut tape, &bind, qn, kn, kn, Some(&[false, true, false]));

        let only = Tensor::matrix(1, 4, keys.data[j * 4..(j + 1) * 4].to_vec());
        let kn1 = tape.constant(only);
        let single = attn.forward(&mut tape, &bind, qn, kn1, kn1, None);
        assert_eq!(tape.value(masked).data, tape.value(single).data);
    }

    #[test]
    fn masked_key_value_perturbation_leaves_output_bits_unchanged() {
        let (store, attn) = test_store(8, 4);
        let mut rng = StdRng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, 2, 8);
        let mut keys = rand_tensor(&mut rng, 4, 8);
        let mask = [true, true, false, true];

        let run = |keys: &Tensor| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let qn = tape.constant(q.clone());
            let kn = tape.constant(keys.clone());
            let out = attn.forward(&mut tape, &bind, qn, kn, kn, Some(&mask));
            tape.value(out).data.clone()
        };
        let before = run(&keys);
        for v in keys.data[16..24].iter_mut() {
            *v += 123.456;
        }
        let after = run(&keys);
        assert_eq!(before, after);
    }

    #[test]
    fn attention_weights_sum_to_one_over_unmasked_keys() {
        let (store, attn) = test_store(4, 2);
        let mut rng = StdRng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, 3, 4);
        let k = rand_tensor(&mut rng, 5, 4);
        let mask = [true, false, true, true, false];
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let qn = tape.constant(q);
        let kn = tape.constant(k);
        let mut weights = Vec::new();
        attn.forward_with_weights(&mut tape, &bind, qn, kn, kn, Some(&mask), &mut weights);
        for row in weights.chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            assert_eq!(row[1], 0.0);
            assert_eq!(row[4], 0.0);
        }
    }

    /// Independent dense single-head attention oracle, straight from the
    /// formula with no shared code.
    fn attention_oracle(
        q: &Tensor,
        k: &Tensor,
        wq: &Tensor,
        bq: &Tensor,
        wk: &Tensor,
        bk: &Tensor,
        wv: &Tensor,
        bv: &Tensor,
        wo: &Tensor,
        bo: &Tensor,
    ) -> Vec<f64> {
        let d = wq.cols();
        let proj = |x: &Tensor, w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            (0..x.cols()).map(|p| x.get(i, p) * w.get(p, j)).sum::<f64>()
                                + b.data[j]
                        })
                        .collect()
                })
                .collect()
        };
        let qp = proj(q, wq, bq);
        let kp = proj(k, wk, bk);
        let vp = proj(k, wv, bv);
        let mut out = Vec::new();
        for qi in &qp {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; d];
            for (w, v) in exps.iter().zip(&vp) {
                for (c, x) in ctx.iter_mut().zip(v) {
                    *c += w / z * x;
                }
            }
            for j in 0..d {
                out.push(
                    (0..d).map(|p| ctx[p] * wo.get(p, j)).sum::<f64>() + bo.data[j],
                );
            }
        }
        out
    }

    #[test]
    fn single_head_attention_matches_dense_oracle() {
        let (store, attn) = test_store(2, 1);
        let mut rng = StdRng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 2, 2);
        let k = rand_tensor(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let qn = tape.constant(q.clone());
        let kn = tape.constant(k.clone());
        let out = attn.forward(&mut tape, &bind, qn, kn, kn, None);
        let expect = attention_oracle(
            &q,
            &k,
            store.value(attn.wq.w),
            store.value(attn.wq.b),
            store.value(attn.wk.w),
            store.value(attn.wk.b),
            store.value(attn.wv.w),
            store.value(attn.wv.b),
            store.value(attn.wo.w),
            store.value(attn.wo.b),
        );
        for (a, b) in tape.value(out).data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_layer_with_zeroed_residual_branches_is_norm_of_input() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "enc", 4, 2, 8);
        // Zero the output projection and second FFN projection: both residual
        // branches then contribute exactly zero.
        for pid in [layer.attn.wo.w, layer.attn.wo.b, layer.ffn.l2.w, layer.ffn.l2.b] {
            store.value_mut(pid).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = rand_tensor(&mut rng, 3, 4);
        let pos = rand_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let xn = tape.constant(x);
        let pn = tape.constant(pos);
        let out = layer.forward(&mut tape, &bind, xn, pn);
        let n1 = layer.norm1.forward(&mut tape, &bind, xn);
        let expect = layer.norm2.forward(&mut tape, &bind, n1);
        assert_eq!(tape.value(out).data, tape.value(expect).data);
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "enc", 8, 2, 16);
        for n in [1, 4, 9] {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let x = tape.constant(rand_tensor(&mut rng, n, 8));
            let pos = tape.constant(rand_tensor(&mut rng, n, 8));
            let out = layer.forward(&mut tape, &bind, x, pos);
            assert_eq!(tape.shape(out), (n, 8));
        }
    }

    #[test]
    fn encoder_layer_matches_composed_primitives() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "enc", 4, 2, 8);
        let x = rand_tensor(&mut rng, 4, 4);
        let pos = rand_tensor(&mut rng, 4, 4);

        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let xn = tape.constant(x);
        let pn = tape.constant(pos);
        let got = layer.forward(&mut tape, &bind, xn, pn);

        // Compose the same layer out of the public primitives.
        let qk = tape.add(xn, pn);
        let attn = layer.attn.forward(&mut tape, &bind, qk, qk, xn, None);
        let r1 = tape.add(xn, attn);
        let x1 = layer.norm1.forward(&mut tape, &bind, r1);
        let ff = layer.ffn.forward(&mut tape, &bind, x1);
        let r2 = tape.add(x1, ff);
        let expect = layer.norm2.forward(&mut tape, &bind, r2);
        assert_eq!(tape.value(got).data, tape.value(expect).data);
    }

    #[test]
    fn decoder_layer_is_equivariant_under_query_permutation() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, &mut rng, "dec", 4, 2, 8);
        let queries = rand_tensor(&mut rng, 3, 4);
        let qpos = rand_tensor(&mut rng, 3, 4);
        let mem = rand_tensor(&mut rng, 5, 4);
        let mpos = rand_tensor(&mut rng, 5, 4);
        let perm = [2usize, 0, 1];

        let run = |q: &Tensor, qp: &Tensor| {
            let mut tape = Tape::new();
            let bind = store.bind_all(&mut tape, false);
            let qn = tape.constant(q.clone());
            let qpn = tape.constant(qp.clone());
            let mn = tape.constant(mem.clone());
            let mpn = tape.constant(mpos.clone());
            let out = layer.forward(&mut tape, &bind, qn, qpn, mn, mpn, None);
            tape.value(out).data.clone()
        };
        let base = run(&queries, &qpos);
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(&t.data[i * 4..(i + 1) * 4]);
            }
            Tensor::matrix(3, 4, data)
        };
        let permuted = run(&permute(&queries), &permute(&qpos));
        // Summation order over keys changes with the permutation, so allow
        // round-off while requiring equivariance to full precision otherwise.
        for (row_out, &src) in permuted.chunks(4).zip(&perm) {
            for (a, b) in row_out.iter().zip(&base[src * 4..(src + 1) * 4]) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn decoder_layer_matches_composed_primitives() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, &mut rng, "dec", 4, 1, 8);
        let queries = rand_tensor(&mut rng, 3, 4);
        let qpos = rand_tensor(&mut rng, 3, 4);
        let mem = rand_tensor(&mut rng, 6, 4);
        let mpos = rand_tensor(&mut rng, 6, 4);

        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let qn = tape.constant(queries);
        let qpn = tape.constant(qpos);
        let mn = tape.constant(mem);
        let mpn = tape.constant(mpos);
        let got = layer.forward(&mut tape, &bind, qn, qpn, mn, mpn, None);

        let qk = tape.add(qn, qpn);
        let sa = layer.self_attn.forward(&mut tape, &bind, qk, qk, qn, None);
        let r1 = tape.add(qn, sa);
        let y1 = layer.norm1.forward(&mut tape, &bind, r1);
        let q2 = tape.add(y1, qpn);
        let k2 = tape.add(mn, mpn);
        let ca = layer.cross_attn.forward(&mut tape, &bind, q2, k2, mn, None);
        let r2 = tape.add(y1, ca);
        let y2 = layer.norm2.forward(&mut tape, &bind, r2);
        let ff = layer.ffn.forward(&mut tape, &bind, y2);
        let r3 = tape.add(y2, ff);
        let expect = layer.norm3.forward(&mut tape, &bind, r3);
        assert_eq!(tape.value(got).data, tape.value(expect).data);
    }

    #[test]
    fn decoder_single_query_single_memory_token_runs() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, &mut rng, "dec", 4, 2, 8);
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, false);
        let q = tape.constant(rand_tensor(&mut rng, 1, 4));
        let qp = tape.constant(Tensor::zeros(1, 4));
        let m = tape.constant(rand_tensor(&mut rng, 1, 4));
        let mp = tape.constant(Tensor::zeros(1, 4));
        let out = layer.forward(&mut tape, &bind, q, qp, m, mp, None);
        assert_eq!(tape.shape(out), (1, 4));
    }

    #[test]
    fn sinusoidal_positions_distinct_bounded_and_zero_pattern() {
        let d = 8;
        let pe = sinusoidal_positions(8, 8, d);
        // Injectivity over the whole 8x8 grid.
        for i in 0..64 {
            for j in (i + 1)..64 {
                let a = &pe.data[i * d..(i + 1) * d];
                let b = &pe.data[j * d..(j + 1) * d];
                assert_ne!(a, b, "cells {i} and {j} collide");
            }
        }
        assert!(pe.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        // Position (0,0): sine channels are 0, cosine channels are 1.
        let first = &pe.data[0..d];
        for (idx, v) in first.iter().enumerate() {
            if idx % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    #[should_panic(expected = "divisible by 4")]
    fn sinusoidal_rejects_bad_width() {
        sinusoidal_positions(2, 2, 6);
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "attn", 4, 2);
        let n_q = 2;
        let n_k = 3;
        let mut point = store.flatten();
        use rand::Rng as _;
        point.extend((0..(n_q + n_k) * 4).map(|_| rng.random_range(-1.0..1.0)));
        let n_params = store.total_elems();
        let err = check_gradients(
            |t, flat| {
                let params = t.slice_cols(flat, 0, n_params);
                let bind = store.bind_from_flat(t, params);
                let q = t.slice_cols(flat, n_params, n_q * 4);
                let q = t.reshape(q, n_q, 4);
                let k = t.slice_cols(flat, n_params + n_q * 4, n_k * 4);
                let k = t.reshape(k, n_k, 4);
                let out = attn.forward(t, &bind, q, k, k, None);
                let sq = t.mul(out, out);
                t.sum_all(sq)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn encoder_and_decoder_layer_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, &mut rng, "enc", 4, 2, 8);
        let n = 3;
        let mut point = store.flatten();
        use rand::Rng as _;
        point.extend((0..n * 4).map(|_| rng.random_range(-1.0..1.0)));
        let n_params = store.total_elems();
        let pos = sinusoidal_positions(1, n, 4);
        let err = check_gradients(
            |t, flat| {
                let params = t.slice_cols(flat, 0, n_params);
                let bind = store.bind_from_flat(t, params);
                let x = t.slice_cols(flat, n_params, n * 4);
                let x = t.reshape(x, n, 4);
                let p = t.constant(pos.clone());
                let out = enc.forward(t, &bind, x, p);
                let sq = t.mul(out, out);
                t.sum_all(sq)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "encoder rel err {err}");

        let mut store2 = ParamStore::new();
        let dec = DecoderLayer::new(&mut store2, &mut rng, "dec", 4, 2, 8);
        let (nq, nk) = (2, 3);
        let mut point2 = store2.flatten();
        point2.extend((0..(nq + nk) * 4).map(|_| rng.random_range(-1.0..1.0)));
        let n_params2 = store2.total_elems();
        let err2 = check_gradients(
            |t, flat| {
                let params = t.slice_cols(flat, 0, n_params2);
                let bind = store2.bind_from_flat(t, params);
                let q = t.slice_cols(flat, n_params2, nq * 4);
                let q = t.reshape(q, nq, 4);
                let m = t.slice_cols(flat, n_params2 + nq * 4, nk * 4);
                let m = t.reshape(m, nk, 4);
                let qp = t.constant(Tensor::zeros(nq, 4));
                let mp = t.constant(Tensor::zeros(nk, 4));
                let out = dec.forward(t, &bind, q, qp, m, mp, None);
                let sq = t.mul(out, out);
                t.sum_all(sq)
            },
            &point2,
            1e-5,
        );
        assert!(err2 < 1e-4, "decoder rel err {err2}");
    }
}
