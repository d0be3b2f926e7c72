//! The full tracking model: hypothesis generator, memory encoder, and
//! memory decoder built over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::decoder::MemoryDecoder;
use crate::encoder::{Aggregation, MemoryEncoder};
use crate::hypothesis::HypothesisGenerator;
use crate::tensor::ParamStore;

/// Architecture and inference hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub channels: usize,
    pub patch_stride: usize,
    pub enc_layers: usize,
    pub hyp_dec_layers: usize,
    pub mem_dec_layers: usize,
    pub n_pro: usize,
    pub t_s: usize,
    pub t_l: usize,
    pub n_max: usize,
    pub t_max: usize,
    /// Consecutive absent frames before a track retires.
    pub patience: usize,
    pub eps_pro: f64,
    pub eps_tck: f64,
    pub aggregation: Aggregation,
    pub dmat_update: bool,
    pub single_score: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            d_ff: 64,
            channels: 32,
            patch_stride: 8,
            enc_layers: 2,
            hyp_dec_layers: 2,
            mem_dec_layers: 2,
            n_pro: 10,
            t_s: 3,
            t_l: 24,
            n_max: 64,
            t_max: 24,
            patience: 24,
            eps_pro: 0.7,
            eps_tck: 0.6,
            aggregation: Aggregation::default(),
            dmat_update: true,
            single_score: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d % 4 != 0 {
            return fail(format!("d must be a positive multiple of 4, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("heads must divide d: d={} heads={}", self.d, self.heads));
        }
        if self.n_pro == 0 {
            return fail("n_pro must be at least 1".into());
        }
        if self.t_s == 0 || self.t_s > self.t_l {
            return fail(format!("need 1 <= t_s <= t_l, got t_s={} t_l={}", self.t_s, self.t_l));
        }
        if self.t_l > self.t_max {
            return fail(format!("t_l={} exceeds t_max={}", self.t_l, self.t_max));
        }
        if self.patience > self.t_max {
            return fail(format!(
                "patience={} beyond t_max={} would leave encoder windows empty",
                self.patience, self.t_max
            ));
        }
        if self.n_max == 0 || self.t_max == 0 || self.patience == 0 {
            return fail("n_max, t_max, patience must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eps_pro) || !(0.0..=1.0).contains(&self.eps_tck) {
            return fail("thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }
}

pub struct Model {
    pub hyp: HypothesisGenerator,
    pub enc: MemoryEncoder,
    pub dec: MemoryDecoder,
    pub cfg: ModelConfig,
}

impl Model {
    /// Register all parameters in `store` with a seeded initialization.
    pub fn build(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Model {
        cfg.validate().expect("model config must be validated before build");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let hyp = HypothesisGenerator::new(
            store,
            &mut rng,
            cfg.patch_stride,
            cfg.channels,
            cfg.d,
            cfg.heads,
            cfg.d_ff,
            cfg.enc_layers,
            cfg.hyp_dec_layers,
            cfg.n_pro,
        );
        let enc = MemoryEncoder::new(store, &mut rng, cfg.d, cfg.heads, cfg.d_ff);
        let dec = MemoryDecoder::new(
            store,
            &mut rng,
            cfg.d,
            cfg.heads,
            cfg.d_ff,
            cfg.mem_dec_layers,
            cfg.n_pro,
        );
        Model { hyp, enc, dec, cfg }
    }
}
