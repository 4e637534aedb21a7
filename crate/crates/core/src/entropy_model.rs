//! Masked spatial-temporal transformer predicting a per-channel Gaussian mixture
//! for every token of the current frame from its unmasked tokens and the two
//! previous latents.

use std::path::Path;

use mdvc_nn::{checkpoint, Dense, Embedding, Graph, LayerNorm, ParamId, ParamStore, Tensor, TransformerBlock, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdvcError, Result};
use crate::gmm::{GmmHeadConfig, GmmParams, NUM_MIXTURES, RAW_PER_CHANNEL};
use crate::latent::LatentGrid;
use crate::split::MaskPattern;

/// Previous frames the model conditions on.
pub const CONTEXT_FRAMES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub latent_channels: usize,
    pub bound: i32,
    /// Multiplier applied to latent values before the input projections.
    pub value_scale: f64,
    pub gmm: GmmHeadConfig,
    pub seed: u64,
}

impl Default for EntropyModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            mlp_dim: 64,
            latent_channels: 8,
            bound: 127,
            value_scale: 0.125,
            gmm: GmmHeadConfig::default(),
            seed: 0,
        }
    }
}

/// Reference latents of frames `t-1` and `t-2`; `None` is the all-zero padding
/// used at the start of a sequence and after a context refresh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalContext {
    pub prev1: Option<LatentGrid>,
    pub prev2: Option<LatentGrid>,
}

impl TemporalContext {
    pub fn new(prev1: Option<LatentGrid>, prev2: Option<LatentGrid>) -> Self {
        Self { prev1, prev2 }
    }

    /// Shifts `latest` in as `t-1`.
    pub fn push(&mut self, latest: LatentGrid) {
        self.prev2 = self.prev1.take();
        self.prev1 = Some(latest);
    }

    /// Token-major `[n, c]` values of each slot, zeros where absent.
    pub fn values(&self, n: usize, c: usize) -> Result<[Vec<f64>; CONTEXT_FRAMES]> {
        let slot = |g: &Option<LatentGrid>| -> Result<Vec<f64>> {
            match g {
                None => Ok(vec![0.0; n * c]),
                Some(g) if g.tokens() == n && g.c == c => Ok(g.data.iter().map(|&v| v as f64).collect()),
                Some(g) => Err(MdvcError::Shape(format!(
                    "context latent has {} tokens of {} channels, current frame {n} of {c}",
                    g.tokens(),
                    g.c
                ))),
            }
        };
        Ok([slot(&self.prev1)?, slot(&self.prev2)?])
    }
}

/// Geometry of the current token grid: size and the offset of its top-left
/// token in a larger frame (non-zero for training crops).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPos {
    pub h: usize,
    pub w: usize,
    pub top: usize,
    pub left: usize,
}

impl GridPos {
    pub fn full(h: usize, w: usize) -> Self {
        Self { h, w, top: 0, left: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// 2D sinusoidal encoding; the first half of `dim` encodes the row, the second the column.
pub fn position_encoding(pos: GridPos, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; pos.tokens() * dim];
    for r in 0..pos.h {
        for q in 0..pos.w {
            let row = &mut out[(r * pos.w + q) * dim..][..dim];
            for (k, coord) in [(0, pos.top + r), (half, pos.left + q)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-2.0 * i as f64 / half as f64);
                    let a = coord as f64 * freq;
                    row[k + 2 * i] = a.sin();
                    row[k + 2 * i + 1] = a.cos();
                }
            }
        }
    }
    out
}

pub struct EntropyModel {
    pub cfg: EntropyModelConfig,
    pub store: ParamStore,
    cur_proj: Dense,
    ctx_proj: Dense,
    mask_token: ParamId,
    slots: Embedding,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Dense,
}

impl EntropyModel {
    pub fn new(cfg: EntropyModelConfig) -> Result<Self> {
        if cfg.dim % 4 != 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(MdvcError::Config(format!(
                "entropy model width {} must be a multiple of 4 and of the head count {}",
                cfg.dim, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x454d_0000);
        let mut store = ParamStore::new();
        let (c, d) = (cfg.latent_channels, cfg.dim);
        let cur_proj = Dense::new(&mut store, &mut rng, "em.cur_proj", c, d, true)?;
        let ctx_proj = Dense::new(&mut store, &mut rng, "em.ctx_proj", c, d, true)?;
        let mask_token = store.add("em.mask_token", mdvc_nn::params::normal(&mut rng, &[d], 0.02))?;
        let slots = Embedding::new(&mut store, &mut rng, "em.slots", 1 + CONTEXT_FRAMES, d)?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("em.block{i}"), d, cfg.heads, cfg.mlp_dim))
            .collect::<mdvc_nn::Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "em.ln_f", d)?;
        let head = Dense::new(&mut store, &mut rng, "em.head", d, c * RAW_PER_CHANNEL, true)?;
        // Start near a wide, uninformative mixture: small weights, sigma about 100.
        store.get_mut(head.w).value.data_mut().iter_mut().for_each(|v| *v *= 0.01);
        let sigma_raw = inverse_softplus(100.0 / cfg.gmm.sigma_scale);
        let bias = store.get_mut(head.b.expect("head has a bias")).value.data_mut();
        for ch in 0..c {
            for m in 0..NUM_MIXTURES {
                bias[ch * RAW_PER_CHANNEL + NUM_MIXTURES + m] = sigma_raw;
            }
        }
        Ok(Self {
            cfg,
            store,
            cur_proj,
            ctx_proj,
            mask_token,
            slots,
            blocks,
            ln_f,
            head,
        })
    }

    /// Raw head output `[n, c * RAW_PER_CHANNEL]` for every current position.
    ///
    /// `current` is the `[n, c]` token-major current frame; rows set in `mask`
    /// never influence the output. `ctx` holds the `[n, c]` values of `t-1` and `t-2`.
    pub fn forward(&self, g: &mut Graph, current: Var, mask: &MaskPattern, ctx: &[Vec<f64>; CONTEXT_FRAMES], pos: GridPos) -> Result<Var> {
        let (c, d) = (self.cfg.latent_channels, self.cfg.dim);
        let n = pos.tokens();
        if g.shape(current) != [n, c] || mask.len() != n || ctx.iter().any(|v| v.len() != n * c) {
            return Err(MdvcError::Shape(format!(
                "entropy model expects [{n}, {c}] inputs and a {n}-token mask, got {:?} and {}",
                g.shape(current),
                mask.len()
            )));
        }
        let s = self.cfg.value_scale;
        let cur = g.scale(current, s)?;
        let cur = self.cur_proj.forward(g, &self.store, cur)?;
        let token = g.param(&self.store, self.mask_token);
        let cur = g.mask_rows(cur, token, &mask.0)?;
        // Slot order in the sequence: t-2, t-1, current.
        let mut parts = Vec::with_capacity(3);
        for values in ctx.iter().rev() {
            let x = g.input(Tensor::new(vec![n, c], values.iter().map(|v| v * s).collect())?);
            parts.push(self.ctx_proj.forward(g, &self.store, x)?);
        }
        parts.push(cur);
        let seq = g.concat_rows(&parts)?;
        let slot_ids: Vec<usize> = (0..3).flat_map(|k| std::iter::repeat_n(k, n)).collect();
        let slots = self.slots.forward(g, &self.store, &slot_ids)?;
        let pe = position_encoding(pos, d);
        let pe = g.input(Tensor::new(vec![3 * n, d], pe.repeat(3))?);
        let x = g.add(seq, slots)?;
        let mut x = g.add(x, pe)?;
        for b in &self.blocks {
            x = b.forward(g, &self.store, x)?;
        }
        let x = self.ln_f.forward(g, &self.store, x)?;
        let x = g.slice_rows(x, 2 * n, n)?;
        Ok(self.head.forward(g, &self.store, x)?)
    }

    /// Mixture parameters for every position of `current` given `mask` and `ctx`.
    /// Values of masked tokens in `current` are ignored.
    pub fn predict(&self, current: &LatentGrid, mask: &MaskPattern, ctx: &TemporalContext) -> Result<GmmParams> {
        let pos = GridPos::full(current.h, current.w);
        let c = current.c;
        if mask.len() != pos.tokens() {
            return Err(MdvcError::Shape(format!("mask covers {} of {} tokens", mask.len(), pos.tokens())));
        }
        let ctx = ctx.values(pos.tokens(), c)?;
        let values = current
            .data
            .chunks(c)
            .zip(&mask.0)
            .flat_map(|(t, &m)| t.iter().map(move |&v| if m { 0.0 } else { v as f64 }))
            .collect();
        let mut g = Graph::new();
        let cur = g.input(Tensor::new(vec![pos.tokens(), c], values)?);
        let head = self.forward(&mut g, cur, mask, &ctx, pos)?;
        Ok(GmmParams::from_head(g.value(head).data(), pos.tokens(), c, &self.cfg.gmm))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(format!("{stem}.ckpt")), &self.store)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let cfg_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| MdvcError::Checkpoint(format!("cannot read {}: {e}", cfg_path.display())))?;
        let cfg: EntropyModelConfig =
            serde_json::from_str(&text).map_err(|e| MdvcError::Checkpoint(format!("{}: {e}", cfg_path.display())))?;
        let mut model = Self::new(cfg)?;
        let ckpt = dir.join(format!("{stem}.ckpt"));
        checkpoint::load(&ckpt, &mut model.store)
            .map_err(|e| MdvcError::Checkpoint(format!("{}: {e}", ckpt.display())))?;
        Ok(model)
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::bits_at;
    use mdvc_nn::graph::softplus;
    use rand::Rng;

    fn model() -> EntropyModel {
        EntropyModel::new(EntropyModelConfig::default()).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LatentGrid {
        let data = (0..h * w * 8).map(|_| rng.random_range(-20..=20)).collect();
        LatentGrid::new(h, w, 8, 127, data).unwrap()
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [0.01, 0.5, 3.125, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-9);
        }
    }

    #[test]
    fn position_encoding_layout() {
        let pe = position_encoding(GridPos { h: 2, w: 3, top: 1, left: 0 }, 8);
        // Token (0, 2): row coordinate 1, column coordinate 2, lowest frequency 1.
        let row = &pe[2 * 8..3 * 8];
        assert!((row[0] - 1f64.sin()).abs() < 1e-12);
        assert!((row[1] - 1f64.cos()).abs() < 1e-12);
        assert!((row[4] - 2f64.sin()).abs() < 1e-12);
        assert!((row[5] - 2f64.cos()).abs() < 1e-12);
        assert!((row[6] - (2.0 * 0.01f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn initial_predictions_are_valid_and_near_uniform() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cur = random_grid(&mut rng, 4, 4);
        let ctx = TemporalContext::new(Some(random_grid(&mut rng, 4, 4)), None);
        let gmm = m.predict(&cur, &MaskPattern::all(16), &ctx).unwrap();
        for g in &gmm.gmms {
            assert!(g.sigma.iter().all(|&s| s >= 0.01));
            assert!((g.weight.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let targets: Vec<f64> = cur.data.iter().map(|&v| v as f64).collect();
        let all: Vec<usize> = (0..16).collect();
        let per_symbol = bits_at(&gmm, &targets, &all, 1.0 / 65536.0).bits / (16.0 * 8.0);
        let uniform = 255f64.log2();
        assert!((per_symbol - uniform).abs() < 0.15 * uniform, "{per_symbol}");
    }

    #[test]
    fn masked_values_do_not_leak() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cur = random_grid(&mut rng, 3, 3);
        let mut other = cur.clone();
        let mask = MaskPattern(vec![true, false, true, false, false, true, true, false, true]);
        for (i, &masked) in mask.0.iter().enumerate() {
            if masked {
                other.token_mut(i).iter_mut().for_each(|v| *v += 7);
            }
        }
        let ctx = TemporalContext::default();
        assert_eq!(m.predict(&cur, &mask, &ctx).unwrap(), m.predict(&other, &mask, &ctx).unwrap());
        let mut visible = cur.clone();
        visible.token_mut(1)[0] += 7;
        assert_ne!(m.predict(&cur, &mask, &ctx).unwrap(), m.predict(&visible, &mask, &ctx).unwrap());
    }

    #[test]
    fn temporal_context_shifts_and_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_grid(&mut rng, 2, 2), random_grid(&mut rng, 2, 2));
        let mut ctx = TemporalContext::default();
        ctx.push(a.clone());
        assert_eq!(ctx, TemporalContext::new(Some(a.clone()), None));
        ctx.push(b.clone());
        assert_eq!(ctx, TemporalContext::new(Some(b), Some(a)));
        let [p1, p2] = TemporalContext::default().values(4, 8).unwrap();
        assert!(p1.iter().chain(&p2).all(|&v| v == 0.0));
        assert!(ctx.values(9, 8).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let m = model();
        let cur = LatentGrid::zeros(2, 2, 8, 127);
        assert!(matches!(
            m.predict(&cur, &MaskPattern::all(3), &TemporalContext::default()),
            Err(MdvcError::Shape(_))
        ));
        assert!(EntropyModel::new(EntropyModelConfig { dim: 30, ..Default::default() }).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        m.store.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v += 0.01));
        m.save(dir.path(), "em").unwrap();
        let back = EntropyModel::load(dir.path(), "em").unwrap();
        let cur = LatentGrid::zeros(2, 2, 8, 127);
        let mask = MaskPattern::all(4);
        let ctx = TemporalContext::default();
        assert_eq!(m.predict(&cur, &mask, &ctx).unwrap(), back.predict(&cur, &mask, &ctx).unwrap());
    }
}
