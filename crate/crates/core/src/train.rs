//! Training drivers: stage I (transforms and factorized prior), stage II
//! (entropy model on frozen latents) and stage III (joint fine-tuning).

use mdvc_nn::{Adam, Graph, LrSchedule, NnError, Tensor};
use mdvc_nn::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{quantize_train, FrameCodec, QuantMode, DOWNSAMPLE};
use crate::entropy_model::{EntropyModel, GridPos, CONTEXT_FRAMES};
use crate::error::{MdvcError, Result};
use crate::gmm::{bits_at, gmm_bits, GmmParams};
use crate::split::{mask_with_ratio, sample_training_mask, MaskPattern};
use crate::video::{synthetic_video, Frame, SyntheticConfig, Video};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Square crop side in pixels; a multiple of the downsampling factor.
    pub crop: usize,
    pub lr: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Synthetic clips generated for the training pool.
    pub pool_clips: usize,
    pub clip: SyntheticConfig,
    /// Probability of training on refresh-style context: both previous frames
    /// zeroed, or only `t-2` zeroed, with equal odds.
    pub context_drop: f64,
    /// Codec learning rate relative to `lr` during joint fine-tuning.
    pub codec_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 4,
            crop: 32,
            lr: 2e-3,
            warmup: 50,
            clip_norm: 10.0,
            seed: 0,
            pool_clips: 32,
            clip: SyntheticConfig {
                frames: 6,
                ..SyntheticConfig::default()
            },
            context_drop: 0.2,
            codec_lr_ratio: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
}

impl TrainReport {
    /// Mean loss over the last `n` logged steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        tail.iter().map(|s| s.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Pre-generated pool of training clips with seeded crop sampling.
pub struct ClipPool {
    pub clips: Vec<Video>,
}

impl ClipPool {
    pub fn synthetic(cfg: &SyntheticConfig, count: usize, seed: u64) -> Self {
        let clips = (0..count as u64)
            .map(|i| synthetic_video(cfg, seed.wrapping_mul(1_000_003).wrapping_add(i)))
            .collect();
        Self { clips }
    }

    /// A random clip, a random start frame with `history` predecessors, and a
    /// crop offset aligned to the latent grid. Returns `history + 1` crops in
    /// temporal order and the crop offset in latent units.
    pub fn sample<R: Rng>(&self, rng: &mut R, history: usize, crop: usize) -> Result<(Vec<Frame>, (usize, usize))> {
        let clip = &self.clips[rng.random_range(0..self.clips.len())];
        if clip.len() <= history || clip.height < crop || clip.width < crop {
            return Err(MdvcError::Config(format!(
                "training clips of {}x{}x{} cannot supply {}-frame {crop}px crops",
                clip.len(),
                clip.height,
                clip.width,
                history + 1
            )));
        }
        let t = rng.random_range(history..clip.len());
        let top = rng.random_range(0..=(clip.height - crop) / DOWNSAMPLE) * DOWNSAMPLE;
        let left = rng.random_range(0..=(clip.width - crop) / DOWNSAMPLE) * DOWNSAMPLE;
        let frames = (t - history..=t)
            .map(|i| clip.frames[i].crop(top, left, crop, crop))
            .collect::<Result<Vec<_>>>()?;
        Ok((frames, (top / DOWNSAMPLE, left / DOWNSAMPLE)))
    }
}

pub(crate) fn diverged(step: u64, e: impl std::fmt::Display) -> MdvcError {
    MdvcError::Diverged {
        step: step as usize,
        detail: e.to_string(),
    }
}

pub(crate) fn step_error(step: u64, e: NnError) -> MdvcError {
    match e {
        NnError::NonFiniteValue(_) | NnError::NonFiniteGradient(_) => diverged(step, e),
        other => other.into(),
    }
}

/// Stage I: trains analysis, synthesis and the factorized prior on `bpp + lambda * MSE`.
pub fn train_stage1(codec: &mut FrameCodec, pool: &ClipPool, cfg: &TrainConfig) -> Result<TrainReport> {
    check_crop(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5741_4745_0001);
    let mut opt = Adam::new(LrSchedule::new(cfg.lr, cfg.warmup, cfg.steps)).with_clip(cfg.clip_norm);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            batch.push(pool.sample(&mut rng, 0, cfg.crop)?.0.remove(0));
        }
        let refs: Vec<&Frame> = batch.iter().collect();
        let mut g = Graph::new();
        let (loss, bpp, mse) = codec.rd_loss(&mut g, &refs, &mut rng).map_err(|e| match e {
            MdvcError::Nn(n) => step_error(step, n),
            other => other,
        })?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(diverged(step, format!("loss {value}")));
        }
        g.backward_into(loss, &mut codec.store).map_err(|e| step_error(step, e))?;
        opt.step(&mut codec.store, 1.0).map_err(|e| step_error(step, e))?;
        report.history.push(StepLog {
            step,
            loss: value,
            bpp,
            mse,
        });
    }
    Ok(report)
}

fn check_crop(cfg: &TrainConfig) -> Result<()> {
    if cfg.crop % DOWNSAMPLE != 0 || cfg.crop == 0 || cfg.batch == 0 {
        return Err(MdvcError::Config(format!(
            "crop {} must be a positive multiple of {DOWNSAMPLE} and batch positive",
            cfg.crop
        )));
    }
    Ok(())
}

fn nn_step(step: u64) -> impl Fn(MdvcError) -> MdvcError {
    move |e| match e {
        MdvcError::Nn(n) => step_error(step, n),
        other => other,
    }
}

/// Unquantized latents of one clip, one token-major `[h * w, c]` buffer per frame.
#[derive(Clone, Debug)]
pub struct LatentClip {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frames: Vec<Vec<f64>>,
}

impl LatentClip {
    pub fn encode(codec: &FrameCodec, video: &Video) -> Result<Self> {
        let (h, w, c) = codec.latent_shape(video.height, video.width)?;
        let frames = video
            .frames
            .iter()
            .map(|f| codec.analyze(f).map(|p| planar_to_tokens(&p, c, h * w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h, w, c, frames })
    }

    fn crop(&self, t: usize, top: usize, left: usize, side: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(side * side * self.c);
        for r in top..top + side {
            let start = (r * self.w + left) * self.c;
            out.extend_from_slice(&self.frames[t][start..start + side * self.c]);
        }
        out
    }
}

pub fn planar_to_tokens(planar: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        for i in 0..n {
            out[i * c + ch] = planar[ch * n + i];
        }
    }
    out
}

fn round_clamped(values: &[f64], bound: i32) -> Vec<f64> {
    let a = bound as f64;
    values.iter().map(|v| v.round_ties_even().clamp(-a, a)).collect()
}

/// One entropy-model example: current latent crop, its two rounded contexts,
/// a mask and the crop's place in the frame.
#[derive(Clone, Debug)]
pub struct EmSample {
    /// Token-major current values (unquantized when training, integers when validating).
    pub current: Vec<f64>,
    pub ctx: [Vec<f64>; CONTEXT_FRAMES],
    pub mask: MaskPattern,
    pub pos: GridPos,
    /// Clip, frame and pixel offset the sample was cut from.
    pub source: (usize, usize, usize, usize),
}

pub struct LatentPool {
    pub clips: Vec<LatentClip>,
    pub bound: i32,
}

impl LatentPool {
    pub fn new(codec: &FrameCodec, pool: &ClipPool) -> Result<Self> {
        let clips = pool.clips.iter().map(|v| LatentClip::encode(codec, v)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clips,
            bound: codec.cfg.bound,
        })
    }

    /// A random `side x side` token crop at a frame with two predecessors.
    /// With probability `drop` the context is replaced by refresh-style padding.
    pub fn sample<R: Rng>(&self, rng: &mut R, side: usize, drop: f64, mask: Option<f64>) -> Result<EmSample> {
        let ci = rng.random_range(0..self.clips.len());
        let clip = &self.clips[ci];
        if clip.frames.len() <= CONTEXT_FRAMES || clip.h < side || clip.w < side {
            return Err(MdvcError::Config(format!(
                "latent clips of {} frames at {}x{} cannot supply {side}x{side} crops with two context frames",
                clip.frames.len(),
                clip.h,
                clip.w
            )));
        }
        let t = rng.random_range(CONTEXT_FRAMES..clip.frames.len());
        let top = rng.random_range(0..=clip.h - side);
        let left = rng.random_range(0..=clip.w - side);
        let mut ctx = [
            round_clamped(&clip.crop(t - 1, top, left, side), self.bound),
            round_clamped(&clip.crop(t - 2, top, left, side), self.bound),
        ];
        if rng.random_bool(drop) {
            ctx[1].iter_mut().for_each(|v| *v = 0.0);
            if rng.random_bool(0.5) {
                ctx[0].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let n = side * side;
        let mask = match mask {
            Some(ratio) => mask_with_ratio(n, ratio, rng),
            None => sample_training_mask(n, rng),
        };
        Ok(EmSample {
            current: clip.crop(t, top, left, side),
            ctx,
            mask,
            pos: GridPos { h: side, w: side, top, left },
            source: (ci, t, top * DOWNSAMPLE, left * DOWNSAMPLE),
        })
    }

    /// Fixed evaluation samples with integer targets and masks at `ratio`
    /// (`None` draws each ratio from `U[0, 1]`).
    pub fn validation_set(&self, seed: u64, count: usize, side: usize, ratio: Option<f64>) -> Result<Vec<EmSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut s = self.sample(&mut rng, side, 0.0, ratio)?;
                s.current = round_clamped(&s.current, self.bound);
                Ok(s)
            })
            .collect()
    }
}

fn em_head(em: &EntropyModel, g: &mut Graph, s: &EmSample, input: &[f64]) -> Result<Var> {
    let c = em.cfg.latent_channels;
    let n = s.pos.tokens();
    let visible = input
        .chunks(c)
        .zip(&s.mask.0)
        .flat_map(|(t, &m)| t.iter().map(move |&v| if m { 0.0 } else { v }))
        .collect();
    let cur = g.input(Tensor::new(vec![n, c], visible)?);
    em.forward(g, cur, &s.mask, &s.ctx, s.pos)
}

/// Mean masked bits per symbol over a validation set (integer targets).
pub fn masked_bitrate(em: &EntropyModel, samples: &[EmSample]) -> Result<f64> {
    let (mut bits, mut symbols) = (0.0, 0usize);
    for s in samples {
        let mut g = Graph::new();
        let head = em_head(em, &mut g, s, &s.current)?;
        let gmm = GmmParams::from_head(g.value(head).data(), s.pos.tokens(), em.cfg.latent_channels, &em.cfg.gmm);
        let st = bits_at(&gmm, &s.current, &s.mask.masked_positions(), em.cfg.gmm.prob_floor);
        bits += st.bits;
        symbols += st.symbols;
    }
    Ok(bits / symbols.max(1) as f64)
}

/// Stage II: trains the entropy model on latents of a frozen codec to minimize masked bits.
/// The loss is an estimate of full-frame bpp: masked bits scaled by `n / masked`.
pub fn train_stage2(em: &mut EntropyModel, latents: &LatentPool, cfg: &TrainConfig) -> Result<TrainReport> {
    check_crop(cfg)?;
    let side = cfg.crop / DOWNSAMPLE;
    let pixels = (cfg.crop * cfg.crop) as f64;
    let c = em.cfg.latent_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5741_4745_0002);
    let mut opt = Adam::new(LrSchedule::new(cfg.lr, cfg.warmup, cfg.steps)).with_clip(cfg.clip_norm);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let mut s = latents.sample(&mut rng, side, cfg.context_drop, None)?;
            let masked = s.mask.masked_positions();
            if masked.is_empty() {
                continue;
            }
            let target: Vec<f64> = s.current.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            s.current = round_clamped(&s.current, latents.bound);
            let mut g = Graph::new();
            let head = em_head(em, &mut g, &s, &s.current).map_err(nn_step(step))?;
            let t = g.input(Tensor::new(vec![s.pos.tokens(), c], target)?);
            let (bits, _) = gmm_bits(&mut g, head, t, &masked, c, &em.cfg.gmm)?;
            let loss = g.scale(bits, s.pos.tokens() as f64 / masked.len() as f64 / pixels)?;
            total += g.value(loss).item();
            g.backward_into(loss, &mut em.store).map_err(|e| step_error(step, e))?;
        }
        let value = total / cfg.batch as f64;
        if !value.is_finite() {
            return Err(diverged(step, format!("loss {value}")));
        }
        opt.step(&mut em.store, 1.0 / cfg.batch as f64).map_err(|e| step_error(step, e))?;
        report.history.push(StepLog {
            step,
            loss: value,
            bpp: value,
            mse: 0.0,
        });
    }
    Ok(report)
}

/// Joint objective terms for one example: entropy-model bpp estimate and MSE (0..255 scale).
struct JointTerms {
    bpp: f64,
    mse: f64,
}

/// Forward and backward of the joint objective for one example; gradients
/// accumulate into both stores. Contexts are detached rounded latents.
fn joint_example<R: Rng>(
    codec: &mut FrameCodec,
    em: &mut EntropyModel,
    frame: &Frame,
    s: &EmSample,
    rng: &mut R,
) -> Result<JointTerms> {
    let c = codec.cfg.latent_channels;
    let n = s.pos.tokens();
    let pixels = frame.pixels() as f64;
    let lambda = codec.cfg.lambda;
    let mut g = Graph::new();
    let x = codec.frame_input(&mut g, &[frame])?;
    let y = codec.analysis(&mut g, x)?;
    let flat = g.reshape(y, &[c, n])?;
    let tokens = g.transpose(flat)?;
    let noisy = quantize_train(&mut g, tokens, QuantMode::Noise, rng)?;
    let rounded = quantize_train(&mut g, y, QuantMode::Ste, rng)?;
    let xh = codec.synthesis(&mut g, rounded)?;
    let d = g.sub(xh, x)?;
    let sq = g.mul(d, d)?;
    let mse01 = g.mean(sq)?;
    let mse = g.value(mse01).item() * 255.0 * 255.0;
    let mut loss = g.scale(mse01, lambda * 255.0 * 255.0)?;

    let masked = s.mask.masked_positions();
    let mut bpp = 0.0;
    if !masked.is_empty() {
        let visible = round_clamped(g.value(tokens).data(), codec.cfg.bound);
        let mut ge = Graph::new();
        let head = em_head(em, &mut ge, s, &visible)?;
        let t = ge.leaf(g.value(noisy).clone());
        let (bits, _) = gmm_bits(&mut ge, head, t, &masked, c, &em.cfg.gmm)?;
        let rate = ge.scale(bits, n as f64 / masked.len() as f64 / pixels)?;
        bpp = ge.value(rate).item();
        let grads = ge.backward(rate)?;
        grads.accumulate_into(&mut em.store);
        // Chain the rate gradient into the codec graph through a linear surrogate.
        let dt = grads.of(t).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n * c]);
        let dt = g.input(Tensor::new(vec![n, c], dt)?);
        let lin = g.mul(noisy, dt)?;
        let lin = g.sum(lin)?;
        loss = g.add(loss, lin)?;
    }
    g.backward_into(loss, &mut codec.store)?;
    Ok(JointTerms { bpp, mse })
}

/// Rate-distortion Lagrangian `bpp + lambda * MSE` on fixed validation samples:
/// integer latents, fixed masks, masked bits scaled to a full-frame estimate.
pub fn validation_lagrangian(codec: &FrameCodec, em: &EntropyModel, pool: &ClipPool, samples: &[EmSample], crop: usize) -> Result<(f64, f64, f64)> {
    let c = codec.cfg.latent_channels;
    let (mut bpp, mut mse) = (0.0, 0.0);
    for s in samples {
        let (ci, t, top, left) = s.source;
        let clip = &pool.clips[ci];
        let frame = clip.frames[t].crop(top, left, crop, crop)?;
        let prev = |k: usize| -> Result<Vec<f64>> {
            let f = clip.frames[t - k].crop(top, left, crop, crop)?;
            let p = codec.analyze(&f)?;
            Ok(round_clamped(&planar_to_tokens(&p, c, s.pos.tokens()), codec.cfg.bound))
        };
        let ctx = [prev(1)?, prev(2)?];
        let enc = codec.encode_frame(&frame)?;
        let current: Vec<f64> = enc.latent.data.iter().map(|&v| v as f64).collect();
        let sample = EmSample {
            current,
            ctx,
            ..s.clone()
        };
        let masked = sample.mask.masked_positions();
        if !masked.is_empty() {
            let mut g = Graph::new();
            let head = em_head(em, &mut g, &sample, &sample.current)?;
            let gmm = GmmParams::from_head(g.value(head).data(), s.pos.tokens(), c, &em.cfg.gmm);
            let st = bits_at(&gmm, &sample.current, &masked, em.cfg.gmm.prob_floor);
            bpp += st.bits * s.pos.tokens() as f64 / masked.len() as f64 / frame.pixels() as f64;
        }
        let rec = codec.decode_frame(&enc.latent)?;
        mse += crate::metrics::mse(&frame, &rec)?;
    }
    let k = samples.len().max(1) as f64;
    let (bpp, mse) = (bpp / k, mse / k);
    Ok((bpp + codec.cfg.lambda * mse, bpp, mse))
}

/// Stage III: joint fine-tuning of codec and entropy model on
/// `bpp + lambda * MSE` with the entropy model as rate term. On divergence both
/// models are restored to their state before the call.
pub fn train_stage3(codec: &mut FrameCodec, em: &mut EntropyModel, pool: &ClipPool, cfg: &TrainConfig) -> Result<TrainReport> {
    check_crop(cfg)?;
    let before = (codec.store.clone(), em.store.clone());
    let result = stage3_loop(codec, em, pool, cfg);
    if result.is_err() {
        codec.store = before.0;
        em.store = before.1;
    }
    result
}

fn stage3_loop(codec: &mut FrameCodec, em: &mut EntropyModel, pool: &ClipPool, cfg: &TrainConfig) -> Result<TrainReport> {
    let side = cfg.crop / DOWNSAMPLE;
    let c = codec.cfg.latent_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5741_4745_0003);
    let mut em_opt = Adam::new(LrSchedule::new(cfg.lr, cfg.warmup, cfg.steps)).with_clip(cfg.clip_norm);
    let mut codec_opt =
        Adam::new(LrSchedule::new(cfg.lr * cfg.codec_lr_ratio, cfg.warmup, cfg.steps)).with_clip(cfg.clip_norm);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let (mut bpp, mut mse) = (0.0, 0.0);
        for _ in 0..cfg.batch {
            let (frames, (top, left)) = pool.sample(&mut rng, CONTEXT_FRAMES, cfg.crop)?;
            let n = side * side;
            let mut ctx = [Vec::new(), Vec::new()];
            for k in 0..CONTEXT_FRAMES {
                let p = codec.analyze(&frames[CONTEXT_FRAMES - 1 - k]).map_err(nn_step(step))?;
                ctx[k] = round_clamped(&planar_to_tokens(&p, c, n), codec.cfg.bound);
            }
            if rng.random_bool(cfg.context_drop) {
                ctx[1].iter_mut().for_each(|v| *v = 0.0);
                if rng.random_bool(0.5) {
                    ctx[0].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let s = EmSample {
                current: Vec::new(),
                ctx,
                mask: sample_training_mask(n, &mut rng),
                pos: GridPos { h: side, w: side, top, left },
                source: (0, 0, 0, 0),
            };
            let terms = joint_example(codec, em, &frames[CONTEXT_FRAMES], &s, &mut rng).map_err(nn_step(step))?;
            bpp += terms.bpp;
            mse += terms.mse;
        }
        let b = cfg.batch as f64;
        let (bpp, mse) = (bpp / b, mse / b);
        let value = bpp + codec.cfg.lambda * mse;
        if !value.is_finite() {
            return Err(diverged(step, format!("loss {value}")));
        }
        em_opt.step(&mut em.store, 1.0 / b).map_err(|e| step_error(step, e))?;
        codec_opt.step(&mut codec.store, 1.0 / b).map_err(|e| step_error(step, e))?;
        report.history.push(StepLog {
            step,
            loss: value,
            bpp,
            mse,
        });
    }
    Ok(report)
}
