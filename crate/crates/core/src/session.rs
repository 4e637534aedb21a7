//! Stateful frame encoder and decoder: temporal contexts, the context refresh
//! rule, description coding and (on the decoder) loss handling.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codec::FrameCodec;
use crate::coding::{decode_prefix, description_schedule, encode_description, token_crc, CoderConfig, CodingStats, DescriptionStream, Predictor};
use crate::container::{FrameBitstream, FrameHeader, CONTEXT_PREV1, CONTEXT_PREV2};
use crate::entropy_model::TemporalContext;
use crate::error::{MdvcError, Result};
use crate::inference::{infer_lost, zero_fill};
use crate::latent::LatentGrid;
use crate::split::{merge, DescriptionSet, ReceivedTokens};
use crate::video::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Number of descriptions S.
    pub descriptions: usize,
    pub coder: CoderConfig,
    /// Frames `t` with `t % refresh_period == 0` use no context and frames with
    /// remainder 1 use only `t-1`. Zero disables refreshes after the first two frames.
    pub refresh_period: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            descriptions: 4,
            coder: CoderConfig::default(),
            refresh_period: 4,
        }
    }
}

/// Context slots used for frame `t`.
pub fn context_flags(t: usize, refresh_period: usize) -> u8 {
    let phase = if refresh_period == 0 { t.min(2) } else { t % refresh_period };
    match phase {
        0 => 0,
        1 => CONTEXT_PREV1,
        _ => CONTEXT_PREV1 | CONTEXT_PREV2,
    }
}

fn select_context(refs: &TemporalContext, flags: u8) -> TemporalContext {
    TemporalContext::new(
        refs.prev1.clone().filter(|_| flags & CONTEXT_PREV1 != 0),
        refs.prev2.clone().filter(|_| flags & CONTEXT_PREV2 != 0),
    )
}

/// Per-frame encoder measurements.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeReport {
    pub payload_bytes: usize,
    pub header_bytes: usize,
    pub clamped: usize,
    pub coding: CodingStats,
    /// Analysis transform time.
    pub transform_time: Duration,
    pub total_time: Duration,
    pub latent: Option<LatentGrid>,
}

pub struct Encoder<'a, P: Predictor + ?Sized> {
    pub codec: &'a FrameCodec,
    pub model: &'a P,
    pub cfg: SessionConfig,
    refs: TemporalContext,
    t: usize,
}

impl<'a, P: Predictor + ?Sized> Encoder<'a, P> {
    pub fn new(codec: &'a FrameCodec, model: &'a P, cfg: SessionConfig) -> Self {
        Self {
            codec,
            model,
            cfg,
            refs: TemporalContext::default(),
            t: 0,
        }
    }

    pub fn frame_index(&self) -> usize {
        self.t
    }

    pub fn encode(&mut self, frame: &Frame) -> Result<(FrameBitstream, EncodeReport)> {
        let start = Instant::now();
        let enc = self.codec.encode_frame(frame)?;
        let transform_time = start.elapsed();
        let (bits, mut report) = self.encode_latent(&enc.latent)?;
        report.clamped = enc.clamped;
        report.transform_time = transform_time;
        report.total_time = start.elapsed();
        Ok((bits, report))
    }

    /// Codes an already quantized latent and advances the context.
    pub fn encode_latent(&mut self, latent: &LatentGrid) -> Result<(FrameBitstream, EncodeReport)> {
        let start = Instant::now();
        let set = DescriptionSet::new(latent.h, latent.w, self.cfg.descriptions)?;
        let flags = context_flags(self.t, self.cfg.refresh_period);
        let ctx = select_context(&self.refs, flags);
        let mut report = EncodeReport::default();
        let mut descriptions = Vec::with_capacity(set.s);
        for id in 0..set.s {
            let (d, st) = encode_description(self.model, latent, &set, id, &ctx, &self.cfg.coder)?;
            report.coding.add(&st);
            descriptions.push(d);
        }
        let header = FrameHeader {
            frame_index: self.t as u32,
            h: dim16(latent.h)?,
            w: dim16(latent.w)?,
            c: dim16(latent.c)?,
            bound: dim16(latent.bound as usize)?,
            s: dim16(set.s)?,
            steps: dim16(self.cfg.coder.schedule.steps)?,
            alpha: self.cfg.coder.schedule.alpha,
            context_flags: flags,
        };
        let bits = FrameBitstream { header, descriptions };
        report.payload_bytes = bits.payload_bytes();
        report.header_bytes = bits.header_bytes();
        report.total_time = start.elapsed();
        report.latent = Some(latent.clone());
        self.refs.push(latent.clone());
        self.t += 1;
        Ok((bits, report))
    }
}

fn dim16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| MdvcError::Config(format!("{v} does not fit the container's 16-bit field")))
}

/// What reached the decoder of one description: its header fields and the
/// leading segments that arrived intact.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedDescription {
    pub stream: DescriptionStream,
    pub segments: usize,
}

impl ReceivedDescription {
    pub fn complete(stream: DescriptionStream) -> Self {
        let segments = stream.cuts.len();
        Self { stream, segments }
    }
}

/// Everything the decoder got for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedFrame {
    pub header: FrameHeader,
    pub descriptions: Vec<ReceivedDescription>,
}

impl ReceivedFrame {
    pub fn complete(bits: &FrameBitstream) -> Self {
        Self {
            header: bits.header.clone(),
            descriptions: bits.descriptions.iter().cloned().map(ReceivedDescription::complete).collect(),
        }
    }
}

/// Per-frame decoder statistics, one JSON line each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub frame: usize,
    pub tokens: usize,
    pub lost_tokens: usize,
    pub loss_rate: f64,
    pub inferred: usize,
    /// Descriptions discarded because their tokens failed the checksum.
    pub rejected: usize,
    pub exact_context: bool,
    pub psnr: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub infer_ms: f64,
    pub decode_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossHandling {
    /// Fill lost tokens with the model's per-channel mode.
    Infer,
    /// Leave lost tokens at zero.
    ZeroFill,
}

pub struct Decoder<'a, P: Predictor + ?Sized> {
    pub codec: &'a FrameCodec,
    pub model: &'a P,
    pub cfg: SessionConfig,
    pub handling: LossHandling,
    refs: TemporalContext,
    /// Whether each reference slot equals the encoder's (no loss went into it).
    exact: [bool; 2],
}

impl<P: Predictor + ?Sized> Clone for Decoder<'_, P> {
    fn clone(&self) -> Self {
        Self {
            codec: self.codec,
            model: self.model,
            cfg: self.cfg,
            handling: self.handling,
            refs: self.refs.clone(),
            exact: self.exact,
        }
    }
}

impl<'a, P: Predictor + ?Sized> Decoder<'a, P> {
    pub fn new(codec: &'a FrameCodec, model: &'a P, cfg: SessionConfig, handling: LossHandling) -> Self {
        Self {
            codec,
            model,
            cfg,
            handling,
            refs: TemporalContext::default(),
            exact: [true, true],
        }
    }

    /// Reconstructs the latent of one frame, filling losses, and advances the context.
    pub fn decode_latent(&mut self, rx: &ReceivedFrame) -> Result<(LatentGrid, InferenceRecord)> {
        let start = Instant::now();
        let h = &rx.header;
        let (lh, lw, c, bound) = (h.h as usize, h.w as usize, h.c as usize, h.bound as i32);
        if c != self.codec.cfg.latent_channels || bound != self.codec.cfg.bound {
            return Err(MdvcError::Corruption(format!(
                "frame {} declares {c} channels with bound {bound}, the model has {} and {}",
                h.frame_index, self.codec.cfg.latent_channels, self.codec.cfg.bound
            )));
        }
        let set = DescriptionSet::new(lh, lw, h.s as usize).map_err(|e| MdvcError::Corruption(e.to_string()))?;
        let params = crate::schedule::ScheduleParams {
            steps: h.steps as usize,
            alpha: h.alpha,
        };
        let ctx = select_context(&self.refs, h.context_flags);
        let exact = (h.context_flags & CONTEXT_PREV1 == 0 || self.exact[0])
            && (h.context_flags & CONTEXT_PREV2 == 0 || self.exact[1]);
        let mut received: Vec<ReceivedTokens> = Vec::new();
        let mut rejected = 0;
        let mut seen = vec![false; set.s];
        for d in &rx.descriptions {
            let id = d.stream.id as usize;
            if id >= set.s || std::mem::replace(&mut seen[id], true) {
                return Err(MdvcError::Corruption(format!("frame {} has a duplicate or foreign description {id}", h.frame_index)));
            }
            let total = description_schedule(&set, id, &params).len();
            let covered = d.segments.min(d.stream.cuts.len()).checked_sub(1).map_or(0, |k| d.stream.cuts[k].end_group as usize);
            if d.segments == 0 || (!exact && covered < total) {
                continue;
            }
            let out = match decode_prefix(self.model, &d.stream, &set, c, bound, &ctx, &params, d.segments) {
                Ok(out) => out,
                Err(MdvcError::Corruption(_)) => {
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let complete = out.groups_decoded == total;
            if complete && token_crc(&out.tokens.values) != d.stream.crc32 {
                rejected += 1;
                continue;
            }
            if !complete && !exact {
                continue;
            }
            received.push(out.tokens);
        }
        let (mut grid, lost) = merge(&set, c, bound, &received)?;
        let lost_tokens = lost.count();
        let t0 = Instant::now();
        let inferred = match self.handling {
            LossHandling::Infer => infer_lost(self.model, &mut grid, &lost, &ctx)?,
            LossHandling::ZeroFill => {
                zero_fill(&mut grid, &lost);
                0
            }
        };
        let infer_ms = t0.elapsed().as_secs_f64() * 1e3;
        self.exact = [lost_tokens == 0, self.exact[0]];
        self.refs.push(grid.clone());
        let record = InferenceRecord {
            frame: h.frame_index as usize,
            tokens: set.tokens(),
            lost_tokens,
            loss_rate: lost_tokens as f64 / set.tokens() as f64,
            inferred,
            rejected,
            exact_context: exact,
            psnr: None,
            ms_ssim: None,
            infer_ms,
            decode_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((grid, record))
    }

    pub fn decode(&mut self, rx: &ReceivedFrame) -> Result<(Frame, LatentGrid, InferenceRecord)> {
        let (grid, mut record) = self.decode_latent(rx)?;
        let start = Instant::now();
        let frame = self.codec.decode_frame(&grid)?;
        record.decode_ms += start.elapsed().as_secs_f64() * 1e3;
        Ok((frame, grid, record))
    }
}
