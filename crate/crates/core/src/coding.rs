//! Iterative per-description entropy coding: each description is coded over
//! the groups of its schedule, one model pass per group, with only the
//! description's own already-coded tokens visible to the model.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::entropy_model::{EntropyModel, TemporalContext};
use crate::error::{MdvcError, Result};
use crate::gmm::{symbol_of, value_of, GmmParams};
use crate::latent::LatentGrid;
use crate::range_coder::{Cdf, RangeDecoder, RangeEncoder, PROB_TOTAL};
use crate::schedule::{build_schedule, QldsSchedule, ScheduleParams};
use crate::split::{DescriptionSet, MaskPattern, ReceivedTokens};

/// Anything that maps (current tokens, mask, context) to per-token mixtures.
pub trait Predictor {
    fn predict(&self, current: &LatentGrid, mask: &MaskPattern, ctx: &TemporalContext) -> Result<GmmParams>;
}

impl Predictor for EntropyModel {
    fn predict(&self, current: &LatentGrid, mask: &MaskPattern, ctx: &TemporalContext) -> Result<GmmParams> {
        EntropyModel::predict(self, current, mask, ctx)
    }
}

/// Where the range coder restarts inside a description payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPolicy {
    /// One coder stream for the whole description.
    PerDescription,
    /// A fresh coder stream for every group.
    PerGroup,
    /// Close a segment before a group would push it past this many bytes.
    MaxBytes(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoderConfig {
    pub schedule: ScheduleParams,
    pub segments: SegmentPolicy,
}

impl Default for CoderConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::default(),
            segments: SegmentPolicy::MaxBytes(crate::packet::DEFAULT_SEGMENT_BYTES),
        }
    }
}

/// End of one independently decodable segment: it holds groups up to
/// `end_group` (exclusive) and its bytes end at `end_offset` in the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cut {
    pub end_group: u16,
    pub end_offset: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionStream {
    pub id: u16,
    pub token_count: u32,
    /// CRC-32 of the description's token values (little-endian `i32`, position order).
    pub crc32: u32,
    pub cuts: Vec<Cut>,
    pub payload: Vec<u8>,
}

impl DescriptionStream {
    /// Byte range of segment `k` in the payload.
    pub fn segment_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = if k == 0 { 0 } else { self.cuts[k - 1].end_offset as usize };
        start..self.cuts[k].end_offset as usize
    }

    /// Groups covered by segment `k`.
    pub fn segment_groups(&self, k: usize) -> std::ops::Range<usize> {
        let start = if k == 0 { 0 } else { self.cuts[k - 1].end_group as usize };
        start..self.cuts[k].end_group as usize
    }
}

/// Smallest probability charged per symbol in [`CodingStats::model_bits`].
pub const MODEL_PROB_FLOOR: f64 = 1.0 / PROB_TOTAL as f64;

/// Measurements taken while encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CodingStats {
    /// Model cross-entropy of the coded tokens, `sum -log2 p` with unquantized masses
    /// floored at [`MODEL_PROB_FLOOR`].
    pub model_bits: f64,
    /// The same sum under the quantized coding tables.
    pub table_bits: f64,
    pub symbols: usize,
    pub passes: usize,
    /// Time spent in model passes.
    pub model_time: Duration,
    /// Time spent building tables and range coding.
    pub coder_time: Duration,
}

impl CodingStats {
    pub fn add(&mut self, other: &CodingStats) {
        self.model_bits += other.model_bits;
        self.table_bits += other.table_bits;
        self.symbols += other.symbols;
        self.passes += other.passes;
        self.model_time += other.model_time;
        self.coder_time += other.coder_time;
    }
}

pub fn token_crc(values: &[i32]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in values {
        h.update(&v.to_le_bytes());
    }
    h.finalize()
}

/// The coding schedule of description `id`.
pub fn description_schedule(set: &DescriptionSet, id: usize, params: &ScheduleParams) -> QldsSchedule {
    build_schedule(&set.positions(id), set.h, set.w, params)
}

fn group_tables(gmm: &GmmParams, group: &[usize], bound: i32) -> Vec<(Vec<f64>, Cdf)> {
    let mut out = Vec::with_capacity(group.len() * gmm.c);
    for &p in group {
        for ch in 0..gmm.c {
            let masses = gmm.get(p, ch).symbol_masses(bound);
            let cdf = Cdf::from_probabilities(&masses);
            out.push((masses, cdf));
        }
    }
    out
}

/// Range-codes description `id` of `grid` under `ctx`.
pub fn encode_description<P: Predictor + ?Sized>(
    model: &P,
    grid: &LatentGrid,
    set: &DescriptionSet,
    id: usize,
    ctx: &TemporalContext,
    cfg: &CoderConfig,
) -> Result<(DescriptionStream, CodingStats)> {
    let schedule = description_schedule(set, id, &cfg.schedule);
    let positions = set.positions(id);
    let mut values = Vec::with_capacity(positions.len() * grid.c);
    for &p in &positions {
        values.extend_from_slice(grid.token(p));
    }
    let mut stats = CodingStats::default();
    let mut mask = MaskPattern::all(grid.tokens());
    let mut payload = Vec::new();
    let mut cuts = Vec::new();
    let mut enc = RangeEncoder::new();
    let mut open_groups = 0;
    for (gi, group) in schedule.groups.iter().enumerate() {
        let t0 = Instant::now();
        let gmm = model.predict(grid, &mask, ctx)?;
        stats.passes += 1;
        let t1 = Instant::now();
        stats.model_time += t1 - t0;
        let tables = group_tables(&gmm, group, grid.bound);
        let mut symbols = Vec::with_capacity(tables.len());
        for &p in group {
            for &v in grid.token(p) {
                symbols.push(symbol_of(v, grid.bound)?);
            }
        }
        let code = |e: &mut RangeEncoder| {
            for ((_, cdf), &s) in tables.iter().zip(&symbols) {
                cdf.encode(e, s);
            }
        };
        let restart = match cfg.segments {
            SegmentPolicy::PerDescription => false,
            SegmentPolicy::PerGroup => open_groups > 0,
            SegmentPolicy::MaxBytes(max) => {
                let mut trial = enc.clone();
                code(&mut trial);
                open_groups > 0 && trial.flushed_len() > max
            }
        };
        if restart {
            payload.extend(std::mem::take(&mut enc).finish());
            cuts.push(Cut {
                end_group: gi as u16,
                end_offset: payload.len() as u32,
            });
            open_groups = 0;
        }
        code(&mut enc);
        open_groups += 1;
        for ((masses, cdf), &s) in tables.iter().zip(&symbols) {
            stats.model_bits -= masses[s].max(MODEL_PROB_FLOOR).log2();
            stats.table_bits -= cdf.prob(s).log2();
        }
        stats.symbols += symbols.len();
        for &p in group {
            mask.0[p] = false;
        }
        stats.coder_time += t1.elapsed();
    }
    if open_groups > 0 {
        payload.extend(enc.finish());
        cuts.push(Cut {
            end_group: schedule.len() as u16,
            end_offset: payload.len() as u32,
        });
    }
    Ok((
        DescriptionStream {
            id: id as u16,
            token_count: positions.len() as u32,
            crc32: token_crc(&values),
            cuts,
            payload,
        },
        stats,
    ))
}

/// Result of decoding as many leading segments of a description as are available.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixDecode {
    pub tokens: ReceivedTokens,
    pub groups_decoded: usize,
    pub passes: usize,
}

fn check_stream(stream: &DescriptionStream, set: &DescriptionSet, schedule: &QldsSchedule) -> Result<()> {
    let id = stream.id as usize;
    if id >= set.s {
        return Err(MdvcError::Corruption(format!("description id {id} outside 0..{}", set.s)));
    }
    if stream.token_count as usize != set.size(id) {
        return Err(MdvcError::Corruption(format!(
            "description {id} declares {} tokens, the grid gives it {}",
            stream.token_count,
            set.size(id)
        )));
    }
    let mut prev = (0u16, 0u32);
    for c in &stream.cuts {
        if c.end_group <= prev.0 || c.end_offset < prev.1 || c.end_group as usize > schedule.len() {
            return Err(MdvcError::Corruption(format!("description {id} has an inconsistent segment table")));
        }
        prev = (c.end_group, c.end_offset);
    }
    Ok(())
}

/// Decodes the first `segments` segments of `stream` (fewer if the payload
/// is shorter than their declared end). Tokens of later groups are absent.
pub fn decode_prefix<P: Predictor + ?Sized>(
    model: &P,
    stream: &DescriptionStream,
    set: &DescriptionSet,
    c: usize,
    bound: i32,
    ctx: &TemporalContext,
    params: &ScheduleParams,
    segments: usize,
) -> Result<PrefixDecode> {
    let id = stream.id as usize;
    let schedule = description_schedule(set, id, params);
    check_stream(stream, set, &schedule)?;
    let mut grid = LatentGrid::zeros(set.h, set.w, c, bound);
    let mut mask = MaskPattern::all(set.tokens());
    let mut decoded = Vec::new();
    let mut passes = 0;
    let mut groups_decoded = 0;
    for k in 0..segments.min(stream.cuts.len()) {
        let range = stream.segment_range(k);
        if range.end > stream.payload.len() {
            break;
        }
        let mut dec = RangeDecoder::new(&stream.payload[range]);
        for gi in stream.segment_groups(k) {
            let group = &schedule.groups[gi];
            let gmm = model.predict(&grid, &mask, ctx)?;
            passes += 1;
            for &p in group {
                for ch in 0..c {
                    let cdf = gmm.get(p, ch).cdf(bound);
                    let sym = cdf
                        .decode(&mut dec)
                        .map_err(|e| MdvcError::Corruption(format!("description {id} group {gi}: {e}")))?;
                    grid.token_mut(p)[ch] =
                        value_of(sym, bound).map_err(|e| MdvcError::Corruption(format!("description {id} group {gi}: {e}")))?;
                }
                mask.0[p] = false;
                decoded.push(p);
            }
            groups_decoded = gi + 1;
        }
    }
    let mut values = Vec::with_capacity(decoded.len() * c);
    let mut positions = decoded;
    positions.sort_unstable();
    for &p in &positions {
        values.extend_from_slice(grid.token(p));
    }
    Ok(PrefixDecode {
        tokens: ReceivedTokens {
            description: id,
            positions,
            values,
        },
        groups_decoded,
        passes,
    })
}

/// Decodes a complete description. Errors name the first group that could not
/// be decoded; a CRC mismatch is reported as corruption.
pub fn decode_description<P: Predictor + ?Sized>(
    model: &P,
    stream: &DescriptionStream,
    set: &DescriptionSet,
    c: usize,
    bound: i32,
    ctx: &TemporalContext,
    params: &ScheduleParams,
) -> Result<ReceivedTokens> {
    let out = decode_prefix(model, stream, set, c, bound, ctx, params, stream.cuts.len())?;
    let total = description_schedule(set, stream.id as usize, params).len();
    if out.groups_decoded < total {
        return Err(MdvcError::Corruption(format!(
            "description {} truncated: group {} of {total} incomplete",
            stream.id, out.groups_decoded
        )));
    }
    if token_crc(&out.tokens.values) != stream.crc32 {
        return Err(MdvcError::Corruption(format!("description {} fails its token checksum", stream.id)));
    }
    Ok(out.tokens)
}
