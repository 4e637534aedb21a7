//! Packetization of frame bitstreams along segment boundaries, and reassembly
//! of whatever subset of packets arrived.
//!
//! Wire layout (little-endian), [`PACKET_HEADER_BYTES`] bytes then payload:
//!
//! | field          | type |
//! |----------------|------|
//! | seq            | u32  |
//! | frame          | u32  |
//! | description    | u16  |
//! | first_group    | u16  |
//! | end_group      | u16  |
//! | fragment index | u8   |
//! | fragment count | u8   |
//! | description crc| u32  |
//! | payload_len    | u16  |
//! | context_flags  | u8   |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coding::{Cut, DescriptionStream};
use crate::container::{FrameBitstream, FrameHeader, Reader};
use crate::error::{MdvcError, Result};

pub const MTU: usize = 1200;
pub const PACKET_HEADER_BYTES: usize = 4 + 4 + 2 + 2 + 2 + 1 + 1 + 4 + 2 + 1;
/// Largest segment that fits one packet at the default MTU.
pub const DEFAULT_SEGMENT_BYTES: usize = MTU - PACKET_HEADER_BYTES;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub seq: u32,
    pub frame: u32,
    pub description: u16,
    pub first_group: u16,
    pub end_group: u16,
    pub fragment: u8,
    pub fragments: u8,
    pub description_crc: u32,
    pub context_flags: u8,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn wire_len(&self) -> usize {
        PACKET_HEADER_BYTES + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.frame.to_le_bytes());
        out.extend_from_slice(&self.description.to_le_bytes());
        out.extend_from_slice(&self.first_group.to_le_bytes());
        out.extend_from_slice(&self.end_group.to_le_bytes());
        out.push(self.fragment);
        out.push(self.fragments);
        out.extend_from_slice(&self.description_crc.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        out.push(self.context_flags);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "packet");
        let mut p = Packet {
            seq: r.u32()?,
            frame: r.u32()?,
            description: r.u16()?,
            first_group: r.u16()?,
            end_group: r.u16()?,
            fragment: r.u8()?,
            fragments: r.u8()?,
            description_crc: r.u32()?,
            context_flags: 0,
            payload: Vec::new(),
        };
        let len = r.u16()? as usize;
        p.context_flags = r.u8()?;
        p.payload = r.take(len)?.to_vec();
        if !r.is_empty() || p.fragment >= p.fragments {
            return Err(MdvcError::Corruption("malformed packet".into()));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketizerConfig {
    pub mtu: usize,
}

impl Default for PacketizerConfig {
    fn default() -> Self {
        Self { mtu: MTU }
    }
}

/// Splits every segment of every description into packets of at most `mtu`
/// wire bytes. Sequence numbers start at `first_seq`.
pub fn packetize(bits: &FrameBitstream, cfg: &PacketizerConfig, first_seq: u32) -> Result<Vec<Packet>> {
    let room = cfg
        .mtu
        .checked_sub(PACKET_HEADER_BYTES)
        .filter(|&r| r > 0)
        .ok_or_else(|| MdvcError::Config(format!("MTU {} cannot hold a {PACKET_HEADER_BYTES}-byte header", cfg.mtu)))?;
    let mut seq = first_seq;
    let mut out = Vec::new();
    for d in &bits.descriptions {
        for k in 0..d.cuts.len() {
            let bytes = &d.payload[d.segment_range(k)];
            let groups = d.segment_groups(k);
            let chunks: Vec<&[u8]> = if bytes.is_empty() { vec![bytes] } else { bytes.chunks(room).collect() };
            let fragments = u8::try_from(chunks.len())
                .map_err(|_| MdvcError::Config(format!("segment of {} bytes needs more than 255 packets", bytes.len())))?;
            for (i, chunk) in chunks.into_iter().enumerate() {
                out.push(Packet {
                    seq,
                    frame: bits.header.frame_index,
                    description: d.id,
                    first_group: groups.start as u16,
                    end_group: groups.end as u16,
                    fragment: i as u8,
                    fragments,
                    description_crc: d.crc32,
                    context_flags: bits.header.context_flags,
                    payload: chunk.to_vec(),
                });
                seq = seq.wrapping_add(1);
            }
        }
    }
    Ok(out)
}

/// Stream-level parameters the receiver knows out of band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionParams {
    pub h: u16,
    pub w: u16,
    pub c: u16,
    pub bound: u16,
    pub s: u16,
    pub steps: u16,
    pub alpha: f64,
}

impl SessionParams {
    pub fn of(header: &FrameHeader) -> Self {
        Self {
            h: header.h,
            w: header.w,
            c: header.c,
            bound: header.bound,
            s: header.s,
            steps: header.steps,
            alpha: header.alpha,
        }
    }
}

/// Rebuilds what is usable of one frame from its arrived packets: for each
/// description, the chain of complete segments starting at group 0.
/// Descriptions with no usable segment are absent from the result.
pub fn depacketize(
    frame_index: u32,
    packets: &[&Packet],
    params: &SessionParams,
    fallback_flags: u8,
) -> crate::session::ReceivedFrame {
    let mut context_flags = fallback_flags;
    // description -> first_group -> (end_group, crc, fragments)
    type Frags = (u16, u32, Vec<Option<Vec<u8>>>);
    let mut per_desc: BTreeMap<u16, BTreeMap<u16, Frags>> = BTreeMap::new();
    for p in packets.iter().filter(|p| p.frame == frame_index && p.description < params.s) {
        context_flags = p.context_flags;
        let seg = per_desc
            .entry(p.description)
            .or_default()
            .entry(p.first_group)
            .or_insert_with(|| (p.end_group, p.description_crc, vec![None; p.fragments as usize]));
        if seg.0 == p.end_group && seg.2.len() == p.fragments as usize {
            seg.2[p.fragment as usize] = Some(p.payload.clone());
        }
    }
    let set = crate::split::DescriptionSet::new(params.h as usize, params.w as usize, params.s as usize).ok();
    let mut descriptions = Vec::new();
    for (id, segs) in per_desc {
        let mut payload = Vec::new();
        let mut cuts = Vec::new();
        let mut next = 0u16;
        let mut crc = 0;
        while let Some((end, c, frags)) = segs.get(&next) {
            if frags.iter().any(Option::is_none) || *end <= next {
                break;
            }
            frags.iter().flatten().for_each(|f| payload.extend_from_slice(f));
            cuts.push(Cut {
                end_group: *end,
                end_offset: payload.len() as u32,
            });
            crc = *c;
            next = *end;
        }
        if cuts.is_empty() {
            continue;
        }
        let segments = cuts.len();
        descriptions.push(crate::session::ReceivedDescription {
            stream: DescriptionStream {
                id,
                token_count: set.as_ref().map_or(0, |s| s.size(id as usize) as u32),
                crc32: crc,
                cuts,
                payload,
            },
            segments,
        });
    }
    crate::session::ReceivedFrame {
        header: FrameHeader {
            frame_index,
            h: params.h,
            w: params.w,
            c: params.c,
            bound: params.bound,
            s: params.s,
            steps: params.steps,
            alpha: params.alpha,
            context_flags,
        },
        descriptions,
    }
}
