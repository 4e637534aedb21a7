//! Byte layouts of one coded frame and of a coded stream file. All integers
//! are little-endian.
//!
//! Frame container:
//!
//! | field           | type     |
//! |-----------------|----------|
//! | magic `MDVF`    | 4 bytes  |
//! | version (1)     | u8       |
//! | frame_index     | u32      |
//! | h, w, c         | u16 each |
//! | bound A         | u16      |
//! | S               | u16      |
//! | L               | u16      |
//! | alpha           | f64      |
//! | context_flags   | u8       |
//!
//! then S descriptions, each:
//!
//! | field        | type                                |
//! |--------------|-------------------------------------|
//! | id           | u16                                 |
//! | token_count  | u32                                 |
//! | crc32        | u32                                 |
//! | cut_count    | u16                                 |
//! | cuts         | cut_count x (end_group u16, end_offset u32) |
//! | payload_len  | u32                                 |
//! | payload      | payload_len bytes                   |
//!
//! `context_flags` bit 0 set means the frame was coded with `t-1` as context,
//! bit 1 with `t-2`; a cleared bit means that slot was zero.
//!
//! Stream file: magic `MDVS`, version u8, width u32, height u32, frame_count u32,
//! then per frame a u32 byte length followed by that many container bytes.

use crate::coding::{Cut, DescriptionStream};
use crate::error::{MdvcError, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"MDVF";
pub const STREAM_MAGIC: &[u8; 4] = b"MDVS";
pub const VERSION: u8 = 1;
/// Bytes before the first description.
pub const FRAME_HEADER_BYTES: usize = 4 + 1 + 4 + 2 * 6 + 8 + 1;

pub const CONTEXT_PREV1: u8 = 1;
pub const CONTEXT_PREV2: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameHeader {
    pub frame_index: u32,
    pub h: u16,
    pub w: u16,
    pub c: u16,
    pub bound: u16,
    pub s: u16,
    pub steps: u16,
    pub alpha: f64,
    pub context_flags: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBitstream {
    pub header: FrameHeader,
    pub descriptions: Vec<DescriptionStream>,
}

impl FrameBitstream {
    /// Sum of description payload lengths.
    pub fn payload_bytes(&self) -> usize {
        self.descriptions.iter().map(|d| d.payload.len()).sum()
    }

    /// Container bytes other than payloads.
    pub fn header_bytes(&self) -> usize {
        self.to_bytes().len() - self.payload_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + self.payload_bytes() + 32 * self.descriptions.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&h.frame_index.to_le_bytes());
        for v in [h.h, h.w, h.c, h.bound, h.s, h.steps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.alpha.to_le_bytes());
        out.push(h.context_flags);
        for d in &self.descriptions {
            write_description(&mut out, d);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "frame container");
        if r.take(4)? != FRAME_MAGIC {
            return Err(MdvcError::Corruption("frame container has a bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(MdvcError::Corruption(format!("unsupported frame container version {version}")));
        }
        let header = FrameHeader {
            frame_index: r.u32()?,
            h: r.u16()?,
            w: r.u16()?,
            c: r.u16()?,
            bound: r.u16()?,
            s: r.u16()?,
            steps: r.u16()?,
            alpha: r.f64()?,
            context_flags: r.u8()?,
        };
        let descriptions = (0..header.s).map(|_| read_description(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(MdvcError::Corruption(format!("{} trailing bytes after frame container", r.remaining())));
        }
        Ok(Self { header, descriptions })
    }
}

pub fn write_description(out: &mut Vec<u8>, d: &DescriptionStream) {
    out.extend_from_slice(&d.id.to_le_bytes());
    out.extend_from_slice(&d.token_count.to_le_bytes());
    out.extend_from_slice(&d.crc32.to_le_bytes());
    out.extend_from_slice(&(d.cuts.len() as u16).to_le_bytes());
    for c in &d.cuts {
        out.extend_from_slice(&c.end_group.to_le_bytes());
        out.extend_from_slice(&c.end_offset.to_le_bytes());
    }
    out.extend_from_slice(&(d.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&d.payload);
}

fn read_description(r: &mut Reader<'_>) -> Result<DescriptionStream> {
    let id = r.u16()?;
    let token_count = r.u32()?;
    let crc32 = r.u32()?;
    let cut_count = r.u16()?;
    let cuts = (0..cut_count)
        .map(|_| {
            Ok(Cut {
                end_group: r.u16()?,
                end_offset: r.u32()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let len = r.u32()? as usize;
    let payload = r.take(len)?.to_vec();
    if cuts.last().is_some_and(|c| c.end_offset as usize != len) {
        return Err(MdvcError::Corruption(format!("description {id} segment table disagrees with payload length")));
    }
    Ok(DescriptionStream {
        id,
        token_count,
        crc32,
        cuts,
        payload,
    })
}

/// Header and frames of a coded stream file.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamFile {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameBitstream>,
}

impl StreamFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STREAM_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for f in &self.frames {
            let b = f.to_bytes();
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "stream file");
        if r.take(4)? != STREAM_MAGIC {
            return Err(MdvcError::Corruption("stream file has a bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(MdvcError::Corruption(format!("unsupported stream file version {version}")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let count = r.u32()?;
        let mut frames = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            frames.push(FrameBitstream::from_bytes(r.take(len)?)?);
        }
        if !r.is_empty() {
            return Err(MdvcError::Corruption(format!("{} trailing bytes after stream file", r.remaining())));
        }
        Ok(Self { width, height, frames })
    }
}

/// Bounds-checked little-endian cursor; running out of bytes is corruption.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MdvcError::Corruption(format!(
                "{} truncated: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}
