//! `PFC1` container: a fixed header, per-section records, a header checksum
//! and the concatenated range-coded payloads. Integers are little-endian.

use crate::error::{Error, Result};
use crate::transforms::ResidualMode;

pub const MAGIC: &[u8; 4] = b"PFC1";
pub const VERSION: u32 = 1;

/// Post-processing applied after decoding; only the identity exists.
pub const POSTPROCESS_IDENTITY: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SectionKind {
    Motion,
    Hyper,
    Latents,
}

impl SectionKind {
    pub const ORDER: [SectionKind; 3] = [SectionKind::Motion, SectionKind::Hyper, SectionKind::Latents];

    pub fn id(self) -> u8 {
        match self {
            SectionKind::Motion => 0,
            SectionKind::Hyper => 1,
            SectionKind::Latents => 2,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(SectionKind::Motion),
            1 => Ok(SectionKind::Hyper),
            2 => Ok(SectionKind::Latents),
            other => Err(Error::Bitstream(format!("unknown section kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Motion => "motion",
            SectionKind::Hyper => "hyper",
            SectionKind::Latents => "latents",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub kind: SectionKind,
    /// Coding-table support `[s_min, s_max]`.
    pub s_min: i32,
    pub s_max: i32,
    pub symbols: u32,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PFrameBitstream {
    /// Frame extent before padding.
    pub width: u16,
    pub height: u16,
    pub model_hash: u64,
    pub mode: ResidualMode,
    pub postprocess: u8,
    pub sections: Vec<Section>,
}

const FIXED_HEADER: usize = 4 + 4 + 2 + 2 + 8 + 1 + 1 + 1;
const SECTION_RECORD: usize = 1 + 4 + 4 + 4 + 4;

impl PFrameBitstream {
    pub fn header_len(&self) -> usize {
        FIXED_HEADER + SECTION_RECORD * self.sections.len() + 4
    }

    pub fn payload_len(&self) -> usize {
        self.sections.iter().map(|s| s.payload.len()).sum()
    }

    pub fn section(&self, kind: SectionKind) -> Option<&Section> {
        self.sections.iter().find(|s| s.kind == kind)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.push(self.mode.id());
        out.push(self.postprocess);
        out.push(self.sections.len() as u8);
        for s in &self.sections {
            out.push(s.kind.id());
            out.extend_from_slice(&s.s_min.to_le_bytes());
            out.extend_from_slice(&s.s_max.to_le_bytes());
            out.extend_from_slice(&s.symbols.to_le_bytes());
            out.extend_from_slice(&(s.payload.len() as u32).to_le_bytes());
        }
        let checksum = crc32fast::hash(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let width = r.u16()?;
        let height = r.u16()?;
        let model_hash = r.u64()?;
        let mode_id = r.u8()?;
        let postprocess = r.u8()?;
        let count = r.u8()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = r.u8()?;
            let s_min = r.u32()? as i32;
            let s_max = r.u32()? as i32;
            let symbols = r.u32()?;
            let len = r.u32()? as usize;
            records.push((kind, s_min, s_max, symbols, len));
        }
        let header_end = r.pos;
        let checksum = r.u32()?;
        if crc32fast::hash(&bytes[..header_end]) != checksum {
            return Err(Error::Bitstream("header checksum mismatch".into()));
        }
        // fields are only interpreted once the checksum has vouched for them
        let mode = ResidualMode::from_id(mode_id)?;
        if width == 0 || height == 0 {
            return Err(Error::Bitstream("zero frame extent".into()));
        }
        let mut sections = Vec::with_capacity(count);
        for (kind, s_min, s_max, symbols, len) in records {
            if s_min >= s_max {
                return Err(Error::Bitstream(format!("empty support [{s_min}, {s_max}]")));
            }
            let payload = r.take(len).map_err(|_| Error::Truncated { position: bytes.len() })?;
            sections.push(Section {
                kind: SectionKind::from_id(kind)?,
                s_min,
                s_max,
                symbols,
                payload: payload.to_vec(),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Bitstream(format!(
                "{} bytes after the last section",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            width,
            height,
            model_hash,
            mode,
            postprocess,
            sections,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated { position: self.bytes.len() })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
