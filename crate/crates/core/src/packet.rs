//! Bit-exact packet encoding.
//!
//! ```text
//! byte  0      version (1)
//! byte  1      quantizer: 0 = PQ, 1 = QSGD
//! byte  2      s, bits per position ID
//! byte  3      y, bits per centroid ID
//! bytes 4..8   count, u32 little-endian
//! bytes 8..16  centroid metadata
//!              PQ:   lo, hi as binary32 little-endian
//!              QSGD: l2 norm as binary32 little-endian, then 4 zero bytes
//! bytes 16..   count (pid, cid) pairs, s then y bits each, packed
//!              most-significant bit first, zero-padded to a whole byte
//! ```
//!
//! The header is [`HEADER_BITS`] long whatever the code length.

use std::io::{Read, Write};

use crate::quantizer::{CentroidMeta, QuantizerKind};
use crate::{Error, Result};

pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 16;
pub const HEADER_BITS: usize = HEADER_BYTES * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketEntry {
    pub pid: u32,
    pub cid: u32,
}

/// One decoded packet.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub kind: QuantizerKind,
    pub s: u32,
    pub y: u32,
    pub meta: CentroidMeta,
    pub entries: Vec<PacketEntry>,
}

/// Encoded size in bytes of a packet with `count` entries.
pub fn encoded_len(count: usize, s: u32, y: u32) -> usize {
    HEADER_BYTES + (count * (s + y) as usize).div_ceil(8)
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        Self {
            out,
            acc: 0,
            nbits: 0,
        }
    }

    fn put(&mut self, value: u32, width: u32) {
        debug_assert!(width <= 32);
        self.acc = (self.acc << width) | value as u64;
        self.nbits += width;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.out.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1u64 << self.nbits) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.out.push((self.acc << (8 - self.nbits)) as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            acc: 0,
            nbits: 0,
        }
    }

    fn take(&mut self, width: u32) -> u32 {
        while self.nbits < width {
            self.acc = (self.acc << 8) | self.bytes[self.pos] as u64;
            self.pos += 1;
            self.nbits += 8;
        }
        self.nbits -= width;
        let v = (self.acc >> self.nbits) as u32 & mask(width);
        self.acc &= (1u64 << self.nbits) - 1;
        v
    }

    fn remaining_bits(&self) -> u64 {
        self.acc
    }
}

#[inline]
fn mask(width: u32) -> u32 {
    if width >= 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

fn check_width(field: &'static str, width: u32) -> Result<()> {
    if (1..=32).contains(&width) {
        Ok(())
    } else {
        Err(Error::FieldOverflow {
            field,
            value: width as u64,
            width: 5,
        })
    }
}

impl Packet {
    /// Encodes the packet, failing if it would exceed `max_bits`.
    pub fn encode(&self, max_bits: usize) -> Result<Vec<u8>> {
        check_width("s", self.s)?;
        check_width("y", self.y)?;
        if self.entries.is_empty() {
            return Err(Error::InvalidInput(
                "packet needs at least one entry".into(),
            ));
        }
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::FieldOverflow {
            field: "count",
            value: self.entries.len() as u64,
            width: 32,
        })?;
        let len = encoded_len(self.entries.len(), self.s, self.y);
        if len * 8 > max_bits {
            return Err(Error::PacketOverflow {
                bits: len * 8,
                budget: max_bits,
            });
        }
        let (pid_mask, cid_mask) = (mask(self.s), mask(self.y));
        for e in &self.entries {
            if e.pid & !pid_mask != 0 {
                return Err(Error::FieldOverflow {
                    field: "pid",
                    value: e.pid as u64,
                    width: self.s,
                });
            }
            if e.cid & !cid_mask != 0 {
                return Err(Error::FieldOverflow {
                    field: "cid",
                    value: e.cid as u64,
                    width: self.y,
                });
            }
        }

        let mut out = Vec::with_capacity(len);
        out.push(VERSION);
        out.push(self.kind.wire_id());
        out.push(self.s as u8);
        out.push(self.y as u8);
        out.extend_from_slice(&count.to_le_bytes());
        match (self.kind, self.meta) {
            (QuantizerKind::Pq, CentroidMeta::Pq { lo, hi }) => {
                out.extend_from_slice(&lo.to_le_bytes());
                out.extend_from_slice(&hi.to_le_bytes());
            }
            (QuantizerKind::Qsgd, CentroidMeta::Qsgd { l2_norm }) => {
                out.extend_from_slice(&l2_norm.to_le_bytes());
                out.extend_from_slice(&[0; 4]);
            }
            _ => {
                return Err(Error::InvalidInput(
                    "centroid metadata does not match quantizer".into(),
                ))
            }
        }
        let mut w = BitWriter::new(out);
        for e in &self.entries {
            w.put(e.pid, self.s);
            w.put(e.cid, self.y);
        }
        let out = w.finish();
        debug_assert_eq!(out.len(), len);
        Ok(out)
    }

    /// Decodes exactly one packet; `bytes` must hold nothing else.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (packet, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::CorruptPacket(format!(
                "{} trailing bytes after packet",
                bytes.len() - used
            )));
        }
        Ok(packet)
    }

    /// Decodes the packet at the start of `bytes`, returning it and its length.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::CorruptPacket(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[0] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[0]));
        }
        let kind = QuantizerKind::from_wire_id(bytes[1])
            .ok_or_else(|| Error::CorruptPacket(format!("unknown quantizer id {}", bytes[1])))?;
        let (s, y) = (bytes[2] as u32, bytes[3] as u32);
        if !(1..=32).contains(&s) || !(1..=32).contains(&y) {
            return Err(Error::CorruptPacket(format!(
                "bad field widths s={s} y={y}"
            )));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if count == 0 {
            return Err(Error::CorruptPacket("empty payload".into()));
        }
        let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let meta = match kind {
            QuantizerKind::Pq => CentroidMeta::Pq {
                lo: f(8),
                hi: f(12),
            },
            QuantizerKind::Qsgd => {
                if bytes[12..16] != [0; 4] {
                    return Err(Error::CorruptPacket("nonzero metadata padding".into()));
                }
                CentroidMeta::Qsgd { l2_norm: f(8) }
            }
        };
        let len = HEADER_BYTES
            .checked_add(count.saturating_mul((s + y) as usize).div_ceil(8))
            .ok_or_else(|| Error::CorruptPacket("count overflows".into()))?;
        if bytes.len() < len {
            return Err(Error::CorruptPacket(format!(
                "payload truncated: need {len} bytes, have {}",
                bytes.len()
            )));
        }
        let mut r = BitReader::new(&bytes[HEADER_BYTES..len]);
        let entries = (0..count)
            .map(|_| PacketEntry {
                pid: r.take(s),
                cid: r.take(y),
            })
            .collect();
        if r.remaining_bits() != 0 {
            return Err(Error::CorruptPacket("nonzero padding bits".into()));
        }
        Ok((
            Self {
                kind,
                s,
                y,
                meta,
                entries,
            },
            len,
        ))
    }
}

pub fn encode_packet(
    entries: &[PacketEntry],
    y: u32,
    s: u32,
    kind: QuantizerKind,
    meta: CentroidMeta,
    max_bits: usize,
) -> Result<Vec<u8>> {
    Packet {
        kind,
        s,
        y,
        meta,
        entries: entries.to_vec(),
    }
    .encode(max_bits)
}

pub fn decode_packet(bytes: &[u8]) -> Result<Packet> {
    Packet::decode(bytes)
}

/// Writes a packet stream: `u32` little-endian packet count, then the
/// packets back to back.
pub fn write_stream<W: Write>(mut w: W, packets: &[Vec<u8>]) -> Result<()> {
    w.write_all(&(packets.len() as u32).to_le_bytes())?;
    for p in packets {
        w.write_all(p)?;
    }
    Ok(())
}

/// Reads a packet stream written by [`write_stream`], returning each packet's
/// raw bytes.
pub fn read_stream<R: Read>(mut r: R) -> Result<Vec<Vec<u8>>> {
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let n = u32::from_le_bytes(n) as usize;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for _ in 0..n {
        let (_, used) = Packet::decode_prefix(&buf[at..])?;
        out.push(buf[at..at + used].to_vec());
        at += used;
    }
    if at != buf.len() {
        return Err(Error::CorruptPacket(format!(
            "{} trailing bytes after {n} packets",
            buf.len() - at
        )));
    }
    Ok(out)
}
