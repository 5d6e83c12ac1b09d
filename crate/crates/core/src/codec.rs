//! Wire format for compressed smashed data.
//!
//! Quantized payloads (`SLC1`), all integers little-endian:
//!
//! ```text
//! magic "SLC1" | version u8 = 1 | direction u8 | round u32
//! | B u32 | C u32 | H u32 | W u32 | g u16
//! | group id u16 × C
//! | (bits u8, x_min f32, x_max f32) × g
//! | codes, per channel, MSB-first at the channel's group width,
//!   each channel zero-padded to a byte boundary
//! ```
//!
//! Sparse payloads (`SLS1`) carry the top-k baseline:
//!
//! ```text
//! magic "SLS1" | version u8 = 1 | direction u8 | round u32
//! | B u32 | C u32 | H u32 | W u32 | count u32
//! | index u32 × count (strictly ascending) | value f32 × count
//! ```
//!
//! Decoding is strict: any input that would not re-encode to the same bytes
//! (trailing data, non-zero padding, out-of-range ids) is rejected.

use crate::cgc::{GroupParams, QuantizedSmashed, SparseSmashed};
use crate::error::{Error, Result};
use crate::tensor::Direction;

pub const MAGIC: &[u8; 4] = b"SLC1";
pub const SPARSE_MAGIC: &[u8; 4] = b"SLS1";
pub const VERSION: u8 = 1;

const FIXED_HEADER: usize = 4 + 1 + 1 + 4 + 16;

/// Encoded bytes as they would cross the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedBlob(Vec<u8>);

impl CompressedBlob {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Header size of an SLC1 blob with `channels` channels and `groups` groups.
pub fn header_len(channels: usize, groups: usize) -> usize {
    FIXED_HEADER + 2 + 2 * channels + 9 * groups
}

/// Payload bytes: Σ_c ceil(N · b_c / 8).
pub fn payload_len(q: &QuantizedSmashed) -> usize {
    let n = q.elements_per_channel();
    (0..q.channels())
        .map(|c| (n * q.channel_params(c).bits as usize).div_ceil(8))
        .sum()
}

pub fn sparse_len(count: usize) -> usize {
    FIXED_HEADER + 4 + 8 * count
}

pub fn encode(q: &QuantizedSmashed) -> CompressedBlob {
    let c = q.channels();
    let g = q.groups().len();
    let mut out = Vec::with_capacity(header_len(c, g) + payload_len(q));
    write_prefix(&mut out, MAGIC, q.direction(), q.round(), q.dims());
    out.extend_from_slice(&(g as u16).to_le_bytes());
    for &a in q.assignment() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for p in q.groups() {
        out.push(p.bits);
        out.extend_from_slice(&p.x_min.to_le_bytes());
        out.extend_from_slice(&p.x_max.to_le_bytes());
    }
    for (ch, codes) in q.codes().iter().enumerate() {
        let mut w = BitWriter::new(&mut out);
        let bits = q.channel_params(ch).bits;
        for &code in codes {
            w.put(code, bits);
        }
        w.finish();
    }
    CompressedBlob(out)
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedSmashed> {
    let mut r = Reader::new(bytes);
    let (direction, round, dims) = read_prefix(&mut r, MAGIC)?;
    let c = dims[1];
    let g_at = r.pos;
    let g = r.u16()? as usize;
    if g == 0 {
        return Err(Error::format(g_at, "group count is zero"));
    }
    if g > c {
        return Err(Error::format(g_at, format!("{g} groups for {c} channels")));
    }
    r.need(2 * c + 9 * g)?;
    let mut assignment = Vec::with_capacity(c);
    for _ in 0..c {
        let at = r.pos;
        let a = r.u16()?;
        if a as usize >= g {
            return Err(Error::format(at, format!("group id {a} >= {g}")));
        }
        assignment.push(a);
    }
    let mut groups = Vec::with_capacity(g);
    for _ in 0..g {
        let at = r.pos;
        let bits = r.u8()?;
        if !(1..=32).contains(&bits) {
            return Err(Error::format(at, format!("bit width {bits} outside [1, 32]")));
        }
        let x_min = r.f32()?;
        let x_max = r.f32()?;
        if !x_min.is_finite() || !x_max.is_finite() || x_min > x_max {
            return Err(Error::format(at + 1, format!("invalid range [{x_min}, {x_max}]")));
        }
        groups.push(GroupParams { bits, x_min, x_max });
    }
    let n = dims[0]
        .checked_mul(dims[2])
        .and_then(|x| x.checked_mul(dims[3]))
        .ok_or_else(|| Error::format(FIXED_HEADER - 16, "dimensions overflow"))?;
    // size check before allocating anything proportional to the header's claims
    let mut payload = 0usize;
    for &a in &assignment {
        let ch = n
            .checked_mul(groups[a as usize].bits as usize)
            .map(|b| b.div_ceil(8))
            .ok_or_else(|| Error::format(FIXED_HEADER - 16, "payload size overflows"))?;
        payload = payload
            .checked_add(ch)
            .ok_or_else(|| Error::format(FIXED_HEADER - 16, "payload size overflows"))?;
    }
    if r.remaining() != payload {
        return Err(Error::format(
            r.pos + payload.min(r.remaining()),
            format!("expected {} payload bytes, found {}", payload, r.remaining()),
        ));
    }
    let mut codes = Vec::with_capacity(c);
    for &a in &assignment {
        let bits = groups[a as usize].bits;
        let len = (n * bits as usize).div_ceil(8);
        let start = r.pos;
        let chunk = r.take(len)?;
        let mut br = BitReader::new(chunk);
        let channel: Vec<u32> = (0..n).map(|_| br.get(bits)).collect();
        if !br.padding_is_zero() {
            return Err(Error::format(start + len - 1, "non-zero padding bits"));
        }
        codes.push(channel);
    }
    QuantizedSmashed::new(dims, round, direction, assignment, groups, codes)
        .map_err(|e| Error::format(0, e.to_string()))
}

pub fn encode_sparse(s: &SparseSmashed) -> CompressedBlob {
    let count = s.indices().len();
    let mut out = Vec::with_capacity(sparse_len(count));
    write_prefix(&mut out, SPARSE_MAGIC, s.direction(), s.round(), s.dims());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for &i in s.indices() {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &v in s.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    CompressedBlob(out)
}

pub fn decode_sparse(bytes: &[u8]) -> Result<SparseSmashed> {
    let mut r = Reader::new(bytes);
    let (direction, round, dims) = read_prefix(&mut r, SPARSE_MAGIC)?;
    let count_at = r.pos;
    let count = r.u32()? as usize;
    let body = count
        .checked_mul(8)
        .ok_or_else(|| Error::format(count_at, "count overflows"))?;
    if r.remaining() != body {
        return Err(Error::format(
            r.pos + body.min(r.remaining()),
            format!("expected {} bytes of entries, found {}", body, r.remaining()),
        ));
    }
    let indices: Vec<u32> = (0..count).map(|_| r.u32()).collect::<Result<_>>()?;
    let values: Vec<f32> = (0..count).map(|_| r.f32()).collect::<Result<_>>()?;
    SparseSmashed::new(dims, round, direction, indices, values).map_err(|e| Error::format(count_at, e.to_string()))
}

fn write_prefix(out: &mut Vec<u8>, magic: &[u8; 4], direction: Direction, round: u32, dims: [usize; 4]) {
    out.extend_from_slice(magic);
    out.push(VERSION);
    out.push(direction.to_byte());
    out.extend_from_slice(&round.to_le_bytes());
    for d in dims {
        // dims are validated to fit u32 at construction
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_prefix(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<(Direction, u32, [usize; 4])> {
    if r.take(4)? != magic {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dir = r.u8()?;
    let direction = Direction::from_byte(dir).ok_or_else(|| Error::format(5, format!("bad direction {dir}")))?;
    let round = r.u32()?;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32()? as usize;
        if *d == 0 {
            return Err(Error::format(10 + 4 * i, "zero dimension"));
        }
    }
    Ok((direction, round, dims))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.remaining() < n {
            return Err(Error::format(self.bytes.len(), format!("truncated: need {} more bytes", n - self.remaining())));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// MSB-first bit packer appending to a byte vector.
pub struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    filled: u32,
}

impl<'a> BitWriter<'a> {
    pub fn new(out: &'a mut Vec<u8>) -> Self {
        Self { out, acc: 0, filled: 0 }
    }

    /// Appends the low `bits` bits of `value`.
    pub fn put(&mut self, value: u32, bits: u8) {
        let bits = bits as u32;
        let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        self.acc = (self.acc << bits) | (value & mask) as u64;
        self.filled += bits;
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    /// Flushes a partial byte, zero-padded.
    pub fn finish(self) {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    avail: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, acc: 0, avail: 0 }
    }

    /// Reads `bits` bits; missing bytes read as zero.
    pub fn get(&mut self, bits: u8) -> u32 {
        let bits = bits as u32;
        while self.avail < bits {
            let b = self.bytes.get(self.pos).copied().unwrap_or(0);
            self.pos += 1;
            self.acc = (self.acc << 8) | b as u64;
            self.avail += 8;
        }
        self.avail -= bits;
        let v = (self.acc >> self.avail) as u32 & if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        self.acc &= (1u64 << self.avail) - 1;
        v
    }

    /// True when the unread bits of the current byte and all later bytes are zero.
    pub fn padding_is_zero(&self) -> bool {
        self.acc == 0 && self.bytes.get(self.pos..).is_none_or(|rest| rest.iter().all(|&b| b == 0))
    }
}
