//! Byte-exact message codecs and traffic accounting.
//!
//! Every message is a 10-byte header followed by a payload, little-endian
//! throughout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | round (u32) |
//! | 4     | flag (u8) |
//! | 5..9  | sender id (u32, [`SERVER_ID`] for the server) |
//! | 9     | payload kind (u8: 0 dense, 1 sparse, 2 mask) |
//!
//! Payloads:
//! * dense: every parameter as f32, declaration order; `4·total` bytes.
//! * sparse: u32 count, then f32 values at the mask's one positions only;
//!   `4 + 4·ones` bytes. Positions come from the shared mask.
//! * mask: u32 bit count, then all mask bits concatenated across tensors
//!   (LSB first within a byte), zero-padded once at the end;
//!   `4 + ceil(total/8)` bytes.

use std::path::Path;

use crate::error::{FamError, Result};
use crate::model::{Param, ParameterSet};
use crate::sparsity::PruneMask;
use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 10;
pub const SERVER_ID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Dense = 0,
    Sparse = 1,
    Mask = 2,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PayloadKind::Dense),
            1 => Ok(PayloadKind::Sparse),
            2 => Ok(PayloadKind::Mask),
            other => Err(FamError::Wire(format!("unknown payload kind {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Dense => "dense",
            PayloadKind::Sparse => "sparse",
            PayloadKind::Mask => "mask",
        }
    }
}

/// Routing fields shared by all payload kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub round: u32,
    pub flag: u8,
    pub sender: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub envelope: Envelope,
    pub kind: PayloadKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.header.envelope.round.to_le_bytes());
        out.push(self.header.envelope.flag);
        out.extend_from_slice(&self.header.envelope.sender.to_le_bytes());
        out.push(self.header.kind as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a message and checks the payload length against its kind.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(FamError::Wire(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        let header = Header {
            envelope: Envelope {
                round: read_u32(bytes, 0),
                flag: bytes[4],
                sender: read_u32(bytes, 5),
            },
            kind: PayloadKind::from_byte(bytes[9])?,
        };
        let msg = WireMessage {
            header,
            payload: bytes[HEADER_LEN..].to_vec(),
        };
        msg.check_payload()?;
        Ok(msg)
    }

    /// Number of values (dense, sparse) or bits (mask) the payload carries.
    pub fn element_count(&self) -> Result<usize> {
        self.check_payload()
    }

    fn check_payload(&self) -> Result<usize> {
        let p = &self.payload;
        match self.header.kind {
            PayloadKind::Dense => {
                if !p.len().is_multiple_of(4) {
                    return Err(FamError::Wire(format!("dense payload of {} bytes is not whole f32s", p.len())));
                }
                Ok(p.len() / 4)
            }
            PayloadKind::Sparse => {
                let n = counted(p, "sparse")?;
                if p.len() != 4 + 4 * n {
                    return Err(FamError::Wire(format!(
                        "sparse payload declares {n} values ({} bytes) but has {} bytes",
                        4 + 4 * n,
                        p.len()
                    )));
                }
                Ok(n)
            }
            PayloadKind::Mask => {
                let n = counted(p, "mask")?;
                if p.len() != 4 + n.div_ceil(8) {
                    return Err(FamError::Wire(format!(
                        "mask payload declares {n} bits ({} bytes) but has {} bytes",
                        4 + n.div_ceil(8),
                        p.len()
                    )));
                }
                Ok(n)
            }
        }
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn counted(p: &[u8], what: &str) -> Result<usize> {
    if p.len() < 4 {
        return Err(FamError::Wire(format!("{what} payload lacks its count word")));
    }
    Ok(read_u32(p, 0) as usize)
}

fn expect_kind(msg: &WireMessage, kind: PayloadKind) -> Result<()> {
    if msg.header.kind != kind {
        return Err(FamError::Wire(format!(
            "expected a {} message, got {}",
            kind.as_str(),
            msg.header.kind.as_str()
        )));
    }
    msg.check_payload().map(|_| ())
}

fn f32_values(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
}

pub fn encode_dense(params: &ParameterSet, envelope: Envelope) -> WireMessage {
    let mut payload = Vec::with_capacity(4 * params.total_count());
    for p in params.iter() {
        for &v in p.tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    WireMessage {
        header: Header {
            envelope,
            kind: PayloadKind::Dense,
        },
        payload,
    }
}

/// Decodes into the names and shapes of `template`.
pub fn decode_dense(msg: &WireMessage, template: &ParameterSet) -> Result<ParameterSet> {
    expect_kind(msg, PayloadKind::Dense)?;
    if msg.payload.len() != 4 * template.total_count() {
        return Err(FamError::Wire(format!(
            "dense payload holds {} values, template has {}",
            msg.payload.len() / 4,
            template.total_count()
        )));
    }
    template.unflatten(&f32_values(&msg.payload).collect::<Vec<_>>())
}

pub fn encode_sparse(params: &ParameterSet, mask: &PruneMask, envelope: Envelope) -> Result<WireMessage> {
    mask.check_congruent(params, "encode_sparse")?;
    let mut payload = Vec::with_capacity(4 + 4 * mask.ones_count());
    payload.extend_from_slice(&(mask.ones_count() as u32).to_le_bytes());
    for (p, e) in params.iter().zip(mask.entries()) {
        for (i, (&v, &keep)) in p.tensor.data().iter().zip(&e.bits).enumerate() {
            if keep {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            } else if v != 0.0 {
                return Err(FamError::Contract(format!(
                    "`{}`[{i}] = {v} sits at a masked position",
                    p.name
                )));
            }
        }
    }
    Ok(WireMessage {
        header: Header {
            envelope,
            kind: PayloadKind::Sparse,
        },
        payload,
    })
}

/// Scatters the values back to the mask's one positions; all others are 0.
pub fn decode_sparse(msg: &WireMessage, mask: &PruneMask) -> Result<ParameterSet> {
    expect_kind(msg, PayloadKind::Sparse)?;
    let n = read_u32(&msg.payload, 0) as usize;
    if n != mask.ones_count() {
        return Err(FamError::Wire(format!(
            "sparse payload holds {n} values, mask has {} ones",
            mask.ones_count()
        )));
    }
    let mut values = f32_values(&msg.payload[4..]);
    let mut entries = Vec::with_capacity(mask.entries().len());
    for e in mask.entries() {
        let data = e
            .bits
            .iter()
            .map(|&keep| if keep { values.next().unwrap() } else { 0.0 })
            .collect();
        entries.push(Param {
            name: e.name.clone(),
            role: e.role,
            tensor: Tensor::from_vec(&e.shape, data)?,
        });
    }
    ParameterSet::new(entries)
}

pub fn encode_mask(mask: &PruneMask, envelope: Envelope) -> WireMessage {
    let total = mask.total_count();
    let mut payload = vec![0u8; 4 + total.div_ceil(8)];
    payload[..4].copy_from_slice(&(total as u32).to_le_bytes());
    for (i, bit) in mask.bits().enumerate() {
        if bit {
            payload[4 + i / 8] |= 1 << (i % 8);
        }
    }
    WireMessage {
        header: Header {
            envelope,
            kind: PayloadKind::Mask,
        },
        payload,
    }
}

/// Rebuilds a mask over the layout of `template`.
pub fn decode_mask(msg: &WireMessage, template: &ParameterSet) -> Result<PruneMask> {
    expect_kind(msg, PayloadKind::Mask)?;
    let n = read_u32(&msg.payload, 0) as usize;
    if n != template.total_count() {
        return Err(FamError::Wire(format!(
            "mask carries {n} bits, template has {} parameters",
            template.total_count()
        )));
    }
    let bits: Vec<bool> = (0..n).map(|i| msg.payload[4 + i / 8] >> (i % 8) & 1 == 1).collect();
    if !n.is_multiple_of(8) && msg.payload[4 + n / 8] >> (n % 8) != 0 {
        return Err(FamError::Wire("mask padding bits are not zero".into()));
    }
    PruneMask::from_bits(template, &bits)
}

/// Payload size of each encoding, in bytes.
pub fn dense_payload_len(total: usize) -> usize {
    4 * total
}

pub fn sparse_payload_len(ones: usize) -> usize {
    4 + 4 * ones
}

pub fn mask_payload_len(total: usize) -> usize {
    4 + total.div_ceil(8)
}

/// Share of value bytes saved by a sparse message over a dense one of the
/// same model (the count word excluded).
pub fn value_byte_reduction(mask: &PruneMask) -> f64 {
    1.0 - mask.ones_count() as f64 / mask.total_count() as f64
}

/// Bytes moved in one round, plus what an all-dense protocol would have moved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundTraffic {
    pub round: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub dense_up: u64,
    pub dense_down: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundBytes {
    pub round: usize,
    pub up: u64,
    pub down: u64,
    pub cumulative_up: u64,
    pub cumulative_down: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accounting {
    pub per_round: Vec<RoundBytes>,
    pub total_up: u64,
    pub total_down: u64,
    pub dense_total: u64,
    /// `1 − actual / all-dense`, over both directions.
    pub reduction_ratio: f64,
}

pub fn account(log: &[RoundTraffic]) -> Accounting {
    let mut per_round = Vec::with_capacity(log.len());
    let (mut up, mut down, mut dense) = (0u64, 0u64, 0u64);
    for r in log {
        up += r.bytes_up;
        down += r.bytes_down;
        dense += r.dense_up + r.dense_down;
        per_round.push(RoundBytes {
            round: r.round,
            up: r.bytes_up,
            down: r.bytes_down,
            cumulative_up: up,
            cumulative_down: down,
        });
    }
    let reduction_ratio = if dense == 0 {
        0.0
    } else {
        1.0 - (up + down) as f64 / dense as f64
    };
    Accounting {
        per_round,
        total_up: up,
        total_down: down,
        dense_total: dense,
        reduction_ratio,
    }
}
