//! Protocol messages and their frame encoding.
//!
//! A frame on the wire is `{len: u32, tag: u8, iteration: u32, tree: u16,
//! payload}` where `len` counts every byte after itself.

use crate::error::{invalid, Result, SbartError};
use crate::sampler::{Decision, MoveKind, MoveProposal};
use crate::stats::{StructurePartial, SuffStats};
use crate::tree::SplitRule;
use crate::wire::{put_f64, put_i128s, put_u32, put_u64, Reader};

pub const PROTOCOL_VERSION: u16 = 1;
/// Bytes of a frame before the payload.
pub const FRAME_HEADER: usize = 4 + 1 + 4 + 2;
/// Largest accepted frame, as a guard against corrupt length fields.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Handshake = 1,
    ProposeStructure = 2,
    PartialStatsDelta = 3,
    ProposeBandwidth = 4,
    PartialStats = 5,
    Decision = 6,
    LeafParams = 7,
    SigmaPartial = 8,
    SigmaNew = 9,
    LatentRefresh = 10,
    SyncCheck = 11,
    Shutdown = 12,
}

impl Tag {
    pub fn from_u8(v: u8) -> Result<Self> {
        use Tag::*;
        Ok(match v {
            1 => Handshake,
            2 => ProposeStructure,
            3 => PartialStatsDelta,
            4 => ProposeBandwidth,
            5 => PartialStats,
            6 => Decision,
            7 => LeafParams,
            8 => SigmaPartial,
            9 => SigmaNew,
            10 => LatentRefresh,
            11 => SyncCheck,
            12 => Shutdown,
            t => return invalid(format!("unknown message tag {t}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub tag: Tag,
    pub iteration: u32,
    pub tree: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(FRAME_HEADER + self.payload.len());
        put_u32(&mut buf, (FRAME_HEADER - 4 + self.payload.len()) as u32);
        buf.push(self.tag as u8);
        put_u32(&mut buf, self.iteration);
        buf.extend_from_slice(&self.tree.to_le_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    /// Decodes one complete frame, length prefix included.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let len = r.u32()? as usize;
        if len != bytes.len() - 4 {
            return invalid(format!("frame length {len} does not match {} received bytes", bytes.len() - 4));
        }
        Self::decode_body(r.remaining())
    }

    /// Decodes the bytes following the length prefix.
    pub fn decode_body(body: &[u8]) -> Result<Self> {
        let mut r = Reader::new(body);
        let tag = Tag::from_u8(r.u8()?)?;
        let iteration = r.u32()?;
        let tree = r.u16()?;
        Ok(Self {
            tag,
            iteration,
            tree,
            payload: r.remaining().to_vec(),
        })
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER + self.payload.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Handshake {
    pub version: u16,
    pub workers: u32,
    pub rank: u32,
    pub config_hash: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncReport {
    pub forest_hash: u64,
    /// Largest difference between cached and recomputed fits.
    pub drift: f64,
    /// Largest absolute working response, for the relative drift bound.
    pub response_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Handshake(Handshake),
    ProposeStructure { proposal: MoveProposal, full_refresh: bool },
    PartialStatsDelta(StructurePartial),
    ProposeBandwidth { structure_accepted: bool, tau: f64 },
    PartialStats(SuffStats),
    Decision(Decision),
    LeafParams(Vec<f64>),
    /// Master request for the residual sum of squares.
    SigmaRequest,
    SigmaPartial { ss: i128, n: u64 },
    SigmaNew(f64),
    LatentRefresh { seed: u64 },
    SyncRequest { forest_hash: u64 },
    SyncReport(SyncReport),
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Handshake(_) => Tag::Handshake,
            Message::ProposeStructure { .. } => Tag::ProposeStructure,
            Message::PartialStatsDelta(_) => Tag::PartialStatsDelta,
            Message::ProposeBandwidth { .. } => Tag::ProposeBandwidth,
            Message::PartialStats(_) => Tag::PartialStats,
            Message::Decision(_) => Tag::Decision,
            Message::LeafParams(_) => Tag::LeafParams,
            Message::SigmaRequest | Message::SigmaPartial { .. } => Tag::SigmaPartial,
            Message::SigmaNew(_) => Tag::SigmaNew,
            Message::LatentRefresh { .. } => Tag::LatentRefresh,
            Message::SyncRequest { .. } | Message::SyncReport(_) => Tag::SyncCheck,
            Message::Shutdown => Tag::Shutdown,
        }
    }

    pub fn to_frame(&self, iteration: u32, tree: u16) -> Frame {
        let mut p = Vec::new();
        match self {
            Message::Handshake(h) => {
                p.extend_from_slice(&h.version.to_le_bytes());
                put_u32(&mut p, h.workers);
                put_u32(&mut p, h.rank);
                put_u64(&mut p, h.config_hash);
            }
            Message::ProposeStructure { proposal, full_refresh } => {
                p.push(proposal.kind.index() as u8);
                put_u32(&mut p, proposal.target_node as u32);
                let rule = proposal.new_rule.unwrap_or(SplitRule { var: 0, cut: 0.0 });
                p.push(proposal.new_rule.is_some() as u8);
                put_u32(&mut p, rule.var as u32);
                put_f64(&mut p, rule.cut);
                p.push(*full_refresh as u8);
            }
            Message::PartialStatsDelta(s) => s.encode(&mut p),
            Message::ProposeBandwidth { structure_accepted, tau } => {
                p.push(*structure_accepted as u8);
                put_f64(&mut p, *tau);
            }
            Message::PartialStats(s) => s.encode(&mut p),
            Message::Decision(d) => {
                p.push(d.structure_accepted as u8);
                p.push(d.bandwidth_accepted as u8);
            }
            Message::LeafParams(v) => {
                put_u32(&mut p, v.len() as u32);
                for &x in v {
                    put_f64(&mut p, x);
                }
            }
            Message::SigmaRequest => {}
            Message::SigmaPartial { ss, n } => {
                put_i128s(&mut p, &[*ss]);
                put_u64(&mut p, *n);
            }
            Message::SigmaNew(s) => put_f64(&mut p, *s),
            Message::LatentRefresh { seed } => put_u64(&mut p, *seed),
            Message::SyncRequest { forest_hash } => put_u64(&mut p, *forest_hash),
            Message::SyncReport(r) => {
                put_u64(&mut p, r.forest_hash);
                put_f64(&mut p, r.drift);
                put_f64(&mut p, r.response_max);
            }
            Message::Shutdown => {}
        }
        Frame {
            tag: self.tag(),
            iteration,
            tree,
            payload: p,
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let mut r = Reader::new(&frame.payload);
        let flag = |v: u8| -> Result<bool> {
            match v {
                0 => Ok(false),
                1 => Ok(true),
                f => invalid(format!("bad flag byte {f}")),
            }
        };
        let msg = match frame.tag {
            Tag::Handshake => Message::Handshake(Handshake {
                version: r.u16()?,
                workers: r.u32()?,
                rank: r.u32()?,
                config_hash: r.u64()?,
            }),
            Tag::ProposeStructure => {
                let kind = MoveKind::from_index(r.u8()?)?;
                let target_node = r.u32()? as usize;
                let has_rule = flag(r.u8()?)?;
                let var = r.u32()? as usize;
                let cut = r.f64()?;
                let full_refresh = flag(r.u8()?)?;
                Message::ProposeStructure {
                    proposal: MoveProposal {
                        kind,
                        target_node,
                        new_rule: has_rule.then_some(SplitRule { var, cut }),
                    },
                    full_refresh,
                }
            }
            Tag::PartialStatsDelta => Message::PartialStatsDelta(StructurePartial::read(&mut r)?),
            Tag::ProposeBandwidth => Message::ProposeBandwidth {
                structure_accepted: flag(r.u8()?)?,
                tau: r.f64()?,
            },
            Tag::PartialStats => Message::PartialStats(SuffStats::read(&mut r)?),
            Tag::Decision => Message::Decision(Decision {
                structure_accepted: flag(r.u8()?)?,
                bandwidth_accepted: flag(r.u8()?)?,
            }),
            Tag::LeafParams => {
                let d = r.u32()? as usize;
                Message::LeafParams(r.f64_vec(d)?)
            }
            Tag::SigmaPartial if frame.payload.is_empty() => Message::SigmaRequest,
            Tag::SigmaPartial => Message::SigmaPartial {
                ss: r.i128()?,
                n: r.u64()?,
            },
            Tag::SigmaNew => Message::SigmaNew(r.f64()?),
            Tag::LatentRefresh => Message::LatentRefresh { seed: r.u64()? },
            Tag::SyncCheck if frame.payload.len() == 8 => Message::SyncRequest { forest_hash: r.u64()? },
            Tag::SyncCheck => Message::SyncReport(SyncReport {
                forest_hash: r.u64()?,
                drift: r.f64()?,
                response_max: r.f64()?,
            }),
            Tag::Shutdown => Message::Shutdown,
        };
        r.finish().map_err(|e| SbartError::InvalidArgument(format!("{:?} payload: {e}", frame.tag)))?;
        Ok(msg)
    }
}
