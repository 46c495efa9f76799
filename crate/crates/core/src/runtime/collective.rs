//! SPMD collectives between the master (rank 0) and its workers.

use crate::error::{Result, SbartError};
use crate::sampler::{Decision, StepContext};
use crate::stats::{from_fixed, StructurePartial, SuffStats};

use super::message::{Frame, Handshake, Message, Tag, PROTOCOL_VERSION};
use super::transport::Link;

/// Message and reduction counts seen by the master.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct CommStats {
    /// Statistic reductions (structure and bandwidth passes).
    pub stat_reductions: u64,
    /// Partial statistic messages merged, the master's own included.
    pub partial_messages: u64,
    pub sigma_reductions: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// One rank's view of the communicator.
pub enum Comm {
    Master { workers: Vec<Box<dyn Link>>, stats: CommStats },
    Worker { rank: usize, size: usize, master: Box<dyn Link> },
}

impl Comm {
    pub fn master(workers: Vec<Box<dyn Link>>) -> Self {
        Comm::Master {
            workers,
            stats: CommStats::default(),
        }
    }

    pub fn worker(rank: usize, size: usize, master: Box<dyn Link>) -> Self {
        Comm::Worker { rank, size, master }
    }

    pub fn rank(&self) -> usize {
        match self {
            Comm::Master { .. } => 0,
            Comm::Worker { rank, .. } => *rank,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Comm::Master { workers, .. } => workers.len() + 1,
            Comm::Worker { size, .. } => *size,
        }
    }

    pub fn stats(&self) -> Option<&CommStats> {
        match self {
            Comm::Master { stats, .. } => Some(stats),
            Comm::Worker { .. } => None,
        }
    }

    /// Master: sends `msg` to every worker.
    pub fn broadcast(&mut self, msg: &Message, ctx: StepContext) -> Result<()> {
        let Comm::Master { workers, stats } = self else {
            return Err(SbartError::Consistency("only the master broadcasts".into()));
        };
        let frame = msg.to_frame(ctx.iteration, ctx.tree);
        for (i, w) in workers.iter_mut().enumerate() {
            w.send(&frame).map_err(|e| rank_err(i + 1, e))?;
            stats.frames_sent += 1;
            stats.bytes_sent += frame.wire_len() as u64;
        }
        Ok(())
    }

    /// Worker: next frame from the master.
    pub fn recv_from_master(&mut self) -> Result<Frame> {
        match self {
            Comm::Worker { master, .. } => master.recv(),
            Comm::Master { .. } => Err(SbartError::Consistency("the master has no master".into())),
        }
    }

    fn send_to_master(&mut self, msg: &Message, ctx: StepContext) -> Result<()> {
        match self {
            Comm::Worker { master, .. } => master.send(&msg.to_frame(ctx.iteration, ctx.tree)),
            Comm::Master { .. } => Err(SbartError::Consistency("the master cannot send to itself".into())),
        }
    }

    /// Master: one reply from every worker, in rank order, each checked for
    /// the expected tag and step.
    fn gather(&mut self, tag: Tag, ctx: StepContext) -> Result<Vec<(usize, Message)>> {
        let Comm::Master { workers, stats } = self else {
            return Err(SbartError::Consistency("only the master gathers".into()));
        };
        let mut out = Vec::with_capacity(workers.len());
        for (i, w) in workers.iter_mut().enumerate() {
            let rank = i + 1;
            let frame = w.recv().map_err(|e| rank_err(rank, e))?;
            stats.frames_received += 1;
            stats.bytes_received += frame.wire_len() as u64;
            if frame.tag != tag || frame.iteration != ctx.iteration || frame.tree != ctx.tree {
                return Err(SbartError::Protocol {
                    rank,
                    msg: format!(
                        "expected {tag:?} for iteration {} tree {}, got {:?} for iteration {} tree {}",
                        ctx.iteration, ctx.tree, frame.tag, frame.iteration, frame.tree
                    ),
                });
            }
            let msg = Message::from_frame(&frame).map_err(|e| SbartError::Protocol { rank, msg: e.to_string() })?;
            out.push((rank, msg));
        }
        Ok(out)
    }

    fn stats_mut(&mut self) -> Option<&mut CommStats> {
        match self {
            Comm::Master { stats, .. } => Some(stats),
            Comm::Worker { .. } => None,
        }
    }

    /// Master side of the startup handshake: every worker must report the
    /// same protocol version, worker count, its expected rank and the same
    /// configuration hash.
    pub fn handshake(&mut self, config_hash: u64) -> Result<()> {
        let size = self.size() as u32;
        match self {
            Comm::Master { workers, .. } => {
                for (i, w) in workers.iter_mut().enumerate() {
                    let rank = (i + 1) as u32;
                    let hello = Handshake {
                        version: PROTOCOL_VERSION,
                        workers: size,
                        rank,
                        config_hash,
                    };
                    w.send(&Message::Handshake(hello).to_frame(0, 0))
                        .map_err(|e| SbartError::Startup(format!("rank {rank}: {e}")))?;
                }
                for (i, w) in workers.iter_mut().enumerate() {
                    let rank = (i + 1) as u32;
                    let frame = w.recv().map_err(|e| SbartError::Startup(format!("rank {rank}: {e}")))?;
                    match Message::from_frame(&frame) {
                        Ok(Message::Handshake(h)) => check_handshake(&h, size, rank, config_hash)?,
                        _ => return Err(SbartError::Startup(format!("rank {rank} did not answer the handshake"))),
                    }
                }
                Ok(())
            }
            Comm::Worker { rank, size, master } => {
                let (rank, size) = (*rank as u32, *size as u32);
                let frame = master.recv().map_err(|e| SbartError::Startup(e.to_string()))?;
                let theirs = match Message::from_frame(&frame) {
                    Ok(Message::Handshake(h)) => h,
                    _ => return Err(SbartError::Startup("expected a handshake from the master".into())),
                };
                let mine = Handshake {
                    version: PROTOCOL_VERSION,
                    workers: size,
                    rank,
                    config_hash,
                };
                master.send(&Message::Handshake(mine).to_frame(0, 0))?;
                check_handshake(&theirs, size, rank, config_hash)
            }
        }
    }
}

fn check_handshake(h: &Handshake, size: u32, rank: u32, config_hash: u64) -> Result<()> {
    if h.version != PROTOCOL_VERSION {
        return Err(SbartError::Startup(format!("rank {rank}: protocol version {} (expected {PROTOCOL_VERSION})", h.version)));
    }
    if h.workers != size || h.rank != rank {
        return Err(SbartError::Startup(format!(
            "rank {rank}: topology disagreement (peer says rank {} of {}, expected rank {rank} of {size})",
            h.rank, h.workers
        )));
    }
    if h.config_hash != config_hash {
        return Err(SbartError::Startup(format!(
            "rank {rank}: configuration hash {:016x} does not match {config_hash:016x}",
            h.config_hash
        )));
    }
    Ok(())
}

fn rank_err(rank: usize, e: SbartError) -> SbartError {
    match e {
        SbartError::Transport(m) => SbartError::Transport(format!("rank {rank}: {m}")),
        other => other,
    }
}

fn unexpected(rank: usize, msg: &Message) -> SbartError {
    SbartError::Protocol {
        rank,
        msg: format!("unexpected {:?} message", msg.tag()),
    }
}

/// Sums full statistics over all ranks. The master gets the merged result,
/// workers get `None`.
pub fn reduce_stats(comm: &mut Comm, ctx: StepContext, local: SuffStats) -> Result<Option<SuffStats>> {
    if let Comm::Worker { .. } = comm {
        comm.send_to_master(&Message::PartialStats(local), ctx)?;
        return Ok(None);
    }
    let parts = comm.gather(Tag::PartialStats, ctx)?;
    let mut merged = local;
    for (rank, msg) in &parts {
        match msg {
            Message::PartialStats(s) => merged.merge_from(s, *rank)?,
            other => return Err(unexpected(*rank, other)),
        }
    }
    if let Some(stats) = comm.stats_mut() {
        stats.stat_reductions += 1;
        stats.partial_messages += 1 + parts.len() as u64;
    }
    Ok(Some(merged))
}

/// Sums structure-pass partials over all ranks.
pub fn reduce_structure(comm: &mut Comm, ctx: StepContext, local: StructurePartial) -> Result<Option<StructurePartial>> {
    if let Comm::Worker { .. } = comm {
        comm.send_to_master(&Message::PartialStatsDelta(local), ctx)?;
        return Ok(None);
    }
    let parts = comm.gather(Tag::PartialStatsDelta, ctx)?;
    let mut merged = local;
    for (rank, msg) in &parts {
        match msg {
            Message::PartialStatsDelta(s) => merged.merge_from(s, *rank)?,
            other => return Err(unexpected(*rank, other)),
        }
    }
    if let Some(stats) = comm.stats_mut() {
        stats.stat_reductions += 1;
        stats.partial_messages += 1 + parts.len() as u64;
    }
    Ok(Some(merged))
}

/// Sums the residual sum of squares (in fixed point) and row counts.
pub fn reduce_sigma_stats(comm: &mut Comm, ctx: StepContext, local_ss: i128, local_n: u64) -> Result<Option<(f64, u64)>> {
    if let Comm::Worker { .. } = comm {
        comm.send_to_master(&Message::SigmaPartial { ss: local_ss, n: local_n }, ctx)?;
        return Ok(None);
    }
    let parts = comm.gather(Tag::SigmaPartial, ctx)?;
    let (mut ss, mut n) = (local_ss, local_n);
    for (rank, msg) in &parts {
        match msg {
            Message::SigmaPartial { ss: s, n: k } => {
                ss += s;
                n += k;
            }
            other => return Err(unexpected(*rank, other)),
        }
    }
    if let Some(stats) = comm.stats_mut() {
        stats.sigma_reductions += 1;
    }
    Ok(Some((from_fixed(ss), n)))
}

/// Master: tells every worker the outcome of a tree update.
pub fn broadcast_decision(comm: &mut Comm, ctx: StepContext, decision: Decision, leaves: &[f64]) -> Result<()> {
    comm.broadcast(&Message::Decision(decision), ctx)?;
    comm.broadcast(&Message::LeafParams(leaves.to_vec()), ctx)
}

/// Master: collects every worker's consistency report.
pub(crate) fn gather_sync(comm: &mut Comm, ctx: StepContext) -> Result<Vec<(usize, super::message::SyncReport)>> {
    comm.gather(Tag::SyncCheck, ctx)?
        .into_iter()
        .map(|(rank, msg)| match msg {
            Message::SyncReport(r) => Ok((rank, r)),
            other => Err(unexpected(rank, &other)),
        })
        .collect()
}

/// Worker: replies to a sync request.
pub(crate) fn send_sync(comm: &mut Comm, ctx: StepContext, report: super::message::SyncReport) -> Result<()> {
    comm.send_to_master(&Message::SyncReport(report), ctx)
}
