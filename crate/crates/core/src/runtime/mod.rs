//! Distributed execution: rank 0 runs the chain and every rank owns one
//! contiguous shard of the rows.
//!
//! Workers are passive. They answer the master's requests with exact
//! fixed-point partial statistics and apply its decisions to their replica of
//! the forest, so the chain does not depend on how many ranks there are.

mod collective;
mod engine;
mod message;
mod transport;

pub use collective::{broadcast_decision, reduce_sigma_stats, reduce_stats, reduce_structure, Comm, CommStats};
pub use engine::{EngineInit, ShardEngine};
pub use message::{Frame, Handshake, Message, SyncReport, Tag, FRAME_HEADER, MAX_FRAME, PROTOCOL_VERSION};
pub use transport::{inproc_pair, InProcLink, Link, TcpLink, Topology};

use std::net::TcpListener;
use std::time::Duration;

use crate::data::{partition_data, DataShard};
use crate::error::{Result, SbartError};
use crate::posterior::{Posterior, PosteriorHeader};
use crate::problem::{fnv1a, Problem};
use crate::sampler::{run_chain, ChainOutput, Decision, MoveProposal, SamplerConfig, StatProvider, StepContext};
use crate::stats::{SuffStats, StructurePartial};

/// Everything a rank needs besides its shard. Built identically on every rank
/// from the configuration and the full problem.
#[derive(Clone, Debug)]
pub struct JobSpec {
    pub config: SamplerConfig,
    pub p: usize,
    pub response_variance: f64,
    pub sigma_scale: f64,
    pub config_hash: u64,
    pub init: EngineInit,
    pub header: PosteriorHeader,
}

impl JobSpec {
    pub fn new(config: &SamplerConfig, problem: &Problem) -> Result<Self> {
        config.validate()?;
        if config.mode != problem.mode() {
            return Err(SbartError::InvalidArgument(format!(
                "configuration is for {:?} but the problem is {:?}",
                config.mode,
                problem.mode()
            )));
        }
        let mut bytes = config.hash_bytes();
        bytes.extend_from_slice(&problem.schema_bytes());
        let config_hash = fnv1a(&bytes);
        Ok(Self {
            config: config.clone(),
            p: problem.p,
            response_variance: problem.response_variance(),
            sigma_scale: problem.transform.scale(),
            config_hash,
            init: EngineInit {
                trees: config.trees,
                bandwidth: config.initial_bandwidth(),
                offset: problem.offset,
                mode: problem.mode(),
            },
            header: PosteriorHeader::new(problem, config, config_hash),
        })
    }
}

/// The shards of `problem` for `workers` ranks.
pub fn shards(problem: &Problem, workers: usize) -> Result<Vec<DataShard>> {
    partition_data(&problem.x, &problem.y, &problem.meta, workers)
}

/// Rank 0's statistic provider: its own engine plus the links to the
/// workers.
pub struct Cluster {
    engine: ShardEngine,
    comm: Comm,
}

impl Cluster {
    pub fn new(engine: ShardEngine, comm: Comm) -> Self {
        Self { engine, comm }
    }

    pub fn comm(&self) -> &Comm {
        &self.comm
    }

    pub fn engine(&self) -> &ShardEngine {
        &self.engine
    }

    fn whole(iteration: u32) -> StepContext {
        StepContext { iteration, tree: 0 }
    }
}

impl StatProvider for Cluster {
    fn propose_structure(&mut self, ctx: StepContext, proposal: &MoveProposal, full_refresh: bool) -> Result<StructurePartial> {
        self.comm.broadcast(
            &Message::ProposeStructure {
                proposal: *proposal,
                full_refresh,
            },
            ctx,
        )?;
        let local = self.engine.structure(ctx.tree as usize, proposal, full_refresh)?;
        Ok(reduce_structure(&mut self.comm, ctx, local)?.expect("master receives the reduction"))
    }

    fn propose_bandwidth(&mut self, ctx: StepContext, structure_accepted: bool, tau: f64) -> Result<SuffStats> {
        self.comm
            .broadcast(&Message::ProposeBandwidth { structure_accepted, tau }, ctx)?;
        let local = self.engine.bandwidth(ctx.tree as usize, structure_accepted, tau)?;
        Ok(reduce_stats(&mut self.comm, ctx, local)?.expect("master receives the reduction"))
    }

    fn commit(&mut self, ctx: StepContext, decision: Decision, leaves: &[f64]) -> Result<()> {
        broadcast_decision(&mut self.comm, ctx, decision, leaves)?;
        self.engine.decide(ctx.tree as usize, decision)?;
        self.engine.apply_leaves(ctx.tree as usize, leaves)
    }

    fn sigma_stats(&mut self, iteration: u32) -> Result<(f64, u64)> {
        let ctx = Self::whole(iteration);
        self.comm.broadcast(&Message::SigmaRequest, ctx)?;
        let (ss, n) = self.engine.sigma_partial();
        Ok(reduce_sigma_stats(&mut self.comm, ctx, ss, n)?.expect("master receives the reduction"))
    }

    fn set_sigma(&mut self, iteration: u32, sigma: f64) -> Result<()> {
        self.comm.broadcast(&Message::SigmaNew(sigma), Self::whole(iteration))?;
        self.engine.set_sigma(sigma);
        Ok(())
    }

    fn refresh_latent(&mut self, iteration: u32, seed: u64) -> Result<()> {
        self.comm
            .broadcast(&Message::LatentRefresh { seed }, Self::whole(iteration))?;
        self.engine.refresh_latent(seed)
    }

    fn sync_check(&mut self, iteration: u32, forest_hash: u64) -> Result<()> {
        let ctx = Self::whole(iteration);
        self.comm.broadcast(&Message::SyncRequest { forest_hash }, ctx)?;
        let mut reports = vec![(0, self.engine.sync_report())];
        reports.extend(collective::gather_sync(&mut self.comm, ctx)?);
        for (rank, r) in reports {
            if r.forest_hash != forest_hash {
                return Err(SbartError::Desynchronized { rank });
            }
            if !(r.drift <= 1e-8 * (1.0 + r.response_max)) {
                return Err(SbartError::Consistency(format!(
                    "cached fits on rank {rank} drifted by {:e} at iteration {iteration}",
                    r.drift
                )));
            }
        }
        Ok(())
    }
}

/// Result of a training run on the master.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub posterior: Posterior,
    pub chain: ChainOutput,
    pub comm: CommStats,
}

/// Runs the chain on rank 0. Workers are told to shut down at the end, and
/// on a best-effort basis when the run fails.
pub fn run_master(job: &JobSpec, shard: DataShard, mut comm: Comm) -> Result<RunOutput> {
    if comm.rank() != 0 {
        return Err(SbartError::InvalidArgument("run_master needs the rank 0 communicator".into()));
    }
    comm.handshake(job.config_hash)?;
    let engine = ShardEngine::new(shard, job.init)?;
    let mut cluster = Cluster::new(engine, comm);
    let chain = run_chain(&job.config, job.p, job.response_variance, job.sigma_scale, &mut cluster);
    let last = StepContext {
        iteration: job.config.iterations as u32,
        tree: 0,
    };
    let shutdown = cluster.comm.broadcast(&Message::Shutdown, last);
    let chain = chain?;
    shutdown?;
    let comm = cluster.comm.stats().cloned().unwrap_or_default();
    Ok(RunOutput {
        posterior: Posterior {
            header: job.header.clone(),
            samples: chain.samples.clone(),
        },
        chain,
        comm,
    })
}

/// Serves the master's requests on a worker rank until it says to stop.
pub fn run_worker(job: &JobSpec, shard: DataShard, mut comm: Comm) -> Result<()> {
    let rank = comm.rank();
    if rank == 0 {
        return Err(SbartError::InvalidArgument("run_worker needs a worker communicator".into()));
    }
    comm.handshake(job.config_hash)?;
    let mut engine = ShardEngine::new(shard, job.init)?;
    loop {
        let frame = comm.recv_from_master()?;
        let ctx = StepContext {
            iteration: frame.iteration,
            tree: frame.tree,
        };
        let j = frame.tree as usize;
        match Message::from_frame(&frame)? {
            Message::ProposeStructure { proposal, full_refresh } => {
                let local = engine.structure(j, &proposal, full_refresh)?;
                reduce_structure(&mut comm, ctx, local)?;
            }
            Message::ProposeBandwidth { structure_accepted, tau } => {
                let local = engine.bandwidth(j, structure_accepted, tau)?;
                reduce_stats(&mut comm, ctx, local)?;
            }
            Message::Decision(d) => engine.decide(j, d)?,
            Message::LeafParams(leaves) => engine.apply_leaves(j, &leaves)?,
            Message::SigmaRequest => {
                let (ss, n) = engine.sigma_partial();
                reduce_sigma_stats(&mut comm, ctx, ss, n)?;
            }
            Message::SigmaNew(sigma) => engine.set_sigma(sigma),
            Message::LatentRefresh { seed } => engine.refresh_latent(seed)?,
            Message::SyncRequest { .. } => collective::send_sync(&mut comm, ctx, engine.sync_report())?,
            Message::Shutdown => return Ok(()),
            other => {
                return Err(SbartError::Protocol {
                    rank: 0,
                    msg: format!("worker {rank} cannot handle {:?}", other.tag()),
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    InProc,
    /// Loopback TCP sockets, one per worker.
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = SbartError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(SbartError::InvalidArgument(format!("unknown transport '{other}' (expected inproc or tcp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub workers: usize,
    pub transport: TransportKind,
    /// How long any rank waits for a single message.
    pub timeout: Duration,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            transport: TransportKind::InProc,
            timeout: Duration::from_secs(120),
        }
    }
}

/// Trains on `problem` with every rank running as a thread of this process.
pub fn train(problem: &Problem, config: &SamplerConfig, opts: TrainOptions) -> Result<RunOutput> {
    let job = JobSpec::new(config, problem)?;
    let mut shards = shards(problem, opts.workers)?.into_iter();
    let master_shard = shards.next().expect("at least one shard");
    let worker_shards: Vec<DataShard> = shards.collect();
    let k = opts.workers;

    std::thread::scope(|scope| {
        let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(k - 1);
        let mut handles = Vec::with_capacity(k - 1);
        match opts.transport {
            TransportKind::InProc => {
                for (i, shard) in worker_shards.into_iter().enumerate() {
                    let (m, w) = inproc_pair(opts.timeout);
                    links.push(Box::new(m));
                    let job = &job;
                    handles.push(scope.spawn(move || run_worker(job, shard, Comm::worker(i + 1, k, Box::new(w)))));
                }
            }
            TransportKind::Tcp => {
                let mut addrs = Vec::with_capacity(k - 1);
                for (i, shard) in worker_shards.into_iter().enumerate() {
                    let listener = TcpListener::bind("127.0.0.1:0")?;
                    addrs.push(listener.local_addr()?.to_string());
                    let job = &job;
                    let timeout = opts.timeout;
                    handles.push(scope.spawn(move || {
                        let link = TcpLink::accept(&listener, timeout)?;
                        run_worker(job, shard, Comm::worker(i + 1, k, Box::new(link)))
                    }));
                }
                for addr in &addrs {
                    links.push(Box::new(TcpLink::connect(addr, opts.timeout, opts.timeout)?));
                }
            }
        }
        let out = run_master(&job, master_shard, Comm::master(links));
        let mut worker_err = None;
        for (i, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    worker_err.get_or_insert(e);
                }
                Err(_) => {
                    worker_err.get_or_insert(SbartError::Transport(format!("worker {} panicked", i + 1)));
                }
            }
        }
        match (out, worker_err) {
            (Ok(o), None) => Ok(o),
            (Ok(_), Some(e)) => Err(e),
            // A worker's own failure explains the master's transport error.
            (Err(SbartError::Transport(_)), Some(e)) => Err(e),
            (Err(e), _) => Err(e),
        }
    })
}

/// Worker side of a multi-process TCP run: listens on this rank's topology
/// address and accepts the master's connection.
pub fn serve_worker_tcp(topology: &Topology, rank: usize, timeout: Duration) -> Result<Comm> {
    let addr = topology
        .addrs
        .get(rank)
        .filter(|_| rank > 0)
        .ok_or_else(|| SbartError::Startup(format!("rank {rank} is not a worker in a topology of {}", topology.size())))?;
    let listener = TcpListener::bind(addr).map_err(|e| SbartError::Startup(format!("cannot listen on {addr}: {e}")))?;
    let link = TcpLink::accept(&listener, timeout)?;
    Ok(Comm::worker(rank, topology.size(), Box::new(link)))
}

/// Master side of a multi-process TCP run: connects to every worker in rank
/// order, waiting up to `wait` for each to come up.
pub fn connect_workers(topology: &Topology, wait: Duration, timeout: Duration) -> Result<Comm> {
    let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(topology.size() - 1);
    for (rank, addr) in topology.addrs.iter().enumerate().skip(1) {
        let link = TcpLink::connect(addr, wait, timeout).map_err(|e| SbartError::Startup(format!("rank {rank}: {e}")))?;
        links.push(Box::new(link));
    }
    Ok(Comm::master(links))
}
