use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SbartError};
use crate::posterior::PosteriorSample;
use crate::priors::{draw_sigma_squared, draw_split_probs, update_sigma_mu, BandwidthPrior, ConcentrationGrid, NoisePrior};
use crate::problem::{fnv1a, Mode};
use crate::stats::{assemble_candidate, marginal_from_posterior, LeafPosterior, StructurePartial, SuffStats};
use crate::tree::Forest;

use super::moves::{acceptance_log_ratio, apply_proposal, propose_move, MoveProposal};
use super::{SamplerConfig, SigmaMuMode};

/// Where in the run a collective happens; stamped on every message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub iteration: u32,
    pub tree: u16,
}

/// Outcome of the two Metropolis steps of one tree update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Decision {
    pub structure_accepted: bool,
    pub bandwidth_accepted: bool,
}

/// Source of globally reduced statistics. Every call is one collective
/// operation across all shards.
pub trait StatProvider {
    /// Statistics for a structure proposal on tree `ctx.tree`: the incumbent's
    /// response part (with the full `Lambda` when `full_refresh`), plus the
    /// candidate's fresh rows.
    fn propose_structure(&mut self, ctx: StepContext, proposal: &MoveProposal, full_refresh: bool) -> Result<StructurePartial>;

    /// Full statistics of the winning structure with bandwidth `tau`.
    fn propose_bandwidth(&mut self, ctx: StepContext, structure_accepted: bool, tau: f64) -> Result<SuffStats>;

    /// Makes every replica apply the decision and the new leaf values.
    fn commit(&mut self, ctx: StepContext, decision: Decision, leaves: &[f64]) -> Result<()>;

    /// Exact sum of squared residuals of the full forest, and the row count.
    fn sigma_stats(&mut self, iteration: u32) -> Result<(f64, u64)>;

    fn set_sigma(&mut self, iteration: u32, sigma: f64) -> Result<()>;

    /// Redraws the probit latent variables with the given seed.
    fn refresh_latent(&mut self, iteration: u32, seed: u64) -> Result<()>;

    /// Verifies that every replica holds the forest with hash `forest_hash`
    /// and that cached fits have not drifted.
    fn sync_check(&mut self, iteration: u32, forest_hash: u64) -> Result<()>;
}

/// Per-tree cache of the accepted structure's `Lambda`.
#[derive(Clone, Debug, Default)]
struct TreeCache {
    lambda: Option<Vec<i128>>,
    accepted_since_refresh: usize,
}

/// Master-side chain state. The cached fits and latent variables live with the
/// shards in the runtime engines.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub forest: Forest,
    /// Noise standard deviation on the working scale.
    pub sigma: f64,
    pub sigma_mu: f64,
    pub split_probs: Vec<f64>,
    pub concentration_index: usize,
    caches: Vec<TreeCache>,
}

impl ChainState {
    pub fn initial(config: &SamplerConfig, p: usize, sigma: f64) -> Result<Self> {
        let grid = &config.a_grid;
        let concentration_index = (0..grid.len())
            .min_by(|&a, &b| (grid[a] - 1.0).abs().total_cmp(&(grid[b] - 1.0).abs()))
            .unwrap_or(0);
        Ok(Self {
            forest: Forest::stumps(config.trees, config.initial_bandwidth())?,
            sigma,
            sigma_mu: config.sigma_mu(),
            split_probs: vec![1.0 / p as f64; p],
            concentration_index,
            caches: vec![TreeCache::default(); config.trees],
        })
    }

    pub fn forest_hash(&self) -> u64 {
        forest_hash(&self.forest)
    }
}

/// FNV-1a hash of the forest's wire encoding.
pub fn forest_hash(forest: &Forest) -> u64 {
    let mut buf = Vec::new();
    forest.encode(&mut buf);
    fnv1a(&buf)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub tree_updates: u64,
    pub proposed: [u64; 3],
    pub accepted: [u64; 3],
    pub bandwidth_proposed: u64,
    pub bandwidth_accepted: u64,
    /// Global statistic reductions issued by tree updates.
    pub stat_reductions: u64,
    pub max_reductions_per_update: u64,
    pub full_refreshes: u64,
    pub sigma_reductions: u64,
    pub jittered: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeOutcome {
    pub decision: Decision,
    pub reductions: u64,
}

/// Fixed inputs of a chain beyond the sampler settings.
#[derive(Clone, Debug)]
pub(crate) struct ChainModel {
    pub p: usize,
    pub noise: NoisePrior,
    pub grid: ConcentrationGrid,
}

impl ChainModel {
    pub fn new(config: &SamplerConfig, p: usize, response_variance: f64) -> Result<Self> {
        Ok(Self {
            p,
            noise: NoisePrior::calibrated(config.nu, response_variance, config.lambda_quantile)?,
            grid: ConcentrationGrid::scaled(&config.a_grid, p)?,
        })
    }
}

fn posterior_and_ml(stats: &SuffStats, state: &ChainState, config: &SamplerConfig, counters: &mut Counters) -> Result<(LeafPosterior, f64)> {
    let v = state.sigma_mu * state.sigma_mu / config.trees as f64;
    let post = LeafPosterior::new(stats, state.sigma, v)?;
    if post.jittered {
        counters.jittered += 1;
    }
    let ml = if config.likelihood { marginal_from_posterior(stats, &post, state.sigma, v) } else { 0.0 };
    Ok((post, ml))
}

/// One structure step, one bandwidth step and one leaf draw for tree `j`.
pub fn update_tree<P: StatProvider + ?Sized, R: Rng + ?Sized>(
    state: &mut ChainState,
    j: usize,
    config: &SamplerConfig,
    provider: &mut P,
    iteration: u32,
    counters: &mut Counters,
    rng: &mut R,
) -> Result<TreeOutcome> {
    let model_bw = BandwidthPrior::new(config.bandwidth_rate)?;
    let ctx = StepContext { iteration, tree: j as u16 };
    let tree = state.forest.trees[j].clone();
    let proposal = propose_move(&tree, &state.split_probs, &config.move_weights, rng);
    let (candidate, change) = apply_proposal(&tree, &proposal)?;
    counters.proposed[proposal.kind.index()] += 1;

    let cache = &mut state.caches[j];
    let full = cache.lambda.is_none() || cache.accepted_since_refresh >= config.refresh_every;
    let partial = provider.propose_structure(ctx, &proposal, full)?;
    let mut reductions = 1;
    if full {
        counters.full_refreshes += 1;
        cache.accepted_since_refresh = 0;
    }
    let lambda = match partial.incumbent_lambda {
        Some(l) => l,
        None => cache.lambda.take().ok_or_else(|| SbartError::Consistency("no cached statistics for tree".into()))?,
    };
    let incumbent = SuffStats::from_parts(tree.leaf_count(), lambda, partial.incumbent)?;
    incumbent.check_mass()?;
    let cand_stats = assemble_candidate(&incumbent, &tree, &candidate, change, partial.delta.as_ref())?;
    cand_stats.check_mass()?;

    let (inc_post, inc_ml) = posterior_and_ml(&incumbent, state, config, counters)?;
    let (cand_post, cand_ml) = posterior_and_ml(&cand_stats, state, config, counters)?;
    let log_ratio = acceptance_log_ratio(&tree, inc_ml, &candidate, cand_ml, proposal.kind, &config.shape_prior(), &config.move_weights);
    let u: f64 = rng.random();
    let structure_accepted = u.ln() < log_ratio;
    let (mut win_tree, mut win_stats, mut win_post, win_ml) = if structure_accepted {
        counters.accepted[proposal.kind.index()] += 1;
        (candidate, cand_stats, cand_post, cand_ml)
    } else {
        (tree, incumbent, inc_post, inc_ml)
    };

    let mut bandwidth_accepted = false;
    if config.fixed_bandwidth.is_none() {
        let tau = model_bw.draw(rng);
        counters.bandwidth_proposed += 1;
        let stats = provider.propose_bandwidth(ctx, structure_accepted, tau)?;
        reductions += 1;
        stats.check_mass()?;
        let (post, ml) = posterior_and_ml(&stats, state, config, counters)?;
        // Independence proposal from the prior: the prior and proposal
        // densities cancel.
        let u: f64 = rng.random();
        if u.ln() < ml - win_ml {
            bandwidth_accepted = true;
            counters.bandwidth_accepted += 1;
            win_tree.set_bandwidth(tau)?;
            win_stats = stats;
            win_post = post;
        }
    }

    let leaves = if config.likelihood {
        win_post.draw(rng)
    } else {
        let v = state.sigma_mu * state.sigma_mu / config.trees as f64;
        LeafPosterior::new(&SuffStats::zeros(win_tree.leaf_count()), state.sigma, v)?.draw(rng)
    };
    win_tree.set_leaf_params(&leaves)?;
    let decision = Decision {
        structure_accepted,
        bandwidth_accepted,
    };
    provider.commit(ctx, decision, &leaves)?;

    let cache = &mut state.caches[j];
    if bandwidth_accepted {
        cache.accepted_since_refresh = 0;
    } else if structure_accepted {
        cache.accepted_since_refresh += 1;
    }
    cache.lambda = Some(win_stats.into_lambda());
    state.forest.trees[j] = win_tree;

    counters.tree_updates += 1;
    counters.stat_reductions += reductions;
    counters.max_reductions_per_update = counters.max_reductions_per_update.max(reductions);
    Ok(TreeOutcome { decision, reductions })
}

/// Per-iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Noise standard deviation on the response's original scale.
    pub sigma: f64,
    pub structure_accepted: u64,
    pub bandwidth_accepted: u64,
    pub stat_reductions: u64,
    pub mean_leaves: f64,
    pub mean_bandwidth: f64,
    pub concentration: f64,
    pub sigma_mu: f64,
}

/// A full sweep over the trees followed by the noise (or latent), split
/// probability, concentration and optional leaf-scale updates.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gibbs_iteration_inner<P: StatProvider + ?Sized, R: Rng + ?Sized>(
    state: &mut ChainState,
    config: &SamplerConfig,
    model: &ChainModel,
    provider: &mut P,
    iteration: u32,
    counters: &mut Counters,
    rng: &mut R,
) -> Result<(u64, u64, u64)> {
    let natural: Vec<usize>;
    let order = match &config.sweep_order {
        Some(o) => o.as_slice(),
        None => {
            natural = (0..config.trees).collect();
            &natural
        }
    };
    let (mut s_acc, mut b_acc, mut red) = (0, 0, 0);
    for &j in order {
        let out = update_tree(state, j, config, provider, iteration, counters, rng)?;
        s_acc += out.decision.structure_accepted as u64;
        b_acc += out.decision.bandwidth_accepted as u64;
        red += out.reductions;
    }
    match config.mode {
        Mode::Regression => {
            let (ss, n) = provider.sigma_stats(iteration)?;
            counters.sigma_reductions += 1;
            let (ss, n) = if config.likelihood { (ss, n) } else { (0.0, 0) };
            state.sigma = draw_sigma_squared(ss, n, &model.noise, rng).sqrt();
            provider.set_sigma(iteration, state.sigma)?;
        }
        Mode::Classification => {
            let seed: u64 = rng.random();
            if config.likelihood {
                provider.refresh_latent(iteration, seed)?;
            }
        }
    }
    if config.sparse {
        let counts = state.forest.split_counts(model.p);
        let a = model.grid.points[state.concentration_index];
        state.split_probs = draw_split_probs(&counts, a, rng);
        state.concentration_index = model.grid.step(state.concentration_index, &state.split_probs, rng);
    }
    if config.sigma_mu_mode == SigmaMuMode::Sampled {
        let leaves: Vec<f64> = state.forest.trees.iter().flat_map(|t| t.leaf_params()).collect();
        state.sigma_mu = update_sigma_mu(state.sigma_mu, &leaves, config.trees, config.sigma_mu(), rng);
    }
    Ok((s_acc, b_acc, red))
}

/// Advances the chain by one iteration.
pub fn gibbs_iteration<P: StatProvider + ?Sized, R: Rng + ?Sized>(
    state: &mut ChainState,
    config: &SamplerConfig,
    p: usize,
    response_variance: f64,
    provider: &mut P,
    iteration: u32,
    counters: &mut Counters,
    rng: &mut R,
) -> Result<()> {
    let model = ChainModel::new(config, p, response_variance)?;
    gibbs_iteration_inner(state, config, &model, provider, iteration, counters, rng).map(|_| ())
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub samples: Vec<PosteriorSample>,
    pub diagnostics: Vec<IterationRecord>,
    pub counters: Counters,
    /// Wall time of the iteration loop.
    pub elapsed: Duration,
}

/// Runs the whole chain against `provider`.
///
/// `response_variance` calibrates the noise prior and `sigma_scale` converts
/// the working-scale noise level back to raw units for reporting.
pub fn run_chain<P: StatProvider + ?Sized>(
    config: &SamplerConfig,
    p: usize,
    response_variance: f64,
    sigma_scale: f64,
    provider: &mut P,
) -> Result<ChainOutput> {
    config.validate()?;
    let model = ChainModel::new(config, p, response_variance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sigma0 = match config.mode {
        Mode::Regression => response_variance.sqrt(),
        Mode::Classification => 1.0,
    };
    let mut state = ChainState::initial(config, p, sigma0)?;
    let mut counters = Counters::default();
    let mut samples = Vec::with_capacity(config.kept_count());
    let mut diagnostics = Vec::with_capacity(config.iterations);
    let start = Instant::now();

    if config.mode == Mode::Classification {
        let seed: u64 = rng.random();
        provider.refresh_latent(0, seed)?;
    } else {
        provider.set_sigma(0, state.sigma)?;
    }
    for it in 0..config.iterations {
        let iteration = it as u32;
        let (s_acc, b_acc, red) = gibbs_iteration_inner(&mut state, config, &model, provider, iteration, &mut counters, &mut rng)?;
        if (it + 1) % config.check_every == 0 {
            provider.sync_check(iteration, state.forest_hash())?;
        }
        let m = config.trees as f64;
        diagnostics.push(IterationRecord {
            iteration: it,
            sigma: state.sigma * sigma_scale,
            structure_accepted: s_acc,
            bandwidth_accepted: b_acc,
            stat_reductions: red,
            mean_leaves: state.forest.trees.iter().map(|t| t.leaf_count() as f64).sum::<f64>() / m,
            mean_bandwidth: state.forest.trees.iter().map(|t| t.bandwidth()).sum::<f64>() / m,
            concentration: model.grid.points[state.concentration_index],
            sigma_mu: state.sigma_mu,
        });
        if config.keeps(it) {
            samples.push(PosteriorSample {
                iteration: it as u32,
                sigma: state.sigma * sigma_scale,
                concentration: model.grid.points[state.concentration_index],
                split_probs: state.split_probs.clone(),
                forest: state.forest.clone(),
            });
        }
    }
    Ok(ChainOutput {
        samples,
        diagnostics,
        counters,
        elapsed: start.elapsed(),
    })
}
