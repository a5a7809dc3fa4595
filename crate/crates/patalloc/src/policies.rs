//! Allocation policies: Baseline, Topo-aware, Greedy, and Preserve.
//!
//! Baseline and Topo-aware pick device ids directly, the way container
//! runtimes and socket-affinity schedulers do; Greedy and Preserve search
//! the full set of pattern matches and take an argmax. All four return
//! the same decision record with all three scores filled in, computed
//! against the state at decision time, so logs are comparable across
//! policies.
//!
//! Ties are broken everywhere by the lexicographically smallest sorted
//! device tuple, then the smallest used-edge set; decisions are therefore
//! reproducible run to run and across scoring thread counts.

use std::fmt;
use std::str::FromStr;

use crate::appgraph::{AppPattern, JobSpec};
use crate::matcher::{
    find_matches_with_cap, link_census, LinkCensus, Match, DEFAULT_EMBEDDING_CAP,
};
use crate::scoring::{aggregated_bw, preserved_bw, EffBwModel};
use crate::topology::{AllocationState, DeviceId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Baseline,
    TopoAware,
    Greedy,
    Preserve,
}

impl Policy {
    pub const fn token(self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::TopoAware => "topo",
            Policy::Greedy => "greedy",
            Policy::Preserve => "preserve",
        }
    }

    pub const ALL: [Policy; 4] = [
        Policy::Baseline,
        Policy::TopoAware,
        Policy::Greedy,
        Policy::Preserve,
    ];

    /// Run this policy for a queued job against the current state.
    ///
    /// `Ok(None)` is the no-capacity signal: the job cannot start now and
    /// should wait for a release. The decision's `job_id` is taken from
    /// the job.
    pub fn decide(
        self,
        state: &AllocationState,
        job: &JobSpec,
        model: &EffBwModel,
        opts: &DecideOptions,
    ) -> Result<Option<AllocationDecision>> {
        let pattern = job.pattern()?;
        let mut decision = match self {
            Policy::Baseline => select_baseline_opts(state, &pattern, model)?,
            Policy::TopoAware => select_topo_aware_opts(state, &pattern, model)?,
            Policy::Greedy => select_greedy_opts(state, &pattern, model, opts)?,
            Policy::Preserve => {
                select_preserve_opts(state, &pattern, job.bw_sensitive, model, opts)?
            }
        };
        if let Some(d) = decision.as_mut() {
            d.job_id = job.job_id.clone();
        }
        Ok(decision)
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Policy::Baseline),
            "topo" => Ok(Policy::TopoAware),
            "greedy" => Ok(Policy::Greedy),
            "preserve" => Ok(Policy::Preserve),
            other => Err(Error::UnknownPolicy(other.to_string())),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Knobs shared by the match-searching policies.
#[derive(Debug, Clone)]
pub struct DecideOptions {
    /// Raw-embedding cap passed to the matcher.
    pub embedding_cap: usize,
    /// Worker threads for match scoring; the chosen decision is identical
    /// for any value.
    pub scoring_threads: usize,
}

impl Default for DecideOptions {
    fn default() -> Self {
        DecideOptions {
            embedding_cap: DEFAULT_EMBEDDING_CAP,
            scoring_threads: 1,
        }
    }
}

/// The outcome of a policy run: the devices to claim plus all three scores
/// at decision time. `chosen_match` is populated by the match-searching
/// policies; Baseline and Topo-aware pick devices directly.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDecision {
    pub job_id: String,
    pub policy: Policy,
    pub devices: Vec<DeviceId>,
    pub chosen_match: Option<Match>,
    pub census: LinkCensus,
    pub agg_bw: f64,
    pub predicted_eff_bw: f64,
    pub preserved_bw: f64,
}

// ---------------------------------------------------------------------------
// Direct-selection policies
// ---------------------------------------------------------------------------

/// Lowest free device ids, the id-ordered allocation of stock container
/// runtimes.
pub fn select_baseline(
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
) -> Result<Option<AllocationDecision>> {
    select_baseline_opts(state, pattern, model)
}

fn select_baseline_opts(
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
) -> Result<Option<AllocationDecision>> {
    let free = state.free_devices();
    let k = pattern.vertex_count() as usize;
    if free.len() < k {
        return Ok(None);
    }
    let devices = free[..k].to_vec();
    Ok(Some(scored_direct_decision(
        Policy::Baseline,
        state,
        pattern,
        devices,
        model,
    )?))
}

/// Socket-affine selection: recursively bisect the machine along its
/// socket groups and allocate inside the tightest group that still fits.
///
/// Concretely: among socket groups with at least `k` free devices, take
/// the one with the fewest free devices (lowest socket index on ties) and
/// allocate its `k` lowest free ids. If no single socket fits, fall back
/// to the `k` lowest free ids machine-wide.
pub fn select_topo_aware(
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
) -> Result<Option<AllocationDecision>> {
    select_topo_aware_opts(state, pattern, model)
}

fn select_topo_aware_opts(
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
) -> Result<Option<AllocationDecision>> {
    let free = state.free_devices();
    let k = pattern.vertex_count() as usize;
    if free.len() < k {
        return Ok(None);
    }

    let mut best: Option<(usize, usize)> = None; // (free_count, socket_index)
    for (idx, group) in state.graph().sockets().iter().enumerate() {
        let free_count = group.iter().filter(|d| state.is_free(**d)).count();
        if free_count >= k && best.is_none_or(|(bc, _)| free_count < bc) {
            best = Some((free_count, idx));
        }
    }

    let devices: Vec<DeviceId> = match best {
        Some((_, idx)) => state.graph().sockets()[idx]
            .iter()
            .copied()
            .filter(|d| state.is_free(*d))
            .take(k)
            .collect(),
        None => free[..k].to_vec(),
    };
    Ok(Some(scored_direct_decision(
        Policy::TopoAware,
        state,
        pattern,
        devices,
        model,
    )?))
}

/// Score a direct device pick by placing the pattern's vertices onto the
/// chosen devices in ascending id order.
fn scored_direct_decision(
    policy: Policy,
    state: &AllocationState,
    pattern: &AppPattern,
    devices: Vec<DeviceId>,
    model: &EffBwModel,
) -> Result<AllocationDecision> {
    let m = Match::from_vertex_map(pattern, devices)?;
    let census = link_census(&m, state.graph())?;
    Ok(AllocationDecision {
        job_id: String::new(),
        policy,
        devices: m.devices().to_vec(),
        census,
        agg_bw: aggregated_bw(&m, state.graph())?,
        predicted_eff_bw: model.predict(&census),
        preserved_bw: preserved_bw(state, &m)?,
        chosen_match: None,
    })
}

// ---------------------------------------------------------------------------
// Match-searching policies
// ---------------------------------------------------------------------------

/// Argmax of aggregated bandwidth over all pattern matches.
pub fn select_greedy(
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
) -> Result<Option<AllocationDecision>> {
    select_greedy_opts(state, pattern, model, &DecideOptions::default())
}

fn select_greedy_opts(
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
    opts: &DecideOptions,
) -> Result<Option<AllocationDecision>> {
    let graph = state.graph();
    select_by_score(Policy::Greedy, state, pattern, model, opts, move |m| {
        aggregated_bw(m, graph)
    })
}

/// Sensitivity-aware selection: bandwidth-sensitive jobs take the match
/// with the highest predicted effective bandwidth; insensitive jobs take
/// the one that preserves the most bandwidth for whoever comes next.
pub fn select_preserve(
    state: &AllocationState,
    pattern: &AppPattern,
    bw_sensitive: bool,
    model: &EffBwModel,
) -> Result<Option<AllocationDecision>> {
    select_preserve_opts(
        state,
        pattern,
        bw_sensitive,
        model,
        &DecideOptions::default(),
    )
}

fn select_preserve_opts(
    state: &AllocationState,
    pattern: &AppPattern,
    bw_sensitive: bool,
    model: &EffBwModel,
    opts: &DecideOptions,
) -> Result<Option<AllocationDecision>> {
    if bw_sensitive {
        let graph = state.graph();
        select_by_score(Policy::Preserve, state, pattern, model, opts, move |m| {
            Ok(model.predict(&link_census(m, graph)?))
        })
    } else {
        select_by_score(Policy::Preserve, state, pattern, model, opts, move |m| {
            preserved_bw(state, m)
        })
    }
}

fn select_by_score<F>(
    policy: Policy,
    state: &AllocationState,
    pattern: &AppPattern,
    model: &EffBwModel,
    opts: &DecideOptions,
    score: F,
) -> Result<Option<AllocationDecision>>
where
    F: Fn(&Match) -> Result<f64> + Sync,
{
    let mut matches = find_matches_with_cap(state, pattern, opts.embedding_cap)?;
    if matches.is_empty() {
        return Ok(None);
    }
    let best_idx = argmax(&matches, opts.scoring_threads.max(1), &score)?;
    let m = matches.swap_remove(best_idx);
    let census = link_census(&m, state.graph())?;
    Ok(Some(AllocationDecision {
        job_id: String::new(),
        policy,
        devices: m.devices().to_vec(),
        census,
        agg_bw: aggregated_bw(&m, state.graph())?,
        predicted_eff_bw: model.predict(&census),
        preserved_bw: preserved_bw(state, &m)?,
        chosen_match: Some(m),
    }))
}

/// Index of the highest-scoring match. Matches arrive sorted by
/// (devices, used_edges), so keeping the earliest strict maximum realizes
/// the tie-break; chunked scoring merges to the same index for any thread
/// count.
fn argmax<F>(matches: &[Match], threads: usize, score: &F) -> Result<usize>
where
    F: Fn(&Match) -> Result<f64> + Sync,
{
    let scan = |offset: usize, chunk: &[Match]| -> Result<(f64, usize)> {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = offset;
        for (i, m) in chunk.iter().enumerate() {
            let s = score(m)?;
            if s > best {
                best = s;
                best_idx = offset + i;
            }
        }
        Ok((best, best_idx))
    };

    let merged: Vec<(f64, usize)> = if threads <= 1 || matches.len() < 2 * threads {
        vec![scan(0, matches)?]
    } else {
        let chunk_len = matches.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = matches
                .chunks(chunk_len)
                .enumerate()
                .map(|(c, chunk)| scope.spawn(move || scan(c * chunk_len, chunk)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (s, idx) in merged {
        if s > best || (s == best && idx < best_idx) {
            best = s;
            best_idx = idx;
        }
    }
    Ok(best_idx)
}
