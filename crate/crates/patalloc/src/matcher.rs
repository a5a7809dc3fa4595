//! Pattern matching: enumerate every placement of an application pattern
//! onto the free portion of the hardware graph.
//!
//! Because unlinked device pairs still communicate over PCIe, the
//! effective hardware graph is complete and every injective vertex map is
//! a valid embedding. The enumerator therefore needs no adjacency
//! pruning; it walks all injective maps by backtracking and collapses
//! maps that cover the same devices through the same hardware edges,
//! since all three bandwidth scores are functions of exactly that pair.
//! Data graphs here are tiny (at most a couple dozen devices), which is
//! why a direct enumerator beats a general mining engine.

use std::fmt;

use crate::appgraph::AppPattern;
use crate::topology::{AllocationState, DeviceId, HardwareGraph, LinkClass};
use crate::{Error, Result};

/// Abort threshold on raw (pre-dedup) embeddings; a 5-GPU job on an idle
/// 16-device machine generates 16!/11! = 524,160 of them.
pub const DEFAULT_EMBEDDING_CAP: usize = 1_000_000;

/// One placement: an injective map from pattern vertices to devices plus
/// the hardware edges the pattern's edges land on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Match {
    vertex_map: Vec<DeviceId>,
    devices: Vec<DeviceId>,
    used_edges: Vec<(DeviceId, DeviceId)>,
}

impl Match {
    /// Build a match from an explicit vertex map, validating injectivity.
    pub fn from_vertex_map(pattern: &AppPattern, vertex_map: Vec<DeviceId>) -> Result<Self> {
        if vertex_map.len() != pattern.vertex_count() as usize {
            return Err(Error::MatchInvalid(format!(
                "vertex map covers {} of {} pattern vertices",
                vertex_map.len(),
                pattern.vertex_count()
            )));
        }
        let mut devices = vertex_map.clone();
        devices.sort_unstable();
        if devices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::MatchInvalid(
                "vertex map is not injective".to_string(),
            ));
        }
        let mut used_edges: Vec<(DeviceId, DeviceId)> = pattern
            .edges()
            .iter()
            .map(|&(a, b)| {
                let (u, v) = (vertex_map[a as usize], vertex_map[b as usize]);
                (u.min(v), u.max(v))
            })
            .collect();
        used_edges.sort_unstable();
        Ok(Match {
            vertex_map,
            devices,
            used_edges,
        })
    }

    /// `vertex_map()[i]` is the device hosting pattern vertex `i`.
    pub fn vertex_map(&self) -> &[DeviceId] {
        &self.vertex_map
    }

    /// Covered devices, ascending.
    pub fn devices(&self) -> &[DeviceId] {
        &self.devices
    }

    /// Images of the pattern's edges, normalized and ascending. Injectivity
    /// makes this exactly as large as the pattern's edge set.
    pub fn used_edges(&self) -> &[(DeviceId, DeviceId)] {
        &self.used_edges
    }
}

impl fmt::Display for Match {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.devices.iter().map(|d| d.to_string()).collect();
        f.write_str(&ids.join("+"))
    }
}

/// Counts of double-NVLink, single-NVLink (either generation), and PCIe
/// edges used by a match; the input tuple of the effective-bandwidth model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkCensus {
    pub double_nvlink: u32,
    pub single_nvlink: u32,
    pub pcie: u32,
}

impl LinkCensus {
    pub fn new(double_nvlink: u32, single_nvlink: u32, pcie: u32) -> Self {
        LinkCensus {
            double_nvlink,
            single_nvlink,
            pcie,
        }
    }

    pub fn total(&self) -> u32 {
        self.double_nvlink + self.single_nvlink + self.pcie
    }
}

impl fmt::Display for LinkCensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {})",
            self.double_nvlink, self.single_nvlink, self.pcie
        )
    }
}

/// Classify the edges a match uses: 50 GBps links count as double NVLink,
/// 25 or 20 GBps as single NVLink, 12 GBps as PCIe.
pub fn link_census(m: &Match, graph: &HardwareGraph) -> Result<LinkCensus> {
    let mut census = LinkCensus::default();
    for &(u, v) in m.used_edges() {
        match graph.link_class(u, v)? {
            LinkClass::DoubleNvlink2 => census.double_nvlink += 1,
            LinkClass::SingleNvlink2 | LinkClass::SingleNvlink1 => census.single_nvlink += 1,
            LinkClass::Pcie => census.pcie += 1,
        }
    }
    Ok(census)
}

/// Enumerate all placements of `pattern` onto the free devices of `state`
/// with the default embedding cap. See [`find_matches_with_cap`].
pub fn find_matches(state: &AllocationState, pattern: &AppPattern) -> Result<Vec<Match>> {
    find_matches_with_cap(state, pattern, DEFAULT_EMBEDDING_CAP)
}

/// Enumerate all placements of `pattern` onto the free devices of `state`.
///
/// Matches whose `(devices, used_edges)` agree are collapsed to one
/// representative (the lexicographically smallest vertex map); distinct
/// edge sets over the same device set are all retained, because a
/// non-clique pattern scores differently depending on which hardware
/// edges it occupies. The result is sorted by device set, then edge set,
/// so repeated calls return identical lists.
///
/// A pattern larger than the free pool yields the empty list, which the
/// policies read as a no-capacity signal. Exceeding `cap` raw embeddings
/// is an explicit error rather than a silent truncation.
pub fn find_matches_with_cap(
    state: &AllocationState,
    pattern: &AppPattern,
    cap: usize,
) -> Result<Vec<Match>> {
    let free = state.free_devices();
    let n = pattern.vertex_count() as usize;
    if n > free.len() {
        return Ok(Vec::new());
    }
    if pattern.vertex_count() > 1 && !pattern.is_connected() {
        return Err(Error::InvalidPattern(format!(
            "pattern over {} vertices is not connected",
            pattern.vertex_count()
        )));
    }

    // Pattern neighbors already assigned when a vertex gets its device, in
    // assignment order 0..n; lets the edge image grow incrementally.
    let mut earlier: Vec<Vec<u16>> = vec![Vec::new(); n];
    for &(a, b) in pattern.edges() {
        earlier[b as usize].push(a);
    }

    // Raw embeddings land in flat arenas (one slice of length n or e per
    // embedding) rather than per-embedding allocations; a 5-GPU job on an
    // idle 16-device machine produces half a million of them.
    let mut dfs = Dfs {
        free: &free,
        earlier: &earlier,
        used: vec![false; free.len()],
        map: Vec::with_capacity(n),
        edges: Vec::with_capacity(pattern.edge_count()),
        maps_arena: Vec::new(),
        devices_arena: Vec::new(),
        edges_arena: Vec::new(),
        cap,
        generated: 0,
    };
    dfs.run(n)?;

    let e = pattern.edge_count();
    let count = dfs.generated;
    let devices_of = |i: usize| &dfs.devices_arena[i * n..(i + 1) * n];
    let edges_of = |i: usize| &dfs.edges_arena[i * e..(i + 1) * e];

    // Deterministic order and dedup: stable-sort by (devices, edges) and
    // keep the first of each class. The DFS emits vertex maps in
    // lexicographic order, so the survivor is the smallest map of its
    // class.
    let mut order: Vec<u32> = (0..count as u32).collect();
    order.sort_by(|&a, &b| {
        devices_of(a as usize)
            .cmp(devices_of(b as usize))
            .then_with(|| edges_of(a as usize).cmp(edges_of(b as usize)))
    });
    order.dedup_by(|&mut b, &mut a| {
        devices_of(a as usize) == devices_of(b as usize)
            && edges_of(a as usize) == edges_of(b as usize)
    });

    Ok(order
        .into_iter()
        .map(|i| {
            let i = i as usize;
            Match {
                vertex_map: dfs.maps_arena[i * n..(i + 1) * n].to_vec(),
                devices: devices_of(i).to_vec(),
                used_edges: edges_of(i)
                    .iter()
                    .map(|&enc| ((enc >> 16) as DeviceId, (enc & 0xffff) as DeviceId))
                    .collect(),
            }
        })
        .collect())
}

const fn encode_edge(u: DeviceId, v: DeviceId) -> u32 {
    let (lo, hi) = if u <= v { (u, v) } else { (v, u) };
    ((lo as u32) << 16) | hi as u32
}

struct Dfs<'a> {
    free: &'a [DeviceId],
    earlier: &'a [Vec<u16>],
    used: Vec<bool>,
    map: Vec<DeviceId>,
    edges: Vec<u32>,
    maps_arena: Vec<DeviceId>,
    devices_arena: Vec<DeviceId>,
    edges_arena: Vec<u32>,
    cap: usize,
    generated: usize,
}

impl Dfs<'_> {
    fn run(&mut self, n: usize) -> Result<()> {
        let depth = self.map.len();
        if depth == n {
            self.generated += 1;
            if self.generated > self.cap {
                return Err(Error::EmbeddingCapExceeded(self.cap));
            }
            self.maps_arena.extend_from_slice(&self.map);
            let start = self.devices_arena.len();
            self.devices_arena.extend_from_slice(&self.map);
            self.devices_arena[start..].sort_unstable();
            let start = self.edges_arena.len();
            self.edges_arena.extend_from_slice(&self.edges);
            self.edges_arena[start..].sort_unstable();
            return Ok(());
        }
        for i in 0..self.free.len() {
            if self.used[i] {
                continue;
            }
            let device = self.free[i];
            self.used[i] = true;
            self.map.push(device);
            let pushed = self.earlier[depth].len();
            for &prev in &self.earlier[depth] {
                self.edges
                    .push(encode_edge(self.map[prev as usize], device));
            }
            self.run(n)?;
            for _ in 0..pushed {
                self.edges.pop();
            }
            self.map.pop();
            self.used[i] = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appgraph::PatternShape;
    use crate::topology::HardwareGraph;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn fresh_dgx1v() -> AllocationState {
        AllocationState::new(HardwareGraph::builtin("dgx1v").unwrap())
    }

    fn ring(n: u16) -> AppPattern {
        AppPattern::from_shape(PatternShape::Ring, n).unwrap()
    }

    #[test]
    fn singleton_yields_one_match_per_free_device() {
        let mut state = fresh_dgx1v();
        state.allocate(&[2, 4, 6]).unwrap();
        let pattern = AppPattern::new(1, []).unwrap();
        let matches = find_matches(&state, &pattern).unwrap();
        let devices: Vec<DeviceId> = matches.iter().map(|m| m.devices()[0]).collect();
        assert_eq!(devices, vec![1, 3, 5, 7, 8]);
    }

    #[test]
    fn triangle_on_four_devices() {
        let mut state = fresh_dgx1v();
        state.allocate(&[5, 6, 7, 8]).unwrap();
        let matches = find_matches(&state, &ring(3)).unwrap();
        // One edge set per vertex triple: a triangle is a clique.
        assert_eq!(matches.len(), 4);
        let covered: Vec<Vec<DeviceId>> = matches.iter().map(|m| m.devices().to_vec()).collect();
        assert_eq!(
            covered,
            vec![vec![1, 2, 3], vec![1, 2, 4], vec![1, 3, 4], vec![2, 3, 4]]
        );
    }

    #[test]
    fn four_ring_on_four_devices() {
        let mut state = fresh_dgx1v();
        state.allocate(&[5, 6, 7, 8]).unwrap();
        let matches = find_matches(&state, &ring(4)).unwrap();
        // Three distinct 4-cycles exist on a labeled 4-set.
        assert_eq!(matches.len(), 3);
        let edge_sets: BTreeSet<_> = matches.iter().map(|m| m.used_edges().to_vec()).collect();
        assert_eq!(edge_sets.len(), 3);
        for m in &matches {
            assert_eq!(m.devices(), &[1, 2, 3, 4]);
            assert_eq!(m.used_edges().len(), 4);
        }
    }

    #[test]
    fn oversized_pattern_yields_empty() {
        let mut state = fresh_dgx1v();
        state.allocate(&[1, 2, 3, 4, 5]).unwrap();
        assert!(find_matches(&state, &ring(4)).unwrap().is_empty());
    }

    #[test]
    fn cap_exceeded_is_an_error() {
        let state = fresh_dgx1v();
        let err = find_matches_with_cap(&state, &ring(4), 100).unwrap_err();
        assert!(matches!(err, Error::EmbeddingCapExceeded(100)));
    }

    #[test]
    fn worked_census_examples() {
        let g = HardwareGraph::builtin("dgx1v").unwrap();
        let full3 = AppPattern::from_shape(PatternShape::FullyConnected, 3).unwrap();

        let m = Match::from_vertex_map(&full3, vec![1, 2, 5]).unwrap();
        assert_eq!(link_census(&m, &g).unwrap(), LinkCensus::new(1, 1, 1));

        let m = Match::from_vertex_map(&full3, vec![1, 3, 4]).unwrap();
        assert_eq!(link_census(&m, &g).unwrap(), LinkCensus::new(2, 1, 0));

        let singleton = AppPattern::new(1, []).unwrap();
        let m = Match::from_vertex_map(&singleton, vec![7]).unwrap();
        assert_eq!(link_census(&m, &g).unwrap(), LinkCensus::new(0, 0, 0));
    }

    #[test]
    fn census_rejects_edges_outside_graph() {
        let small = HardwareGraph::builtin("summit").unwrap();
        let pair = ring(2);
        let m = Match::from_vertex_map(&pair, vec![7, 8]).unwrap();
        assert!(link_census(&m, &small).is_err());
    }

    #[test]
    fn from_vertex_map_rejects_non_injective() {
        let err = Match::from_vertex_map(&ring(3), vec![1, 2, 1]).unwrap_err();
        assert!(err.to_string().contains("injective"));
    }

    #[test]
    fn matches_are_deterministic() {
        let state = fresh_dgx1v();
        let a = find_matches(&state, &ring(4)).unwrap();
        let b = find_matches(&state, &ring(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vertex_sets_cover_all_combinations() {
        let state = fresh_dgx1v();
        for n in 1..=4u16 {
            let pattern = if n == 1 {
                AppPattern::new(1, []).unwrap()
            } else {
                ring(n)
            };
            let matches = find_matches(&state, &pattern).unwrap();
            let covered: BTreeSet<Vec<DeviceId>> =
                matches.iter().map(|m| m.devices().to_vec()).collect();
            let expected = combinations(&state.free_devices(), n as usize);
            assert_eq!(covered, expected, "n={n}");
        }
    }

    fn combinations(pool: &[DeviceId], k: usize) -> BTreeSet<Vec<DeviceId>> {
        let mut out = BTreeSet::new();
        let mut idx: Vec<usize> = (0..k).collect();
        if k == 0 || k > pool.len() {
            return out;
        }
        loop {
            out.insert(idx.iter().map(|&i| pool[i]).collect());
            let mut i = k;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] != i + pool.len() - k {
                    break;
                }
            }
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    proptest! {
        // Dedup soundness: two injective maps with equal used-edge sets get
        // equal aggregated, census, and preserved scores.
        #[test]
        fn dedup_equivalent_maps_score_identically(
            seed in 0u64..500,
            n in 2u16..=4,
        ) {
            use rand_chacha::ChaCha8Rng;
            use rand_core::{RngCore, SeedableRng};

            let g = HardwareGraph::builtin("dgx1v").unwrap();
            let state = AllocationState::new(g.clone());
            let pattern = ring(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            // Random injective map, then a rotation of it; a rotated ring
            // map reuses exactly the same hardware edges.
            let mut pool: Vec<DeviceId> = state.free_devices();
            let mut map = Vec::new();
            for _ in 0..n {
                let i = (rng.next_u64() % pool.len() as u64) as usize;
                map.push(pool.remove(i));
            }
            let mut rotated = map.clone();
            rotated.rotate_left(1);

            let a = Match::from_vertex_map(&pattern, map).unwrap();
            let b = Match::from_vertex_map(&pattern, rotated).unwrap();
            prop_assert_eq!(a.used_edges(), b.used_edges());
            prop_assert_eq!(
                link_census(&a, &g).unwrap(),
                link_census(&b, &g).unwrap()
            );
            prop_assert_eq!(
                crate::scoring::aggregated_bw(&a, &g).unwrap(),
                crate::scoring::aggregated_bw(&b, &g).unwrap()
            );
            prop_assert_eq!(
                crate::scoring::preserved_bw(&state, &a).unwrap(),
                crate::scoring::preserved_bw(&state, &b).unwrap()
            );
        }

        // Every returned match satisfies the type invariants.
        #[test]
        fn match_invariants_hold(busy_mask in 0u8..=63, n in 1u16..=4) {
            let mut state = fresh_dgx1v();
            let busy: Vec<DeviceId> =
                (1..=6).filter(|d| busy_mask & (1 << (d - 1)) != 0).collect();
            state.allocate(&busy).unwrap();
            let pattern = if n == 1 {
                AppPattern::new(1, []).unwrap()
            } else {
                ring(n)
            };
            let matches = find_matches(&state, &pattern).unwrap();
            for m in &matches {
                prop_assert_eq!(m.vertex_map().len(), n as usize);
                prop_assert_eq!(m.used_edges().len(), pattern.edge_count());
                for d in m.devices() {
                    prop_assert!(state.is_free(*d));
                }
            }
        }
    }
}
