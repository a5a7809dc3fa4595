//! Server interconnect topologies and allocation state.
//!
//! A [`HardwareGraph`] holds one accelerator server: devices numbered
//! `1..=device_count`, the direct NVLink edges between them (labeled with
//! the highest link class available on that pair), and the host-socket
//! grouping. The effective graph is complete: any pair without a direct
//! NVLink still reaches its peer over PCIe through the host, so bandwidth
//! queries fall back to the PCIe figure instead of failing.
//!
//! [`AllocationState`] layers a busy set on top of an immutable graph and
//! exposes the induced subgraph of free devices, which is what the matcher
//! and the policies operate on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Device identifier, `1..=device_count` within one server.
pub type DeviceId = u16;

/// PCIe fallback bandwidth for device pairs without a direct NVLink.
pub const PCIE_BANDWIDTH_GBPS: f64 = 12.0;

// ---------------------------------------------------------------------------
// Link classes
// ---------------------------------------------------------------------------

/// Interconnect link class between a pair of devices.
///
/// Peak per-class bandwidths: double NVLink-v2 50 GBps, single NVLink-v2
/// 25 GBps, single NVLink-v1 20 GBps, 16-lane PCIe Gen3 12 GBps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkClass {
    DoubleNvlink2,
    SingleNvlink2,
    SingleNvlink1,
    Pcie,
}

impl LinkClass {
    pub const fn bandwidth_gbps(self) -> f64 {
        match self {
            LinkClass::DoubleNvlink2 => 50.0,
            LinkClass::SingleNvlink2 => 25.0,
            LinkClass::SingleNvlink1 => 20.0,
            LinkClass::Pcie => PCIE_BANDWIDTH_GBPS,
        }
    }

    /// Token used in topology files.
    pub const fn token(self) -> &'static str {
        match self {
            LinkClass::DoubleNvlink2 => "nv2x2",
            LinkClass::SingleNvlink2 => "nv2x1",
            LinkClass::SingleNvlink1 => "nv1x1",
            LinkClass::Pcie => "pcie",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "nv2x2" => Some(LinkClass::DoubleNvlink2),
            "nv2x1" => Some(LinkClass::SingleNvlink2),
            "nv1x1" => Some(LinkClass::SingleNvlink1),
            "pcie" => Some(LinkClass::Pcie),
            _ => None,
        }
    }
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

fn normalize(u: DeviceId, v: DeviceId) -> (DeviceId, DeviceId) {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

// ---------------------------------------------------------------------------
// Hardware graph
// ---------------------------------------------------------------------------

/// Weighted undirected interconnect graph of one multi-accelerator server.
///
/// Only NVLink edges are stored; every other pair is implicitly PCIe.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareGraph {
    name: String,
    device_count: u16,
    links: BTreeMap<(DeviceId, DeviceId), LinkClass>,
    sockets: Vec<Vec<DeviceId>>,
}

impl HardwareGraph {
    /// Build a graph from explicit parts, validating every invariant.
    pub fn new(
        name: impl Into<String>,
        device_count: u16,
        links: impl IntoIterator<Item = ((DeviceId, DeviceId), LinkClass)>,
        sockets: Vec<Vec<DeviceId>>,
    ) -> Result<Self> {
        let name = name.into();
        if device_count == 0 {
            return Err(Error::TopologyFile("devices must be >= 1".into()));
        }

        let mut stored = BTreeMap::new();
        for ((u, v), class) in links {
            if u == v {
                return Err(Error::SelfLoop(u));
            }
            for id in [u, v] {
                if id == 0 || id > device_count {
                    return Err(Error::TopologyFile(format!(
                        "link ({u}, {v}): device id {id} out of range 1..={device_count}"
                    )));
                }
            }
            let key = normalize(u, v);
            if stored.insert(key, class).is_some() {
                return Err(Error::TopologyFile(format!(
                    "duplicate link for pair ({}, {})",
                    key.0, key.1
                )));
            }
        }
        // Explicit PCIe records carry no information beyond the fallback.
        stored.retain(|_, class| *class != LinkClass::Pcie);

        let mut seen = BTreeSet::new();
        let mut sockets_norm = Vec::with_capacity(sockets.len());
        for group in sockets {
            let mut group: Vec<DeviceId> = group;
            group.sort_unstable();
            for &id in &group {
                if id == 0 || id > device_count {
                    return Err(Error::TopologyFile(format!(
                        "sockets: device id {id} out of range 1..={device_count}"
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::TopologyFile(format!(
                        "sockets: device id {id} appears in more than one group"
                    )));
                }
            }
            sockets_norm.push(group);
        }
        if seen.len() != device_count as usize {
            let missing: Vec<String> = (1..=device_count)
                .filter(|id| !seen.contains(id))
                .map(|id| id.to_string())
                .collect();
            return Err(Error::TopologyFile(format!(
                "sockets do not cover devices {{{}}}",
                missing.join(", ")
            )));
        }

        Ok(HardwareGraph {
            name,
            device_count,
            links: stored,
            sockets: sockets_norm,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn device_count(&self) -> u16 {
        self.device_count
    }

    pub fn devices(&self) -> impl Iterator<Item = DeviceId> {
        1..=self.device_count
    }

    /// Host-socket groups; disjoint, covering, each sorted ascending.
    pub fn sockets(&self) -> &[Vec<DeviceId>] {
        &self.sockets
    }

    /// Direct NVLink edges with their classes, ascending by pair.
    pub fn nvlink_edges(&self) -> impl Iterator<Item = ((DeviceId, DeviceId), LinkClass)> + '_ {
        self.links.iter().map(|(&pair, &class)| (pair, class))
    }

    fn check_device(&self, id: DeviceId) -> Result<()> {
        if id == 0 || id > self.device_count {
            return Err(Error::InvalidDevice(id));
        }
        Ok(())
    }

    /// Link class for a device pair; PCIe when no direct NVLink exists.
    pub fn link_class(&self, u: DeviceId, v: DeviceId) -> Result<LinkClass> {
        self.check_device(u)?;
        self.check_device(v)?;
        if u == v {
            return Err(Error::SelfLoop(u));
        }
        Ok(self
            .links
            .get(&normalize(u, v))
            .copied()
            .unwrap_or(LinkClass::Pcie))
    }

    /// Bandwidth of the best direct link between `u` and `v`, in GBps.
    pub fn edge_bandwidth(&self, u: DeviceId, v: DeviceId) -> Result<f64> {
        Ok(self.link_class(u, v)?.bandwidth_gbps())
    }

    /// Total bandwidth of the subgraph induced by `vertices`: the sum of
    /// `edge_bandwidth` over every unordered pair, PCIe fallback included.
    pub fn induced_total_bandwidth(&self, vertices: &[DeviceId]) -> Result<f64> {
        let set: BTreeSet<DeviceId> = vertices.iter().copied().collect();
        for &id in &set {
            self.check_device(id)?;
        }
        let ids: Vec<DeviceId> = set.into_iter().collect();
        let mut total = 0.0;
        for (i, &u) in ids.iter().enumerate() {
            for &v in &ids[i + 1..] {
                total += self.edge_bandwidth(u, v)?;
            }
        }
        Ok(total)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["dgx1v", "dgx1p", "summit", "torus2d16", "cubemesh16"]
    }

    /// Canonical built-in topology by name.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "dgx1v" => Ok(dgx1_hybrid_cube_mesh(
                "dgx1v",
                LinkClass::DoubleNvlink2,
                LinkClass::SingleNvlink2,
            )),
            "dgx1p" => Ok(dgx1_hybrid_cube_mesh(
                "dgx1p",
                LinkClass::SingleNvlink1,
                LinkClass::SingleNvlink1,
            )),
            "summit" => Ok(summit()),
            "torus2d16" => Ok(torus2d16()),
            "cubemesh16" => Ok(cubemesh16()),
            other => Err(Error::UnknownTopology(other.to_string())),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TopologyFile = toml::from_str(text)
            .map_err(|e| Error::TopologyFile(e.to_string().trim_end().replace('\n', " ")))?;
        let mut links = Vec::with_capacity(file.links.len());
        for (i, rec) in file.links.iter().enumerate() {
            let class = LinkClass::from_token(&rec.class).ok_or_else(|| {
                Error::TopologyFile(format!(
                    "links[{i}]: unknown class `{}`; valid: nv2x2, nv2x1, nv1x1, pcie",
                    rec.class
                ))
            })?;
            links.push(((rec.a, rec.b), class));
        }
        HardwareGraph::new(file.name, file.devices, links, file.sockets)
    }

    /// Canonical serialization; `from_toml_str` of the output reproduces
    /// the graph exactly.
    pub fn to_toml_string(&self) -> String {
        let file = TopologyFile {
            name: self.name.clone(),
            devices: self.device_count,
            sockets: self.sockets.clone(),
            links: self
                .links
                .iter()
                .map(|(&(a, b), &class)| LinkRecord {
                    a,
                    b,
                    class: class.token().to_string(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("topology serialization cannot fail")
    }
}

/// On-disk representation; see `docs/formats.md` for the format contract.
#[derive(Debug, Serialize, Deserialize)]
struct TopologyFile {
    name: String,
    devices: u16,
    sockets: Vec<Vec<DeviceId>>,
    #[serde(default)]
    links: Vec<LinkRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkRecord {
    a: DeviceId,
    b: DeviceId,
    class: String,
}

// ---------------------------------------------------------------------------
// Built-in topologies
// ---------------------------------------------------------------------------

/// 8-GPU hybrid cube mesh used by the DGX-1 family: two quads fully
/// NVLink-connected internally, four cross links, two "strong" and two
/// "weak" NVLink ports per device. The V100 generation labels the strong
/// edges double NVLink-v2 and the weak ones single NVLink-v2; the P100
/// generation has single NVLink-v1 everywhere.
fn dgx1_hybrid_cube_mesh(name: &str, strong: LinkClass, weak: LinkClass) -> HardwareGraph {
    const STRONG: [(DeviceId, DeviceId); 8] = [
        (1, 4),
        (1, 5),
        (2, 3),
        (2, 6),
        (3, 4),
        (5, 8),
        (6, 7),
        (7, 8),
    ];
    const WEAK: [(DeviceId, DeviceId); 8] = [
        (1, 2),
        (1, 3),
        (2, 4),
        (3, 7),
        (4, 8),
        (5, 6),
        (5, 7),
        (6, 8),
    ];
    let links = STRONG
        .iter()
        .map(|&pair| (pair, strong))
        .chain(WEAK.iter().map(|&pair| (pair, weak)));
    HardwareGraph::new(name, 8, links, vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]])
        .expect("builtin graph is valid")
}

/// 6-GPU node with two fully connected triples, one per socket; the GPU
/// triples are joined by paired NVLink bricks, cross-socket traffic goes
/// over the host.
fn summit() -> HardwareGraph {
    let mut links = Vec::new();
    for base in [0u16, 3] {
        let ids = [base + 1, base + 2, base + 3];
        for i in 0..3 {
            for j in i + 1..3 {
                links.push(((ids[i], ids[j]), LinkClass::DoubleNvlink2));
            }
        }
    }
    HardwareGraph::new("summit", 6, links, vec![vec![1, 2, 3], vec![4, 5, 6]])
        .expect("builtin graph is valid")
}

/// 16-GPU 4x4 torus, row-major device numbering. Horizontal rings carry
/// double NVLink-v2, vertical rings single NVLink-v2; everything else is
/// PCIe. Sockets pair the rows: {1..8} and {9..16}.
fn torus2d16() -> HardwareGraph {
    let id = |row: u16, col: u16| -> DeviceId { 4 * row + col + 1 };
    let mut links = Vec::new();
    for row in 0..4 {
        for col in 0..4 {
            links.push((
                normalize(id(row, col), id(row, (col + 1) % 4)),
                LinkClass::DoubleNvlink2,
            ));
            links.push((
                normalize(id(row, col), id((row + 1) % 4, col)),
                LinkClass::SingleNvlink2,
            ));
        }
    }
    // Ring edges are generated once per endpoint pair; drop the duplicates.
    links.sort_unstable();
    links.dedup();
    HardwareGraph::new(
        "torus2d16",
        16,
        links,
        vec![(1..=8).collect(), (9..=16).collect()],
    )
    .expect("builtin graph is valid")
}

/// Two 8-GPU hybrid cube meshes (devices 1..8 and 9..16, edge classes as
/// in dgx1v) bridged by four single NVLink-v2 links.
fn cubemesh16() -> HardwareGraph {
    let half = dgx1_hybrid_cube_mesh("half", LinkClass::DoubleNvlink2, LinkClass::SingleNvlink2);
    let mut links = Vec::new();
    for ((a, b), class) in half.nvlink_edges() {
        links.push(((a, b), class));
        links.push(((a + 8, b + 8), class));
    }
    for bridge in [(1, 9), (4, 12), (5, 13), (8, 16)] {
        links.push((bridge, LinkClass::SingleNvlink2));
    }
    HardwareGraph::new(
        "cubemesh16",
        16,
        links,
        vec![(1..=8).collect(), (9..=16).collect()],
    )
    .expect("builtin graph is valid")
}

// ---------------------------------------------------------------------------
// Allocation state
// ---------------------------------------------------------------------------

/// A hardware graph plus the set of devices currently claimed by jobs.
///
/// The available graph is the subgraph of the base induced by the free
/// devices; it is derived on demand rather than stored.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationState {
    graph: HardwareGraph,
    busy: BTreeSet<DeviceId>,
}

impl AllocationState {
    pub fn new(graph: HardwareGraph) -> Self {
        AllocationState {
            graph,
            busy: BTreeSet::new(),
        }
    }

    pub fn graph(&self) -> &HardwareGraph {
        &self.graph
    }

    pub fn busy(&self) -> &BTreeSet<DeviceId> {
        &self.busy
    }

    pub fn is_free(&self, id: DeviceId) -> bool {
        id >= 1 && id <= self.graph.device_count() && !self.busy.contains(&id)
    }

    /// Free devices in ascending id order.
    pub fn free_devices(&self) -> Vec<DeviceId> {
        self.graph
            .devices()
            .filter(|d| !self.busy.contains(d))
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.graph.device_count() as usize - self.busy.len()
    }

    /// Claim `devices`. Fails without side effects if any is invalid or
    /// already busy.
    pub fn allocate(&mut self, devices: &[DeviceId]) -> Result<()> {
        for &id in devices {
            if id == 0 || id > self.graph.device_count() {
                return Err(Error::InvalidDevice(id));
            }
            if self.busy.contains(&id) {
                return Err(Error::DeviceBusy(id));
            }
        }
        let mut requested = BTreeSet::new();
        for &id in devices {
            if !requested.insert(id) {
                return Err(Error::DeviceBusy(id));
            }
        }
        self.busy.extend(requested);
        Ok(())
    }

    /// Return `devices` to the free pool; the induced subgraph regains the
    /// vertices and all incident edges with their original labels.
    pub fn release(&mut self, devices: &[DeviceId]) -> Result<()> {
        for &id in devices {
            if !self.busy.contains(&id) {
                return Err(Error::DeviceNotBusy(id));
            }
        }
        for &id in devices {
            self.busy.remove(&id);
        }
        Ok(())
    }

    /// Total bandwidth of the induced subgraph on the free devices.
    pub fn available_bandwidth(&self) -> f64 {
        self.graph
            .induced_total_bandwidth(&self.free_devices())
            .expect("free devices are valid")
    }
}
