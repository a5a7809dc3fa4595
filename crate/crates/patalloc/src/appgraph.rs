//! Application communication patterns and job specifications.
//!
//! A job's inter-GPU communication is declared as a small undirected graph
//! over pattern vertices `0..n`. The shapes mirror what collective
//! libraries actually build at runtime: rings, balanced binary trees, a
//! union of both, or a fully connected clique for all-to-all traffic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::{Error, Result};

/// Canonical pattern shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternShape {
    Ring,
    Tree,
    RingTree,
    FullyConnected,
}

impl PatternShape {
    pub const fn token(self) -> &'static str {
        match self {
            PatternShape::Ring => "ring",
            PatternShape::Tree => "tree",
            PatternShape::RingTree => "ringtree",
            PatternShape::FullyConnected => "full",
        }
    }
}

impl FromStr for PatternShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(PatternShape::Ring),
            "tree" => Ok(PatternShape::Tree),
            "ringtree" => Ok(PatternShape::RingTree),
            "full" => Ok(PatternShape::FullyConnected),
            other => Err(Error::UnknownShape(other.to_string())),
        }
    }
}

impl fmt::Display for PatternShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Undirected communication pattern over vertices `0..vertex_count`.
///
/// No self-loops, and connected whenever there is more than one vertex: a
/// multi-GPU job that never communicates across some cut would be two jobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppPattern {
    vertex_count: u16,
    edges: Vec<(u16, u16)>,
}

impl AppPattern {
    pub fn new(vertex_count: u16, edges: impl IntoIterator<Item = (u16, u16)>) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::InvalidPattern("vertex count must be >= 1".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidPattern(format!("self-loop on vertex {a}")));
            }
            if a >= vertex_count || b >= vertex_count {
                return Err(Error::InvalidPattern(format!(
                    "edge ({a}, {b}) references a vertex outside 0..{vertex_count}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let pattern = AppPattern {
            vertex_count,
            edges: set.into_iter().collect(),
        };
        if vertex_count > 1 && !pattern.is_connected() {
            return Err(Error::InvalidPattern(format!(
                "pattern over {vertex_count} vertices is not connected"
            )));
        }
        Ok(pattern)
    }

    /// Build the canonical pattern of `shape` over `n` vertices.
    ///
    /// Ring is the cycle `0-1-..-(n-1)-0` (a single edge for n = 2) and
    /// requires n >= 2, as does the ring/tree union. Tree is the balanced
    /// binary tree rooted at 0 with children `2i+1`, `2i+2`.
    pub fn from_shape(shape: PatternShape, n: u16) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidPattern("vertex count must be >= 1".into()));
        }
        let edges: Vec<(u16, u16)> = match shape {
            PatternShape::Ring => ring_edges(n)?,
            PatternShape::Tree => tree_edges(n),
            PatternShape::RingTree => {
                let mut e = ring_edges(n)?;
                e.extend(tree_edges(n));
                e
            }
            PatternShape::FullyConnected => (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .collect(),
        };
        AppPattern::new(n, edges)
    }

    /// Pattern for a queued job: a single GPU degenerates to the edgeless
    /// singleton no matter which shape the job declares.
    pub fn for_job(shape: PatternShape, gpu_count: u16) -> Result<Self> {
        if gpu_count == 1 {
            AppPattern::new(1, [])
        } else {
            AppPattern::from_shape(shape, gpu_count)
        }
    }

    pub fn vertex_count(&self) -> u16 {
        self.vertex_count
    }

    /// Normalized edges `(lo, hi)`, ascending.
    pub fn edges(&self) -> &[(u16, u16)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_connected(&self) -> bool {
        if self.vertex_count <= 1 {
            return true;
        }
        let n = self.vertex_count as usize;
        let mut adjacent = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adjacent[a as usize].push(b as usize);
            adjacent[b as usize].push(a as usize);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut reached = 1;
        while let Some(v) = stack.pop() {
            for &w in &adjacent[v] {
                if !seen[w] {
                    seen[w] = true;
                    reached += 1;
                    stack.push(w);
                }
            }
        }
        reached == n
    }
}

fn ring_edges(n: u16) -> Result<Vec<(u16, u16)>> {
    match n {
        0 | 1 => Err(Error::InvalidPattern(
            "ring requires at least 2 vertices".into(),
        )),
        2 => Ok(vec![(0, 1)]),
        _ => Ok((0..n).map(|i| (i, (i + 1) % n)).collect()),
    }
}

fn tree_edges(n: u16) -> Vec<(u16, u16)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for child in [2 * i + 1, 2 * i + 2] {
            if child < n {
                edges.push((i, child));
            }
        }
    }
    edges
}

// ---------------------------------------------------------------------------
// Job specifications
// ---------------------------------------------------------------------------

/// One queued job: identity, size, communication shape, sensitivity to
/// interconnect bandwidth, and how long it runs.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub job_id: String,
    pub gpu_count: u16,
    pub shape: PatternShape,
    pub bw_sensitive: bool,
    pub duration_s: f64,
    pub network: String,
    pub arrival_s: f64,
}

impl JobSpec {
    pub fn pattern(&self) -> Result<AppPattern> {
        AppPattern::for_job(self.shape, self.gpu_count)
    }
}

pub const JOB_FILE_HEADER: &str =
    "job_id,gpu_count,shape,bw_sensitive,duration_s,network_name,arrival_s";

/// Parse a job file: comma-separated rows in queue (FIFO) order, optional
/// header, optional seventh `arrival_s` column defaulting to 0.
pub fn parse_jobs(text: &str) -> Result<Vec<JobSpec>> {
    let mut jobs = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw_line.trim();
        if row.is_empty() {
            continue;
        }
        if jobs.is_empty() && row.split(',').next() == Some("job_id") {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 6 && fields.len() != 7 {
            return Err(Error::JobFile {
                line,
                detail: format!("expected 6 or 7 fields, found {}", fields.len()),
            });
        }
        let job_id = fields[0].to_string();
        if job_id.is_empty() {
            return Err(Error::JobFile {
                line,
                detail: "empty job_id".into(),
            });
        }
        if !seen_ids.insert(job_id.clone()) {
            return Err(Error::JobFile {
                line,
                detail: format!("duplicate job_id `{job_id}`"),
            });
        }
        let gpu_count: u16 = fields[1].parse().map_err(|_| Error::JobFile {
            line,
            detail: format!("invalid gpu_count `{}`", fields[1]),
        })?;
        if gpu_count < 1 {
            return Err(Error::JobFile {
                line,
                detail: "gpu_count must be >= 1".into(),
            });
        }
        let shape: PatternShape = fields[2].parse().map_err(|_| Error::JobFile {
            line,
            detail: format!("invalid shape `{}`", fields[2]),
        })?;
        let bw_sensitive = match fields[3] {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::JobFile {
                    line,
                    detail: format!("invalid bw_sensitive `{other}`; expected true or false"),
                })
            }
        };
        let duration_s: f64 = fields[4].parse().map_err(|_| Error::JobFile {
            line,
            detail: format!("invalid duration_s `{}`", fields[4]),
        })?;
        if duration_s.is_nan() || duration_s <= 0.0 {
            return Err(Error::JobFile {
                line,
                detail: "duration_s must be > 0".into(),
            });
        }
        let network = fields[5].to_string();
        let arrival_s: f64 = if fields.len() == 7 {
            let arrival: f64 = fields[6].parse().map_err(|_| Error::JobFile {
                line,
                detail: format!("invalid arrival_s `{}`", fields[6]),
            })?;
            if arrival.is_nan() || arrival < 0.0 {
                return Err(Error::JobFile {
                    line,
                    detail: "arrival_s must be >= 0".into(),
                });
            }
            arrival
        } else {
            0.0
        };
        jobs.push(JobSpec {
            job_id,
            gpu_count,
            shape,
            bw_sensitive,
            duration_s,
            network,
            arrival_s,
        });
    }
    Ok(jobs)
}

/// Serialize jobs in the file format, header included. `parse_jobs` of
/// the output reproduces the input list.
pub fn render_jobs(jobs: &[JobSpec]) -> String {
    let mut out = String::from(JOB_FILE_HEADER);
    out.push('\n');
    for job in jobs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            job.job_id,
            job.gpu_count,
            job.shape,
            job.bw_sensitive,
            job.duration_s,
            job.network,
            job.arrival_s
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Workload generation
// ---------------------------------------------------------------------------

/// One workload class available to the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MixEntry {
    pub network: String,
    pub bw_sensitive: bool,
    pub duration_s: f64,
}

impl MixEntry {
    pub fn new(network: &str, bw_sensitive: bool, duration_s: f64) -> Self {
        MixEntry {
            network: network.to_string(),
            bw_sensitive,
            duration_s,
        }
    }
}

/// Default six-network training mix. Durations are representative
/// baseline figures in simulated seconds and are freely configurable;
/// nothing downstream treats them as ground truth.
pub fn default_mix() -> Vec<MixEntry> {
    vec![
        MixEntry::new("alexnet", true, 511.0),
        MixEntry::new("vgg16", true, 785.0),
        MixEntry::new("resnet50", true, 600.0),
        MixEntry::new("inceptionv3", true, 650.0),
        MixEntry::new("caffenet", false, 300.0),
        MixEntry::new("googlenet", false, 350.0),
    ]
}

/// Generate `count` jobs, deterministic in `seed`.
///
/// GPU counts are uniform on `1..=max_gpus` and the workload class is
/// uniform over `mix`; multi-GPU jobs default to the ring shape that
/// collective all-reduce builds for large transfers. All jobs arrive at
/// t = 0. Per job the generator draws the GPU count first, then the mix
/// index.
pub fn generate_jobs(
    seed: u64,
    count: usize,
    max_gpus: u16,
    mix: &[MixEntry],
) -> Result<Vec<JobSpec>> {
    if mix.is_empty() {
        return Err(Error::EmptyMix);
    }
    if max_gpus < 1 {
        return Err(Error::InvalidPattern("max_gpus must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(count);
    for i in 0..count {
        let gpu_count = 1 + (rng.next_u64() % u64::from(max_gpus)) as u16;
        let entry = &mix[(rng.next_u64() % mix.len() as u64) as usize];
        jobs.push(JobSpec {
            job_id: format!("j{}", i + 1),
            gpu_count,
            shape: PatternShape::Ring,
            bw_sensitive: entry.bw_sensitive,
            duration_s: entry.duration_s,
            network: entry.network.clone(),
            arrival_s: 0.0,
        });
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_shapes() {
        let triangle = AppPattern::from_shape(PatternShape::Ring, 3).unwrap();
        assert_eq!(triangle.edges(), &[(0, 1), (0, 2), (1, 2)]);

        let pair = AppPattern::from_shape(PatternShape::Ring, 2).unwrap();
        assert_eq!(pair.edges(), &[(0, 1)]);

        let five = AppPattern::from_shape(PatternShape::Ring, 5).unwrap();
        assert_eq!(five.edge_count(), 5);
        // One cycle: every vertex has degree 2.
        for v in 0..5 {
            let deg = five
                .edges()
                .iter()
                .filter(|(a, b)| *a == v || *b == v)
                .count();
            assert_eq!(deg, 2);
        }

        assert!(AppPattern::from_shape(PatternShape::Ring, 1).is_err());
    }

    #[test]
    fn tree_shape() {
        let t = AppPattern::from_shape(PatternShape::Tree, 5).unwrap();
        assert_eq!(t.edges(), &[(0, 1), (0, 2), (1, 3), (1, 4)]);
        let one = AppPattern::from_shape(PatternShape::Tree, 1).unwrap();
        assert_eq!(one.edge_count(), 0);
    }

    #[test]
    fn shape_edge_counts() {
        for n in 1..=8u16 {
            let full = AppPattern::from_shape(PatternShape::FullyConnected, n).unwrap();
            assert_eq!(full.edge_count(), usize::from(n) * usize::from(n - 1) / 2);
            let tree = AppPattern::from_shape(PatternShape::Tree, n).unwrap();
            assert_eq!(tree.edge_count(), usize::from(n - 1));
            if n >= 3 {
                let ring = AppPattern::from_shape(PatternShape::Ring, n).unwrap();
                assert_eq!(ring.edge_count(), usize::from(n));
            }
        }
    }

    #[test]
    fn generated_patterns_are_connected() {
        for shape in [
            PatternShape::Ring,
            PatternShape::Tree,
            PatternShape::RingTree,
            PatternShape::FullyConnected,
        ] {
            for n in 2..=9u16 {
                let p = AppPattern::from_shape(shape, n).unwrap();
                assert!(p.is_connected(), "{shape} n={n}");
            }
        }
    }

    #[test]
    fn new_rejects_disconnected() {
        let err = AppPattern::new(4, [(0, 1), (2, 3)]).unwrap_err();
        assert!(err.to_string().contains("not connected"));
    }

    #[test]
    fn new_rejects_self_loop_and_range() {
        assert!(AppPattern::new(3, [(1, 1)]).is_err());
        assert!(AppPattern::new(3, [(0, 3)]).is_err());
    }

    #[test]
    fn parse_single_row() {
        let jobs = parse_jobs("j1,3,ring,true,100,vgg16\n").unwrap();
        assert_eq!(
            jobs,
            vec![JobSpec {
                job_id: "j1".into(),
                gpu_count: 3,
                shape: PatternShape::Ring,
                bw_sensitive: true,
                duration_s: 100.0,
                network: "vgg16".into(),
                arrival_s: 0.0,
            }]
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_jobs("j1,0,ring,true,100,vgg16\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let err = parse_jobs("j1,2,ring,true,100,a\nj1,2,ring,true,100,b\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("duplicate"), "{err}");

        let err = parse_jobs("j1,2,blob,true,100,a\n").unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn parse_accepts_header_and_arrival() {
        let text = "job_id,gpu_count,shape,bw_sensitive,duration_s,network_name,arrival_s\n\
                    j1,2,ring,false,50,gmm,10\n";
        let jobs = parse_jobs(text).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].arrival_s, 10.0);
    }

    #[test]
    fn generate_is_deterministic() {
        let mix = default_mix();
        let a = generate_jobs(7, 50, 5, &mix).unwrap();
        let b = generate_jobs(7, 50, 5, &mix).unwrap();
        assert_eq!(a, b);
        let c = generate_jobs(8, 50, 5, &mix).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generate_rejects_empty_mix() {
        assert!(matches!(generate_jobs(1, 10, 5, &[]), Err(Error::EmptyMix)));
    }

    #[test]
    fn generate_follows_uniform_mix() {
        // Binomial 99% bounds: mean +- 2.576 * sqrt(n p (1-p)).
        let mix = default_mix();
        let jobs = generate_jobs(300, 300, 5, &mix).unwrap();

        let gpu_bound = 2.576 * (300.0 * 0.2 * 0.8f64).sqrt();
        for k in 1..=5u16 {
            let freq = jobs.iter().filter(|j| j.gpu_count == k).count() as f64;
            assert!(
                (freq - 60.0).abs() <= gpu_bound,
                "gpu_count {k} frequency {freq} outside 60 +- {gpu_bound:.1}"
            );
        }

        let net_bound = 2.576 * (300.0 * (1.0 / 6.0) * (5.0 / 6.0f64)).sqrt();
        for entry in &mix {
            let freq = jobs.iter().filter(|j| j.network == entry.network).count() as f64;
            assert!(
                (freq - 50.0).abs() <= net_bound,
                "network {} frequency {freq} outside 50 +- {net_bound:.1}",
                entry.network
            );
        }
    }

    #[test]
    fn singleton_job_pattern() {
        let p = AppPattern::for_job(PatternShape::Ring, 1).unwrap();
        assert_eq!(p.vertex_count(), 1);
        assert_eq!(p.edge_count(), 0);
    }

    proptest! {
        #[test]
        fn job_file_round_trip(seed in 0u64..1000, count in 1usize..40) {
            let jobs = generate_jobs(seed, count, 5, &default_mix()).unwrap();
            let text = render_jobs(&jobs);
            prop_assert_eq!(parse_jobs(&text).unwrap(), jobs);
        }
    }
}
