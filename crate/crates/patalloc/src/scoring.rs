//! Pattern scoring: aggregated bandwidth, predicted effective bandwidth,
//! and preserved bandwidth, plus fitting of the effective-bandwidth model.
//!
//! Aggregated bandwidth sums the peak bandwidths of the hardware edges a
//! match occupies. It does not track what collective communication can
//! actually sustain, so allocations are additionally scored by a
//! regression model that maps a match's link census (x double-NVLink,
//! y single-NVLink, z PCIe edges) to the peak all-reduce bandwidth
//! measured on real hardware. Preserved bandwidth looks outward instead:
//! it totals the induced subgraph left to future jobs once the match's
//! devices are taken.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::matcher::{LinkCensus, Match};
use crate::topology::{AllocationState, HardwareGraph};
use crate::{Error, Result};

/// Number of model features / coefficients.
pub const MODEL_TERMS: usize = 14;

/// Condition-number threshold above which a fit is flagged as unreliable.
pub const CONDITION_WARN_THRESHOLD: f64 = 1e8;

/// Sum of edge weights over the hardware edges the match occupies.
pub fn aggregated_bw(m: &Match, graph: &HardwareGraph) -> Result<f64> {
    let mut total = 0.0;
    for &(u, v) in m.used_edges() {
        total += graph.edge_bandwidth(u, v)?;
    }
    Ok(total)
}

/// Total bandwidth of the induced subgraph on the devices that stay free
/// if `m` is allocated, PCIe fallback edges included.
pub fn preserved_bw(state: &AllocationState, m: &Match) -> Result<f64> {
    for &d in m.devices() {
        if !state.is_free(d) {
            return Err(Error::MatchInvalid(format!(
                "device {d} is not in the available graph"
            )));
        }
    }
    let remaining: Vec<_> = state
        .free_devices()
        .into_iter()
        .filter(|d| !m.devices().contains(d))
        .collect();
    state.graph().induced_total_bandwidth(&remaining)
}

// ---------------------------------------------------------------------------
// Effective-bandwidth model
// ---------------------------------------------------------------------------

/// Predicts the peak achievable all-reduce bandwidth of an allocation from
/// its link census, as a linear combination of fourteen features of
/// (x, y, z): linear, inverse-linear, pairwise, inverse-pairwise, triplet,
/// and inverse-triplet terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EffBwModel {
    theta: [f64; MODEL_TERMS],
}

/// Coefficients of the shipped default model, fitted against NCCL
/// all-reduce measurements on a DGX-1V (see `data/effbw-default.toml` for
/// the model card).
const DEFAULT_THETA: [f64; MODEL_TERMS] = [
    16.396, 4.536, 1.556, -20.694, -9.467, 7.615, -7.973, 12.733, -4.195, -8.413, 62.851, 27.418,
    -5.114, -46.973,
];

impl Default for EffBwModel {
    fn default() -> Self {
        EffBwModel {
            theta: DEFAULT_THETA,
        }
    }
}

/// Feature vector of a census, in coefficient order.
fn features(census: &LinkCensus) -> [f64; MODEL_TERMS] {
    let x = f64::from(census.double_nvlink);
    let y = f64::from(census.single_nvlink);
    let z = f64::from(census.pcie);
    [
        x,
        y,
        z,
        1.0 / (x + 1.0),
        1.0 / (y + 1.0),
        1.0 / (z + 1.0),
        x * y,
        y * z,
        z * x,
        1.0 / (x * y + 1.0),
        1.0 / (y * z + 1.0),
        1.0 / (z * x + 1.0),
        x * y * z,
        1.0 / (x * y * z + 1.0),
    ]
}

impl EffBwModel {
    pub fn new(theta: [f64; MODEL_TERMS]) -> Self {
        EffBwModel { theta }
    }

    pub fn theta(&self) -> &[f64; MODEL_TERMS] {
        &self.theta
    }

    /// Predicted effective bandwidth in GBps for a link census.
    ///
    /// The raw model value is returned even when negative: the policies
    /// only need a total order over candidate matches, and clamping would
    /// manufacture ties among equally poor allocations. Reporting layers
    /// annotate negative predictions instead.
    pub fn predict(&self, census: &LinkCensus) -> f64 {
        features(census)
            .iter()
            .zip(self.theta.iter())
            .map(|(f, t)| f * t)
            .sum()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text)
            .map_err(|e| Error::ModelFile(e.to_string().trim_end().replace('\n', " ")))?;
        let c = &file.coefficients;
        Ok(EffBwModel::new([
            c.theta1, c.theta2, c.theta3, c.theta4, c.theta5, c.theta6, c.theta7, c.theta8,
            c.theta9, c.theta10, c.theta11, c.theta12, c.theta13, c.theta14,
        ]))
    }

    /// Serialize as a model card; `diagnostics` is present for fitted
    /// models and absent for hand-entered coefficient tables.
    pub fn to_toml_string(&self, source: &str, diagnostics: Option<&FitDiagnostics>) -> String {
        let t = &self.theta;
        let mut out = String::new();
        let _ = writeln!(out, "source = {source:?}");
        let _ = writeln!(out);
        let _ = writeln!(out, "[coefficients]");
        for (i, v) in t.iter().enumerate() {
            let _ = writeln!(out, "theta{} = {v}", i + 1);
        }
        if let Some(d) = diagnostics {
            let _ = writeln!(out);
            let _ = writeln!(out, "[diagnostics]");
            let _ = writeln!(out, "samples = {}", d.samples);
            let _ = writeln!(out, "relative_error = {}", d.relative_error);
            let _ = writeln!(out, "rmse = {}", d.rmse);
            let _ = writeln!(out, "condition_number = {}", d.condition_number);
            let _ = writeln!(out, "condition_warning = {}", d.condition_warning);
        }
        out
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ModelFile {
    #[serde(default)]
    source: Option<String>,
    coefficients: Coefficients,
}

#[derive(Debug, Deserialize, Serialize)]
struct Coefficients {
    theta1: f64,
    theta2: f64,
    theta3: f64,
    theta4: f64,
    theta5: f64,
    theta6: f64,
    theta7: f64,
    theta8: f64,
    theta9: f64,
    theta10: f64,
    theta11: f64,
    theta12: f64,
    theta13: f64,
    theta14: f64,
}

// ---------------------------------------------------------------------------
// Model fitting
// ---------------------------------------------------------------------------

/// One calibration measurement: a link census and the effective bandwidth
/// observed for an allocation with that census.
#[derive(Debug, Clone, PartialEq)]
pub struct BwSample {
    pub census: LinkCensus,
    pub measured_gbps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub samples: usize,
    /// Mean of |prediction - measurement| / measurement.
    pub relative_error: f64,
    pub rmse: f64,
    /// Infinity-norm condition number of the normal matrix.
    pub condition_number: f64,
    pub condition_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub model: EffBwModel,
    pub diagnostics: FitDiagnostics,
}

/// Fit the fourteen coefficients by ordinary least squares.
///
/// The model is linear in the coefficients, so the fit solves the normal
/// equations with a partially pivoted factorization; a 14x14 system makes
/// exactness cheap. Needs at least fourteen samples whose feature matrix
/// has full rank.
pub fn fit_effbw_model(samples: &[BwSample]) -> Result<FittedModel> {
    if samples.len() < MODEL_TERMS {
        return Err(Error::Fit(format!(
            "need at least {MODEL_TERMS} samples, got {}",
            samples.len()
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.measured_gbps.is_nan() || s.measured_gbps <= 0.0 {
            return Err(Error::Fit(format!(
                "sample {i}: measured bandwidth must be > 0, got {}",
                s.measured_gbps
            )));
        }
    }

    let rows: Vec<[f64; MODEL_TERMS]> = samples.iter().map(|s| features(&s.census)).collect();

    // Normal matrix N = X^T X and right-hand side X^T y.
    let mut normal = [[0.0; MODEL_TERMS]; MODEL_TERMS];
    let mut rhs = [0.0; MODEL_TERMS];
    for (row, sample) in rows.iter().zip(samples) {
        for i in 0..MODEL_TERMS {
            rhs[i] += row[i] * sample.measured_gbps;
            for j in 0..MODEL_TERMS {
                normal[i][j] += row[i] * row[j];
            }
        }
    }

    let theta = solve_spd(normal, rhs)?;
    let condition_number = condition_inf(&normal)?;

    let model = EffBwModel::new(theta);
    let mut sq_sum = 0.0;
    let mut rel_sum = 0.0;
    for (row, sample) in rows.iter().zip(samples) {
        let pred: f64 = row.iter().zip(theta.iter()).map(|(f, t)| f * t).sum();
        let err = pred - sample.measured_gbps;
        sq_sum += err * err;
        rel_sum += err.abs() / sample.measured_gbps;
    }
    let n = samples.len() as f64;
    let diagnostics = FitDiagnostics {
        samples: samples.len(),
        relative_error: rel_sum / n,
        rmse: (sq_sum / n).sqrt(),
        condition_number,
        condition_warning: condition_number > CONDITION_WARN_THRESHOLD,
    };
    Ok(FittedModel { model, diagnostics })
}

type Matrix = [[f64; MODEL_TERMS]; MODEL_TERMS];

/// Solve `a * x = b` by Gaussian elimination with partial pivoting.
fn solve_spd(a: Matrix, b: [f64; MODEL_TERMS]) -> Result<[f64; MODEL_TERMS]> {
    let n = MODEL_TERMS;
    let mut m = a;
    let mut rhs = b;
    let scale: f64 = m
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0, |acc, v| acc.max(v.abs()));
    let tol = scale * 1e-13;

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .unwrap();
        if m[pivot_row][col].abs() <= tol {
            return Err(Error::Fit(format!(
                "feature matrix is rank-deficient (pivot {col} below tolerance); \
                 the sample censuses do not span all {MODEL_TERMS} features"
            )));
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        let pivot = m[col];
        for row in col + 1..n {
            let factor = m[row][col] / pivot[col];
            if factor == 0.0 {
                continue;
            }
            for (dst, src) in m[row][col..].iter_mut().zip(&pivot[col..]) {
                *dst -= factor * src;
            }
            rhs[row] -= factor * rhs[col];
        }
    }

    let mut x = [0.0; MODEL_TERMS];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// Infinity-norm condition estimate via the explicit inverse; fine at
/// this size.
fn condition_inf(a: &Matrix) -> Result<f64> {
    let norm_a = a
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let mut norm_inv_cols = [[0.0; MODEL_TERMS]; MODEL_TERMS];
    for j in 0..MODEL_TERMS {
        let mut e = [0.0; MODEL_TERMS];
        e[j] = 1.0;
        let col = solve_spd(*a, e)?;
        for i in 0..MODEL_TERMS {
            norm_inv_cols[i][j] = col[i];
        }
    }
    let norm_inv = norm_inv_cols
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    Ok(norm_a * norm_inv)
}

// ---------------------------------------------------------------------------
// Samples file
// ---------------------------------------------------------------------------

/// Parse a measurement file: rows `x,y,z,measured_effbw_gbps`, header
/// optional.
pub fn parse_samples(text: &str) -> Result<Vec<BwSample>> {
    let mut samples = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw_line.trim();
        if row.is_empty() {
            continue;
        }
        if samples.is_empty() && row.split(',').next() == Some("x") {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::SamplesFile {
                line,
                detail: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut counts = [0u32; 3];
        for (slot, (name, field)) in counts
            .iter_mut()
            .zip(["x", "y", "z"].iter().zip(&fields[..3]))
        {
            *slot = field.parse().map_err(|_| Error::SamplesFile {
                line,
                detail: format!("invalid {name} count `{field}`"),
            })?;
        }
        let measured_gbps: f64 = fields[3].parse().map_err(|_| Error::SamplesFile {
            line,
            detail: format!("invalid bandwidth `{}`", fields[3]),
        })?;
        if measured_gbps.is_nan() || measured_gbps <= 0.0 {
            return Err(Error::SamplesFile {
                line,
                detail: "measured bandwidth must be > 0".into(),
            });
        }
        samples.push(BwSample {
            census: LinkCensus::new(counts[0], counts[1], counts[2]),
            measured_gbps,
        });
    }
    Ok(samples)
}

/// Serialize samples in the measurement file format.
pub fn render_samples(samples: &[BwSample]) -> String {
    let mut out = String::from("x,y,z,measured_effbw_gbps\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.census.double_nvlink, s.census.single_nvlink, s.census.pcie, s.measured_gbps
        );
    }
    out
}
