//! Grid case and load profile ingestion.
//!
//! Reads MATPOWER-style case files (the `baseMVA`/`bus`/`gen`/`branch`
//! matrices) and NYISO-style load CSVs into validated in-memory
//! structures. Parsing is strict about the invariants the rest of the
//! pipeline relies on: unique bus ids, resolvable references, exactly one
//! slack bus, uniform profile spacing.

mod matpower;
mod profile;

pub use matpower::{case_to_text, parse_case};
pub use profile::{interpolate_profile, parse_load_profile, ZoneFilter};

use std::collections::HashMap;
use thiserror::Error;

/// Bus role in the power flow problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    /// Reference bus: fixed voltage magnitude and angle.
    Slack,
    /// Generator bus: fixed active injection and voltage magnitude.
    Pv,
    /// Load bus: fixed active and reactive injection.
    Pq,
}

/// One row of the bus table.
#[derive(Debug, Clone, PartialEq)]
pub struct BusRecord {
    pub id: i64,
    pub kind: BusKind,
    /// Active load, MW.
    pub p_load: f64,
    /// Reactive load, MVAr.
    pub q_load: f64,
    /// Shunt conductance, MW at V = 1 p.u.
    pub gs: f64,
    /// Shunt susceptance, MVAr at V = 1 p.u.
    pub bs: f64,
    /// Initial voltage magnitude, p.u.
    pub vm_init: f64,
    /// Initial voltage angle, degrees.
    pub va_init: f64,
}

/// One row of the branch table. `tap == 0.0` in the file means ratio 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub from: i64,
    pub to: i64,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
    /// Total line charging susceptance, p.u.
    pub b_charging: f64,
    /// Off-nominal tap ratio; 0.0 normalizes to 1.0.
    pub tap: f64,
    /// Phase shift, degrees.
    pub shift: f64,
}

impl BranchRecord {
    /// Effective tap ratio with the MATPOWER zero-means-one convention.
    pub fn tap_ratio(&self) -> f64 {
        if self.tap == 0.0 {
            1.0
        } else {
            self.tap
        }
    }
}

/// One row of the generator table.
#[derive(Debug, Clone, PartialEq)]
pub struct GenRecord {
    pub bus: i64,
    /// Active output, MW.
    pub pg: f64,
    /// Reactive output, MVAr.
    pub qg: f64,
    /// Voltage setpoint, p.u.
    pub vg: f64,
}

/// A parsed, validated grid case.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub gens: Vec<GenRecord>,
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("malformed case: {0}")]
    MalformedCase(String),
    #[error("case has no slack bus (or more than one)")]
    MissingSlack,
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("duplicate bus id {0}")]
    DuplicateBusId(i64),
}

impl GridCase {
    /// Number of buses.
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Map from raw bus id to dense index (file order).
    pub fn bus_index(&self) -> HashMap<i64, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    /// Dense index of the slack bus.
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Per-bus generator presence, by dense index.
    pub fn has_gen(&self) -> Vec<bool> {
        let idx = self.bus_index();
        let mut flags = vec![false; self.n()];
        for g in &self.gens {
            flags[idx[&g.bus]] = true;
        }
        flags
    }

    /// Validate all structural invariants; parsing calls this, and
    /// hand-built cases should too.
    pub fn validate(&self) -> Result<(), CaseError> {
        if !(self.base_mva > 0.0) {
            return Err(CaseError::MalformedCase(format!(
                "baseMVA must be positive, got {}",
                self.base_mva
            )));
        }
        if self.buses.is_empty() {
            return Err(CaseError::MalformedCase("no buses".into()));
        }
        let mut seen = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if let Some(_prev) = seen.insert(b.id, i) {
                return Err(CaseError::DuplicateBusId(b.id));
            }
            if !(b.vm_init > 0.0) {
                return Err(CaseError::MalformedCase(format!(
                    "bus {} has non-positive initial voltage {}",
                    b.id, b.vm_init
                )));
            }
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack_count != 1 {
            return Err(CaseError::MissingSlack);
        }
        for br in &self.branches {
            if br.from == br.to {
                return Err(CaseError::MalformedCase(format!(
                    "branch {}-{} is a self loop",
                    br.from, br.to
                )));
            }
            if br.r < 0.0 {
                return Err(CaseError::MalformedCase(format!(
                    "branch {}-{} has negative resistance",
                    br.from, br.to
                )));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(CaseError::MalformedCase(format!(
                    "branch {}-{} has zero impedance",
                    br.from, br.to
                )));
            }
            for end in [br.from, br.to] {
                if !seen.contains_key(&end) {
                    return Err(CaseError::DanglingReference(format!(
                        "branch endpoint bus {end} does not exist"
                    )));
                }
            }
        }
        for g in &self.gens {
            let Some(&i) = seen.get(&g.bus) else {
                return Err(CaseError::DanglingReference(format!(
                    "generator bus {} does not exist",
                    g.bus
                )));
            };
            if self.buses[i].kind == BusKind::Pq {
                return Err(CaseError::MalformedCase(format!(
                    "generator at PQ bus {}",
                    g.bus
                )));
            }
        }
        Ok(())
    }
}

/// A uniformly spaced load time series.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    /// Minutes since the Unix epoch, strictly increasing, uniform spacing.
    pub timestamps: Vec<i64>,
    /// Load in MW per timestamp; finite and positive.
    pub values: Vec<f64>,
    /// Spacing between consecutive timestamps, minutes.
    pub resolution_min: i64,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("zone {0:?} not present in profile")]
    UnknownZone(String),
    #[error("non-uniform spacing: expected {expected} min, found {found} min at row {row}")]
    NonUniformSpacing {
        expected: i64,
        found: i64,
        row: usize,
    },
    #[error("non-positive load {value} at row {row}")]
    NonPositiveLoad { value: f64, row: usize },
    #[error("target resolution {target} min does not divide profile resolution {have} min")]
    BadResolution { target: i64, have: i64 },
}

impl LoadProfile {
    /// Profile normalized to [0, 1] by min-max over its values. A constant
    /// profile maps to all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; self.values.len()]
        }
    }
}

#[cfg(test)]
mod tests;
