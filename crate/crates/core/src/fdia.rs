//! The four attack generators. Each crafts new per-bus (P, Q) feature
//! values over a BFS-selected region of the grid; the region's buses are
//! the positive labels of the resulting sample.
//!
//! All generators are deterministic given their RNG, and none touches a
//! bus outside the region.

use crate::acpf::{injections, BranchBlocks, GridState};
use crate::case::GridCase;
use crate::graph::{bfs_region, GridGraph, RegionExclusions};
use crate::train::{AdamHyper, AdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeSet;
use std::ops::RangeInclusive;
use thiserror::Error;

/// Attack type tags, in dataset encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    /// Constrained optimization-based attack.
    Optimized,
    /// Distribution-based attack.
    Distribution,
    /// Multiplicative scaling attack.
    Scaling,
    /// Replay of an earlier time step.
    Replay,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Optimized => "A_o",
            AttackKind::Distribution => "A_d",
            AttackKind::Scaling => "A_s",
            AttackKind::Replay => "A_r",
        }
    }
}

/// Per-system attack region policy: the BFS radius range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemProfile {
    pub name: String,
    pub radii: RangeInclusive<usize>,
}

impl SystemProfile {
    pub fn ieee14() -> Self {
        SystemProfile {
            name: "ieee14".into(),
            radii: 2..=3,
        }
    }

    pub fn ieee300() -> Self {
        SystemProfile {
            name: "ieee300".into(),
            radii: 6..=8,
        }
    }

    /// Pick by bus count: the two reference systems get their published
    /// radius ranges, anything else a small-custom default.
    pub fn for_case(n_buses: usize) -> Self {
        match n_buses {
            14 => SystemProfile::ieee14(),
            300 => SystemProfile::ieee300(),
            _ => SystemProfile {
                name: format!("custom{n_buses}"),
                radii: 1..=2,
            },
        }
    }
}

/// A selected attack region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub root: usize,
    pub radius: usize,
    pub region: Vec<usize>,
}

/// One healthy time step as stored by the dataset factory: the estimated
/// state and the per-bus estimated (P, Q) injections.
#[derive(Debug, Clone)]
pub struct HealthySample {
    pub timestep: u32,
    pub state: GridState,
    pub features: Vec<[f64; 2]>,
}

#[derive(Debug, Error)]
pub enum FdiaError {
    #[error("no non-empty attack region found after {0} root draws")]
    RegionExhausted(usize),
    #[error("replay needs t >= tau: t = {t}, tau = {tau}")]
    InsufficientHistory { t: usize, tau: usize },
    #[error("degenerate feature statistics at bus {0} (zero variance)")]
    DegenerateStats(usize),
    #[error("optimized attack never reached the consistency threshold")]
    InfeasibleAttack,
    #[error("too few healthy samples for threshold calibration: {have} < {need}")]
    TooFewSamples { have: usize, need: usize },
}

/// Draw a root uniformly, a radius uniformly from the system's range,
/// and take the BFS region with generator and zero-injection buses
/// excluded. Empty regions are resampled, up to a cap.
pub fn select_region(
    g: &GridGraph,
    rng: &mut ChaCha8Rng,
    sys: &SystemProfile,
) -> Result<(usize, usize, Vec<usize>), FdiaError> {
    const MAX_TRIES: usize = 100;
    let exclude = RegionExclusions {
        generators: true,
        zero_injection: true,
    };
    for _ in 0..MAX_TRIES {
        let root = rng.random_range(0..g.n);
        let radius = rng.random_range(sys.radii.clone());
        let region = bfs_region(g, root, radius, exclude).expect("valid root");
        if !region.is_empty() {
            return Ok((root, radius, region));
        }
    }
    Err(FdiaError::RegionExhausted(MAX_TRIES))
}

/// Scaling attack: one factor u ~ U(0.8, 1.2) per sample, shared across
/// every attacked (P, Q) entry.
pub fn attack_scale(
    features: &[[f64; 2]],
    region: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 2]> {
    let u: f64 = rng.random_range(0.8..1.2);
    region
        .iter()
        .map(|&i| [features[i][0] * u, features[i][1] * u])
        .collect()
}

/// Replay attack: region values copied from the same buses tau steps
/// earlier in the healthy history.
pub fn attack_replay(
    history: &[HealthySample],
    t: usize,
    tau: usize,
    region: &[usize],
) -> Result<Vec<[f64; 2]>, FdiaError> {
    if tau > t {
        return Err(FdiaError::InsufficientHistory { t, tau });
    }
    let past = &history[t - tau];
    Ok(region.iter().map(|&i| past.features[i]).collect())
}

/// Default replay delay.
pub const REPLAY_TAU: usize = 4;

/// Where healthy feature statistics were computed. The distribution
/// attack refuses anything but the training split (leakage guard).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    TrainSplit,
    Other,
}

/// Per-bus, per-feature mean and standard deviation of healthy features.
#[derive(Debug, Clone)]
pub struct HealthyStats {
    pub mean: Vec<[f64; 2]>,
    pub std: Vec<[f64; 2]>,
    pub source: StatsSource,
}

impl HealthyStats {
    pub fn from_samples(features: &[&Vec<[f64; 2]>], source: StatsSource) -> Self {
        let n = features[0].len();
        let count = features.len() as f64;
        let mut mean = vec![[0.0; 2]; n];
        for f in features {
            for i in 0..n {
                mean[i][0] += f[i][0];
                mean[i][1] += f[i][1];
            }
        }
        for m in &mut mean {
            m[0] /= count;
            m[1] /= count;
        }
        let mut std = vec![[0.0; 2]; n];
        for f in features {
            for i in 0..n {
                std[i][0] += (f[i][0] - mean[i][0]).powi(2);
                std[i][1] += (f[i][1] - mean[i][1]).powi(2);
            }
        }
        for s in &mut std {
            s[0] = (s[0] / count).sqrt();
            s[1] = (s[1] / count).sqrt();
        }
        HealthyStats { mean, std, source }
    }
}

/// Distribution attack: each attacked entry drawn independently from the
/// bus/feature marginal N(mean, std^2) of healthy training data.
pub fn attack_distribution(
    stats: &HealthyStats,
    region: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 2]>, FdiaError> {
    assert_eq!(
        stats.source,
        StatsSource::TrainSplit,
        "distribution attack statistics must come from the training split"
    );
    let mut out = Vec::with_capacity(region.len());
    for &i in region {
        let mut vals = [0.0; 2];
        for f in 0..2 {
            let sd = stats.std[i][f];
            if sd == 0.0 {
                return Err(FdiaError::DegenerateStats(i));
            }
            let dist = Normal::new(stats.mean[i][f], sd).expect("positive std");
            vals[f] = dist.sample(rng);
        }
        out.push(vals);
    }
    Ok(out)
}

/// Knobs of the optimized attack.
#[derive(Debug, Clone, Copy)]
pub struct AoParams {
    pub max_steps: usize,
    pub lr: f64,
    /// Weight of the boundary consistency penalty in the objective.
    pub penalty: f64,
    /// Initialization jitter sigmas for region angles and magnitudes.
    pub jitter_theta: f64,
    pub jitter_v: f64,
    /// Trust region half-widths around the healthy state; keeps crafted
    /// values inside the plausible operating envelope.
    pub max_dtheta: f64,
    pub max_dv: f64,
}

impl Default for AoParams {
    fn default() -> Self {
        AoParams {
            max_steps: 300,
            lr: 0.01,
            penalty: 1e4,
            jitter_theta: 0.05,
            jitter_v: 0.01,
            max_dtheta: 0.012,
            max_dv: 0.006,
        }
    }
}

/// Result of the optimized attack on one sample.
#[derive(Debug, Clone)]
pub struct AoOutcome {
    /// Crafted (P, Q) for the region buses, region order.
    pub region_values: Vec<[f64; 2]>,
    /// Full state with the region entries replaced by the attack state.
    pub state: GridState,
    /// Final boundary consistency loss.
    pub loss: f64,
    /// Final injection deviation over the region.
    pub deviation: f64,
}

/// Geometry the optimized attack needs: the region, the boundary buses
/// (outside neighbors), and the branches metered at the boundary that
/// look into the region.
pub struct AoGeometry {
    pub region: Vec<usize>,
    pub boundary: Vec<usize>,
    /// Indices into the branch list: from-bus on the boundary, to-bus in
    /// the region.
    pub inward_flows: Vec<usize>,
}

impl AoGeometry {
    pub fn new(g: &GridGraph, blocks: &[BranchBlocks], region: &[usize]) -> Self {
        let in_region: BTreeSet<usize> = region.iter().cloned().collect();
        let mut boundary = BTreeSet::new();
        for &i in region {
            for j in g.neighbors(i) {
                if !in_region.contains(&j) {
                    boundary.insert(j);
                }
            }
        }
        let inward_flows = blocks
            .iter()
            .enumerate()
            .filter(|(_, bl)| boundary.contains(&bl.from) && in_region.contains(&bl.to))
            .map(|(e, _)| e)
            .collect();
        AoGeometry {
            region: region.to_vec(),
            boundary: boundary.into_iter().collect(),
            inward_flows,
        }
    }
}

struct AoContext<'a> {
    y: &'a crate::graph::Admittance,
    blocks: &'a [BranchBlocks],
    geo: &'a AoGeometry,
    /// Healthy reference injections.
    p0: Vec<f64>,
    q0: Vec<f64>,
    /// Healthy reference flows on the inward branches.
    flows0: Vec<[f64; 2]>,
}

impl<'a> AoContext<'a> {
    fn new(
        base: &GridState,
        y: &'a crate::graph::Admittance,
        blocks: &'a [BranchBlocks],
        geo: &'a AoGeometry,
    ) -> Self {
        let (p0, q0) = injections(base, y);
        let flows0 = geo
            .inward_flows
            .iter()
            .map(|&e| flow_of(&blocks[e], base))
            .collect();
        AoContext {
            y,
            blocks,
            geo,
            p0,
            q0,
            flows0,
        }
    }

    /// Boundary consistency loss and region deviation at a state.
    fn evaluate(&self, state: &GridState) -> (f64, f64) {
        let (p, q) = injections(state, self.y);
        let mut loss = 0.0;
        for &b in &self.geo.boundary {
            loss += (p[b] - self.p0[b]).powi(2) + (q[b] - self.q0[b]).powi(2);
        }
        for (k, &e) in self.geo.inward_flows.iter().enumerate() {
            let [pf, qf] = flow_of(&self.blocks[e], state);
            loss += (pf - self.flows0[k][0]).powi(2) + (qf - self.flows0[k][1]).powi(2);
        }
        let mut dev = 0.0;
        for &i in &self.geo.region {
            dev += (p[i] - self.p0[i]).powi(2) + (q[i] - self.q0[i]).powi(2);
        }
        (loss, dev)
    }

    /// Gradient of (-deviation + penalty * loss) with respect to the
    /// region state variables, layout [theta..., vm...].
    fn gradient(&self, state: &GridState, penalty: f64) -> Vec<f64> {
        let (p, q) = injections(state, self.y);
        let jac = crate::acpf::injection_jacobian(state, self.y);
        let r = self.geo.region.len();
        let mut grad = vec![0.0; 2 * r];

        let add_injection_terms = |bus: usize, weight: f64, grad: &mut Vec<f64>| {
            let dp = 2.0 * (p[bus] - self.p0[bus]) * weight;
            let dq = 2.0 * (q[bus] - self.q0[bus]) * weight;
            for (k, &j) in self.geo.region.iter().enumerate() {
                grad[k] += dp * jac.dp_dva[(bus, j)] + dq * jac.dq_dva[(bus, j)];
                grad[r + k] += dp * jac.dp_dvm[(bus, j)] + dq * jac.dq_dvm[(bus, j)];
            }
        };
        for &i in &self.geo.region {
            add_injection_terms(i, -1.0, &mut grad);
        }
        for &b in &self.geo.boundary {
            add_injection_terms(b, penalty, &mut grad);
        }
        for (fk, &e) in self.geo.inward_flows.iter().enumerate() {
            let bl = &self.blocks[e];
            let [pf, qf] = flow_of(bl, state);
            let dpf = 2.0 * (pf - self.flows0[fk][0]) * penalty;
            let dqf = 2.0 * (qf - self.flows0[fk][1]) * penalty;
            // Only the to-side (region) variables move.
            let (vf, vt) = (state.vm[bl.from], state.vm[bl.to]);
            let theta = state.va[bl.from] - state.va[bl.to];
            let (sin, cos) = theta.sin_cos();
            let gc_bs = bl.gft * cos + bl.bft * sin;
            let gs_bc = bl.gft * sin - bl.bft * cos;
            let dpf_dvat = vf * vt * gs_bc;
            let dpf_dvmt = vf * gc_bs;
            let dqf_dvat = -vf * vt * gc_bs;
            let dqf_dvmt = vf * gs_bc;
            if let Some(k) = self.geo.region.iter().position(|&i| i == bl.to) {
                grad[k] += dpf * dpf_dvat + dqf * dqf_dvat;
                grad[r + k] += dpf * dpf_dvmt + dqf * dqf_dvmt;
            }
        }
        grad
    }
}

fn flow_of(bl: &BranchBlocks, state: &GridState) -> [f64; 2] {
    let (vf, vt) = (state.vm[bl.from], state.vm[bl.to]);
    let theta = state.va[bl.from] - state.va[bl.to];
    let (sin, cos) = theta.sin_cos();
    [
        bl.gff * vf * vf + vf * vt * (bl.gft * cos + bl.bft * sin),
        -bl.bff * vf * vf + vf * vt * (bl.gft * sin - bl.bft * cos),
    ]
}

/// The optimized attack: from a jittered copy of the healthy state on
/// the region buses, AdamW pushes the region injections away from their
/// healthy values while a quadratic penalty pins every measurement the
/// attacker cannot touch (boundary injections and inward from-side
/// flows). The learning rate decays over the run so the final iterate
/// settles; the final state must satisfy the consistency threshold, with
/// the best feasible iterate as the fallback.
pub fn attack_optimized(
    sample: &HealthySample,
    y: &crate::graph::Admittance,
    blocks: &[BranchBlocks],
    geo: &AoGeometry,
    rng: &mut ChaCha8Rng,
    tau_loss: f64,
    params: &AoParams,
) -> Result<AoOutcome, FdiaError> {
    let ctx = AoContext::new(&sample.state, y, blocks, geo);
    let r = geo.region.len();

    let mut state = sample.state.clone();
    let jt = Normal::new(0.0, params.jitter_theta).expect("sigma > 0");
    let jv = Normal::new(0.0, params.jitter_v).expect("sigma > 0");
    for &i in &geo.region {
        state.va[i] = clamp_around(
            sample.state.va[i] + jt.sample(rng),
            sample.state.va[i],
            params.max_dtheta,
        );
        state.vm[i] = clamp_around(
            sample.state.vm[i] + jv.sample(rng),
            sample.state.vm[i],
            params.max_dv,
        )
        .max(0.1);
    }

    let (mut loss, mut dev) = ctx.evaluate(&state);
    let mut best: Option<(GridState, f64, f64)> = if loss <= tau_loss {
        Some((state.clone(), loss, dev))
    } else {
        None
    };

    let mut opt = AdamW::new(
        2 * r,
        AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        },
    );
    let mut vars: Vec<f64> = geo
        .region
        .iter()
        .map(|&i| state.va[i])
        .chain(geo.region.iter().map(|&i| state.vm[i]))
        .collect();

    for step in 0..params.max_steps {
        let grad = ctx.gradient(&state, params.penalty);
        // Cosine-decayed learning rate settles the final iterate.
        let lr = params.lr
            * 0.5
            * (1.0 + (std::f64::consts::PI * step as f64 / params.max_steps as f64).cos());
        opt.step(&mut vars, &grad, lr, false).expect("fixed shape");
        for (k, &i) in geo.region.iter().enumerate() {
            vars[k] = clamp_around(vars[k], sample.state.va[i], params.max_dtheta);
            vars[r + k] =
                clamp_around(vars[r + k], sample.state.vm[i], params.max_dv).max(0.1);
            state.va[i] = vars[k];
            state.vm[i] = vars[r + k];
        }
        let (l, d) = ctx.evaluate(&state);
        loss = l;
        dev = d;
        if l <= tau_loss && best.as_ref().map_or(true, |(_, _, bd)| d > *bd) {
            best = Some((state.clone(), l, d));
        }
    }

    let (final_state, final_loss, final_dev) = if loss <= tau_loss {
        (state, loss, dev)
    } else if let Some(b) = best {
        b
    } else {
        return Err(FdiaError::InfeasibleAttack);
    };

    let (p, q) = injections(&final_state, y);
    let region_values = geo.region.iter().map(|&i| [p[i], q[i]]).collect();
    Ok(AoOutcome {
        region_values,
        state: final_state,
        loss: final_loss,
        deviation: final_dev,
    })
}

fn clamp_around(v: f64, center: f64, half_width: f64) -> f64 {
    v.clamp(center - half_width, center + half_width)
}

/// Calibrate the consistency threshold: probe every healthy sample once
/// with the standard initialization jitter, collect the boundary losses,
/// and return the Tukey upper fence Q3 + 1.5 IQR.
pub fn compute_tau_loss(
    healthy: &[HealthySample],
    g: &GridGraph,
    y: &crate::graph::Admittance,
    blocks: &[BranchBlocks],
    sys: &SystemProfile,
    seed: u64,
    params: &AoParams,
) -> Result<f64, FdiaError> {
    const MIN_SAMPLES: usize = 100;
    if healthy.len() < MIN_SAMPLES {
        return Err(FdiaError::TooFewSamples {
            have: healthy.len(),
            need: MIN_SAMPLES,
        });
    }
    let mut losses = Vec::with_capacity(healthy.len());
    for (i, sample) in healthy.iter().enumerate() {
        let mut rng = seeded(seed ^ sample.timestep as u64, 0x7a0 + i as u64);
        let (_, _, region) = select_region(g, &mut rng, sys)?;
        let geo = AoGeometry::new(g, blocks, &region);
        let ctx = AoContext::new(&sample.state, y, blocks, &geo);
        let jt = Normal::new(0.0, params.jitter_theta).expect("sigma > 0");
        let jv = Normal::new(0.0, params.jitter_v).expect("sigma > 0");
        let mut probe = sample.state.clone();
        for &b in &region {
            probe.va[b] += jt.sample(&mut rng);
            probe.vm[b] = (probe.vm[b] + jv.sample(&mut rng)).max(0.1);
        }
        let (loss, _) = ctx.evaluate(&probe);
        losses.push(loss);
    }
    Ok(iqr_upper_fence(&mut losses))
}

/// Tukey fence with inclusive (linearly interpolated) quartiles.
pub fn iqr_upper_fence(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let q1 = quantile_sorted(values, 0.25);
    let q3 = quantile_sorted(values, 0.75);
    q3 + 1.5 * (q3 - q1)
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

/// Derive a per-purpose RNG from the dataset seed and a stream tag.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::parse_case;
    use crate::graph::weighted_adjacency;
    use rand::SeedableRng;
    use std::path::PathBuf;

    fn ieee14() -> GridCase {
        let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/case14.m");
        parse_case(&std::fs::read_to_string(p).unwrap()).unwrap()
    }

    fn ieee300() -> GridCase {
        let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/case300.m");
        parse_case(&std::fs::read_to_string(p).unwrap()).unwrap()
    }

    #[test]
    fn region_selection_respects_exclusions_and_radii() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let sys = SystemProfile::ieee14();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (root, radius, region) = select_region(&g, &mut rng, &sys).unwrap();
            assert!(root < g.n);
            assert!((2..=3).contains(&radius));
            assert!(!region.is_empty() && region.len() <= 14);
            for &b in &region {
                assert!(!g.is_generator[b], "generator bus {b} inside region");
                assert!(!g.is_zero_injection[b], "zero-injection bus {b} inside");
            }
        }
    }

    #[test]
    fn ieee300_radii_stay_in_range() {
        let case = ieee300();
        let g = weighted_adjacency(&case).unwrap();
        let sys = SystemProfile::ieee300();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..25 {
            let (_, radius, _) = select_region(&g, &mut rng, &sys).unwrap();
            assert!((6..=8).contains(&radius));
        }
    }

    #[test]
    fn region_selection_is_deterministic() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let sys = SystemProfile::ieee14();
        let a = select_region(&g, &mut ChaCha8Rng::seed_from_u64(9), &sys).unwrap();
        let b = select_region(&g, &mut ChaCha8Rng::seed_from_u64(9), &sys).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scale_attack_multiplies_by_one_shared_factor() {
        let features = vec![[2.0, 1.0], [4.0, -2.0], [1.0, 0.5]];
        let region = vec![0, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = attack_scale(&features, &region, &mut rng);
        let u = out[0][0] / features[0][0];
        assert!((0.8..1.2).contains(&u));
        for (k, &i) in region.iter().enumerate() {
            assert!((out[k][0] - features[i][0] * u).abs() < 1e-15);
            assert!((out[k][1] - features[i][1] * u).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_factor_mean_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = vec![[1.0, 1.0]];
        let region = vec![0];
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| attack_scale(&features, &region, &mut rng)[0][0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.003, "mean {mean}");
    }

    fn toy_history(steps: usize) -> Vec<HealthySample> {
        (0..steps)
            .map(|t| HealthySample {
                timestep: t as u32,
                state: GridState {
                    vm: vec![1.0; 3],
                    va: vec![0.0; 3],
                },
                features: vec![[t as f64, -(t as f64)]; 3],
            })
            .collect()
    }

    #[test]
    fn replay_shifts_by_tau() {
        let history = toy_history(10);
        let region = vec![1, 2];
        let out = attack_replay(&history, 9, 4, &region).unwrap();
        assert_eq!(out, vec![[5.0, -5.0], [5.0, -5.0]]);
        // tau = 0 is the identity.
        let same = attack_replay(&history, 9, 0, &region).unwrap();
        assert_eq!(same, vec![[9.0, -9.0], [9.0, -9.0]]);
        assert!(matches!(
            attack_replay(&history, 2, 4, &region),
            Err(FdiaError::InsufficientHistory { .. })
        ));
        assert_eq!(REPLAY_TAU, 4);
    }

    #[test]
    fn distribution_attack_follows_marginals() {
        let stats = HealthyStats {
            mean: vec![[1.0, -0.5], [2.0, 0.25]],
            std: vec![[0.1, 0.2], [0.3, 0.05]],
            source: StatsSource::TrainSplit,
        };
        let region = vec![0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut sums = vec![[0.0; 2]; 2];
        for _ in 0..n {
            let draw = attack_distribution(&stats, &region, &mut rng).unwrap();
            for (k, d) in draw.iter().enumerate() {
                sums[k][0] += d[0];
                sums[k][1] += d[1];
            }
        }
        for (k, &i) in region.iter().enumerate() {
            for f in 0..2 {
                let mean = sums[k][f] / n as f64;
                let bound = 4.0 * stats.std[i][f] / (n as f64).sqrt();
                assert!(
                    (mean - stats.mean[i][f]).abs() < bound,
                    "bus {i} feature {f}: {mean} vs {}",
                    stats.mean[i][f]
                );
            }
        }
    }

    #[test]
    fn distribution_attack_rejects_zero_variance() {
        let stats = HealthyStats {
            mean: vec![[1.0, 1.0]],
            std: vec![[0.0, 1.0]],
            source: StatsSource::TrainSplit,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            attack_distribution(&stats, &[0], &mut rng),
            Err(FdiaError::DegenerateStats(0))
        ));
    }

    #[test]
    #[should_panic(expected = "training split")]
    fn distribution_attack_rejects_non_train_stats() {
        let stats = HealthyStats {
            mean: vec![[1.0, 1.0]],
            std: vec![[1.0, 1.0]],
            source: StatsSource::Other,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let _ = attack_distribution(&stats, &[0], &mut rng);
    }

    #[test]
    fn iqr_fence_matches_hand_computation() {
        let mut plain = vec![1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(iqr_upper_fence(&mut plain), 7.0);
        // Constant distribution collapses to the constant.
        let mut flat = vec![3.5; 200];
        assert_eq!(iqr_upper_fence(&mut flat), 3.5);
        // Scale equivariance.
        let mut a: Vec<f64> = (0..50).map(|i| (i as f64 * 1.37).sin().abs()).collect();
        let mut b: Vec<f64> = a.iter().map(|v| v * 11.0).collect();
        let fa = iqr_upper_fence(&mut a);
        let fb = iqr_upper_fence(&mut b);
        assert!((fb - 11.0 * fa).abs() < 1e-12);
    }

    fn solved_healthy(case: &GridCase) -> HealthySample {
        let state = crate::acpf::solve_powerflow(case, None).unwrap();
        let y = crate::graph::build_admittance(case).unwrap();
        let (p, q) = injections(&state, &y);
        let features = (0..case.n()).map(|i| [p[i], q[i]]).collect();
        HealthySample {
            timestep: 0,
            state,
            features,
        }
    }

    #[test]
    fn optimized_attack_zero_budget_zero_jitter_is_identity() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let y = crate::graph::build_admittance(&case).unwrap();
        let blocks = crate::acpf::branch_blocks(&case);
        let sample = solved_healthy(&case);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, _, region) = select_region(&g, &mut rng, &SystemProfile::ieee14()).unwrap();
        let geo = AoGeometry::new(&g, &blocks, &region);
        let params = AoParams {
            max_steps: 0,
            jitter_theta: 1e-300,
            jitter_v: 1e-300,
            ..AoParams::default()
        };
        let out =
            attack_optimized(&sample, &y, &blocks, &geo, &mut rng, 1e-9, &params).unwrap();
        assert!(out.loss < 1e-18);
        assert!(out.deviation < 1e-18);
        for (k, &i) in region.iter().enumerate() {
            assert!((out.region_values[k][0] - sample.features[i][0]).abs() < 1e-12);
            assert!((out.region_values[k][1] - sample.features[i][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn optimized_attack_meets_threshold_and_moves_injections() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let y = crate::graph::build_admittance(&case).unwrap();
        let blocks = crate::acpf::branch_blocks(&case);
        let sample = solved_healthy(&case);
        let params = AoParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, _, region) = select_region(&g, &mut rng, &SystemProfile::ieee14()).unwrap();
        let geo = AoGeometry::new(&g, &blocks, &region);
        let tau = 1e-2;
        let out = attack_optimized(&sample, &y, &blocks, &geo, &mut rng, tau, &params).unwrap();
        assert!(out.loss <= tau, "loss {}", out.loss);
        assert!(out.deviation > 0.0);
        assert!(out
            .region_values
            .iter()
            .all(|v| v[0].is_finite() && v[1].is_finite()));
    }

    #[test]
    fn optimized_attack_is_deterministic() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let y = crate::graph::build_admittance(&case).unwrap();
        let blocks = crate::acpf::branch_blocks(&case);
        let sample = solved_healthy(&case);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, _, region) =
                select_region(&g, &mut rng, &SystemProfile::ieee14()).unwrap();
            let geo = AoGeometry::new(&g, &blocks, &region);
            attack_optimized(
                &sample,
                &y,
                &blocks,
                &geo,
                &mut rng,
                1e-2,
                &AoParams::default(),
            )
            .unwrap()
            .region_values
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn tau_loss_needs_enough_samples() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let y = crate::graph::build_admittance(&case).unwrap();
        let blocks = crate::acpf::branch_blocks(&case);
        let healthy = vec![solved_healthy(&case); 10];
        assert!(matches!(
            compute_tau_loss(
                &healthy,
                &g,
                &y,
                &blocks,
                &SystemProfile::ieee14(),
                1,
                &AoParams::default()
            ),
            Err(FdiaError::TooFewSamples { have: 10, need: 100 })
        ));
    }

    #[test]
    fn tau_loss_is_positive_and_deterministic() {
        let case = ieee14();
        let g = weighted_adjacency(&case).unwrap();
        let y = crate::graph::build_admittance(&case).unwrap();
        let blocks = crate::acpf::branch_blocks(&case);
        let healthy: Vec<HealthySample> = (0..120)
            .map(|t| {
                let mut s = solved_healthy(&case);
                s.timestep = t;
                s
            })
            .collect();
        let sys = SystemProfile::ieee14();
        let params = AoParams::default();
        let a = compute_tau_loss(&healthy, &g, &y, &blocks, &sys, 1, &params).unwrap();
        let b = compute_tau_loss(&healthy, &g, &y, &blocks, &sys, 1, &params).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }
}
