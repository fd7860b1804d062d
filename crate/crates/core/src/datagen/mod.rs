//! End-to-end dataset factory: a physics-consistent healthy sequence
//! driven by a load profile, attack injection over sampled time steps,
//! split assembly with train-derived standardization, and persistence.

mod store;

pub use store::{export_embeddings_csv, export_features_csv, read_dataset, write_dataset};

use crate::acpf::{
    injections, measurement_function_with, solve_powerflow, GridState, Measurements, NoiseModel,
};
use crate::autodiff::Tensor;
use crate::case::{GridCase, LoadProfile};
use crate::fdia::{
    attack_distribution, attack_optimized, attack_replay, attack_scale, compute_tau_loss,
    seeded, select_region, AoGeometry, AoParams, AttackKind, HealthySample, HealthyStats,
    FdiaError, StatsSource, SystemProfile, REPLAY_TAU,
};
use crate::graph::{build_admittance, weighted_adjacency};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Per-row attack tag, also the on-disk `kinds` encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleKind {
    Healthy,
    Optimized,
    Distribution,
    Scaling,
    Replay,
}

impl SampleKind {
    pub fn code(self) -> u8 {
        match self {
            SampleKind::Healthy => 0,
            SampleKind::Optimized => 1,
            SampleKind::Distribution => 2,
            SampleKind::Scaling => 3,
            SampleKind::Replay => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SampleKind::Healthy,
            1 => SampleKind::Optimized,
            2 => SampleKind::Distribution,
            3 => SampleKind::Scaling,
            4 => SampleKind::Replay,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            SampleKind::Healthy => "none",
            SampleKind::Optimized => "A_o",
            SampleKind::Distribution => "A_d",
            SampleKind::Scaling => "A_s",
            SampleKind::Replay => "A_r",
        }
    }

    pub fn from_attack(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Optimized => SampleKind::Optimized,
            AttackKind::Distribution => SampleKind::Distribution,
            AttackKind::Scaling => SampleKind::Scaling,
            AttackKind::Replay => SampleKind::Replay,
        }
    }
}

/// One labeled time step: standardized per-bus (P, Q) features, binary
/// per-bus labels, kind tag and the source timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major (n, 2), standardized, stored at f32 precision.
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    pub kind: SampleKind,
    pub timestep: u32,
}

/// One split of the dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_buses(&self) -> usize {
        self.samples.first().map_or(0, |s| s.labels.len())
    }

    /// Assemble a training batch: features (b, n, 2) and labels (b, n).
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let n = self.n_buses();
        let mut feat = Vec::with_capacity(indices.len() * n * 2);
        let mut lab = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let s = &self.samples[i];
            feat.extend(s.features.iter().map(|&v| v as f64));
            lab.extend(s.labels.iter().map(|&v| v as f64));
        }
        (
            Tensor::from_vec(&[indices.len(), n, 2], feat).expect("consistent shapes"),
            Tensor::from_vec(&[indices.len(), n], lab).expect("consistent shapes"),
        )
    }
}

/// Number of samples per split and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub a_o: usize,
    pub a_d: usize,
    pub a_s: usize,
    pub a_r: usize,
    pub healthy: usize,
}

impl SplitCounts {
    pub fn attacked(&self) -> usize {
        self.a_o + self.a_d + self.a_s + self.a_r
    }

    pub fn total(&self) -> usize {
        self.attacked() + self.healthy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
}

impl DatasetCounts {
    /// Full-scale split sizes: 4:1:1 with two attack kinds during
    /// training/validation and all four at test, each split half attacked.
    pub fn full_scale() -> Self {
        DatasetCounts {
            train: SplitCounts {
                a_o: 5760,
                a_d: 5760,
                a_s: 0,
                a_r: 0,
                healthy: 11520,
            },
            val: SplitCounts {
                a_o: 1440,
                a_d: 1440,
                a_s: 0,
                a_r: 0,
                healthy: 2880,
            },
            test: SplitCounts {
                a_o: 720,
                a_d: 720,
                a_s: 720,
                a_r: 720,
                healthy: 2880,
            },
        }
    }

    /// Scale the full-scale table by `f` in (0, 1], keeping each split
    /// half attacked. Errors when a nonzero cell would round to zero.
    pub fn scaled(f: f64) -> Result<Self, DatagenError> {
        if !(f > 0.0 && f <= 1.0) {
            return Err(DatagenError::BadScale(f));
        }
        let base = Self::full_scale();
        let scale_split = |s: SplitCounts| -> Result<SplitCounts, DatagenError> {
            let cell = |v: usize| -> Result<usize, DatagenError> {
                if v == 0 {
                    return Ok(0);
                }
                let scaled = (v as f64 * f).round() as usize;
                if scaled == 0 {
                    return Err(DatagenError::BadScale(f));
                }
                Ok(scaled)
            };
            let a_o = cell(s.a_o)?;
            let a_d = cell(s.a_d)?;
            let a_s = cell(s.a_s)?;
            let a_r = cell(s.a_r)?;
            Ok(SplitCounts {
                a_o,
                a_d,
                a_s,
                a_r,
                healthy: a_o + a_d + a_s + a_r,
            })
        };
        Ok(DatasetCounts {
            train: scale_split(base.train)?,
            val: scale_split(base.val)?,
            test: scale_split(base.test)?,
        })
    }

    pub fn total(&self) -> usize {
        self.train.total() + self.val.total() + self.test.total()
    }
}

/// Digest of one on-disk file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub sha256: String,
    pub rows: usize,
}

/// Dataset metadata, persisted as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub system: String,
    pub n_buses: usize,
    pub seed: u64,
    pub scale_f: f64,
    pub radii: [usize; 2],
    pub counts: DatasetCounts,
    pub tau_loss: f64,
    pub feature_mean: Vec<[f64; 2]>,
    pub feature_std: Vec<[f64; 2]>,
    #[serde(default)]
    pub files: BTreeMap<String, FileDigest>,
}

/// The assembled dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("scale factor {0} leaves an attack kind with zero samples")]
    BadScale(f64),
    #[error("profile provides {have} usable time steps, need {need}")]
    InsufficientTimesteps { have: usize, need: usize },
    #[error("{failed} of {total} time steps failed to converge (limit 5%)")]
    NonConvergence { failed: usize, total: usize },
    #[error(transparent)]
    Attack(#[from] FdiaError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),
}

/// Scale every load (PD and QD jointly) and every generator PG by an
/// independent draw from N(1 + 0.1 * s_t, sigma_s^2), clipped at zero.
pub fn scale_network(
    case: &GridCase,
    s_t: f64,
    sigma_s: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> GridCase {
    let mean = 1.0 + 0.1 * s_t;
    let draw = move |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if sigma_s == 0.0 {
            mean
        } else {
            let n = Normal::new(mean, sigma_s).expect("sigma >= 0");
            n.sample(rng).max(0.0)
        }
    };
    let mut scaled = case.clone();
    for bus in &mut scaled.buses {
        let factor = draw(rng);
        bus.p_load *= factor;
        bus.q_load *= factor;
    }
    for gen in &mut scaled.gens {
        gen.pg *= draw(rng);
    }
    scaled
}

/// The healthy sequence: per usable time step the estimated state, the
/// estimated (P, Q) features, and the noisy measurement vector.
pub struct HealthySequence {
    pub steps: Vec<HealthySample>,
    pub measurements: Vec<Measurements>,
    pub skipped: usize,
}

/// Run the per-minute pipeline: stochastic scaling, AC power flow,
/// relative uniform measurement noise, state estimation. Non-convergent
/// steps are skipped; more than 5% of them is an error.
pub fn generate_healthy(
    case: &GridCase,
    profile: &LoadProfile,
    sigma_s: f64,
    noise_rel: f64,
    seed: u64,
    limit: Option<usize>,
) -> Result<HealthySequence, DatagenError> {
    let y = build_admittance(case).expect("validated case");
    let s_t = profile.normalized();
    let total = limit.unwrap_or(s_t.len()).min(s_t.len());
    let noise = NoiseModel {
        rel: noise_rel,
        floor: NoiseModel::default().floor,
    };

    let mut steps = Vec::with_capacity(total);
    let mut measurements = Vec::with_capacity(total);
    let mut skipped = 0usize;
    let mut warm: Option<GridState> = Some(GridState::from_case_init(case));
    for t in 0..total {
        let mut scale_rng = seeded(seed, (1u64 << 40) + t as u64);
        let scaled = scale_network(case, s_t[t], sigma_s, &mut scale_rng);
        let solved = match solve_powerflow(&scaled, warm.as_ref()) {
            Ok(s) => s,
            Err(_) => match solve_powerflow(&scaled, None) {
                Ok(s) => s,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            },
        };
        warm = Some(solved.clone());

        let clean = measurement_function_with(&solved, &scaled, noise);
        let mut noise_rng = seeded(seed, (2u64 << 40) + t as u64);
        let noisy: Vec<f64> = if noise_rel > 0.0 {
            clean
                .stack()
                .iter()
                .map(|&v| v * (1.0 + noise_rng.random_range(-noise_rel..=noise_rel)))
                .collect()
        } else {
            clean.stack()
        };
        let sigma: Vec<f64> = noisy.iter().map(|&v| noise.sigma(v)).collect();
        let z = Measurements::from_stack(case.n(), case.branches.len(), &noisy, sigma);

        let est = match crate::sse::wlse_estimate(&z, &scaled, Some(&solved)) {
            Ok(e) => e,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let (p, q) = injections(&est.x_hat, &y);
        let features = (0..case.n()).map(|i| [p[i], q[i]]).collect();
        steps.push(HealthySample {
            timestep: t as u32,
            state: est.x_hat,
            features,
        });
        measurements.push(z);
    }
    if skipped * 20 > total {
        return Err(DatagenError::NonConvergence {
            failed: skipped,
            total,
        });
    }
    Ok(HealthySequence {
        steps,
        measurements,
        skipped,
    })
}

/// Assemble labeled splits from a healthy sequence.
///
/// Attacked and healthy rows draw their time steps from one globally
/// shuffled list without replacement, so no step appears twice anywhere.
/// Distribution-attack statistics come from the healthy rows assigned to
/// the training split; the consistency threshold for the optimized
/// attack is calibrated over the full healthy sequence. Standardization
/// statistics come from the finished training split and are applied to
/// all three splits.
pub fn assemble_dataset(
    healthy: &HealthySequence,
    case: &GridCase,
    sys: &SystemProfile,
    counts: &DatasetCounts,
    scale_f: f64,
    seed: u64,
    ao_params: &AoParams,
) -> Result<Dataset, DatagenError> {
    let n = case.n();
    let g = weighted_adjacency(case).expect("validated case");
    let y = build_admittance(case).expect("validated case");
    let blocks = crate::acpf::branch_blocks(case);
    let steps = &healthy.steps;

    // Margin for replay draws that must park history-poor indices.
    let need = counts.total() + REPLAY_TAU;
    if steps.len() < need {
        return Err(DatagenError::InsufficientTimesteps {
            have: steps.len(),
            need,
        });
    }

    // One global shuffled pool of healthy indices.
    let mut pool: Vec<usize> = (0..steps.len()).collect();
    pool.shuffle(&mut seeded(seed, 0x900d));
    let mut pool = pool.into_iter();
    let mut draw = |any_index: bool, scratch: &mut Vec<usize>| -> usize {
        // Replay needs enough history before the chosen step; unusable
        // indices are parked for other slots.
        loop {
            let idx = pool.next().expect("pool sized by the count check");
            if !any_index && idx < REPLAY_TAU {
                scratch.push(idx);
                continue;
            }
            return idx;
        }
    };

    // Assign indices per (split, kind).
    let mut spare: Vec<usize> = Vec::new();
    let split_counts = [counts.train, counts.val, counts.test];
    let mut assigned: BTreeMap<(usize, SampleKind), Vec<usize>> = BTreeMap::new();
    for (si, sc) in split_counts.iter().enumerate() {
        for (kind, count) in [
            (SampleKind::Optimized, sc.a_o),
            (SampleKind::Distribution, sc.a_d),
            (SampleKind::Scaling, sc.a_s),
            (SampleKind::Replay, sc.a_r),
        ] {
            let replay = kind == SampleKind::Replay;
            let mut idxs = Vec::with_capacity(count);
            for _ in 0..count {
                if !replay {
                    if let Some(idx) = spare.pop() {
                        idxs.push(idx);
                        continue;
                    }
                }
                idxs.push(draw(!replay, &mut spare));
            }
            assigned.insert((si, kind), idxs);
        }
        let mut idxs = Vec::with_capacity(sc.healthy);
        for _ in 0..sc.healthy {
            if let Some(idx) = spare.pop() {
                idxs.push(idx);
            } else {
                idxs.push(draw(true, &mut spare));
            }
        }
        assigned.insert((si, SampleKind::Healthy), idxs);
    }

    // Train-healthy statistics for the distribution attack.
    let train_healthy_features: Vec<&Vec<[f64; 2]>> = assigned[&(0, SampleKind::Healthy)]
        .iter()
        .map(|&i| &steps[i].features)
        .collect();
    let stats = HealthyStats::from_samples(&train_healthy_features, StatsSource::TrainSplit);

    // Consistency threshold over the full healthy sequence.
    let tau_loss = compute_tau_loss(steps, &g, &y, &blocks, sys, seed, ao_params)?;

    // Build raw (unstandardized) samples per split.
    let mut raw_splits: Vec<Vec<(Vec<[f64; 2]>, Vec<u8>, SampleKind, u32)>> =
        vec![Vec::new(), Vec::new(), Vec::new()];
    for ((si, kind), idxs) in &assigned {
        for &idx in idxs {
            let step = &steps[idx];
            let mut features = step.features.clone();
            let mut labels = vec![0u8; n];
            if *kind != SampleKind::Healthy {
                // Per-sample stream: the dataset seed XOR the timestep.
                let mut rng: rand_chacha::ChaCha8Rng =
                    rand::SeedableRng::seed_from_u64(seed ^ step.timestep as u64);
                let (_, _, region) = select_region(&g, &mut rng, sys)?;
                let values = match kind {
                    SampleKind::Optimized => {
                        let geo = AoGeometry::new(&g, &blocks, &region);
                        attack_optimized(step, &y, &blocks, &geo, &mut rng, tau_loss, ao_params)?
                            .region_values
                    }
                    SampleKind::Distribution => attack_distribution(&stats, &region, &mut rng)?,
                    SampleKind::Scaling => attack_scale(&features, &region, &mut rng),
                    SampleKind::Replay => attack_replay(steps, idx, REPLAY_TAU, &region)?,
                    SampleKind::Healthy => unreachable!(),
                };
                for (k, &bus) in region.iter().enumerate() {
                    features[bus] = values[k];
                    labels[bus] = 1;
                }
            }
            raw_splits[*si].push((features, labels, *kind, step.timestep));
        }
    }

    // Shuffle within each split.
    for (si, raw) in raw_splits.iter_mut().enumerate() {
        raw.shuffle(&mut seeded(seed, 0xfff1e ^ si as u64));
    }

    // Standardization from the training split, applied everywhere.
    let train = &raw_splits[0];
    let count = train.len() as f64;
    let mut mean = vec![[0.0f64; 2]; n];
    for (f, _, _, _) in train {
        for i in 0..n {
            mean[i][0] += f[i][0];
            mean[i][1] += f[i][1];
        }
    }
    for m in &mut mean {
        m[0] /= count;
        m[1] /= count;
    }
    let mut std = vec![[0.0f64; 2]; n];
    for (f, _, _, _) in train {
        for i in 0..n {
            std[i][0] += (f[i][0] - mean[i][0]).powi(2);
            std[i][1] += (f[i][1] - mean[i][1]).powi(2);
        }
    }
    for s in &mut std {
        for f in 0..2 {
            s[f] = (s[f] / count).sqrt();
            if s[f] == 0.0 {
                // A constant column standardizes to zero offsets.
                s[f] = 1.0;
            }
        }
    }

    let freeze = |raw: Vec<(Vec<[f64; 2]>, Vec<u8>, SampleKind, u32)>| -> Split {
        Split {
            samples: raw
                .into_iter()
                .map(|(features, labels, kind, timestep)| {
                    let mut out = Vec::with_capacity(n * 2);
                    for i in 0..n {
                        out.push((((features[i][0]) - mean[i][0]) / std[i][0]) as f32);
                        out.push((((features[i][1]) - mean[i][1]) / std[i][1]) as f32);
                    }
                    Sample {
                        features: out,
                        labels,
                        kind,
                        timestep,
                    }
                })
                .collect(),
        }
    };

    let mut it = raw_splits.into_iter();
    let train = freeze(it.next().unwrap());
    let val = freeze(it.next().unwrap());
    let test = freeze(it.next().unwrap());

    let manifest = DatasetManifest {
        schema_version: 1,
        system: sys.name.clone(),
        n_buses: n,
        seed,
        scale_f,
        radii: [*sys.radii.start(), *sys.radii.end()],
        counts: *counts,
        tau_loss,
        feature_mean: mean,
        feature_std: std,
        files: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}
