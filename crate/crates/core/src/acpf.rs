//! AC power flow: injection and branch flow equations, their analytic
//! Jacobians, the Newton-Raphson solver and the measurement function
//! `h(x)` shared with state estimation.
//!
//! Angles are radians everywhere here; degrees exist only at the parse
//! boundary. Injection sums run over the full Y-bus row, self term
//! included.

use crate::case::{BusKind, GridCase};
use crate::graph::{build_admittance, Admittance};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Per-bus voltage magnitudes (p.u.) and angles (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl GridState {
    /// Flat start: V = 1 (generator setpoints where present), all angles
    /// at the slack reference angle.
    pub fn flat(case: &GridCase) -> Self {
        let n = case.n();
        let idx = case.bus_index();
        let slack_va = case.buses[case.slack()].va_init.to_radians();
        let mut vm = vec![1.0; n];
        for g in &case.gens {
            vm[idx[&g.bus]] = g.vg;
        }
        GridState {
            vm,
            va: vec![slack_va; n],
        }
    }

    /// Start from the case file's VM/VA columns.
    pub fn from_case_init(case: &GridCase) -> Self {
        GridState {
            vm: case.buses.iter().map(|b| b.vm_init).collect(),
            va: case.buses.iter().map(|b| b.va_init.to_radians()).collect(),
        }
    }
}

/// The measurement vector: bus injections plus from-side branch flows,
/// all p.u., with the per-measurement noise standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    /// One sigma per stacked measurement; all positive.
    pub sigma: Vec<f64>,
}

impl Measurements {
    /// Stack order: p_inj, q_inj, p_flow, q_flow.
    pub fn stack(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.len());
        z.extend_from_slice(&self.p_inj);
        z.extend_from_slice(&self.q_inj);
        z.extend_from_slice(&self.p_flow);
        z.extend_from_slice(&self.q_flow);
        z
    }

    pub fn from_stack(n: usize, m: usize, z: &[f64], sigma: Vec<f64>) -> Self {
        assert_eq!(z.len(), 2 * n + 2 * m);
        Measurements {
            p_inj: z[..n].to_vec(),
            q_inj: z[n..2 * n].to_vec(),
            p_flow: z[2 * n..2 * n + m].to_vec(),
            q_flow: z[2 * n + m..].to_vec(),
            sigma,
        }
    }

    pub fn len(&self) -> usize {
        self.p_inj.len() + self.q_inj.len() + self.p_flow.len() + self.q_flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Relative noise level with an absolute floor, used both when noising
/// measurements and when weighting them in estimation.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub rel: f64,
    pub floor: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            rel: 0.01,
            floor: 1e-4,
        }
    }
}

impl NoiseModel {
    pub fn sigma(&self, value: f64) -> f64 {
        (self.rel * value.abs()).max(self.floor)
    }
}

#[derive(Debug, Error)]
pub enum PfError {
    #[error("power flow did not converge after {iters} iterations (mismatch {mismatch:.3e})")]
    NonConvergence { iters: usize, mismatch: f64 },
    #[error("singular power flow Jacobian")]
    SingularJacobian,
}

/// Active/reactive injections at every bus: full Y-bus sums.
pub fn injections(state: &GridState, y: &Admittance) -> (Vec<f64>, Vec<f64>) {
    let n = state.vm.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (vi, ti) = (state.vm[i], state.va[i]);
        let (mut pi, mut qi) = (0.0, 0.0);
        for j in 0..n {
            let (g, b) = (y.g[(i, j)], y.b[(i, j)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let theta = ti - state.va[j];
            let (sin, cos) = theta.sin_cos();
            pi += state.vm[j] * (g * cos + b * sin);
            qi += state.vm[j] * (g * sin - b * cos);
        }
        p[i] = vi * pi;
        q[i] = vi * qi;
    }
    (p, q)
}

/// From-side complex admittance blocks of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchBlocks {
    pub from: usize,
    pub to: usize,
    pub gff: f64,
    pub bff: f64,
    pub gft: f64,
    pub bft: f64,
}

/// Per-branch from-side admittance blocks (tap and shift folded in).
pub fn branch_blocks(case: &GridCase) -> Vec<BranchBlocks> {
    let idx = case.bus_index();
    case.branches
        .iter()
        .map(|br| {
            let denom = br.r * br.r + br.x * br.x;
            let ys_g = br.r / denom;
            let ys_b = -br.x / denom;
            let bc2 = br.b_charging / 2.0;
            let tau = br.tap_ratio();
            let shift = br.shift.to_radians();
            let (sn, cs) = shift.sin_cos();
            BranchBlocks {
                from: idx[&br.from],
                to: idx[&br.to],
                gff: ys_g / (tau * tau),
                bff: (ys_b + bc2) / (tau * tau),
                gft: -(ys_g * cs - ys_b * sn) / tau,
                bft: -(ys_b * cs + ys_g * sn) / tau,
            }
        })
        .collect()
}

/// From-side branch flows (p.u.).
pub fn line_flows(state: &GridState, case: &GridCase) -> (Vec<f64>, Vec<f64>) {
    flows_from_blocks(state, &branch_blocks(case))
}

pub fn flows_from_blocks(state: &GridState, blocks: &[BranchBlocks]) -> (Vec<f64>, Vec<f64>) {
    let mut pf = Vec::with_capacity(blocks.len());
    let mut qf = Vec::with_capacity(blocks.len());
    for bl in blocks {
        let (vf, vt) = (state.vm[bl.from], state.vm[bl.to]);
        let theta = state.va[bl.from] - state.va[bl.to];
        let (sin, cos) = theta.sin_cos();
        pf.push(bl.gff * vf * vf + vf * vt * (bl.gft * cos + bl.bft * sin));
        qf.push(-bl.bff * vf * vf + vf * vt * (bl.gft * sin - bl.bft * cos));
    }
    (pf, qf)
}

/// Evaluate `h(x)`: stacked injections and from-side flows, with sigma
/// filled from the default noise model.
pub fn measurement_function(state: &GridState, case: &GridCase) -> Measurements {
    measurement_function_with(state, case, NoiseModel::default())
}

pub fn measurement_function_with(
    state: &GridState,
    case: &GridCase,
    noise: NoiseModel,
) -> Measurements {
    let y = build_admittance(case).expect("validated case");
    let (p_inj, q_inj) = injections(state, &y);
    let (p_flow, q_flow) = line_flows(state, case);
    let sigma = p_inj
        .iter()
        .chain(&q_inj)
        .chain(&p_flow)
        .chain(&q_flow)
        .map(|&z| noise.sigma(z))
        .collect();
    Measurements {
        p_inj,
        q_inj,
        p_flow,
        q_flow,
        sigma,
    }
}

/// Partial derivatives of all injections with respect to one bus angle /
/// magnitude; used by the solver, the estimator and the optimized attack.
pub struct InjectionJacobian {
    /// dP_i/dVa_j
    pub dp_dva: DMatrix<f64>,
    /// dP_i/dVm_j
    pub dp_dvm: DMatrix<f64>,
    /// dQ_i/dVa_j
    pub dq_dva: DMatrix<f64>,
    /// dQ_i/dVm_j
    pub dq_dvm: DMatrix<f64>,
}

pub fn injection_jacobian(state: &GridState, y: &Admittance) -> InjectionJacobian {
    let n = state.vm.len();
    let (p, q) = injections(state, y);
    let mut dp_dva = DMatrix::zeros(n, n);
    let mut dp_dvm = DMatrix::zeros(n, n);
    let mut dq_dva = DMatrix::zeros(n, n);
    let mut dq_dvm = DMatrix::zeros(n, n);
    for i in 0..n {
        let vi = state.vm[i];
        for j in 0..n {
            let (g, b) = (y.g[(i, j)], y.b[(i, j)]);
            if i == j {
                dp_dva[(i, i)] = -q[i] - b * vi * vi;
                dp_dvm[(i, i)] = p[i] / vi + g * vi;
                dq_dva[(i, i)] = p[i] - g * vi * vi;
                dq_dvm[(i, i)] = q[i] / vi - b * vi;
            } else {
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let vj = state.vm[j];
                let theta = state.va[i] - state.va[j];
                let (sin, cos) = theta.sin_cos();
                dp_dva[(i, j)] = vi * vj * (g * sin - b * cos);
                dp_dvm[(i, j)] = vi * (g * cos + b * sin);
                dq_dva[(i, j)] = -vi * vj * (g * cos + b * sin);
                dq_dvm[(i, j)] = vi * (g * sin - b * cos);
            }
        }
    }
    InjectionJacobian {
        dp_dva,
        dp_dvm,
        dq_dva,
        dq_dvm,
    }
}

/// Rows: [p_inj, q_inj, p_flow, q_flow]; columns: [va at non-slack buses
/// in bus order, vm at all buses]. This is the estimator's `H`.
pub fn measurement_jacobian(
    state: &GridState,
    case: &GridCase,
    y: &Admittance,
    blocks: &[BranchBlocks],
) -> DMatrix<f64> {
    let n = case.n();
    let m = blocks.len();
    let slack = case.slack();
    let va_cols: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let inj = injection_jacobian(state, y);

    let mut h = DMatrix::zeros(2 * n + 2 * m, (n - 1) + n);
    for i in 0..n {
        for (c, &j) in va_cols.iter().enumerate() {
            h[(i, c)] = inj.dp_dva[(i, j)];
            h[(n + i, c)] = inj.dq_dva[(i, j)];
        }
        for j in 0..n {
            h[(i, n - 1 + j)] = inj.dp_dvm[(i, j)];
            h[(n + i, n - 1 + j)] = inj.dq_dvm[(i, j)];
        }
    }
    for (e, bl) in blocks.iter().enumerate() {
        let (f, t) = (bl.from, bl.to);
        let (vf, vt) = (state.vm[f], state.vm[t]);
        let theta = state.va[f] - state.va[t];
        let (sin, cos) = theta.sin_cos();
        let gc_bs = bl.gft * cos + bl.bft * sin;
        let gs_bc = bl.gft * sin - bl.bft * cos;

        let dpf_dvaf = vf * vt * (-bl.gft * sin + bl.bft * cos);
        let dpf_dvat = vf * vt * gs_bc;
        let dpf_dvmf = 2.0 * bl.gff * vf + vt * gc_bs;
        let dpf_dvmt = vf * gc_bs;
        let dqf_dvaf = vf * vt * gc_bs;
        let dqf_dvat = -vf * vt * gc_bs;
        let dqf_dvmf = -2.0 * bl.bff * vf + vt * gs_bc;
        let dqf_dvmt = vf * gs_bc;

        let (rp, rq) = (2 * n + e, 2 * n + m + e);
        for (c, &j) in va_cols.iter().enumerate() {
            if j == f {
                h[(rp, c)] = dpf_dvaf;
                h[(rq, c)] = dqf_dvaf;
            } else if j == t {
                h[(rp, c)] = dpf_dvat;
                h[(rq, c)] = dqf_dvat;
            }
        }
        h[(rp, n - 1 + f)] = dpf_dvmf;
        h[(rp, n - 1 + t)] = dpf_dvmt;
        h[(rq, n - 1 + f)] = dqf_dvmf;
        h[(rq, n - 1 + t)] = dqf_dvmt;
    }
    h
}

/// Scheduled net injections (gen minus load, p.u.) per bus.
pub fn scheduled_injections(case: &GridCase) -> (Vec<f64>, Vec<f64>) {
    let idx = case.bus_index();
    let mut p: Vec<f64> = case
        .buses
        .iter()
        .map(|b| -b.p_load / case.base_mva)
        .collect();
    let mut q: Vec<f64> = case
        .buses
        .iter()
        .map(|b| -b.q_load / case.base_mva)
        .collect();
    for g in &case.gens {
        let i = idx[&g.bus];
        p[i] += g.pg / case.base_mva;
        q[i] += g.qg / case.base_mva;
    }
    (p, q)
}

/// Newton-Raphson power flow. Mismatch equations are P at PV+PQ buses and
/// Q at PQ buses; the slack angle stays pinned and PV magnitudes stay at
/// their generator setpoints. Converges when the infinity norm of the
/// mismatch drops below 1e-8 p.u., capped at 30 iterations.
pub fn solve_powerflow(case: &GridCase, start: Option<&GridState>) -> Result<GridState, PfError> {
    const TOL: f64 = 1e-8;
    const MAX_ITER: usize = 30;

    let n = case.n();
    let idx = case.bus_index();
    let slack = case.slack();
    let y = build_admittance(case).expect("validated case");
    let (p_sched, q_sched) = scheduled_injections(case);

    let mut state = match start {
        Some(s) => s.clone(),
        None => GridState::flat(case),
    };
    // Pin the reference and PV setpoints regardless of the start.
    state.va[slack] = case.buses[slack].va_init.to_radians();
    for g in &case.gens {
        let i = idx[&g.bus];
        state.vm[i] = g.vg;
    }

    let ang_vars: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mag_vars: Vec<usize> = (0..n)
        .filter(|&i| case.buses[i].kind == BusKind::Pq)
        .collect();
    let dim = ang_vars.len() + mag_vars.len();

    let mut mismatch = DVector::zeros(dim);
    for iter in 0..=MAX_ITER {
        let (p, q) = injections(&state, &y);
        for (r, &i) in ang_vars.iter().enumerate() {
            mismatch[r] = p_sched[i] - p[i];
        }
        for (r, &i) in mag_vars.iter().enumerate() {
            mismatch[ang_vars.len() + r] = q_sched[i] - q[i];
        }
        let worst = mismatch.amax();
        if worst < TOL {
            return Ok(state);
        }
        if iter == MAX_ITER {
            return Err(PfError::NonConvergence {
                iters: iter,
                mismatch: worst,
            });
        }

        let inj = injection_jacobian(&state, &y);
        let mut jac = DMatrix::zeros(dim, dim);
        for (r, &i) in ang_vars.iter().enumerate() {
            for (c, &j) in ang_vars.iter().enumerate() {
                jac[(r, c)] = inj.dp_dva[(i, j)];
            }
            for (c, &j) in mag_vars.iter().enumerate() {
                jac[(r, ang_vars.len() + c)] = inj.dp_dvm[(i, j)];
            }
        }
        for (r, &i) in mag_vars.iter().enumerate() {
            for (c, &j) in ang_vars.iter().enumerate() {
                jac[(ang_vars.len() + r, c)] = inj.dq_dva[(i, j)];
            }
            for (c, &j) in mag_vars.iter().enumerate() {
                jac[(ang_vars.len() + r, ang_vars.len() + c)] = inj.dq_dvm[(i, j)];
            }
        }

        let delta = jac
            .lu()
            .solve(&mismatch)
            .ok_or(PfError::SingularJacobian)?;
        for (r, &i) in ang_vars.iter().enumerate() {
            state.va[i] += delta[r];
        }
        for (r, &i) in mag_vars.iter().enumerate() {
            state.vm[i] += delta[ang_vars.len() + r];
        }
    }
    unreachable!()
}
