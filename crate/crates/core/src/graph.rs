//! Graph view of a grid case: admittance matrices, the weighted
//! adjacency/degree pair, normalized spectral operators, and BFS
//! neighborhoods used for attack region selection.

use crate::case::GridCase;
use nalgebra::DMatrix;
use std::collections::VecDeque;
use thiserror::Error;

/// Nodal conductance/susceptance matrices, p.u.
#[derive(Debug, Clone)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Undirected weighted view of the grid used by the spectral operators.
#[derive(Debug, Clone)]
pub struct GridGraph {
    pub n: usize,
    /// Symmetric weight matrix, |series admittance| per branch, zero diagonal.
    pub adj: DMatrix<f64>,
    /// Row sums of `adj`.
    pub degree: Vec<f64>,
    /// True where a generator is connected.
    pub is_generator: Vec<bool>,
    /// True where the bus has no load and no generator.
    pub is_zero_injection: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("branch {from}-{to} has zero impedance")]
    SingularBranch { from: i64, to: i64 },
    #[error("grid graph is not connected")]
    DisconnectedGraph,
    #[error("bus index {0} has zero degree")]
    ZeroDegree(usize),
    #[error("invalid root bus index {0}")]
    InvalidRoot(usize),
}

/// Assemble the nodal admittance matrix with the conjugate-tap convention:
/// off-diagonal stamps are `-y/t*` and `-y/t` for `t = tap * e^{j shift}`,
/// diagonals accumulate series terms, line charging `b/2`, and bus shunts
/// `(gs + j bs) / baseMVA`.
pub fn build_admittance(case: &GridCase) -> Result<Admittance, GraphError> {
    let n = case.n();
    let idx = case.bus_index();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);

    for br in &case.branches {
        let (f, t) = (idx[&br.from], idx[&br.to]);
        let denom = br.r * br.r + br.x * br.x;
        if denom == 0.0 {
            return Err(GraphError::SingularBranch {
                from: br.from,
                to: br.to,
            });
        }
        // Series admittance y = 1 / (r + jx).
        let ys_g = br.r / denom;
        let ys_b = -br.x / denom;
        let bc2 = br.b_charging / 2.0;
        let tau = br.tap_ratio();
        let shift = br.shift.to_radians();
        let (cs, sn) = (shift.cos(), shift.sin());

        // Yff = (y + j bc/2) / tau^2
        g[(f, f)] += ys_g / (tau * tau);
        b[(f, f)] += (ys_b + bc2) / (tau * tau);
        // Ytt = y + j bc/2
        g[(t, t)] += ys_g;
        b[(t, t)] += ys_b + bc2;
        // Yft = -y / conj(t) = -y (cs + j sn) / tau
        g[(f, t)] += -(ys_g * cs - ys_b * sn) / tau;
        b[(f, t)] += -(ys_b * cs + ys_g * sn) / tau;
        // Ytf = -y / t = -y (cs - j sn) / tau
        g[(t, f)] += -(ys_g * cs + ys_b * sn) / tau;
        b[(t, f)] += -(ys_b * cs - ys_g * sn) / tau;
    }

    for (i, bus) in case.buses.iter().enumerate() {
        g[(i, i)] += bus.gs / case.base_mva;
        b[(i, i)] += bus.bs / case.base_mva;
    }

    Ok(Admittance { g, b })
}

/// Build the weighted graph: edge weight is the magnitude of the branch
/// series admittance, parallel branches summed, assembled symmetrically.
pub fn weighted_adjacency(case: &GridCase) -> Result<GridGraph, GraphError> {
    let n = case.n();
    let idx = case.bus_index();
    let mut adj = DMatrix::zeros(n, n);
    for br in &case.branches {
        let (f, t) = (idx[&br.from], idx[&br.to]);
        let denom = (br.r * br.r + br.x * br.x).sqrt();
        if denom == 0.0 {
            return Err(GraphError::SingularBranch {
                from: br.from,
                to: br.to,
            });
        }
        let w = 1.0 / denom;
        adj[(f, t)] += w;
        adj[(t, f)] += w;
    }
    let degree: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();

    let has_gen = case.has_gen();
    let is_zero_injection: Vec<bool> = case
        .buses
        .iter()
        .enumerate()
        .map(|(i, bus)| bus.p_load == 0.0 && bus.q_load == 0.0 && !has_gen[i])
        .collect();

    let graph = GridGraph {
        n,
        adj,
        degree,
        is_generator: has_gen,
        is_zero_injection,
    };
    if !graph.is_connected() {
        return Err(GraphError::DisconnectedGraph);
    }
    Ok(graph)
}

impl GridGraph {
    /// Neighbor indices of `i` (nonzero adjacency entries).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.adj[(i, j)] > 0.0).collect()
    }

    fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.n
    }
}

/// Symmetrically normalized adjacency `D^{-1/2} A D^{-1/2}`; its
/// eigenvalues lie in [-1, 1].
pub fn normalized_adjacency(g: &GridGraph) -> Result<DMatrix<f64>, GraphError> {
    let scale: Vec<f64> = g
        .degree
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(GraphError::ZeroDegree(i))
            }
        })
        .collect::<Result<_, _>>()?;
    let mut out = g.adj.clone();
    for i in 0..g.n {
        for j in 0..g.n {
            out[(i, j)] *= scale[i] * scale[j];
        }
    }
    Ok(out)
}

/// Normalized Laplacian `I - D^{-1/2} A D^{-1/2}`; eigenvalues in [0, 2].
pub fn normalized_laplacian(g: &GridGraph) -> Result<DMatrix<f64>, GraphError> {
    let mut out = normalized_adjacency(g)?;
    out.neg_mut();
    for i in 0..g.n {
        out[(i, i)] += 1.0;
    }
    Ok(out)
}

/// Which bus flags to drop from a BFS region.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegionExclusions {
    pub generators: bool,
    pub zero_injection: bool,
}

/// All buses within `radius` hops of `root` on the unweighted topology,
/// minus excluded buses (the root itself is removed too if excluded).
/// The result is sorted.
pub fn bfs_region(
    g: &GridGraph,
    root: usize,
    radius: usize,
    exclude: RegionExclusions,
) -> Result<Vec<usize>, GraphError> {
    if root >= g.n {
        return Err(GraphError::InvalidRoot(root));
    }
    let mut dist = vec![usize::MAX; g.n];
    dist[root] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(i) = queue.pop_front() {
        if dist[i] == radius {
            continue;
        }
        for j in g.neighbors(i) {
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    let keep = |i: usize| {
        !(exclude.generators && g.is_generator[i]
            || exclude.zero_injection && g.is_zero_injection[i])
    };
    Ok((0..g.n)
        .filter(|&i| dist[i] <= radius && keep(i))
        .collect())
}
