//! Band selection strategies.
//!
//! - [`gcbs`]: one greedy pass that keeps a band iff it is incoherent with
//!   every band kept so far.
//! - [`ccbs`]: the largest mutually incoherent set, found as a maximum clique.
//! - [`gkkm_select`]: kernel k-means over bands with a penalised choice of the
//!   number of clusters; each cluster contributes its most central band.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clique::{build_adjacency, maximum_clique_with_budget};
use crate::error::{Error, Result};
use crate::kernel::{coherence, gram_power, GramMatrix};
use crate::mixing::stream_rng;
use crate::params::{auto_params, ParamSetting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Gcbs,
    Ccbs,
    Gkkm,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Gcbs => "GCBS",
            Strategy::Ccbs => "CCBS",
            Strategy::Gkkm => "GKKM",
        })
    }
}

/// Selected bands together with the kernel setting they were chosen under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDictionary {
    /// Sorted, distinct, 0-based band indices.
    pub indices: Vec<usize>,
    pub sigma2: f64,
    /// Threshold the coherence was held to; `None` for clustering.
    pub mu0: Option<f64>,
    pub coherence: f64,
    pub strategy: Strategy,
    /// Requested size for the coherence strategies, chosen cluster count
    /// for clustering.
    pub target_m: usize,
}

impl BandDictionary {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn coherence_dictionary(
    k_sigma: &GramMatrix,
    setting: &ParamSetting,
    mut indices: Vec<usize>,
    strategy: Strategy,
) -> Result<BandDictionary> {
    indices.sort_unstable();
    let mu = coherence(k_sigma, Some(&indices))?;
    assert!(
        mu <= setting.mu0,
        "{strategy} dictionary has coherence {mu} > {}",
        setting.mu0
    );
    Ok(BandDictionary {
        indices,
        sigma2: setting.sigma2,
        mu0: Some(setting.mu0),
        coherence: mu,
        strategy,
        target_m: setting.target_m,
    })
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::Input(format!(
            "band order has {} entries for {n} bands",
            order.len()
        )));
    }
    for &b in order {
        if b >= n || std::mem::replace(&mut seen[b], true) {
            return Err(Error::Input(format!(
                "band order is not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

/// Greedy coherence-based selection. `order` defaults to `0..L`; its first
/// band is always kept.
pub fn gcbs(k1: &GramMatrix, m: usize, order: Option<&[usize]>) -> Result<BandDictionary> {
    let setting = auto_params(k1, m)?;
    let k_sigma = gram_power(k1, setting.sigma2)?;
    gcbs_with_kernel(&k_sigma, &setting, order)
}

/// Greedy pass over an already powered Gram matrix.
pub fn gcbs_with_kernel(
    k_sigma: &GramMatrix,
    setting: &ParamSetting,
    order: Option<&[usize]>,
) -> Result<BandDictionary> {
    let n = k_sigma.len();
    let natural: Vec<usize>;
    let order = match order {
        Some(o) => {
            check_permutation(o, n)?;
            o
        }
        None => {
            natural = (0..n).collect();
            &natural
        }
    };
    let mut kept: Vec<usize> = Vec::new();
    for &b in order {
        if kept.iter().all(|&d| k_sigma.get(b, d).abs() <= setting.mu0) {
            kept.push(b);
        }
    }
    coherence_dictionary(k_sigma, setting, kept, Strategy::Gcbs)
}

/// Clique coherence-based selection: a maximum set of bands whose pairwise
/// kernel values are all at most `mu0`.
pub fn ccbs(k1: &GramMatrix, m: usize) -> Result<BandDictionary> {
    ccbs_with_budget(k1, m, None)
}

pub fn ccbs_with_budget(k1: &GramMatrix, m: usize, budget: Option<u64>) -> Result<BandDictionary> {
    let setting = auto_params(k1, m)?;
    let k_sigma = gram_power(k1, setting.sigma2)?;
    let clique = maximum_clique_with_budget(&build_adjacency(&k_sigma, setting.mu0), budget)?;
    coherence_dictionary(&k_sigma, &setting, clique.into_vertices(), Strategy::Ccbs)
}

/// Uniformly random permutation of `0..n`, reproducible from `seed`.
pub fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0));
    order
}

/// CCBS after relabelling band `i` as `perm[i]`; indices are reported in the
/// original labels. The dictionary size does not depend on `perm`.
pub fn ccbs_relabelled(
    k1: &GramMatrix,
    m: usize,
    perm: &[usize],
    budget: Option<u64>,
) -> Result<BandDictionary> {
    check_permutation(perm, k1.len())?;
    let permuted = GramMatrix::from_entries(k1.submatrix(perm), k1.sigma2())?;
    let mut d = ccbs_with_budget(&permuted, m, budget)?;
    d.indices = d.indices.iter().map(|&i| perm[i]).collect();
    d.indices.sort_unstable();
    Ok(d)
}

/// Outcome of one kernel k-means run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    /// Cluster of each point, in `0..clusters`.
    pub assignments: Vec<usize>,
    pub clusters: usize,
    /// Sum of squared feature-space distances to the cluster centroids.
    pub error: f64,
    /// Error of the assignment entering each iteration, ending with `error`.
    pub error_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterState {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

pub const KKM_MAX_ITERS: usize = 300;

/// Per-cluster kernel sums for the centroid distance expansion
/// `K_ii - 2/n_k sum_{j in C_k} K_ij + 1/n_k^2 sum_{j,l in C_k} K_jl`.
struct Centroids {
    /// `cross[i * k + c] = sum_{j in C_c} K_ij`
    cross: Vec<f64>,
    size: Vec<usize>,
    inner: Vec<f64>,
    k: usize,
}

impl Centroids {
    fn new(kernel: &DMatrix<f64>, assignments: &[usize], k: usize) -> Self {
        let n = assignments.len();
        let mut cross = vec![0.0; n * k];
        let mut size = vec![0; k];
        for (j, &c) in assignments.iter().enumerate() {
            size[c] += 1;
            for i in 0..n {
                cross[i * k + c] += kernel[(i, j)];
            }
        }
        let mut inner = vec![0.0; k];
        for (j, &c) in assignments.iter().enumerate() {
            inner[c] += cross[j * k + c];
        }
        Centroids {
            cross,
            size,
            inner,
            k,
        }
    }

    fn distance(&self, kernel: &DMatrix<f64>, i: usize, c: usize) -> f64 {
        let nk = self.size[c] as f64;
        if self.size[c] == 0 {
            return f64::INFINITY;
        }
        (kernel[(i, i)] - 2.0 * self.cross[i * self.k + c] / nk + self.inner[c] / (nk * nk))
            .max(0.0)
    }

    fn error(&self, kernel: &DMatrix<f64>, assignments: &[usize]) -> f64 {
        assignments
            .iter()
            .enumerate()
            .map(|(i, &c)| self.distance(kernel, i, c))
            .sum()
    }
}

fn check_kernel(kernel: &DMatrix<f64>, k: usize) -> Result<usize> {
    let n = kernel.nrows();
    if kernel.ncols() != n {
        return Err(Error::Shape(format!(
            "kernel matrix is {}x{}",
            n,
            kernel.ncols()
        )));
    }
    if k < 1 || k > n {
        return Err(Error::Parameter(format!(
            "cluster count must be in [1, {n}], got {k}"
        )));
    }
    Ok(n)
}

/// k-means++ seeding under the kernel-induced distance, then nearest-seed
/// assignment (ties to the lower cluster).
fn seed_assignments<G: Rng>(kernel: &DMatrix<f64>, k: usize, rng: &mut G) -> Vec<usize> {
    let n = kernel.nrows();
    let dist =
        |i: usize, j: usize| (kernel[(i, i)] + kernel[(j, j)] - 2.0 * kernel[(i, j)]).max(0.0);
    let mut seeds = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, seeds[0])).collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a seed; take the lowest unused index
            (0..n).find(|i| !seeds.contains(i)).expect("k <= n")
        };
        seeds.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist(i, next));
        }
    }
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if dist(i, seeds[c]) < dist(i, seeds[best]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Moves the worst-served point of a multi-member cluster into each empty
/// cluster. `cost[i]` is the distance of point `i` to the centroid it was
/// just assigned to.
fn fill_empty_clusters(assignments: &mut [usize], cost: &[f64], k: usize) {
    let mut size = vec![0usize; k];
    for &c in assignments.iter() {
        size[c] += 1;
    }
    for empty in 0..k {
        if size[empty] > 0 {
            continue;
        }
        let worst = (0..assignments.len())
            .filter(|&i| size[assignments[i]] > 1)
            .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
            .expect("k <= n leaves a multi-member cluster");
        size[assignments[worst]] -= 1;
        assignments[worst] = empty;
        size[empty] = 1;
    }
}

/// Lloyd-style kernel k-means on an arbitrary positive semidefinite kernel
/// matrix, seeded deterministically from `seed`.
///
/// The clustering error is non-increasing from one iteration to the next;
/// this is checked on every step.
pub fn kkm_cluster(kernel: &DMatrix<f64>, k: usize, seed: u64) -> Result<ClusterState> {
    let n = check_kernel(kernel, k)?;
    let mut rng = stream_rng(seed, 0);
    let mut assignments = seed_assignments(kernel, k, &mut rng);
    let mut cost = vec![0.0; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let scale = (0..n).map(|i| kernel[(i, i)].abs()).sum::<f64>().max(1.0);

    fill_empty_clusters(&mut assignments, &vec![0.0; n], k);
    while iterations < KKM_MAX_ITERS {
        let centroids = Centroids::new(kernel, &assignments, k);
        let e = centroids.error(kernel, &assignments);
        if let Some(&prev) = trace.last() {
            assert!(
                e <= prev + 1e-9 * scale,
                "clustering error increased from {prev} to {e}"
            );
        }
        trace.push(e);
        iterations += 1;

        let mut next = assignments.clone();
        for i in 0..n {
            let mut best = assignments[i];
            let mut best_d = centroids.distance(kernel, i, best);
            for c in 0..k {
                let d = centroids.distance(kernel, i, c);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            next[i] = best;
            cost[i] = best_d;
        }
        fill_empty_clusters(&mut next, &cost, k);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    let error = Centroids::new(kernel, &assignments, k).error(kernel, &assignments);
    if trace.last() != Some(&error) {
        trace.push(error);
    }
    Ok(ClusterState {
        assignments,
        clusters: k,
        error,
        error_trace: trace,
        iterations,
        converged,
    })
}

/// Best (lowest error) of `restarts` runs; ties go to the earlier restart.
pub fn kkm_best_of(
    kernel: &DMatrix<f64>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterState> {
    let restarts = restarts.max(1);
    let runs: Vec<ClusterState> = (0..restarts)
        .into_par_iter()
        .map(|r| kkm_cluster(kernel, k, restart_seed(seed, r)))
        .collect::<Result<_>>()?;
    Ok(runs
        .into_iter()
        .enumerate()
        .min_by(|(ra, a), (rb, b)| a.error.total_cmp(&b.error).then(ra.cmp(rb)))
        .map(|(_, s)| s)
        .expect("at least one restart"))
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(restart as u64)
}

/// Member of each cluster closest to its centroid (ties to the lowest band).
pub fn cluster_representatives(kernel: &DMatrix<f64>, state: &ClusterState) -> Vec<usize> {
    let centroids = Centroids::new(kernel, &state.assignments, state.clusters);
    (0..state.clusters)
        .map(|c| {
            state
                .members(c)
                .into_iter()
                .min_by(|&a, &b| {
                    centroids
                        .distance(kernel, a, c)
                        .total_cmp(&centroids.distance(kernel, b, c))
                        .then(a.cmp(&b))
                })
                .expect("clusters are non-empty")
        })
        .collect()
}

/// Best-of-restarts clustering for every cluster count in `m_grid`.
pub fn gkkm_path(
    k: &GramMatrix,
    m_grid: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<Vec<(usize, ClusterState)>> {
    if m_grid.is_empty() {
        return Err(Error::Parameter("empty cluster-count grid".into()));
    }
    m_grid
        .iter()
        .map(|&m| kkm_best_of(k.entries(), m, restarts, seed).map(|s| (m, s)))
        .collect()
}

/// Clustering-based selection with the cluster count chosen by
/// `argmin E + lambda * M` over `m_grid` (ties to the smaller count).
pub fn gkkm_select(
    k: &GramMatrix,
    lambda: f64,
    m_grid: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<BandDictionary> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "penalty weight must be nonnegative, got {lambda}"
        )));
    }
    let path = gkkm_path(k, m_grid, restarts, seed)?;
    let (m, state) = path
        .iter()
        .min_by(|(ma, a), (mb, b)| {
            let pa = a.error + lambda * *ma as f64;
            let pb = b.error + lambda * *mb as f64;
            pa.total_cmp(&pb).then(ma.cmp(mb))
        })
        .expect("non-empty grid");
    let mut indices = cluster_representatives(k.entries(), state);
    indices.sort_unstable();
    Ok(BandDictionary {
        coherence: coherence(k, Some(&indices))?,
        indices,
        sigma2: k.sigma2(),
        mu0: None,
        strategy: Strategy::Gkkm,
        target_m: *m,
    })
}
