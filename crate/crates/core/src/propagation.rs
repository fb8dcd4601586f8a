//! Semi-supervised label propagation inside the target image.
//!
//! A voxel-affinity graph `W` is built from target intensities, normalized to
//! `S = D^-1/2 W D^-1/2`, and the probabilistic map is diffused with the
//! synchronous update `L <- (1 - beta) S L + beta L0`. Before diffusion the
//! reliable background scores are rescaled by the reliable
//! foreground/background count ratio (floored at the reliability threshold)
//! and each class is normalized to unit mean magnitude.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ProbMap;
use crate::volume::{BoundingBox, Image, VoxelIndex};

/// Largest graph accepted by the dense routines.
pub const DENSE_LIMIT: usize = 2000;

/// Neighborhood used to connect voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stencil {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Stencil {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        match n {
            6 => Ok(Stencil::Six),
            18 => Ok(Stencil::Eighteen),
            26 => Ok(Stencil::TwentySix),
            other => Err(format!("stencil must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Stencil> for u8 {
    fn from(s: Stencil) -> u8 {
        match s {
            Stencil::Six => 6,
            Stencil::Eighteen => 18,
            Stencil::TwentySix => 26,
        }
    }
}

impl Stencil {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Stencil::Six => 1,
            Stencil::Eighteen => 2,
            Stencil::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if (1..=max_nonzero).contains(&nz) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Intensity scale of the Gaussian affinity.
    pub sigma: f64,
    /// Weight of the initial map in each update, in (0, 1).
    pub beta: f64,
    /// Scores with magnitude above this are reliable.
    pub threshold: f64,
    pub stencil: Stencil,
    pub max_iters: usize,
    /// Stop once the largest per-voxel update falls below this.
    pub tol: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            sigma: 10.0,
            beta: 0.6,
            threshold: 0.5,
            stencil: Stencil::TwentySix,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Affinity of two voxels; zero on the diagonal.
pub fn gaussian_similarity(ix: f64, iy: f64, sigma: f64, same_voxel: bool) -> f64 {
    if same_voxel {
        0.0
    } else {
        let d = ix - iy;
        (-(d * d) / (sigma * sigma)).exp()
    }
}

/// Sparse symmetric affinity graph in CSR form with its normalized twin.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    nodes: Vec<VoxelIndex>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    degree: Vec<f64>,
    normalized: Vec<f64>,
}

impl SimilarityGraph {
    /// Builds the graph from an undirected edge list. Each pair may appear
    /// once; self loops and negative weights are rejected.
    pub fn from_edges(nodes: Vec<VoxelIndex>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = nodes.len();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n || a == b || !(w >= 0.0) {
                return Err(Error::Config(format!("invalid edge ({a}, {b}, {w})")));
            }
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for row in &mut adj {
            row.sort_by_key(|e| e.0);
        }
        Ok(Self::from_rows(nodes, adj))
    }

    fn from_rows(nodes: Vec<VoxelIndex>, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in &rows {
            for &(c, w) in row {
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        let degree: Vec<f64> = (0..rows.len())
            .map(|i| weights[row_ptr[i]..row_ptr[i + 1]].iter().sum())
            .collect();
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut normalized = vec![0.0; weights.len()];
        for i in 0..rows.len() {
            for e in row_ptr[i]..row_ptr[i + 1] {
                normalized[e] = inv_sqrt[i] * weights[e] * inv_sqrt[cols[e]];
            }
        }
        SimilarityGraph {
            nodes,
            row_ptr,
            cols,
            weights,
            degree,
            normalized,
        }
    }

    pub fn nodes(&self) -> &[VoxelIndex] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_edges(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// `(column, W, S)` entries of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .map(move |e| (self.cols[e], self.weights[e], self.normalized[e]))
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    fn check_dense(&self) -> Result<()> {
        if self.len() > DENSE_LIMIT {
            return Err(Error::TooLarge {
                nodes: self.len(),
                limit: DENSE_LIMIT,
            });
        }
        Ok(())
    }

    pub fn dense_w(&self) -> Result<DMatrix<f64>> {
        self.check_dense()?;
        let mut m = DMatrix::zeros(self.len(), self.len());
        for i in 0..self.len() {
            for (j, w, _) in self.row(i) {
                m[(i, j)] = w;
            }
        }
        Ok(m)
    }

    pub fn dense_s(&self) -> Result<DMatrix<f64>> {
        self.check_dense()?;
        let mut m = DMatrix::zeros(self.len(), self.len());
        for i in 0..self.len() {
            for (j, _, s) in self.row(i) {
                m[(i, j)] = s;
            }
        }
        Ok(m)
    }

    /// `out = S x`.
    pub fn apply_s(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            *o = (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|e| self.normalized[e] * x[self.cols[e]])
                .sum();
        });
    }
}

/// Graph over every voxel of `bbox`, connected by `cfg.stencil` inside the box.
pub fn build_graph(
    target: &Image,
    bbox: &BoundingBox,
    cfg: &PropagationConfig,
) -> Result<SimilarityGraph> {
    bbox.check_fits(target.dims())?;
    let offsets = cfg.stencil.offsets();
    let d = bbox.dims().map(|v| v as isize);
    let rows: Vec<Vec<(usize, f64)>> = (0..bbox.len())
        .into_par_iter()
        .map(|local| {
            let v = bbox.voxel_at(local);
            let iv = target.get(v) as f64;
            let (lx, ly, lz) = (
                (v.x - bbox.min.x) as isize,
                (v.y - bbox.min.y) as isize,
                (v.z - bbox.min.z) as isize,
            );
            let mut row = Vec::with_capacity(offsets.len());
            for o in &offsets {
                let (x, y, z) = (lx + o[0], ly + o[1], lz + o[2]);
                if x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2] {
                    continue;
                }
                let j = (x + d[0] * (y + d[1] * z)) as usize;
                let iu = target.get(bbox.voxel_at(j)) as f64;
                row.push((j, gaussian_similarity(iv, iu, cfg.sigma, false)));
            }
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(SimilarityGraph::from_rows(bbox.iter().collect(), rows))
}

/// Fully connected graph over `bbox` (every pair of distinct voxels).
pub fn build_dense_graph(
    target: &Image,
    bbox: &BoundingBox,
    sigma: f64,
) -> Result<SimilarityGraph> {
    bbox.check_fits(target.dims())?;
    let nodes: Vec<VoxelIndex> = bbox.iter().collect();
    if nodes.len() > DENSE_LIMIT {
        return Err(Error::TooLarge {
            nodes: nodes.len(),
            limit: DENSE_LIMIT,
        });
    }
    let intensity: Vec<f64> = nodes.iter().map(|&v| target.get(v) as f64).collect();
    let rows = (0..nodes.len())
        .map(|i| {
            (0..nodes.len())
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        j,
                        gaussian_similarity(intensity[i], intensity[j], sigma, false),
                    )
                })
                .collect()
        })
        .collect();
    Ok(SimilarityGraph::from_rows(nodes, rows))
}

/// Counts behind the information-balance step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceReport {
    pub n_reliable_foreground: usize,
    pub n_reliable_background: usize,
    /// `N_f / N_b`, absent when there is no reliable background.
    pub ratio: Option<f64>,
    /// True when reliable foreground exists but reliable background does not.
    pub skipped: bool,
}

/// Rescales every reliable background score `p < -t` to
/// `-max((N_f / N_b) |p|, t)`; all other scores are untouched.
pub fn information_balance(p: &ProbMap, t: f64) -> Result<(ProbMap, BalanceReport)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {t}"
        )));
    }
    let n_f = p.values.iter().filter(|&&v| v > t).count();
    let n_b = p.values.iter().filter(|&&v| v < -t).count();
    let mut out = p.clone();
    let ratio = (n_b > 0).then(|| n_f as f64 / n_b as f64);
    if let Some(r) = ratio {
        for v in out.values.iter_mut().filter(|v| **v < -t) {
            *v = -(r * v.abs()).max(t);
        }
    }
    Ok((
        out,
        BalanceReport {
            n_reliable_foreground: n_f,
            n_reliable_background: n_b,
            ratio,
            skipped: n_b == 0 && n_f > 0,
        },
    ))
}

/// Divides positive scores by their mean and negative scores by the
/// magnitude of theirs.
pub fn normalize_classes(p: &ProbMap) -> ProbMap {
    let mean = |pred: fn(f64) -> bool| {
        let (sum, n) = p
            .values
            .iter()
            .filter(|&&v| pred(v))
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        (n > 0).then(|| (sum / n as f64).abs())
    };
    let pos = mean(|v| v > 0.0);
    let neg = mean(|v| v < 0.0);
    let mut out = p.clone();
    for v in out.values.iter_mut() {
        match (*v > 0.0, *v < 0.0) {
            (true, _) => *v /= pos.expect("positive class is nonempty"),
            (_, true) => *v /= neg.expect("negative class is nonempty"),
            _ => {}
        }
    }
    out
}

/// Information balance followed by class-wise normalization.
pub fn balance_weights(p: &ProbMap, t: f64) -> Result<(ProbMap, BalanceReport)> {
    let (balanced, report) = information_balance(p, t)?;
    Ok((normalize_classes(&balanced), report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub map: ProbMap,
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-voxel change in the final iteration.
    pub last_update: f64,
}

fn check_nodes(l0: &ProbMap, graph: &SimilarityGraph) -> Result<()> {
    if l0.len() != graph.len() {
        return Err(Error::DimensionMismatch(format!(
            "map has {} voxels, graph has {} nodes",
            l0.len(),
            graph.len()
        )));
    }
    Ok(())
}

/// One synchronous update `next = (1 - beta) S current + beta l0`.
pub fn propagation_step(
    graph: &SimilarityGraph,
    current: &[f64],
    l0: &[f64],
    beta: f64,
    next: &mut [f64],
) {
    graph.apply_s(current, next);
    next.par_iter_mut()
        .zip(l0.par_iter())
        .for_each(|(n, &b)| *n = (1.0 - beta) * *n + beta * b);
}

/// Iterates the update from `start` until the largest change drops below
/// `cfg.tol` or `cfg.max_iters` is reached.
pub fn propagate_from(
    l0: &ProbMap,
    start: &[f64],
    graph: &SimilarityGraph,
    cfg: &PropagationConfig,
) -> Result<Propagation> {
    check_nodes(l0, graph)?;
    if start.len() != l0.len() {
        return Err(Error::DimensionMismatch(
            "start vector length differs from map".into(),
        ));
    }
    if !(cfg.beta > 0.0 && cfg.beta < 1.0) {
        return Err(Error::Config(format!(
            "beta must lie in (0, 1), got {}",
            cfg.beta
        )));
    }
    let mut current = start.to_vec();
    let mut next = vec![0.0; current.len()];
    let mut last_update = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        propagation_step(graph, &current, &l0.values, cfg.beta, &mut next);
        iterations += 1;
        last_update = current
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut current, &mut next);
        if last_update < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Propagation {
        map: ProbMap {
            values: current,
            ..l0.clone()
        },
        iterations,
        converged,
        last_update,
    })
}

/// Iterates the update starting from `l0` itself.
pub fn propagate(
    l0: &ProbMap,
    graph: &SimilarityGraph,
    cfg: &PropagationConfig,
) -> Result<Propagation> {
    propagate_from(l0, &l0.values, graph, cfg)
}

/// Exact fixed point: solves `(I - (1 - beta) S) L = beta L0` densely.
pub fn solve_direct(l0: &ProbMap, graph: &SimilarityGraph, beta: f64) -> Result<ProbMap> {
    check_nodes(l0, graph)?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!(
            "beta must lie in (0, 1], got {beta}"
        )));
    }
    let s = graph.dense_s()?;
    let n = graph.len();
    let a = DMatrix::<f64>::identity(n, n) - s * (1.0 - beta);
    let b = DVector::from_iterator(n, l0.values.iter().map(|v| beta * v));
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Config("propagation system is singular".into()))?;
    Ok(ProbMap {
        values: x.iter().copied().collect(),
        ..l0.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub map: ProbMap,
    pub balance: BalanceReport,
    pub iterations: usize,
    pub converged: bool,
}

/// Balances and normalizes `l0`, diffuses it over the target's affinity
/// graph, then restores the unanimous voxels and clamps to [-1, 1].
pub fn refine(l0: &ProbMap, target: &Image, cfg: &PropagationConfig) -> Result<Refinement> {
    cfg.validate()?;
    let (weighted, balance) = balance_weights(l0, cfg.threshold)?;
    let graph = build_graph(target, &l0.bbox, cfg)?;
    let prop = propagate(&weighted, &graph, cfg)?;
    let mut map = prop.map;
    for ((v, &decided), &orig) in map.values.iter_mut().zip(&l0.decided).zip(&l0.values) {
        *v = if decided { orig } else { v.clamp(-1.0, 1.0) };
    }
    map.decided = l0.decided.clone();
    Ok(Refinement {
        map,
        balance,
        iterations: prop.iterations,
        converged: prop.converged,
    })
}
