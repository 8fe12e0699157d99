//! Hypergraph view of a crystal.
//!
//! Every atom is a scan center. The atoms inside a sphere (or an axis-aligned
//! cube) around it, measured with minimum-image distances, form one candidate
//! hyperedge. Candidates of order 1 are dropped and duplicates are merged.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::crystal::{
    min_image_distance, periodic_diff, shortest_basis_length, unit_offsets, Crystal, Frac, Lattice,
};
use crate::error::{Error, Result};

/// Largest neighborhood a scan may produce before the construction is rejected.
pub const HYPEREDGE_HARD_CAP: usize = 32;
pub const DEFAULT_MAX_ORDER: usize = 6;
pub const DEFAULT_RADIUS_SCALE: f64 = 0.55;
pub const DEFAULT_SIDE_SCALE: f64 = 1.1;
pub const MAX_JSON_NODES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    num_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
    degrees: Vec<usize>,
    /// Per-hyperedge weight. Always 1.0; the model does not read it.
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HypergraphJson {
    num_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
}

impl Hypergraph {
    /// Canonicalizes (sorts, deduplicates) the given sets and validates them.
    pub fn new(num_nodes: usize, hyperedges: Vec<Vec<usize>>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for mut e in hyperedges {
            e.sort_unstable();
            e.dedup();
            if e.len() < 2 {
                return Err(Error::Graph(format!("hyperedge {e:?} has fewer than 2 nodes")));
            }
            if let Some(&bad) = e.iter().find(|&&v| v >= num_nodes) {
                return Err(Error::Graph(format!("node {bad} out of range for {num_nodes} nodes")));
            }
            set.insert(e);
        }
        let hyperedges: Vec<Vec<usize>> = set.into_iter().collect();
        let degrees = count_degrees(num_nodes, &hyperedges);
        let weights = vec![1.0; hyperedges.len()];
        Ok(Self { num_nodes, hyperedges, degrees, weights })
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self { num_nodes, hyperedges: Vec::new(), degrees: vec![0; num_nodes], weights: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn hyperedges(&self) -> &[Vec<usize>] {
        &self.hyperedges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_order(&self) -> usize {
        self.hyperedges.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Relabel nodes: old node `perm[k]` becomes node `k`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        if !crate::crystal::is_permutation(perm, self.num_nodes) {
            return Err(Error::Graph("relabeling is not a permutation".into()));
        }
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Self::new(
            self.num_nodes,
            self.hyperedges.iter().map(|e| e.iter().map(|&v| inverse[v]).collect()).collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&HypergraphJson {
            num_nodes: self.num_nodes,
            hyperedges: self.hyperedges.clone(),
        })
        .expect("hypergraph serializes")
    }

    /// Parses the output of [`Hypergraph::to_json`]; at most [`MAX_JSON_NODES`] nodes.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: HypergraphJson = serde_json::from_str(s)?;
        if raw.num_nodes > MAX_JSON_NODES {
            return Err(Error::Graph(format!("{} nodes exceeds the limit of {MAX_JSON_NODES}", raw.num_nodes)));
        }
        Self::new(raw.num_nodes, raw.hyperedges)
    }
}

fn count_degrees(num_nodes: usize, hyperedges: &[Vec<usize>]) -> Vec<usize> {
    let mut d = vec![0; num_nodes];
    for e in hyperedges {
        for &v in e {
            d[v] += 1;
        }
    }
    d
}

/// `d_v` = number of hyperedges containing `v`.
pub fn node_degrees(h: &Hypergraph) -> Vec<usize> {
    count_degrees(h.num_nodes, &h.hyperedges)
}

/// Scan radius or cube side, either absolute or relative to the shortest basis vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    Absolute(f64),
    RelativeToShortest(f64),
}

impl Extent {
    pub fn resolve(&self, lattice: &Lattice) -> f64 {
        match *self {
            Extent::Absolute(x) => x,
            Extent::RelativeToShortest(s) => s * shortest_basis_length(lattice),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HyperedgeMode {
    Sphere { radius: Extent },
    Cube { side: Extent },
    /// Every pair of atoms, nothing else.
    Pairwise,
}

/// Full recipe for building the hypergraph the denoiser sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypergraphSpec {
    pub mode: HyperedgeMode,
    pub max_order: usize,
    /// Add all order-2 pairs on top of the scanned hyperedges.
    pub augment_pairwise: bool,
}

impl Default for HypergraphSpec {
    fn default() -> Self {
        Self {
            mode: HyperedgeMode::Sphere { radius: Extent::RelativeToShortest(DEFAULT_RADIUS_SCALE) },
            max_order: DEFAULT_MAX_ORDER,
            augment_pairwise: false,
        }
    }
}

impl HypergraphSpec {
    pub fn cube_default() -> Self {
        Self {
            mode: HyperedgeMode::Cube {
                side: Extent::RelativeToShortest(DEFAULT_RADIUS_SCALE * DEFAULT_SIDE_SCALE),
            },
            ..Self::default()
        }
    }

    pub fn build(&self, crystal: &Crystal) -> Result<Hypergraph> {
        self.build_raw(crystal.frac_coords(), crystal.lattice())
    }

    /// Build from a possibly noisy state that need not be a validated [`Crystal`].
    pub fn build_raw(&self, frac: &[Frac], lattice: &Lattice) -> Result<Hypergraph> {
        let h = match self.mode {
            HyperedgeMode::Sphere { radius } => sphere_scan(frac, lattice, radius.resolve(lattice), self.max_order)?,
            HyperedgeMode::Cube { side } => cube_scan(frac, lattice, side.resolve(lattice), self.max_order)?,
            HyperedgeMode::Pairwise => Hypergraph::empty(frac.len()),
        };
        if self.augment_pairwise || matches!(self.mode, HyperedgeMode::Pairwise) {
            Ok(complete_pairs(&h, frac.len()))
        } else {
            Ok(h)
        }
    }
}

fn check_scan_args(extent: f64, max_order: usize, what: &str) -> Result<()> {
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::Domain(format!("{what} must be positive, got {extent}")));
    }
    if max_order < 2 {
        return Err(Error::Domain(format!("max_order must be at least 2, got {max_order}")));
    }
    Ok(())
}

/// Turn per-center neighborhoods `(distance, index)` into a hypergraph.
fn collect_scans(n: usize, scans: Vec<Vec<(f64, usize)>>, max_order: usize) -> Result<Hypergraph> {
    let mut edges = Vec::new();
    for mut members in scans {
        if members.len() > HYPEREDGE_HARD_CAP {
            return Err(Error::OversizeHyperedge { size: members.len(), cap: HYPEREDGE_HARD_CAP });
        }
        if members.len() < 2 {
            continue;
        }
        // nearest first, ties by lower index
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        members.truncate(max_order);
        edges.push(members.into_iter().map(|(_, i)| i).collect());
    }
    Hypergraph::new(n, edges)
}

pub fn build_sphere_hyperedges(crystal: &Crystal, radius: f64, max_order: usize) -> Result<Hypergraph> {
    sphere_scan(crystal.frac_coords(), crystal.lattice(), radius, max_order)
}

fn sphere_scan(f: &[Frac], l: &Lattice, radius: f64, max_order: usize) -> Result<Hypergraph> {
    check_scan_args(radius, max_order, "radius")?;
    let n = f.len();
    let scans = (0..n)
        .map(|i| {
            (0..n)
                .filter_map(|j| {
                    let d = if i == j { 0.0 } else { min_image_distance(l, &f[i], &f[j]) };
                    (d <= radius).then_some((d, j))
                })
                .collect()
        })
        .collect();
    collect_scans(n, scans, max_order)
}

/// Atom `j` joins the cube around atom `i` when some periodic image of it lies
/// within `side / 2` of atom `i` along every Cartesian axis. Membership order
/// uses the Chebyshev distance of the closest such image.
pub fn build_cube_hyperedges(crystal: &Crystal, side: f64, max_order: usize) -> Result<Hypergraph> {
    cube_scan(crystal.frac_coords(), crystal.lattice(), side, max_order)
}

fn cube_scan(f: &[Frac], l: &Lattice, side: f64, max_order: usize) -> Result<Hypergraph> {
    check_scan_args(side, max_order, "side")?;
    let half = 0.5 * side;
    let n = f.len();
    let scans = (0..n)
        .map(|i| {
            (0..n)
                .filter_map(|j| {
                    if i == j {
                        return Some((0.0, j));
                    }
                    let d = periodic_diff(&f[i], &f[j]);
                    unit_offsets()
                        .map(|k: Vector3<f64>| (l * (d + k)).amax())
                        .filter(|&cheb| cheb <= half)
                        .fold(None, |best: Option<f64>, c| Some(best.map_or(c, |b| b.min(c))))
                        .map(|c| (c, j))
                })
                .collect()
        })
        .collect();
    collect_scans(n, scans, max_order)
}

/// Add every pair `{i, j}` as an order-2 hyperedge.
pub fn augment_pairwise(h: &Hypergraph, crystal: &Crystal) -> Hypergraph {
    complete_pairs(h, crystal.num_atoms())
}

fn complete_pairs(h: &Hypergraph, num_atoms: usize) -> Hypergraph {
    let n = num_atoms.max(h.num_nodes);
    let mut edges = h.hyperedges.clone();
    for i in 0..n {
        for j in i + 1..n {
            edges.push(vec![i, j]);
        }
    }
    Hypergraph::new(n, edges).expect("pairs are in range")
}
