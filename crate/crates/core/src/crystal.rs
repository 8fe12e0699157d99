//! Periodic crystal data model and cell geometry.
//!
//! A lattice is stored with its basis vectors as *columns*, so a fractional
//! coordinate `f` maps to Cartesian space with a plain product `L * f`.

use nalgebra::{Matrix3, Vector3};
use crate::error::{Error, Result};

pub type Lattice = Matrix3<f64>;
pub type Frac = Vector3<f64>;

/// Threshold on `|det L|` below which a lattice is treated as singular.
pub const DET_EPS: f64 = 1e-10;

/// A point in Cartesian space, in the same length units as the lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianPoint(pub Vector3<f64>);

impl CartesianPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }
}

/// Unit cell: species per site, fractional coordinates and lattice.
///
/// Species are stored as channel indices; the one-hot matrix is produced on
/// demand by [`Crystal::atom_types_one_hot`], so the one-hot invariant holds by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Crystal {
    species: Vec<usize>,
    num_species: usize,
    frac: Vec<Frac>,
    lattice: Lattice,
}

impl Crystal {
    /// Validating constructor. Fractional coordinates must already lie in `[0, 1)`.
    pub fn new(
        species: Vec<usize>,
        num_species: usize,
        frac: Vec<Frac>,
        lattice: Lattice,
    ) -> Result<Self> {
        if species.len() != frac.len() {
            return Err(Error::InvalidCrystal(format!(
                "{} species for {} sites",
                species.len(),
                frac.len()
            )));
        }
        if let Some(&s) = species.iter().find(|&&s| s >= num_species) {
            return Err(Error::Species { index: s, size: num_species });
        }
        for (i, f) in frac.iter().enumerate() {
            if f.iter().any(|x| !x.is_finite() || *x < 0.0 || *x >= 1.0) {
                return Err(Error::InvalidCrystal(format!(
                    "site {i} has fractional coordinate outside [0, 1): {:?}",
                    f.as_slice()
                )));
            }
        }
        if lattice.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCrystal("non-finite lattice entry".into()));
        }
        let det = lattice.determinant();
        if det.abs() <= DET_EPS {
            return Err(Error::SingularLattice { det });
        }
        Ok(Self { species, num_species, frac, lattice })
    }

    /// Like [`Crystal::new`] but wraps coordinates into `[0, 1)` first.
    pub fn new_wrapped(
        species: Vec<usize>,
        num_species: usize,
        frac: Vec<Frac>,
        lattice: Lattice,
    ) -> Result<Self> {
        let frac = wrap_coords(&frac)?;
        Self::new(species, num_species, frac, lattice)
    }

    pub fn num_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn num_species(&self) -> usize {
        self.num_species
    }

    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn frac_coords(&self) -> &[Frac] {
        &self.frac
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// `h x N` one-hot matrix, stored row-major (`[channel][atom]`).
    pub fn atom_types_one_hot(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.num_atoms()]; self.num_species];
        for (i, &s) in self.species.iter().enumerate() {
            out[s][i] = 1.0;
        }
        out
    }

    pub fn with_frac(&self, frac: Vec<Frac>) -> Result<Self> {
        Self::new_wrapped(self.species.clone(), self.num_species, frac, self.lattice)
    }

    pub fn with_lattice(&self, lattice: Lattice) -> Result<Self> {
        Self::new(self.species.clone(), self.num_species, self.frac.clone(), lattice)
    }

    /// Shift every site by the same fractional vector and wrap.
    pub fn translated(&self, t: &Frac) -> Result<Self> {
        self.with_frac(self.frac.iter().map(|f| f + t).collect())
    }

    /// Reorder sites so that new site `k` is old site `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if !is_permutation(perm, self.num_atoms()) {
            return Err(Error::Domain("not a permutation of the sites".into()));
        }
        Self::new(
            perm.iter().map(|&p| self.species[p]).collect(),
            self.num_species,
            perm.iter().map(|&p| self.frac[p]).collect(),
            self.lattice,
        )
    }

    pub fn cartesian_coords(&self) -> Vec<CartesianPoint> {
        self.frac.iter().map(|f| frac_to_cart(&self.lattice, f)).collect()
    }

    pub fn volume(&self) -> f64 {
        lattice_volume(&self.lattice)
    }
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Fractional part `x - floor(x)`, guaranteed to land in `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer rounds up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

#[inline]
pub fn wrap_vec(f: &Frac) -> Frac {
    f.map(wrap)
}

/// Wrap a set of fractional coordinates onto the unit torus.
pub fn wrap_coords(coords: &[Frac]) -> Result<Vec<Frac>> {
    coords
        .iter()
        .map(|f| {
            if f.iter().all(|x| x.is_finite()) {
                Ok(wrap_vec(f))
            } else {
                Err(Error::Domain(format!("non-finite coordinate {:?}", f.as_slice())))
            }
        })
        .collect()
}

pub fn frac_to_cart(lattice: &Lattice, f: &Frac) -> CartesianPoint {
    CartesianPoint(lattice * f)
}

pub fn cart_to_frac(lattice: &Lattice, x: &CartesianPoint) -> Result<Frac> {
    let det = lattice.determinant();
    if det.abs() <= DET_EPS {
        return Err(Error::SingularLattice { det });
    }
    let inv = lattice.try_inverse().ok_or(Error::SingularLattice { det })?;
    Ok(wrap_vec(&(inv * x.0)))
}

/// Minimum-image fractional displacement from `fi` to `fj`, each component in
/// `[-0.5, 0.5)`.
#[inline]
pub fn periodic_diff(fi: &Frac, fj: &Frac) -> Frac {
    (fj - fi).map(|d| wrap(d + 0.5) - 0.5)
}

/// The 27 integer offsets `{-1, 0, 1}^3`.
pub fn unit_offsets() -> impl Iterator<Item = Vector3<f64>> {
    (-1..=1).flat_map(|a| {
        (-1..=1).flat_map(move |b| (-1..=1).map(move |c| Vector3::new(a as f64, b as f64, c as f64)))
    })
}

/// Shortest Cartesian distance between `fi` and any periodic image of `fj`.
///
/// Images are searched over offsets `{-1, 0, 1}^3` around the canonical
/// difference, which is exact for reasonably reduced cells but can overestimate
/// the distance in strongly skewed ones.
pub fn min_image_distance(lattice: &Lattice, fi: &Frac, fj: &Frac) -> f64 {
    let d = periodic_diff(fi, fj);
    unit_offsets()
        .map(|k| (lattice * (d + k)).norm_squared())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Same search as [`min_image_distance`] driven by the metric tensor `G = L^T L`.
pub fn min_image_distance_gram(gram: &Matrix3<f64>, d: &Frac) -> f64 {
    let d = d.map(|x| wrap(x + 0.5) - 0.5);
    unit_offsets()
        .map(|k| {
            let v = d + k;
            v.dot(&(gram * v))
        })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
        .sqrt()
}

/// All periodic copies `x_i + L k` for `k` in `{-r..r}^3`, as `(species, point)`.
pub fn periodic_images(crystal: &Crystal, k_range: usize) -> Vec<(usize, CartesianPoint)> {
    let r = k_range as i64;
    let side = (2 * k_range + 1).pow(3);
    let mut out = Vec::with_capacity(crystal.num_atoms() * side);
    for (s, f) in crystal.species.iter().zip(&crystal.frac) {
        let x = crystal.lattice * f;
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    let k = Vector3::new(a as f64, b as f64, c as f64);
                    out.push((*s, CartesianPoint(x + crystal.lattice * k)));
                }
            }
        }
    }
    out
}

pub fn lattice_volume(lattice: &Lattice) -> f64 {
    lattice.determinant().abs()
}

/// Basis-vector lengths `(a, b, c)` and angles `(alpha, beta, gamma)` in degrees.
pub fn lattice_parameters(lattice: &Lattice) -> ([f64; 3], [f64; 3]) {
    let cols = [lattice.column(0), lattice.column(1), lattice.column(2)];
    let len = [cols[0].norm(), cols[1].norm(), cols[2].norm()];
    let angle = |i: usize, j: usize| {
        let c = (cols[i].dot(&cols[j]) / (len[i] * len[j])).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    };
    (len, [angle(1, 2), angle(0, 2), angle(0, 1)])
}

pub fn shortest_basis_length(lattice: &Lattice) -> f64 {
    let (len, _) = lattice_parameters(lattice);
    len.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Build a lattice from basis vectors given as rows.
pub fn lattice_from_rows(rows: [[f64; 3]; 3]) -> Lattice {
    Matrix3::from_fn(|r, c| rows[c][r])
}

pub fn lattice_to_rows(lattice: &Lattice) -> [[f64; 3]; 3] {
    let mut rows = [[0.0; 3]; 3];
    for (c, row) in rows.iter_mut().enumerate() {
        for (r, v) in row.iter_mut().enumerate() {
            *v = lattice[(r, c)];
        }
    }
    rows
}
