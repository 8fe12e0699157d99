//! JSONL crystal datasets, a synthetic perovskite generator, and deterministic splits.
//!
//! One record per line:
//! `{"id": str, "species": [int], "frac_coords": [[f, f, f]], "lattice": [[f, f, f]; 3]}`.
//! Lattice rows are basis vectors; [`Crystal`] stores them as columns.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crystal::{lattice_from_rows, lattice_to_rows, wrap_vec, Crystal, Frac, Lattice};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub species: Vec<usize>,
    pub frac_coords: Vec<[f64; 3]>,
    pub lattice: [[f64; 3]; 3],
}

impl Record {
    pub fn from_crystal(id: &str, c: &Crystal) -> Self {
        Self {
            id: id.to_string(),
            species: c.species().to_vec(),
            frac_coords: c.frac_coords().iter().map(|f| [f.x, f.y, f.z]).collect(),
            lattice: lattice_to_rows(c.lattice()),
        }
    }

    /// Validate into a crystal, wrapping out-of-cell coordinates with a warning.
    pub fn to_crystal(&self, num_species: usize) -> Result<Crystal> {
        let mut frac = Vec::with_capacity(self.frac_coords.len());
        for f in &self.frac_coords {
            let f = Frac::from(*f);
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::Record { id: self.id.clone(), msg: "non-finite coordinate".into() });
            }
            let w = wrap_vec(&f);
            if w != f {
                log::warn!("record {}: wrapped coordinate {:?} to {:?}", self.id, f.as_slice(), w.as_slice());
            }
            frac.push(w);
        }
        Crystal::new(self.species.clone(), num_species, frac, lattice_from_rows(self.lattice))
            .map_err(|e| Error::Record { id: self.id.clone(), msg: e.to_string() })
    }
}

/// Parse one JSONL line; `line` is the 1-based line number used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Record> {
    serde_json::from_str(text).map_err(|e| Error::Parse { line, msg: e.to_string() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    crystals: Vec<Crystal>,
    vocabulary: Vec<String>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, crystals: Vec<Crystal>, vocabulary: Vec<String>) -> Result<Self> {
        if ids.len() != crystals.len() {
            return Err(Error::Shape(format!("{} ids for {} crystals", ids.len(), crystals.len())));
        }
        let mut seen = HashSet::new();
        for (id, c) in ids.iter().zip(&crystals) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Record { id: id.clone(), msg: "duplicate id".into() });
            }
            if c.num_species() != vocabulary.len() {
                return Err(Error::Record {
                    id: id.clone(),
                    msg: format!("{} species channels, vocabulary has {}", c.num_species(), vocabulary.len()),
                });
            }
        }
        Ok(Self { ids, crystals, vocabulary })
    }

    pub fn empty() -> Self {
        Self { ids: Vec::new(), crystals: Vec::new(), vocabulary: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.crystals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crystals.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn crystals(&self) -> &[Crystal] {
        &self.crystals
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn num_species(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Crystal)> {
        self.ids.iter().map(String::as_str).zip(&self.crystals)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            crystals: idx.iter().map(|&i| self.crystals[i].clone()).collect(),
            vocabulary: self.vocabulary.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, c) in self.iter() {
            out.push_str(&serde_json::to_string(&Record::from_crystal(id, c)).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

fn index_vocabulary(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Parse a whole JSONL document. Blank lines are skipped. With no explicit
/// vocabulary size, channels are numbered up to the largest index seen.
pub fn parse_jsonl(text: &str, num_species: Option<usize>) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            records.push(parse_record(line, i + 1)?);
        }
    }
    from_records(records, num_species)
}

/// Largest species vocabulary a file may imply.
pub const MAX_SPECIES: usize = 1 << 16;

fn from_records(records: Vec<Record>, num_species: Option<usize>) -> Result<Dataset> {
    if records.is_empty() {
        return Ok(Dataset { vocabulary: index_vocabulary(num_species.unwrap_or(0)), ..Dataset::empty() });
    }
    let seen = records.iter().flat_map(|r| r.species.iter()).max().map_or(1, |m| m.saturating_add(1));
    let k = num_species.unwrap_or(seen);
    if k > MAX_SPECIES {
        return Err(Error::Config(format!("{k} species channels exceeds the limit of {MAX_SPECIES}")));
    }
    let crystals = records.iter().map(|r| r.to_crystal(k)).collect::<Result<Vec<_>>>()?;
    Dataset::new(records.into_iter().map(|r| r.id).collect(), crystals, index_vocabulary(k))
}

pub fn load_jsonl(path: impl AsRef<Path>, num_species: Option<usize>) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(parse_record(&line, i + 1)?);
        }
    }
    from_records(records, num_species)
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(dataset.to_jsonl().as_bytes())?;
    f.flush()?;
    Ok(())
}

pub const PEROVSKITE_VOCABULARY: [&str; 3] = ["A", "B", "X"];

/// Ideal ABX3 sites; species follow the site role (A = 0, B = 1, X = 2).
pub fn perovskite_sites() -> (Vec<usize>, Vec<Frac>) {
    (
        vec![0, 1, 2, 2, 2],
        vec![
            Frac::new(0.0, 0.0, 0.0),
            Frac::new(0.5, 0.5, 0.5),
            Frac::new(0.5, 0.5, 0.0),
            Frac::new(0.5, 0.0, 0.5),
            Frac::new(0.0, 0.5, 0.5),
        ],
    )
}

/// Cubic five-atom cells with edge in `[3.8, 4.2]` and Gaussian fractional jitter.
pub fn synth_perovskite(count: usize, jitter_sigma: f64, rng: &mut impl Rng) -> Result<Dataset> {
    if !(jitter_sigma >= 0.0) || !jitter_sigma.is_finite() {
        return Err(Error::Config(format!("jitter_sigma must be nonnegative, got {jitter_sigma}")));
    }
    let (species, ideal) = perovskite_sites();
    let noise = Normal::new(0.0, jitter_sigma).expect("finite nonnegative sigma");
    let mut crystals = Vec::with_capacity(count);
    for _ in 0..count {
        let edge = rng.random_range(3.8..=4.2);
        let frac = ideal
            .iter()
            .map(|f| {
                let d = Frac::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                wrap_vec(&(f + d))
            })
            .collect();
        crystals.push(Crystal::new(species.clone(), 3, frac, Lattice::identity() * edge)?);
    }
    let ids = (0..count).map(|k| format!("perov-{k:05}")).collect();
    Dataset::new(ids, crystals, PEROVSKITE_VOCABULARY.iter().map(|s| s.to_string()).collect())
}

/// Deterministic shuffle then contiguous train/val/test slices.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Config(format!("split fractions must be nonnegative, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total} > 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = |upto: f64| ((n as f64 * upto).round() as usize).min(n);
    let a = cut(fractions[0]);
    let b = cut(fractions[0] + fractions[1]).max(a);
    let c = cut(total).max(b);
    Ok((dataset.subset(&order[..a]), dataset.subset(&order[a..b]), dataset.subset(&order[b..c])))
}
