//! Structure matching, normalized RMSE, match rate and rank scores.
//!
//! The matcher tries every signed permutation of the predicted basis vectors,
//! gates on lattice lengths and angles, then searches periodic translations
//! seeded by aligning atoms of the rarest species. Site correspondences are the
//! optimal assignment of minimum-image distances within each species.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{lattice_parameters, min_image_distance_gram, periodic_diff, wrap_vec, Crystal, Frac, Lattice};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub stol: f64,
    pub angle_tol: f64,
    pub ltol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { stol: 0.5, angle_tol: 10.0, ltol: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched: bool,
    /// Present exactly when `matched`.
    pub rmse: Option<f64>,
    pub stol: f64,
    pub angle_tol: f64,
    pub ltol: f64,
}

/// Minimum-cost perfect matching on a square cost matrix; `result[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// The 48 signed axis permutations as `(axis order, signs)`.
fn signed_permutations() -> Vec<([usize; 3], [f64; 3])> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(48);
    for perm in PERMS {
        for bits in 0..8 {
            let sign = |k: usize| if bits >> k & 1 == 1 { -1.0 } else { 1.0 };
            out.push((perm, [sign(0), sign(1), sign(2)]));
        }
    }
    out
}

fn lattice_gate(pred: &Lattice, truth: &Lattice, tol: &Tolerances) -> bool {
    let (lp, ap) = lattice_parameters(pred);
    let (lt, at) = lattice_parameters(truth);
    (0..3).all(|k| (lp[k] / lt[k] - 1.0).abs() <= tol.ltol && (ap[k] - at[k]).abs() <= tol.angle_tol)
}

fn composition(c: &Crystal) -> Vec<usize> {
    let mut s = c.species().to_vec();
    s.sort_unstable();
    s
}

/// Per-species blocks of site indices.
fn species_blocks(c: &Crystal) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in c.species().iter().enumerate() {
        m.entry(s).or_default().push(i);
    }
    m
}

/// Optimal species-respecting assignment; returns `(sum of squared distances, pred -> truth)`.
fn assign(
    pred: &[Frac],
    truth: &[Frac],
    pred_blocks: &BTreeMap<usize, Vec<usize>>,
    truth_blocks: &BTreeMap<usize, Vec<usize>>,
    metric: &Matrix3<f64>,
) -> (f64, Vec<usize>) {
    let mut map = vec![0; pred.len()];
    let mut total = 0.0;
    for (s, rows) in pred_blocks {
        let cols = &truth_blocks[s];
        let cost: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| cols.iter().map(|&j| min_image_distance_gram(metric, &(truth[j] - pred[i])).powi(2)).collect())
            .collect();
        for (r, c) in hungarian(&cost).into_iter().enumerate() {
            total += cost[r][c];
            map[rows[r]] = cols[c];
        }
    }
    (total, map)
}

/// Smallest RMS Cartesian displacement over the translation and assignment search.
fn best_site_rms(pred_frac: &[Frac], truth: &Crystal, metric: &Matrix3<f64>, pred_species: &[usize]) -> f64 {
    let n = truth.num_atoms();
    let truth_frac = truth.frac_coords();
    let truth_blocks = species_blocks(truth);
    let mut pred_blocks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in pred_species.iter().enumerate() {
        pred_blocks.entry(s).or_default().push(i);
    }
    let (_, anchor_block) = truth_blocks.iter().min_by_key(|(s, v)| (v.len(), **s)).expect("nonempty crystal");
    let anchor = truth_frac[anchor_block[0]];
    let species = truth.species()[anchor_block[0]];
    let mut best = f64::INFINITY;
    for &i in &pred_blocks[&species] {
        let mut shift = anchor - pred_frac[i];
        for _ in 0..2 {
            let moved: Vec<Frac> = pred_frac.iter().map(|f| wrap_vec(&(f + shift))).collect();
            let (sq, map) = assign(&moved, truth_frac, &pred_blocks, &truth_blocks, metric);
            best = best.min((sq / n as f64).sqrt());
            let mean = moved.iter().zip(&map).map(|(f, &j)| periodic_diff(f, &truth_frac[j])).sum::<Frac>() / n as f64;
            shift += mean;
        }
    }
    best
}

pub fn match_structures(pred: &Crystal, truth: &Crystal, tol: &Tolerances) -> MatchReport {
    let miss = MatchReport { matched: false, rmse: None, stol: tol.stol, angle_tol: tol.angle_tol, ltol: tol.ltol };
    if pred.num_atoms() != truth.num_atoms() || composition(pred) != composition(truth) {
        return miss;
    }
    let n = truth.num_atoms() as f64;
    let volume = truth.volume();
    let truth_gram = truth.lattice().transpose() * truth.lattice();
    let mut best = f64::INFINITY;
    for (perm, sign) in signed_permutations() {
        let lattice = Lattice::from_fn(|r, c| pred.lattice()[(r, perm[c])] * sign[c]);
        if !lattice_gate(&lattice, truth.lattice(), tol) {
            continue;
        }
        let frac: Vec<Frac> = pred
            .frac_coords()
            .iter()
            .map(|f| wrap_vec(&Frac::from_fn(|c, _| f[perm[c]] * sign[c])))
            .collect();
        let metric = 0.5 * (lattice.transpose() * lattice + truth_gram);
        best = best.min(best_site_rms(&frac, truth, &metric, pred.species()));
    }
    if best.is_finite() && best <= tol.stol * (volume / n).cbrt() {
        MatchReport { matched: true, rmse: Some(best / (volume / n).sqrt()), ..miss }
    } else {
        miss
    }
}

/// RMS of Cartesian displacement lengths divided by `sqrt(V / n)`.
pub fn normalized_rmse(displacements: &[nalgebra::Vector3<f64>], volume: f64, n: usize) -> Result<f64> {
    if n == 0 || !(volume > 0.0) || displacements.is_empty() {
        return Err(Error::Domain("need n >= 1, V > 0 and at least one displacement".into()));
    }
    let ms = displacements.iter().map(|d| d.norm_squared()).sum::<f64>() / displacements.len() as f64;
    Ok(ms.sqrt() / (volume / n as f64).sqrt())
}

/// Percentage of matched reports.
pub fn match_rate(reports: &[MatchReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Domain("match rate of an empty list".into()));
    }
    Ok(100.0 * reports.iter().filter(|r| r.matched).count() as f64 / reports.len() as f64)
}

pub fn rank_score(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Domain("rank score of an empty list".into()));
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// Standard competition ranking (ties share the best rank, "1224").
pub fn competition_ranks(values: &[f64], higher_is_better: bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| {
            1 + values.iter().filter(|&&w| if higher_is_better { w > v } else { w < v }).count()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub structure_id: String,
    pub matched: bool,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub match_rate: f64,
    /// Mean normalized RMSE over matched structures.
    pub mean_rmse: Option<f64>,
    pub num_structures: usize,
    pub num_matched: usize,
    pub stol: f64,
    pub angle_tol: f64,
    pub ltol: f64,
}

/// Prediction ids are either a ground-truth id or `id#k`; a structure counts as
/// matched when any of its samples matches, with the best rmse among them.
pub fn evaluate(pred: &Dataset, truth: &Dataset, tol: &Tolerances) -> Result<(Vec<EvalRow>, EvalSummary)> {
    if truth.is_empty() {
        return Err(Error::Domain("no ground-truth structures".into()));
    }
    let index: BTreeMap<&str, usize> = truth.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut groups: Vec<Vec<&Crystal>> = vec![Vec::new(); truth.len()];
    for (id, c) in pred.iter() {
        let base = id.split_once('#').map_or(id, |(b, _)| b);
        let &k = index
            .get(base)
            .ok_or_else(|| Error::Record { id: id.to_string(), msg: "no ground truth with this id".into() })?;
        groups[k].push(c);
    }
    let rows: Vec<EvalRow> = truth
        .crystals()
        .par_iter()
        .zip(groups.par_iter())
        .zip(truth.ids().par_iter())
        .map(|((t, samples), id)| {
            let best = samples
                .iter()
                .filter_map(|p| match_structures(p, t, tol).rmse)
                .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.min(r))));
            EvalRow { structure_id: id.clone(), matched: best.is_some(), rmse: best }
        })
        .collect();
    let matched: Vec<f64> = rows.iter().filter_map(|r| r.rmse).collect();
    let summary = EvalSummary {
        match_rate: 100.0 * matched.len() as f64 / rows.len() as f64,
        mean_rmse: (!matched.is_empty()).then(|| matched.iter().sum::<f64>() / matched.len() as f64),
        num_structures: rows.len(),
        num_matched: matched.len(),
        stol: tol.stol,
        angle_tol: tol.angle_tol,
        ltol: tol.ltol,
    };
    Ok((rows, summary))
}

pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("structure_id,matched,rmse\n");
    for r in rows {
        let rmse = r.rmse.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.structure_id, r.matched, rmse));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_perovskite;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_crystal(rng: &mut impl Rng, n: usize) -> Crystal {
        let lattice = Lattice::from_fn(|r, c| if r == c { rng.random_range(3.5..6.0) } else { rng.random_range(-0.6..0.6) });
        let frac = (0..n).map(|_| Frac::new(rng.random(), rng.random(), rng.random())).collect();
        Crystal::new((0..n).map(|i| i % 3).collect(), 3, frac, lattice).unwrap()
    }

    fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row][c] + rec(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.len()])
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(seed in 0u64..1000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let a = hungarian(&cost);
            let mut cols = a.clone();
            cols.sort_unstable();
            prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
            let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
            prop_assert!((total - brute_force_assignment(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn self_match_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let c = random_crystal(&mut rng, 6);
            let r = match_structures(&c, &c, &Tolerances::default());
            assert!(r.matched);
            assert!(r.rmse.unwrap() < 1e-12);
            let t = Frac::new(rng.random(), rng.random(), rng.random()) * 3.0;
            let r = match_structures(&c.translated(&t).unwrap(), &c, &Tolerances::default());
            assert!(r.matched && r.rmse.unwrap() < 1e-9);
        }
    }

    #[test]
    fn large_jitter_fails_the_gate() {
        let d = synth_perovskite(1, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let truth = &d.crystals()[0];
        let threshold = 0.5 * (truth.volume() / 5.0).cbrt();
        // swap the A and B sites: A moves by half a body diagonal, far beyond the gate
        let mut frac = truth.frac_coords().to_vec();
        frac.swap(0, 1);
        let moved = truth.with_frac(frac).unwrap();
        let r = match_structures(&moved, truth, &Tolerances::default());
        assert!(!r.matched && r.rmse.is_none());
        assert!(truth.lattice()[(0, 0)] * 3f64.sqrt() / 2.0 > threshold);
        let other = Crystal::new(vec![0, 0, 2, 2, 2], 3, truth.frac_coords().to_vec(), *truth.lattice()).unwrap();
        assert!(!match_structures(&other, truth, &Tolerances::default()).matched);
    }

    #[test]
    fn lattice_gate_rejects_stretched_cells() {
        let d = synth_perovskite(1, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let truth = &d.crystals()[0];
        let stretched = truth.with_lattice(truth.lattice() * 1.5).unwrap();
        assert!(!match_structures(&stretched, truth, &Tolerances::default()).matched);
        let slightly = truth.with_lattice(truth.lattice() * 1.1).unwrap();
        assert!(match_structures(&slightly, truth, &Tolerances::default()).matched);
    }

    #[test]
    fn axis_relabeling_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_crystal(&mut rng, 5);
        let l = c.lattice();
        let swapped = Lattice::from_columns(&[l.column(2).into(), -l.column(0), l.column(1).into()]);
        let frac = c.frac_coords().iter().map(|f| wrap_vec(&Frac::new(f.z, -f.x, f.y))).collect();
        let relabeled = Crystal::new(c.species().to_vec(), 3, frac, swapped).unwrap();
        let r = match_structures(&relabeled, &c, &Tolerances::default());
        assert!(r.matched && r.rmse.unwrap() < 1e-9);
    }

    #[test]
    fn normalized_rmse_examples() {
        let v = 64.0;
        let n = 4;
        let zero = vec![nalgebra::Vector3::zeros(); 3];
        assert_eq!(normalized_rmse(&zero, v, n).unwrap(), 0.0);
        let unit = vec![nalgebra::Vector3::new(0.0, (v / n as f64).sqrt(), 0.0)];
        assert!((normalized_rmse(&unit, v, n).unwrap() - 1.0).abs() < 1e-15);
        let d = vec![nalgebra::Vector3::new(0.3, -0.1, 0.2), nalgebra::Vector3::new(0.0, 0.5, -0.4)];
        let oracle = ((0.09 + 0.01 + 0.04 + 0.25 + 0.16) / 2.0f64).sqrt() / 4.0;
        assert!((normalized_rmse(&d, v, n).unwrap() - oracle).abs() < 1e-12);
        assert!(normalized_rmse(&d, 0.0, n).is_err());
    }

    #[test]
    fn rates_and_ranks() {
        let hit = MatchReport { matched: true, rmse: Some(0.1), stol: 0.5, angle_tol: 10.0, ltol: 0.3 };
        let miss = MatchReport { matched: false, rmse: None, ..hit };
        assert_eq!(match_rate(&[hit; 3]).unwrap(), 100.0);
        assert_eq!(match_rate(&[miss; 2]).unwrap(), 0.0);
        assert_eq!(match_rate(&[hit, miss, hit, hit]).unwrap(), 75.0);
        assert_eq!(match_rate(&[hit, hit, hit, miss]).unwrap(), 75.0);
        assert!(match_rate(&[]).is_err());
        assert_eq!(rank_score(&[1, 2, 3]).unwrap(), 2.0);
        assert_eq!(rank_score(&[1, 1, 1]).unwrap(), 1.0);
        assert!(rank_score(&[]).is_err());
        assert_eq!(competition_ranks(&[3.0, 5.0, 5.0, 1.0], true), vec![3, 1, 1, 4]);
        assert_eq!(competition_ranks(&[3.0, 5.0, 5.0, 1.0], false), vec![2, 3, 3, 1]);
    }

    #[test]
    fn dataset_evaluation_groups_samples() {
        let truth = synth_perovskite(4, 0.02, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (rows, summary) = evaluate(&truth, &truth, &Tolerances::default()).unwrap();
        assert_eq!(summary.match_rate, 100.0);
        assert_eq!(rows.len(), 4);
        assert!(summary.mean_rmse.unwrap() < 1e-12);

        let wrong = truth.crystals()[0].with_lattice(truth.crystals()[0].lattice() * 2.0).unwrap();
        let preds = Dataset::new(
            vec!["perov-00000#0".into(), "perov-00000#1".into(), "perov-00001".into()],
            vec![wrong, truth.crystals()[0].clone(), truth.crystals()[0].clone()],
            truth.vocabulary().to_vec(),
        )
        .unwrap();
        let (rows, summary) = evaluate(&preds, &truth, &Tolerances::default()).unwrap();
        assert!(rows[0].matched);
        assert_eq!(summary.num_structures, 4);
        assert!(summary.num_matched >= 1 && summary.num_matched <= 2);
        let csv = report_csv(&rows);
        assert!(csv.starts_with("structure_id,matched,rmse\nperov-00000,true,"));
        assert!(csv.contains("perov-00003,false,\n"));
    }
}
