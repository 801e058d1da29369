//! Genetic-algorithm feature selection over stratified folds.
//!
//! Each fold's training portion is split again into an 80% fitting part and
//! a 20% stratified held-in slice. An individual is a feature bitmask; its
//! fitness is the headline F1 of a depth-limited tree trained on the masked
//! features of the fitting part and scored on the slice. A feature is kept
//! when it appears in the best mask of at least `ceil(folds / 3)` folds.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::MetricMode;
use crate::error::{Error, Result};
use crate::evaluation::metrics::headline_f1;
use crate::features::FeatureMatrix;
use crate::models::tree::{DecisionTree, TreeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    /// Per-bit flip probability; `1 / n_features` when absent.
    #[serde(default)]
    pub mutation_prob: Option<f64>,
    pub tournament: usize,
    pub holdout: f64,
    pub tree: TreeParams,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population: 50,
            generations: 40,
            crossover_prob: 0.7,
            mutation_prob: None,
            tournament: 3,
            holdout: 0.2,
            tree: TreeParams::default(),
            seed: 0,
        }
    }
}

pub type Mask = Vec<bool>;

/// Fold-internal fitness with memoization.
pub struct Fitness<'a> {
    fit_cols: Vec<Vec<f64>>,
    fit_y: Vec<usize>,
    val_rows: Vec<&'a [f64]>,
    val_y: Vec<usize>,
    tree: TreeParams,
    mode: MetricMode,
    cache: Mutex<HashMap<Mask, f64>>,
}

/// Stratified assignment of `idx` into `k` groups; deterministic per seed.
pub fn stratified_groups(idx: &[usize], y: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = vec![Vec::new(); k];
    let mut slot = 0;
    for class in 0..2 {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            groups[slot % k].push(i);
            slot += 1;
        }
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups
}

/// Stratified holdout: `round(frac * n_c)` of each class, at least one when
/// the class has two or more members.
fn stratified_holdout(idx: &[usize], y: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for class in 0..2 {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        let mut k = (frac * members.len() as f64).round() as usize;
        if k == 0 && members.len() >= 2 {
            k = 1;
        }
        val.extend_from_slice(&members[..k]);
        fit.extend_from_slice(&members[k..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

impl<'a> Fitness<'a> {
    pub fn new(rows: &[&'a [f64]], y: &[usize], params: &GaParams, mode: MetricMode, seed: u64) -> Result<Self> {
        let idx: Vec<usize> = (0..rows.len()).collect();
        let (fit, val) = stratified_holdout(&idx, y, params.holdout, seed ^ 0x5eed);
        if fit.is_empty() || val.is_empty() {
            return Err(Error::validation("fold too small for a held-in validation slice"));
        }
        let width = rows.first().map_or(0, |r| r.len());
        Ok(Fitness {
            fit_cols: (0..width).map(|j| fit.iter().map(|&i| rows[i][j]).collect()).collect(),
            fit_y: fit.iter().map(|&i| y[i]).collect(),
            val_rows: val.iter().map(|&i| rows[i]).collect(),
            val_y: val.iter().map(|&i| y[i]).collect(),
            tree: params.tree.clone(),
            mode,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn width(&self) -> usize {
        self.fit_cols.len()
    }

    fn compute(&self, mask: &[bool]) -> f64 {
        let chosen: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        if chosen.is_empty() {
            return 0.0;
        }
        let cols: Vec<&[f64]> = chosen.iter().map(|&j| self.fit_cols[j].as_slice()).collect();
        let names: Vec<String> = chosen.iter().map(|j| j.to_string()).collect();
        let Ok(tree) = DecisionTree::fit_columns(&cols, &self.fit_y, &names, &names, &self.tree) else {
            return 0.0;
        };
        let mut row = vec![0.0; chosen.len()];
        let pred: Vec<usize> = self
            .val_rows
            .iter()
            .map(|r| {
                for (k, &j) in chosen.iter().enumerate() {
                    row[k] = r[j];
                }
                tree.predict(&row)
            })
            .collect();
        headline_f1(&pred, &self.val_y, self.mode)
    }

    pub fn evaluate(&self, mask: &[bool]) -> f64 {
        if let Some(&v) = self.cache.lock().unwrap().get(mask) {
            return v;
        }
        let v = self.compute(mask);
        self.cache.lock().unwrap().insert(mask.to_vec(), v);
        v
    }

    pub fn is_evaluated(&self, mask: &[bool]) -> bool {
        self.cache.lock().unwrap().contains_key(mask)
    }

    /// Distinct masks evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub mask: Mask,
    pub fitness: f64,
    pub evaluations: usize,
}

fn better(a: (f64, &Mask), b: (f64, &Mask)) -> bool {
    // Higher fitness, then fewer features, then lexicographically smaller mask.
    let ca = a.1.iter().filter(|&&x| x).count();
    let cb = b.1.iter().filter(|&&x| x).count();
    a.0 > b.0 || (a.0 == b.0 && (ca < cb || (ca == cb && a.1 < b.1)))
}

fn repair(mask: &mut Mask, rng: &mut ChaCha8Rng) {
    if !mask.iter().any(|&b| b) {
        let j = rng.gen_range(0..mask.len());
        mask[j] = true;
    }
}

/// Flips random bits until `seen` rejects the mask, giving up after a few tries.
fn dedup(mut mask: Mask, seen: impl Fn(&Mask) -> bool, rng: &mut ChaCha8Rng) -> Mask {
    for _ in 0..4 * mask.len() {
        if !seen(&mask) {
            break;
        }
        let j = rng.gen_range(0..mask.len());
        mask[j] = !mask[j];
        repair(&mut mask, rng);
    }
    mask
}

/// Runs the GA on one fold and returns the best mask ever evaluated.
pub fn run_ga(fitness: &Fitness, params: &GaParams, seed: u64) -> Result<FoldResult> {
    let n = fitness.width();
    if n == 0 {
        return Err(Error::validation("no features to select from"));
    }
    if params.population < 2 || params.tournament == 0 {
        return Err(Error::Config("GA needs population >= 2 and tournament >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pm = params.mutation_prob.unwrap_or(1.0 / n as f64);
    let mut pop: Vec<Mask> = (0..params.population)
        .map(|_| {
            let mut m: Mask = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            repair(&mut m, &mut rng);
            m
        })
        .collect();
    let mut best: Option<(f64, Mask)> = None;

    for gen in 0..=params.generations {
        let scores: Vec<f64> = pop.par_iter().map(|m| fitness.evaluate(m)).collect();
        for (s, m) in scores.iter().zip(&pop) {
            if best.as_ref().is_none_or(|(bs, bm)| better((*s, m), (*bs, bm))) {
                best = Some((*s, m.clone()));
            }
        }
        if gen == params.generations {
            break;
        }
        let pick = |rng: &mut ChaCha8Rng| -> Mask {
            let mut champ = rng.gen_range(0..pop.len());
            for _ in 1..params.tournament {
                let c = rng.gen_range(0..pop.len());
                if scores[c] > scores[champ] {
                    champ = c;
                }
            }
            pop[champ].clone()
        };
        let mut next: Vec<Mask> = Vec::with_capacity(pop.len());
        // Elitism: the best mask so far always survives.
        next.push(best.as_ref().expect("population evaluated").1.clone());
        while next.len() < pop.len() {
            let mut a = pick(&mut rng);
            let mut b = pick(&mut rng);
            if n > 1 && rng.gen_bool(params.crossover_prob) {
                let cut = rng.gen_range(1..n);
                for j in cut..n {
                    std::mem::swap(&mut a[j], &mut b[j]);
                }
            }
            for child in [&mut a, &mut b] {
                for bit in child.iter_mut() {
                    if rng.gen_bool(pm.clamp(0.0, 1.0)) {
                        *bit = !*bit;
                    }
                }
                repair(child, &mut rng);
            }
            for child in [a, b] {
                if next.len() < pop.len() {
                    let fresh = dedup(child, |m| next.contains(m) || fitness.is_evaluated(m), &mut rng);
                    next.push(fresh);
                }
            }
        }
        pop = next;
    }
    let (fitness_value, mask) = best.expect("population evaluated");
    Ok(FoldResult { mask, fitness: fitness_value, evaluations: fitness.evaluations() })
}

/// GA on one fold's rows.
pub fn ga_select_fold(rows: &[&[f64]], y: &[usize], params: &GaParams, mode: MetricMode, seed: u64) -> Result<FoldResult> {
    if !(y.contains(&0) && y.contains(&1)) {
        return Err(Error::validation("fold holds a single class"));
    }
    let fitness = Fitness::new(rows, y, params, mode, seed)?;
    run_ga(&fitness, params, seed)
}

/// Best mask by enumerating all non-empty subsets; for small widths only.
pub fn exhaustive_best(fitness: &Fitness) -> (Mask, f64) {
    let n = fitness.width();
    assert!(n <= 20, "exhaustive search over {n} features");
    let masks: Vec<Mask> = (1u32..(1 << n)).map(|bits| (0..n).map(|j| bits >> j & 1 == 1).collect()).collect();
    let scores: Vec<f64> = masks.par_iter().map(|m| fitness.evaluate(m)).collect();
    let mut best = 0;
    for i in 1..masks.len() {
        if better((scores[i], &masks[i]), (scores[best], &masks[best])) {
            best = i;
        }
    }
    (masks[best].clone(), scores[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub feature_ids: Vec<String>,
    pub counts: Vec<usize>,
    pub selected: Vec<bool>,
    pub folds: usize,
    pub threshold: usize,
    pub ga: GaParams,
    pub mode: MetricMode,
    pub fitness: String,
    pub fold_results: Vec<FoldResult>,
}

pub fn threshold_for(folds: usize) -> usize {
    folds.div_ceil(3)
}

impl SelectionReport {
    pub fn selected_ids(&self) -> Vec<String> {
        self.feature_ids
            .iter()
            .zip(&self.selected)
            .filter(|(_, &s)| s)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Same counts under a different threshold.
    pub fn with_threshold(&self, threshold: usize) -> SelectionReport {
        let mut r = self.clone();
        r.threshold = threshold;
        r.selected = r.counts.iter().map(|&c| c >= threshold).collect();
        r
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        matrix.select_columns(&self.selected_ids())
    }
}

/// Runs the GA on each fold's training portion (folds in parallel) and
/// keeps features picked in at least `ceil(folds / 3)` of them.
pub fn select(matrix: &FeatureMatrix, y: &[usize], folds: usize, params: &GaParams, mode: MetricMode) -> Result<SelectionReport> {
    if folds < 2 {
        return Err(Error::validation("need at least 2 folds"));
    }
    if y.len() != matrix.height() {
        return Err(Error::Internal(format!("{} labels for {} rows", y.len(), matrix.height())));
    }
    for class in 0..2 {
        let n = y.iter().filter(|&&c| c == class).count();
        if n < folds {
            return Err(Error::validation(format!(
                "class {class} has {n} rows, fewer than {folds} folds; use at most {n} folds"
            )));
        }
    }
    let all: Vec<usize> = (0..y.len()).collect();
    let groups = stratified_groups(&all, y, folds, params.seed);
    let rows: Vec<&[f64]> = (0..matrix.height()).map(|i| matrix.row(i)).collect();
    let results: Vec<FoldResult> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != k)
                .flat_map(|(_, m)| m.iter().copied())
                .collect();
            let fold_rows: Vec<&[f64]> = train.iter().map(|&i| rows[i]).collect();
            let fold_y: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let seed = params.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            ga_select_fold(&fold_rows, &fold_y, params, mode, seed)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0; matrix.width()];
    for r in &results {
        for (c, &b) in counts.iter_mut().zip(&r.mask) {
            *c += b as usize;
        }
    }
    let threshold = threshold_for(folds);
    Ok(SelectionReport {
        feature_ids: matrix.descriptors.iter().map(|d| d.id.clone()).collect(),
        selected: counts.iter().map(|&c| c >= threshold).collect(),
        counts,
        folds,
        threshold,
        ga: params.clone(),
        mode,
        fitness: format!(
            "headline F1 ({mode:?}) of a depth-{} tree fitted on {}% of the fold's training rows and scored on a stratified {}% slice",
            params.tree.max_depth,
            (100.0 * (1.0 - params.holdout)).round(),
            (100.0 * params.holdout).round()
        ),
        fold_results: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureDescriptor, FeatureKind};

    /// Features 0 and 1 jointly decide the label (xor), the rest is noise.
    fn planted(n: usize, width: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..width).map(|_| rng.gen_range(0..2) as f64).collect();
            y.push(((r[0] > 0.5) ^ (r[1] > 0.5)) as usize);
            rows.push(r);
        }
        (rows, y)
    }

    fn quick() -> GaParams {
        GaParams { population: 20, generations: 15, ..GaParams::default() }
    }

    #[test]
    fn planted_pair_is_found_and_matches_brute_force() {
        let (rows, y) = planted(300, 10, 1);
        let views: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let fitness = Fitness::new(&views, &y, &quick(), MetricMode::Macro, 7).unwrap();
        let (best_mask, best) = exhaustive_best(&fitness);
        assert!(best_mask[0] && best_mask[1]);
        assert_eq!(best, 1.0);
        let ga = run_ga(&fitness, &quick(), 7).unwrap();
        assert!(ga.mask[0] && ga.mask[1], "{:?}", ga.mask);
        assert!(ga.fitness >= 0.98 * best);
    }

    #[test]
    fn single_feature_is_forced_in() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64]).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let views: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let r = ga_select_fold(&views, &y, &quick(), MetricMode::Macro, 0).unwrap();
        assert_eq!(r.mask, [true]);
    }

    #[test]
    fn deterministic_per_seed() {
        let (rows, y) = planted(200, 8, 2);
        let views: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let a = ga_select_fold(&views, &y, &quick(), MetricMode::PositiveClass, 3).unwrap();
        let b = ga_select_fold(&views, &y, &quick(), MetricMode::PositiveClass, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_masks_are_repaired() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = vec![false; 5];
        repair(&mut m, &mut rng);
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn threshold_arithmetic() {
        assert_eq!(threshold_for(15), 5);
        assert_eq!(threshold_for(10), 4);
        assert_eq!(threshold_for(3), 1);
        let r = SelectionReport {
            feature_ids: vec!["a".into(), "b".into(), "c".into()],
            counts: vec![5, 4, 15],
            selected: vec![],
            folds: 15,
            threshold: 0,
            ga: GaParams::default(),
            mode: MetricMode::Macro,
            fitness: String::new(),
            fold_results: vec![],
        }
        .with_threshold(5);
        assert_eq!(r.selected, [true, false, true]);
    }

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        let w = rows[0].len();
        FeatureMatrix::new(
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            (0..w)
                .map(|j| FeatureDescriptor {
                    id: format!("f{j}"),
                    kind: FeatureKind::Ef,
                    label: format!("f{j}"),
                    source: j.to_string(),
                })
                .collect(),
            rows.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn select_over_folds() {
        let (rows, y) = planted(300, 6, 5);
        let m = matrix(&rows);
        let p = GaParams { population: 16, generations: 8, ..GaParams::default() };
        let r = select(&m, &y, 5, &p, MetricMode::Macro).unwrap();
        assert_eq!(r.threshold, 2);
        assert!(r.counts.iter().all(|&c| c <= 5));
        assert!(r.selected[0] && r.selected[1]);
        assert_eq!(r.apply(&m).unwrap().width(), r.selected_ids().len());
        let again = select(&m, &y, 5, &p, MetricMode::Macro).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn too_many_folds_for_a_rare_class() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..30).map(|i| (i < 3) as usize).collect();
        let err = select(&matrix(&rows), &y, 5, &quick(), MetricMode::Macro).unwrap_err();
        assert!(err.to_string().contains("at most 3 folds"));
    }

    #[test]
    fn stratified_groups_balance_classes() {
        let y: Vec<usize> = (0..100).map(|i| (i % 10 == 0) as usize).collect();
        let idx: Vec<usize> = (0..100).collect();
        let g = stratified_groups(&idx, &y, 5, 1);
        for grp in &g {
            assert_eq!(grp.len(), 20);
            assert_eq!(grp.iter().filter(|&&i| y[i] == 1).count(), 2);
        }
    }
}
