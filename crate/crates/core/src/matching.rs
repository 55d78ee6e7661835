//! Per-pair matching cost and the optimal one-to-one assignment between
//! padded ground-truth slots and predictions.

use serde::{Deserialize, Serialize};

use crate::data::{TargetInstance, TargetSet};
use crate::geometry::{box_l1, giou, Box};
use crate::model::{PredictionRow, PredictionSet};
use crate::{Error, Result};

/// Weights of the compound matching cost. `sigma` weighs the head, gaze
/// location and gaze object groups; each `alpha_*` pair weighs the two terms
/// inside a group; each `beta_*` pair weighs L1 against GIoU in a box cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub sigma: [f64; 3],
    pub alpha_head: [f64; 2],
    pub alpha_gaze_location: [f64; 2],
    pub alpha_gaze_object: [f64; 2],
    pub beta_head_box: [f64; 2],
    pub beta_gaze_box: [f64; 2],
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            sigma: [2.0, 1.0, 1.0],
            alpha_head: [2.0, 1.0],
            alpha_gaze_location: [2.0, 1.0],
            alpha_gaze_object: [1.0, 2.0],
            beta_head_box: [1.0, 2.5],
            beta_gaze_box: [1.0, 2.5],
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .sigma
            .iter()
            .chain(&self.alpha_head)
            .chain(&self.alpha_gaze_location)
            .chain(&self.alpha_gaze_object)
            .chain(&self.beta_head_box)
            .chain(&self.beta_gaze_box);
        for &v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("cost weights must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `beta_1 * L1 - beta_2 * GIoU`.
pub fn box_cost(pred: &Box, target: &Box, beta: [f64; 2]) -> f64 {
    beta[0] * box_l1(pred, target) - beta[1] * giou(pred, target)
}

/// Root-mean-square difference over heatmap cells.
pub fn heatmap_distance(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    (ss / pred.len() as f64).sqrt()
}

/// Cost of assigning a real target to a prediction.
pub fn pair_cost(t: &TargetInstance, o: &PredictionRow, w: &CostWeights) -> f64 {
    let head = w.alpha_head[0] * box_cost(&o.head_box, &t.head_box, w.beta_head_box) - w.alpha_head[1] * o.head_conf[0];

    let inside = t.watch_inside();
    let watch = if inside { o.watch[0] } else { o.watch[1] };
    let location = if inside {
        heatmap_distance(o.heatmap.values(), t.heatmap.values())
    } else {
        0.0
    };
    let gaze_location = w.alpha_gaze_location[0] * location - w.alpha_gaze_location[1] * watch;

    let gaze_object = if inside {
        let b = if t.has_gaze_box {
            box_cost(&o.gaze_box, &t.gaze_box, w.beta_gaze_box)
        } else {
            0.0
        };
        w.alpha_gaze_object[0] * b - w.alpha_gaze_object[1] * o.gaze_class[t.class_index]
    } else {
        0.0
    };

    w.sigma[0] * head + w.sigma[1] * gaze_location + w.sigma[2] * gaze_object
}

/// Row-major `N_q x N_q` matrix. Rows past the real targets are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("cost matrix must be square, got {n} rows of unequal length")));
        }
        Ok(Self {
            n,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn full_cost(targets: &TargetSet, preds: &PredictionSet, w: &CostWeights) -> Result<CostMatrix> {
    let n = targets.num_queries;
    if preds.len() != n {
        return Err(Error::Shape(format!(
            "{} predictions for {n} target slots",
            preds.len()
        )));
    }
    let mut values = vec![0.0; n * n];
    for (i, t) in targets.instances.iter().enumerate() {
        for (j, o) in preds.iter().enumerate() {
            values[i * n + j] = pair_cost(t, o, w);
        }
    }
    Ok(CostMatrix { n, values })
}

/// `slot_to_pred[i]` is the prediction assigned to target slot `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub slot_to_pred: Vec<usize>,
}

impl Assignment {
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.slot_to_pred.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }

    /// `pred_to_slot[j]`, the inverse permutation.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.slot_to_pred.len()];
        for (i, &j) in self.slot_to_pred.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.slot_to_pred.len()];
        self.slot_to_pred.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

/// Minimum-cost assignment of `rows` (a subset of rows) onto `cols`, by
/// shortest augmenting paths with potentials. Returns the chosen column
/// position for each row and the total.
fn hungarian(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (1-based, 0 = free).
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost.get(rows[i], cols[row_to_col[i]])).sum();
    (row_to_col, total)
}

/// Optimal bijection. Among optimal assignments (within a relative
/// tolerance of 1e-9) the lexicographically smallest `slot_to_pred` wins.
pub fn solve_assignment(cost: &CostMatrix) -> Result<Assignment> {
    if let Some(pos) = cost.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "cost matrix entry ({}, {}) is {}",
            pos / cost.n,
            pos % cost.n,
            cost.values[pos]
        )));
    }
    let n = cost.n;
    if n == 0 {
        return Ok(Assignment { slot_to_pred: vec![] });
    }
    let all: Vec<usize> = (0..n).collect();
    let (first, best) = hungarian(cost, &all, &all);
    let scale = cost.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * n as f64;

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut slot_to_pred = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut free_cols = all.clone();
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (k, &j) in free_cols.iter().enumerate() {
            let mut cols = free_cols.clone();
            cols.remove(k);
            let rest = if rest_rows.is_empty() {
                0.0
            } else {
                hungarian(cost, &rest_rows, &cols).1
            };
            if fixed + cost.get(i, j) + rest <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        // Rounding can in principle reject every column; fall back to the
        // plain solver's choice, which is optimal by construction.
        let k = chosen.unwrap_or_else(|| free_cols.iter().position(|&j| j == first[i]).unwrap_or(0));
        let j = free_cols.remove(k);
        fixed += cost.get(i, j);
        slot_to_pred.push(j);
    }
    Ok(Assignment { slot_to_pred })
}

/// Plain optimal assignment without the tie-break, for callers that only
/// need the total.
pub fn min_total(cost: &CostMatrix) -> Result<f64> {
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cost matrix has non-finite entries".into()));
    }
    let all: Vec<usize> = (0..cost.n).collect();
    Ok(hungarian(cost, &all, &all).1)
}

/// Matches every image of a batch in parallel.
pub fn match_batch(targets: &[TargetSet], preds: &[PredictionSet], w: &CostWeights) -> Result<Vec<Assignment>> {
    use rayon::prelude::*;
    if targets.len() != preds.len() {
        return Err(Error::Shape(format!("{} target sets for {} predictions", targets.len(), preds.len())));
    }
    targets
        .par_iter()
        .zip(preds.par_iter())
        .map(|(t, p)| solve_assignment(&full_cost(t, p, w)?))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{render_gaussian_heatmap, Heatmap, Point2D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Exhaustive oracle: every permutation, lexicographic order.
    pub(crate) fn brute_force(cost: &CostMatrix) -> (f64, Vec<usize>) {
        fn rec(cost: &CostMatrix, i: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
            let n = cost.n;
            if i == n {
                if acc < best.0 {
                    *best = (acc, cur.clone());
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(cost, i + 1, used, cur, acc + cost.get(i, j), best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(cost, 0, &mut vec![false; cost.n], &mut vec![], 0.0, &mut best);
        best
    }

    fn random_matrix(rng: &mut impl Rng, n: usize) -> CostMatrix {
        CostMatrix {
            n,
            values: (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect(),
        }
    }

    pub(crate) fn target(head: Box, inside: bool, point: Point2D, object: Option<(Box, usize)>, n_cat: usize, hm: usize) -> TargetInstance {
        TargetInstance {
            head_box: head,
            watch_in_out: if inside { [1.0, 0.0] } else { [0.0, 1.0] },
            heatmap: if inside {
                render_gaussian_heatmap(point, hm, hm, 1.0)
            } else {
                Heatmap::zeros(hm, hm)
            },
            gaze_box: object.map_or(Box::degenerate(), |o| o.0),
            has_gaze_box: object.is_some(),
            class_index: object.map_or(n_cat, |o| o.1),
            gaze_point: inside.then_some(point),
        }
    }

    /// A prediction that reproduces `t` with confidence 1 in every head.
    pub(crate) fn perfect(t: &TargetInstance, n_cat: usize) -> PredictionRow {
        let mut gaze_class = vec![0.0; n_cat + 1];
        gaze_class[t.class_index] = 1.0;
        PredictionRow {
            head_box: t.head_box,
            head_conf: [1.0, 0.0],
            watch: t.watch_in_out,
            heatmap: t.heatmap.clone(),
            gaze_box: if t.has_gaze_box { t.gaze_box } else { Box::new(0.4, 0.4, 0.6, 0.6) },
            gaze_class,
        }
    }

    #[test]
    fn perfect_prediction_cost_is_the_negated_weight_sum() {
        let w = CostWeights::default();
        let t = target(
            Box::new(0.1, 0.1, 0.2, 0.25),
            true,
            Point2D::new(0.6, 0.7),
            Some((Box::new(0.5, 0.6, 0.7, 0.8), 2)),
            4,
            16,
        );
        let c = pair_cost(&t, &perfect(&t, 4), &w);
        let expected = w.sigma[0] * w.alpha_head[0] * (-w.beta_head_box[1])
            + w.sigma[0] * w.alpha_head[1] * (-1.0)
            + w.sigma[1] * w.alpha_gaze_location[1] * (-1.0)
            + w.sigma[2] * w.alpha_gaze_object[0] * (-w.beta_gaze_box[1])
            + w.sigma[2] * w.alpha_gaze_object[1] * (-1.0);
        assert!((c - expected).abs() < 1e-12, "{c} vs {expected}");
        // 2*2*(-2.5) - 2 - 1 - 2.5 - 2
        assert!((c + 17.5).abs() < 1e-12);
    }

    #[test]
    fn doubling_sigma_one_scales_only_the_head_group() {
        let t = target(Box::new(0.1, 0.1, 0.3, 0.3), true, Point2D::new(0.5, 0.5), Some((Box::new(0.4, 0.4, 0.6, 0.6), 0)), 3, 8);
        let mut o = perfect(&t, 3);
        o.head_box = Box::new(0.15, 0.12, 0.35, 0.3);
        o.head_conf = [0.7, 0.3];
        o.gaze_class = vec![0.5, 0.2, 0.2, 0.1];
        let w = CostWeights::default();
        let head_only = CostWeights { sigma: [1.0, 0.0, 0.0], ..w };
        let w2 = CostWeights { sigma: [2.0 * w.sigma[0], w.sigma[1], w.sigma[2]], ..w };
        let delta = pair_cost(&t, &o, &w2) - pair_cost(&t, &o, &w);
        assert!((delta - w.sigma[0] * pair_cost(&t, &o, &head_only)).abs() < 1e-12);
    }

    #[test]
    fn out_of_frame_targets_ignore_gaze_heads() {
        let w = CostWeights::default();
        let t = target(Box::new(0.1, 0.1, 0.2, 0.2), false, Point2D::new(0.0, 0.0), None, 3, 8);
        let a = perfect(&t, 3);
        let mut b = a.clone();
        b.heatmap = Heatmap::from_values(8, 8, vec![0.9; 64]);
        b.gaze_box = Box::new(0.0, 0.0, 0.1, 0.1);
        b.gaze_class = vec![1.0, 0.0, 0.0, 0.0];
        assert_eq!(pair_cost(&t, &a, &w), pair_cost(&t, &b, &w));
        // An inside prediction costs more than an outside one.
        let mut c = a.clone();
        c.watch = [0.9, 0.1];
        assert!(pair_cost(&t, &c, &w) > pair_cost(&t, &a, &w));
    }

    #[test]
    fn padding_rows_are_zero() {
        let t = target(Box::new(0.1, 0.1, 0.2, 0.2), true, Point2D::new(0.5, 0.5), None, 2, 8);
        let set = TargetSet {
            num_queries: 3,
            num_categories: 2,
            instances: vec![t.clone()],
        };
        let mut preds = vec![perfect(&t, 2); 3];
        preds[1].head_box = Box::new(0.5, 0.5, 0.9, 0.9);
        let c = full_cost(&set, &preds, &CostWeights::default()).unwrap();
        assert!((1..3).all(|i| (0..3).all(|j| c.get(i, j) == 0.0)));
        assert!(c.values.iter().all(|v| v.is_finite()));
        assert_ne!(c.get(0, 0), c.get(0, 1));

        let swapped = vec![preds[1].clone(), preds[0].clone(), preds[2].clone()];
        let c2 = full_cost(&set, &swapped, &CostWeights::default()).unwrap();
        assert_eq!(c2.get(0, 0), c.get(0, 1));
        assert_eq!(c2.get(0, 1), c.get(0, 0));
    }

    #[test]
    fn small_matrices() {
        let id = CostMatrix::from_rows(vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(solve_assignment(&id).unwrap().slot_to_pred, vec![0, 1, 2]);
        let m = CostMatrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = solve_assignment(&m).unwrap();
        assert_eq!(a.slot_to_pred, vec![0, 1]);
        assert_eq!(a.total(&m), 2.0);
        let zeros = CostMatrix { n: 4, values: vec![0.0; 16] };
        assert_eq!(solve_assignment(&zeros).unwrap().slot_to_pred, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_resolve_to_the_lexicographic_minimum() {
        // Rows 0 and 2 can swap columns 1 and 2 at equal cost.
        let m = CostMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(solve_assignment(&m).unwrap().slot_to_pred, vec![1, 0, 2]);
        assert_eq!(brute_force(&m).1, vec![1, 0, 2]);
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let m = CostMatrix::from_rows(vec![vec![0.0, f64::NAN], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(solve_assignment(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn agrees_with_exhaustive_search() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            for _ in 0..40 {
                let m = random_matrix(&mut rng, n);
                let a = solve_assignment(&m).unwrap();
                let (best, lex) = brute_force(&m);
                assert!(a.is_permutation());
                assert!((a.total(&m) - best).abs() < 1e-9);
                assert_eq!(a.slot_to_pred, lex);
            }
        }
    }

    #[test]
    fn integer_ties_match_exhaustive_lexicographic_choice() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..=6);
            let m = CostMatrix {
                n,
                values: (0..n * n).map(|_| rng.random_range(0..3) as f64).collect(),
            };
            assert_eq!(solve_assignment(&m).unwrap().slot_to_pred, brute_force(&m).1);
        }
    }

    proptest! {
        #[test]
        fn row_shift_keeps_the_optimum(seed in any::<u64>(), row in 0usize..5, shift in -10.0f64..10.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 5);
            let mut shifted = m.clone();
            for j in 0..5 {
                shifted.values[row * 5 + j] += shift;
            }
            let a = solve_assignment(&m).unwrap();
            let b = solve_assignment(&shifted).unwrap();
            // Same optimal total on the original matrix, whichever is returned.
            prop_assert!((a.total(&m) - b.total(&m)).abs() < 1e-9);
        }

        #[test]
        fn never_worse_than_identity(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n);
            let a = solve_assignment(&m).unwrap();
            let identity: f64 = (0..n).map(|i| m.get(i, i)).sum();
            prop_assert!(a.total(&m) <= identity + 1e-9);
            prop_assert!(a.is_permutation());
        }
    }
}
