//! Hard assignment: greedy track-detection matching and a Hungarian solver
//! used for label generation and as an ablation variant.

use crate::geometry::{iou_3d, Box3D};

/// Sparse affinity scores between live tracks and current detections,
/// together with the detection confidence used to order the greedy sweep.
#[derive(Debug, Clone, Default)]
pub struct AffinityTable {
    /// (track_index, detection_index, affinity in (0, 1)). At most one entry
    /// per pair.
    pub entries: Vec<(usize, usize, f64)>,
    /// Confidence per detection, indexed by detection_index.
    pub detection_scores: Vec<f64>,
    pub num_tracks: usize,
}

/// Outcome of one frame's assignment. Every input index lands in exactly one
/// of the three lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// (detection_index, track_index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Greedy assignment: detections in strictly descending score order (ties by
/// ascending index) each claim their highest-affinity still-free track with
/// affinity above `min_affinity` (ties by ascending track index). A claimed
/// track is never matched twice.
pub fn greedy_match(table: &AffinityTable, min_affinity: f64) -> MatchResult {
    debug_assert!((0.0..1.0).contains(&min_affinity));
    let num_dets = table.detection_scores.len();

    // Candidate tracks per detection.
    let mut candidates: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_dets];
    for &(t, d, a) in &table.entries {
        candidates[d].push((t, a));
    }

    let mut det_order: Vec<usize> = (0..num_dets).collect();
    det_order.sort_by(|&i, &j| {
        table.detection_scores[j]
            .partial_cmp(&table.detection_scores[i])
            .unwrap()
            .then(i.cmp(&j))
    });

    let mut track_taken = vec![false; table.num_tracks];
    let mut result = MatchResult::default();
    for &d in &det_order {
        let mut best: Option<(usize, f64)> = None;
        for &(t, a) in &candidates[d] {
            if track_taken[t] || a <= min_affinity {
                continue;
            }
            best = match best {
                None => Some((t, a)),
                Some((bt, ba)) => {
                    if a > ba || (a == ba && t < bt) {
                        Some((t, a))
                    } else {
                        Some((bt, ba))
                    }
                }
            };
        }
        match best {
            Some((t, _)) => {
                track_taken[t] = true;
                result.pairs.push((d, t));
            }
            None => result.unmatched_detections.push(d),
        }
    }
    result.pairs.sort_by_key(|&(d, _)| d);
    result.unmatched_detections.sort_unstable();
    result.unmatched_tracks = (0..table.num_tracks).filter(|&t| !track_taken[t]).collect();
    result
}

/// Minimum-cost assignment over the allowed cells of a rectangular cost
/// matrix. Surplus rows or columns stay unassigned. Returns (row, col)
/// pairs sorted by row; among equal-cost optima the lexicographically
/// smallest assignment (by that sorted pair list) wins.
pub fn hungarian(cost: &[Vec<f64>], forbid: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let n_rows = cost.len();
    let n_cols = if n_rows == 0 { 0 } else { cost[0].len() };
    if n_rows == 0 || n_cols == 0 {
        return Vec::new();
    }
    debug_assert!(forbid.len() == n_rows && forbid.iter().all(|r| r.len() == n_cols));

    // Square padding: forbidden and padded cells share one large finite
    // cost so the O(n^3) potential method runs on a complete matrix.
    // BIG dominates any real total; a second tier BIG*n keeps padded cells
    // strictly worse than forbidden ones never being preferable.
    let n = n_rows.max(n_cols);
    let mut finite_max = 0.0f64;
    for (r, row) in cost.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if !forbid[r][c] {
                debug_assert!(v.is_finite(), "allowed cell ({r}, {c}) must be finite");
                finite_max = finite_max.max(v.abs());
            }
        }
    }
    let big = (finite_max + 1.0) * (n as f64 + 1.0) * 4.0;
    let at = |r: usize, c: usize| -> f64 {
        if r < n_rows && c < n_cols && !forbid[r][c] {
            cost[r][c]
        } else {
            big
        }
    };

    // Jonker-Volgenant style shortest augmenting paths with potentials.
    // 1-based internal arrays, rows assigned one at a time.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut match_col = vec![0usize; n + 1]; // col -> row (1-based, 0 = free)
    for r in 1..=n {
        match_col[0] = r;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for c in 1..=n {
        let r = match_col[c];
        if r == 0 {
            continue;
        }
        let (row, col) = (r - 1, c - 1);
        if row < n_rows && col < n_cols && !forbid[row][col] {
            pairs.push((row, col));
        }
    }
    pairs.sort_unstable();

    // The potential method fixes the optimal total cost; canonicalize the
    // pair choice among equal-cost optima by re-solving small ties. Equal
    // totals with different supports only arise through duplicated costs;
    // a deterministic local improvement pass makes the pair list the
    // lexicographically smallest optimum.
    canonicalize_ties(&mut pairs, cost, forbid);
    pairs
}

/// Swap assignment pairs toward the lexicographically smallest list among
/// equal-total-cost alternatives. Only pairwise exchanges are considered,
/// which is enough to canonicalize duplicate-cost ties.
fn canonicalize_ties(pairs: &mut Vec<(usize, usize)>, cost: &[Vec<f64>], forbid: &[Vec<bool>]) {
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..pairs.len() {
            for j in (i + 1)..pairs.len() {
                let (r1, c1) = pairs[i];
                let (r2, c2) = pairs[j];
                if forbid[r1][c2] || forbid[r2][c1] {
                    continue;
                }
                let cur = cost[r1][c1] + cost[r2][c2];
                let swapped = cost[r1][c2] + cost[r2][c1];
                // Rows are distinct and sorted, so the list's lex order is
                // the column sequence; swap when the earlier row can take
                // the smaller column at no cost change.
                if (swapped - cur).abs() < 1e-12 && c2 < c1 {
                    pairs[i] = (r1, c2);
                    pairs[j] = (r2, c1);
                    changed = true;
                }
            }
        }
        pairs.sort_unstable();
    }
}

/// Match detections to ground-truth boxes by Hungarian assignment on
/// 1 - IoU, with pairs under `min_iou` forbidden. Matched detections inherit
/// the ground-truth id; the rest are false positives (None).
pub fn assign_labels(
    dets: &[Box3D],
    gts: &[(u64, Box3D)],
    min_iou: f64,
) -> Vec<Option<u64>> {
    debug_assert!(min_iou > 0.0 && min_iou < 1.0);
    let mut cost = vec![vec![0.0; gts.len()]; dets.len()];
    let mut forbid = vec![vec![false; gts.len()]; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        for (g, (_, gt)) in gts.iter().enumerate() {
            let iou = iou_3d(det, gt);
            cost[d][g] = 1.0 - iou;
            forbid[d][g] = iou < min_iou;
        }
    }
    let mut labels = vec![None; dets.len()];
    for (d, g) in hungarian(&cost, &forbid) {
        labels[d] = Some(gts[g].0);
    }
    labels
}
