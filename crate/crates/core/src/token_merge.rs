//! Mask-guided token merging: tokens are split into even/odd halves, the most
//! similar background pairs are averaged together, and person tokens never
//! participate. A retention floor caps how far the schedule can shrink the
//! token set.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{shape_err, LabError, Result};

/// Per-pixel person mask with the patch geometry needed to tokenize it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskGrid {
    /// Row-major height × width.
    pub pixels: Vec<bool>,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
}

impl MaskGrid {
    pub fn new(pixels: Vec<bool>, width: usize, height: usize, patch: usize) -> Result<Self> {
        if pixels.len() != width * height {
            return shape_err("MaskGrid.pixels", width * height, pixels.len());
        }
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(LabError::InvalidArgument(format!(
                "patch {patch} must divide image {width}×{height}"
            )));
        }
        Ok(MaskGrid {
            pixels,
            width,
            height,
            patch,
        })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid_dims();
        gh * gw
    }
}

/// Token i is person iff the masked fraction of its patch exceeds `threshold`.
/// Threshold 0 means any person pixel claims the token.
pub fn tokenize_mask(mask: &MaskGrid, threshold: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(LabError::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let (gh, gw) = mask.grid_dims();
    let p = mask.patch;
    let area = (p * p) as f64;
    let mut bits = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut hits = 0usize;
            for iy in 0..p {
                for ix in 0..p {
                    if mask.pixels[(gy * p + iy) * mask.width + gx * p + ix] {
                        hits += 1;
                    }
                }
            }
            bits.push(hits as f64 / area > threshold);
        }
    }
    Ok(bits)
}

/// Token rows plus the bookkeeping merging must preserve: person bits, merge
/// multiplicities, and the set of original token ids behind each row.
#[derive(Clone, Debug)]
pub struct TokenState {
    pub features: Array2<f64>,
    pub person_mask: Vec<bool>,
    pub sizes: Vec<usize>,
    pub provenance: Vec<BTreeSet<usize>>,
}

impl TokenState {
    /// Fresh state: every row is its own singleton.
    pub fn from_features(features: Array2<f64>, person_mask: Vec<bool>) -> Result<Self> {
        if person_mask.len() != features.nrows() {
            return shape_err("TokenState.person_mask", features.nrows(), person_mask.len());
        }
        let n = features.nrows();
        Ok(TokenState {
            features,
            person_mask,
            sizes: vec![1; n],
            provenance: (0..n).map(|i| BTreeSet::from([i])).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.features.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        if self.person_mask.len() != n || self.sizes.len() != n || self.provenance.len() != n {
            return shape_err(
                "TokenState bookkeeping lengths",
                n,
                format!(
                    "mask {}, sizes {}, provenance {}",
                    self.person_mask.len(),
                    self.sizes.len(),
                    self.provenance.len()
                ),
            );
        }
        let mut seen = BTreeSet::new();
        for i in 0..n {
            if self.sizes[i] != self.provenance[i].len() {
                return Err(LabError::Degenerate(format!(
                    "token {i}: size {} ≠ |provenance| {}",
                    self.sizes[i],
                    self.provenance[i].len()
                )));
            }
            if self.person_mask[i] && self.sizes[i] != 1 {
                return Err(LabError::Degenerate(format!(
                    "person token {i} has merge size {}",
                    self.sizes[i]
                )));
            }
            for &id in &self.provenance[i] {
                if !seen.insert(id) {
                    return Err(LabError::Degenerate(format!(
                        "original token id {id} appears in two provenance sets"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check that provenance partitions exactly {0..n_original−1}.
    pub fn validate_partition(&self, n_original: usize) -> Result<()> {
        self.validate()?;
        let total: usize = self.sizes.iter().sum();
        if total != n_original {
            return Err(LabError::Degenerate(format!(
                "sizes sum {total} ≠ original token count {n_original}"
            )));
        }
        let union: BTreeSet<usize> = self.provenance.iter().flatten().cloned().collect();
        if union.len() != n_original || union.last() != Some(&(n_original - 1)) {
            return Err(LabError::Degenerate(
                "provenance union is not {0..N-1}".into(),
            ));
        }
        Ok(())
    }
}

/// How many layers merge, how many pairs each merges, and the retention floor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct MergeSchedule {
    pub layers: usize,
    pub per_layer: usize,
    pub floor: usize,
}

impl MergeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.per_layer == 0 || self.floor == 0 {
            return Err(LabError::InvalidArgument(
                "per-layer merge count and retention floor must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer merge counts: layer k merges min(per_layer, remaining − floor).
pub fn plan_schedule(n: usize, schedule: &MergeSchedule) -> Result<Vec<usize>> {
    schedule.validate()?;
    if n < schedule.floor {
        return Err(LabError::InvalidArgument(format!(
            "token count {n} below retention floor {}",
            schedule.floor
        )));
    }
    let mut remaining = n;
    let mut counts = Vec::with_capacity(schedule.layers);
    for _ in 0..schedule.layers {
        let m = schedule.per_layer.min(remaining - schedule.floor);
        counts.push(m);
        remaining -= m;
    }
    Ok(counts)
}

fn cosine(u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>) -> f64 {
    let dot = u.dot(&v);
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu * nv < 1e-12 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Even rows form set A, odd rows set B. Each background A token nominates its
/// most similar background B token; the top `n` nominations win, one pair per
/// A and per B token. When nomination collisions would leave fewer than `n`
/// pairs even though unmatched background tokens remain, the shortfall is
/// filled from the full similarity ranking so the schedule's retained-count
/// law stays exact. Person tokens never appear in any pair.
pub fn bipartite_match(tokens: &TokenState, n: usize) -> Result<Vec<(usize, usize)>> {
    let count = tokens.count();
    if count % 2 != 0 {
        return Err(LabError::InvalidArgument(format!(
            "bipartite split needs an even token count, got {count}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let a_idx: Vec<usize> = (0..count).step_by(2).collect();
    let b_idx: Vec<usize> = (1..count).step_by(2).collect();

    // best background partner per background A token
    let mut nominations: Vec<(f64, usize, usize)> = Vec::new();
    for &a in &a_idx {
        if tokens.person_mask[a] {
            continue; // scored −∞ on the A side: never nominates
        }
        let mut best: Option<(f64, usize)> = None;
        for &b in &b_idx {
            if tokens.person_mask[b] {
                continue; // scored −∞ on the B side: never nominated
            }
            let s = cosine(tokens.features.row(a), tokens.features.row(b));
            let better = match best {
                None => true,
                Some((bs, bb)) => s > bs || (s == bs && b < bb),
            };
            if better {
                best = Some((s, b));
            }
        }
        if let Some((s, b)) = best {
            nominations.push((s, a, b));
        }
    }
    // score desc, then a asc, then b asc — a stable, reproducible order
    nominations.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });

    let mut used_a = vec![false; count];
    let mut used_b = vec![false; count];
    let mut pairs = Vec::with_capacity(n);
    for &(_, a, b) in &nominations {
        if pairs.len() == n {
            break;
        }
        if !used_a[a] && !used_b[b] {
            used_a[a] = true;
            used_b[b] = true;
            pairs.push((a, b));
        }
    }

    if pairs.len() < n {
        // nomination collisions: extend from the full ranked pair list over
        // still-unmatched background tokens
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for &a in &a_idx {
            if tokens.person_mask[a] || used_a[a] {
                continue;
            }
            for &b in &b_idx {
                if tokens.person_mask[b] || used_b[b] {
                    continue;
                }
                all.push((cosine(tokens.features.row(a), tokens.features.row(b)), a, b));
            }
        }
        all.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        for &(_, a, b) in &all {
            if pairs.len() == n {
                break;
            }
            if !used_a[a] && !used_b[b] {
                used_a[a] = true;
                used_b[b] = true;
                pairs.push((a, b));
            }
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    /// Plain arithmetic mean of the two rows.
    #[default]
    PlainMean,
    /// Mean weighted by accumulated merge sizes.
    SizeWeighted,
}

/// Collapse each (a, b) pair into one token at a's position; b's row is
/// removed. Sizes add, provenance sets union, person tokens are untouched.
pub fn merge_pairs(
    tokens: &TokenState,
    pairs: &[(usize, usize)],
    mode: MergeMode,
) -> Result<TokenState> {
    let n = tokens.count();
    let d = tokens.features.ncols();
    let mut partner: Vec<Option<usize>> = vec![None; n];
    let mut removed = vec![false; n];
    let mut touched = vec![false; n];
    for &(a, b) in pairs {
        if a >= n || b >= n {
            return Err(LabError::InvalidArgument(format!(
                "merge pair ({a}, {b}) out of range for {n} tokens"
            )));
        }
        if touched[a] || touched[b] || a == b {
            return Err(LabError::InvalidArgument(format!(
                "merge pairs must be disjoint; token {} repeated",
                if touched[a] { a } else { b }
            )));
        }
        touched[a] = true;
        touched[b] = true;
        if tokens.person_mask[a] || tokens.person_mask[b] {
            return Err(LabError::PersonTokenMerge { a, b });
        }
        partner[a] = Some(b);
        removed[b] = true;
    }

    let kept = n - pairs.len();
    let mut features = Array2::zeros((kept, d));
    let mut person_mask = Vec::with_capacity(kept);
    let mut sizes = Vec::with_capacity(kept);
    let mut provenance = Vec::with_capacity(kept);
    let mut row = 0usize;
    for i in 0..n {
        if removed[i] {
            continue;
        }
        match partner[i] {
            Some(b) => {
                let (sa, sb) = (tokens.sizes[i] as f64, tokens.sizes[b] as f64);
                let merged = match mode {
                    MergeMode::PlainMean => {
                        (&tokens.features.row(i) + &tokens.features.row(b)) / 2.0
                    }
                    MergeMode::SizeWeighted => {
                        (&tokens.features.row(i) * sa + &tokens.features.row(b) * sb) / (sa + sb)
                    }
                };
                features.row_mut(row).assign(&merged);
                person_mask.push(false);
                sizes.push(tokens.sizes[i] + tokens.sizes[b]);
                let mut union = tokens.provenance[i].clone();
                union.extend(tokens.provenance[b].iter().cloned());
                provenance.push(union);
            }
            None => {
                features.row_mut(row).assign(&tokens.features.row(i));
                person_mask.push(tokens.person_mask[i]);
                sizes.push(tokens.sizes[i]);
                provenance.push(tokens.provenance[i].clone());
            }
        }
        row += 1;
    }
    Ok(TokenState {
        features,
        person_mask,
        sizes,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal2, seeded};
    use rand::Rng;

    fn bg_state(features: Array2<f64>) -> TokenState {
        let n = features.nrows();
        TokenState::from_features(features, vec![false; n]).unwrap()
    }

    #[test]
    fn tokenize_all_true_and_all_false() {
        let all = MaskGrid::new(vec![true; 16], 4, 4, 2).unwrap();
        assert_eq!(tokenize_mask(&all, 0.0).unwrap(), vec![true; 4]);
        let none = MaskGrid::new(vec![false; 16], 4, 4, 2).unwrap();
        assert_eq!(tokenize_mask(&none, 0.0).unwrap(), vec![false; 4]);
    }

    #[test]
    fn tokenize_single_pixel_threshold_zero() {
        let mut px = vec![false; 16];
        px[2 * 4 + 3] = true; // row 2, col 3 → patch (1, 1)
        let mask = MaskGrid::new(px, 4, 4, 2).unwrap();
        assert_eq!(tokenize_mask(&mask, 0.0).unwrap(), vec![false, false, false, true]);
        // a 1/4 fraction does not exceed a 0.5 threshold
        let mut px2 = vec![false; 16];
        px2[0] = true;
        let mask2 = MaskGrid::new(px2, 4, 4, 2).unwrap();
        assert_eq!(tokenize_mask(&mask2, 0.5).unwrap(), vec![false; 4]);
    }

    #[test]
    fn mask_geometry_is_checked() {
        assert!(MaskGrid::new(vec![false; 15], 4, 4, 2).is_err());
        assert!(MaskGrid::new(vec![false; 16], 4, 4, 3).is_err());
    }

    #[test]
    fn unit_basis_pairs_match_by_similarity() {
        let features = ndarray::arr2(&[
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ]);
        let pairs = bipartite_match(&bg_state(features), 2).unwrap();
        assert_eq!(pairs, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn all_person_tokens_yield_no_pairs() {
        let features = normal2(&mut seeded(1), 8, 4, 1.0);
        let state = TokenState::from_features(features, vec![true; 8]).unwrap();
        for n in [0, 1, 4] {
            assert!(bipartite_match(&state, n).unwrap().is_empty());
        }
    }

    #[test]
    fn odd_token_count_is_rejected() {
        let features = normal2(&mut seeded(2), 5, 3, 1.0);
        assert!(bipartite_match(&bg_state(features), 1).is_err());
    }

    #[test]
    fn equal_scores_break_ties_toward_lower_indices() {
        // every feature identical: all similarities are 1
        let features = Array2::from_elem((6, 3), 1.0);
        let pairs = bipartite_match(&bg_state(features), 2).unwrap();
        assert_eq!(pairs, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn nomination_collision_still_fills_requested_count() {
        // both A tokens nominate B token 1; the ranked fallback pairs the loser
        // with B token 3 so two pairs still come back
        let features = ndarray::arr2(&[
            [1.0, 0.0],   // A0
            [1.0, 0.0],   // B1 — best partner of both A tokens
            [1.0, 0.05],  // A2
            [0.0, 1.0],   // B3
        ]);
        let pairs = bipartite_match(&bg_state(features), 2).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(pairs[1], (2, 3));
    }

    #[test]
    fn person_tokens_limit_pair_count_without_error() {
        // only one background token per side → at most one pair, even for n=3
        let features = normal2(&mut seeded(3), 6, 3, 1.0);
        let mask = vec![false, true, true, false, true, true];
        let state = TokenState::from_features(features, mask).unwrap();
        let pairs = bipartite_match(&state, 3).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0], (0, 3));
    }

    #[test]
    fn partner_choice_follows_content_under_b_permutation() {
        let mut rng = seeded(4);
        let features = normal2(&mut rng, 12, 5, 1.0);
        let state = bg_state(features.clone());
        let pairs = bipartite_match(&state, 3).unwrap();

        // rotate the contents of the B rows; partners must follow their content
        let b_rows = [1usize, 3, 5, 7, 9, 11];
        let mut permuted = features.clone();
        for (i, &b) in b_rows.iter().enumerate() {
            let src = b_rows[(i + 1) % b_rows.len()];
            permuted.row_mut(b).assign(&features.row(src));
        }
        let pairs2 = bipartite_match(&bg_state(permuted), 3).unwrap();
        let moved: Vec<(usize, usize)> = pairs
            .iter()
            .map(|&(a, b)| {
                let pos = b_rows.iter().position(|&x| x == b).unwrap();
                let new_b = b_rows[(pos + b_rows.len() - 1) % b_rows.len()];
                (a, new_b)
            })
            .collect();
        let set1: BTreeSet<_> = moved.into_iter().collect();
        let set2: BTreeSet<_> = pairs2.into_iter().collect();
        assert_eq!(set1, set2);
    }

    #[test]
    fn merging_identical_rows_keeps_the_row() {
        let features = Array2::from_elem((4, 3), 2.5);
        let out = merge_pairs(&bg_state(features), &[(0, 1)], MergeMode::PlainMean).unwrap();
        assert_eq!(out.count(), 3);
        assert_eq!(out.features.row(0).to_vec(), vec![2.5, 2.5, 2.5]);
        assert_eq!(out.sizes[0], 2);
        assert_eq!(out.provenance[0], BTreeSet::from([0, 1]));
    }

    #[test]
    fn plain_mean_merges_rows() {
        let features = ndarray::arr2(&[[2.0, 0.0], [0.0, 4.0], [1.0, 1.0], [3.0, 3.0]]);
        let out = merge_pairs(&bg_state(features), &[(0, 1)], MergeMode::PlainMean).unwrap();
        assert_eq!(out.features.row(0).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn size_weighted_mean_uses_multiplicities() {
        let features = ndarray::arr2(&[[3.0], [0.0], [9.0], [9.0]]);
        let mut state = bg_state(features);
        state.sizes = vec![2, 1, 1, 1];
        state.provenance[0] = BTreeSet::from([0, 4]);
        state.provenance[1] = BTreeSet::from([1]);
        state.provenance[2] = BTreeSet::from([2]);
        state.provenance[3] = BTreeSet::from([3]);
        let out = merge_pairs(&state, &[(0, 1)], MergeMode::SizeWeighted).unwrap();
        assert_eq!(out.features[[0, 0]], 2.0); // (2·3 + 1·0)/3
        assert_eq!(out.sizes[0], 3);
    }

    #[test]
    fn provenance_unions_across_successive_merges() {
        let features = normal2(&mut seeded(5), 6, 2, 1.0);
        let s0 = bg_state(features);
        let s1 = merge_pairs(&s0, &[(0, 1)], MergeMode::PlainMean).unwrap();
        // merged token now sits at row 0; merge it with original token 2 (row 1)
        let s2 = merge_pairs(&s1, &[(0, 1)], MergeMode::PlainMean).unwrap();
        assert_eq!(s2.provenance[0], BTreeSet::from([0, 1, 2]));
        assert_eq!(s2.sizes[0], 3);
        s2.validate_partition(6).unwrap();
    }

    #[test]
    fn person_rows_pass_through_merging_bit_identically() {
        let features = normal2(&mut seeded(6), 8, 4, 1.0);
        let mask = vec![false, false, true, false, false, true, false, false];
        let state = TokenState::from_features(features.clone(), mask).unwrap();
        let pairs = bipartite_match(&state, 2).unwrap();
        let out = merge_pairs(&state, &pairs, MergeMode::PlainMean).unwrap();
        // locate the person rows in the output by provenance id
        for (row, prov) in out.provenance.iter().enumerate() {
            if prov.len() == 1 {
                let id = *prov.first().unwrap();
                if id == 2 || id == 5 {
                    assert!(out.person_mask[row]);
                    assert_eq!(out.features.row(row), features.row(id));
                }
            }
        }
    }

    #[test]
    fn merging_a_person_token_is_a_contract_violation() {
        let features = normal2(&mut seeded(7), 4, 2, 1.0);
        let mask = vec![false, true, false, false];
        let state = TokenState::from_features(features, mask).unwrap();
        let err = merge_pairs(&state, &[(0, 1)], MergeMode::PlainMean).unwrap_err();
        assert!(matches!(err, LabError::PersonTokenMerge { a: 0, b: 1 }));
    }

    #[test]
    fn schedule_arithmetic_matches_hand_counts() {
        let sched = MergeSchedule {
            layers: 3,
            per_layer: 40,
            floor: 90,
        };
        assert_eq!(plan_schedule(196, &sched).unwrap(), vec![40, 40, 26]);
        let clamp = MergeSchedule {
            layers: 1,
            per_layer: 500,
            floor: 90,
        };
        assert_eq!(plan_schedule(196, &clamp).unwrap(), vec![106]);
        let frozen = MergeSchedule {
            layers: 3,
            per_layer: 40,
            floor: 196,
        };
        assert_eq!(plan_schedule(196, &frozen).unwrap(), vec![0, 0, 0]);
        assert!(plan_schedule(80, &sched).is_err());
    }

    #[test]
    fn random_merge_sequences_conserve_provenance() {
        let mut rng = seeded(8);
        for trial in 0..30 {
            let n = 2 * rng.gen_range(8..40);
            let features = normal2(&mut rng, n, 6, 1.0);
            let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.2).collect();
            let mut state = TokenState::from_features(features, mask).unwrap();
            for _ in 0..3 {
                if state.count() % 2 != 0 {
                    break;
                }
                let want = rng.gen_range(0..=state.count() / 4);
                let pairs = bipartite_match(&state, want).unwrap();
                state = merge_pairs(&state, &pairs, MergeMode::PlainMean).unwrap();
                state.validate_partition(n).unwrap_or_else(|e| {
                    panic!("trial {trial}: {e}");
                });
            }
        }
    }
}
