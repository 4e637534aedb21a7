//! Interleaved splitting of latent tokens into descriptions, mask patterns and merging.

use rand::Rng;

use crate::error::{MdvcError, Result};
use crate::latent::LatentGrid;

/// Binary mask over token positions; `true` marks a masked (absent) token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskPattern(pub Vec<bool>);

impl MaskPattern {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn density(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.0.len() as f64
        }
    }

    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|m| !m).collect())
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Raster-order modular assignment of the `h * w` tokens to `s` descriptions:
/// token `(r, q)` belongs to description `(r * w + q) mod s`. Ids are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DescriptionSet {
    pub h: usize,
    pub w: usize,
    pub s: usize,
}

impl DescriptionSet {
    pub fn new(h: usize, w: usize, s: usize) -> Result<Self> {
        let n = h * w;
        if s == 0 {
            return Err(MdvcError::Config("description count must be at least 1".into()));
        }
        if s > n {
            return Err(MdvcError::Config(format!("{s} descriptions exceed the {n} tokens of the frame")));
        }
        Ok(Self { h, w, s })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn description_of(&self, index: usize) -> usize {
        index % self.s
    }

    /// Token indices of description `id` in raster order.
    pub fn positions(&self, id: usize) -> Vec<usize> {
        (id..self.tokens()).step_by(self.s).collect()
    }

    pub fn size(&self, id: usize) -> usize {
        self.positions(id).len()
    }

    /// Mask with every token outside description `id` set.
    pub fn complement_mask(&self, id: usize) -> MaskPattern {
        MaskPattern((0..self.tokens()).map(|i| self.description_of(i) != id).collect())
    }
}

pub fn split_interleaved(grid: &LatentGrid, s: usize) -> Result<DescriptionSet> {
    DescriptionSet::new(grid.h, grid.w, s)
}

/// The tokens of one description, position by position.
pub fn description_tokens(grid: &LatentGrid, set: &DescriptionSet, id: usize) -> Vec<i32> {
    set.positions(id).iter().flat_map(|&p| grid.token(p).iter().copied()).collect()
}

/// Tokens that arrived for one description: a subset of its positions with their values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceivedTokens {
    pub description: usize,
    pub positions: Vec<usize>,
    /// `positions.len() * c` values, token-major.
    pub values: Vec<i32>,
}

/// Merges received token subsets into a grid. Positions that did not arrive are zero
/// and set in the returned mask.
pub fn merge(
    set: &DescriptionSet,
    c: usize,
    bound: i32,
    received: &[ReceivedTokens],
) -> Result<(LatentGrid, MaskPattern)> {
    let n = set.tokens();
    let mut grid = LatentGrid::zeros(set.h, set.w, c, bound);
    let mut mask = MaskPattern::all(n);
    let mut seen_desc = vec![false; set.s];
    for r in received {
        if r.description >= set.s {
            return Err(MdvcError::Corruption(format!("description id {} out of range", r.description)));
        }
        if std::mem::replace(&mut seen_desc[r.description], true) {
            return Err(MdvcError::Corruption(format!("description {} received twice", r.description)));
        }
        if r.values.len() != r.positions.len() * c {
            return Err(MdvcError::Corruption(format!(
                "description {} carries {} values for {} tokens",
                r.description,
                r.values.len(),
                r.positions.len()
            )));
        }
        for (k, &p) in r.positions.iter().enumerate() {
            if p >= n || set.description_of(p) != r.description {
                return Err(MdvcError::Corruption(format!(
                    "token {p} does not belong to description {}",
                    r.description
                )));
            }
            if !mask.0[p] {
                return Err(MdvcError::Corruption(format!("token {p} received twice")));
            }
            let vals = &r.values[k * c..(k + 1) * c];
            if let Some(&v) = vals.iter().find(|v| v.abs() > bound) {
                return Err(MdvcError::OutOfAlphabet { value: v, bound });
            }
            grid.token_mut(p).copy_from_slice(vals);
            mask.0[p] = false;
        }
    }
    Ok((grid, mask))
}

/// Replaces masked tokens of a token-major `[n, c]` value sequence by `mask_token`.
pub fn apply_mask(values: &[f64], c: usize, pattern: &MaskPattern, mask_token: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    for (row, &m) in out.chunks_mut(c).zip(&pattern.0) {
        if m {
            row.copy_from_slice(mask_token);
        }
    }
    out
}

/// Masking ratio drawn from `U[0, 1]`, then that many positions chosen uniformly
/// without replacement.
pub fn sample_training_mask<R: Rng>(n: usize, rng: &mut R) -> MaskPattern {
    let ratio: f64 = rng.random();
    mask_with_ratio(n, ratio, rng)
}

pub fn mask_with_ratio<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> MaskPattern {
    let k = ((ratio * n as f64).round() as usize).min(n);
    let mut mask = MaskPattern::none(n);
    for i in rand::seq::index::sample(rng, n, k) {
        mask.0[i] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, c: usize, seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random_range(-127..=127)).collect();
        LatentGrid::new(h, w, c, 127, data).unwrap()
    }

    fn receive_all(g: &LatentGrid, set: &DescriptionSet, ids: &[usize]) -> Vec<ReceivedTokens> {
        ids.iter()
            .map(|&id| ReceivedTokens {
                description: id,
                positions: set.positions(id),
                values: description_tokens(g, set, id),
            })
            .collect()
    }

    #[test]
    fn single_description_holds_everything() {
        let set = DescriptionSet::new(4, 4, 1).unwrap();
        assert_eq!(set.positions(0), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn two_by_two_into_four() {
        let set = DescriptionSet::new(2, 2, 4).unwrap();
        let ids: Vec<usize> = (0..4).map(|i| set.description_of(i)).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_many_descriptions_is_an_error() {
        assert!(DescriptionSet::new(2, 2, 5).is_err());
        assert!(DescriptionSet::new(2, 2, 0).is_err());
    }

    #[test]
    fn sixteen_by_sixteen_into_four_has_64_each() {
        let set = DescriptionSet::new(16, 16, 4).unwrap();
        assert!((0..4).all(|s| set.size(s) == 64));
    }

    #[test]
    fn merging_two_of_four_masks_the_other_interleaved_positions() {
        let g = grid(4, 4, 2, 1);
        let set = DescriptionSet::new(4, 4, 4).unwrap();
        let (merged, mask) = merge(&set, 2, 127, &receive_all(&g, &set, &[0, 2])).unwrap();
        assert_eq!(mask.count(), 8);
        let expected: Vec<usize> = (0..16).filter(|i| i % 4 == 1 || i % 4 == 3).collect();
        assert_eq!(mask.masked_positions(), expected);
        for i in 0..16 {
            if !mask.0[i] {
                assert_eq!(merged.token(i), g.token(i));
            }
        }
    }

    #[test]
    fn merge_of_nothing_masks_all() {
        let set = DescriptionSet::new(3, 3, 2).unwrap();
        let (_, mask) = merge(&set, 4, 127, &[]).unwrap();
        assert_eq!(mask, MaskPattern::all(9));
    }

    #[test]
    fn overlapping_or_foreign_positions_are_corruption() {
        let g = grid(2, 4, 1, 2);
        let set = DescriptionSet::new(2, 4, 2).unwrap();
        let mut r = receive_all(&g, &set, &[0]);
        r[0].positions[1] = 1;
        assert!(matches!(merge(&set, 1, 127, &r), Err(MdvcError::Corruption(_))));
        let mut dup = receive_all(&g, &set, &[1]);
        dup.push(dup[0].clone());
        assert!(matches!(merge(&set, 1, 127, &dup), Err(MdvcError::Corruption(_))));
    }

    #[test]
    fn mask_patterns_at_the_extremes() {
        let vals: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let token = [-1.0, -2.0, -3.0];
        assert_eq!(apply_mask(&vals, 3, &MaskPattern::none(4), &token), vals);
        let all = apply_mask(&vals, 3, &MaskPattern::all(4), &token);
        assert!(all.chunks(3).all(|r| r == token));
    }

    #[test]
    fn complement_masks_recombine() {
        let g = grid(4, 6, 3, 3);
        let set = DescriptionSet::new(4, 6, 3).unwrap();
        let vals: Vec<f64> = g.data.iter().map(|&v| v as f64).collect();
        let token = [0.5; 3];
        let mut rebuilt = vec![f64::NAN; vals.len()];
        for s in 0..3 {
            let p = set.complement_mask(s);
            let masked = apply_mask(&vals, 3, &p, &token);
            for (i, &m) in p.0.iter().enumerate() {
                if !m {
                    rebuilt[i * 3..(i + 1) * 3].copy_from_slice(&masked[i * 3..(i + 1) * 3]);
                }
            }
        }
        assert_eq!(rebuilt, vals);
    }

    #[test]
    fn training_mask_density_averages_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 256;
        let draws = 10_000;
        let mean: f64 = (0..draws).map(|_| sample_training_mask(n, &mut rng).density()).sum::<f64>() / draws as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean density {mean}");
        assert_eq!(mask_with_ratio(n, 0.0, &mut rng).count(), 0);
        assert_eq!(mask_with_ratio(n, 1.0, &mut rng).count(), n);
    }

    proptest! {
        #[test]
        fn split_partitions_and_merge_restores(h in 1usize..9, w in 1usize..9, s in 1usize..9, seed: u64) {
            prop_assume!(s <= h * w);
            let g = grid(h, w, 2, seed);
            let set = split_interleaved(&g, s).unwrap();
            let mut count = vec![0; h * w];
            for id in 0..s {
                for p in set.positions(id) {
                    count[p] += 1;
                }
                let size = set.size(id) as f64;
                prop_assert!((size - (h * w) as f64 / s as f64).abs() <= 1.0);
            }
            prop_assert!(count.iter().all(|&c| c == 1));
            let ids: Vec<usize> = (0..s).collect();
            let (merged, mask) = merge(&set, 2, 127, &receive_all(&g, &set, &ids)).unwrap();
            prop_assert_eq!(mask.count(), 0);
            prop_assert_eq!(merged, g);
        }
    }
}
