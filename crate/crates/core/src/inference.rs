//! Filling lost tokens with the per-channel mode of their predicted mixtures.

use crate::coding::Predictor;
use crate::entropy_model::TemporalContext;
use crate::error::Result;
use crate::latent::LatentGrid;
use crate::split::MaskPattern;

/// Replaces every masked token of `merged` by the argmax of its predicted
/// discretized mixture, per channel, from one parallel model pass. Returns the
/// number of tokens filled.
pub fn infer_lost<P: Predictor + ?Sized>(
    model: &P,
    merged: &mut LatentGrid,
    lost: &MaskPattern,
    ctx: &TemporalContext,
) -> Result<usize> {
    let positions = lost.masked_positions();
    if positions.is_empty() {
        return Ok(0);
    }
    let gmm = model.predict(merged, lost, ctx)?;
    for &p in &positions {
        for ch in 0..merged.c {
            merged.token_mut(p)[ch] = gmm.get(p, ch).mode(merged.bound);
        }
    }
    Ok(positions.len())
}

/// Sets every masked token to zero.
pub fn zero_fill(merged: &mut LatentGrid, lost: &MaskPattern) -> usize {
    let positions = lost.masked_positions();
    for &p in &positions {
        merged.token_mut(p).iter_mut().for_each(|v| *v = 0);
    }
    positions.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{Gmm, GmmParams};
    use crate::MdvcError;

    /// Predicts a sharp mixture at the co-located token of `t-1`.
    struct CopyPrev;

    impl Predictor for CopyPrev {
        fn predict(&self, cur: &LatentGrid, _: &MaskPattern, ctx: &TemporalContext) -> Result<GmmParams> {
            let prev = ctx.prev1.as_ref().ok_or_else(|| MdvcError::Config("no context".into()))?;
            let gmms = prev.data.iter().map(|&v| Gmm::single(v as f64 + 0.2, 0.5)).collect();
            Ok(GmmParams {
                positions: cur.tokens(),
                c: cur.c,
                gmms,
            })
        }
    }

    #[test]
    fn no_loss_is_identity() {
        let mut g = LatentGrid::new(1, 2, 1, 127, vec![4, -3]).unwrap();
        let before = g.clone();
        let n = infer_lost(&CopyPrev, &mut g, &MaskPattern::none(2), &TemporalContext::default()).unwrap();
        assert_eq!((n, g), (0, before));
    }

    #[test]
    fn lost_tokens_take_the_mode() {
        let prev = LatentGrid::new(1, 3, 1, 127, vec![9, -4, 2]).unwrap();
        let ctx = TemporalContext::new(Some(prev), None);
        let mut g = LatentGrid::new(1, 3, 1, 127, vec![0, 5, 0]).unwrap();
        let lost = MaskPattern(vec![true, false, true]);
        assert_eq!(infer_lost(&CopyPrev, &mut g, &lost, &ctx).unwrap(), 2);
        assert_eq!(g.data, vec![9, 5, 2]);
        let mut z = g.clone();
        zero_fill(&mut z, &lost);
        assert_eq!(z.data, vec![0, 5, 0]);
    }
}
