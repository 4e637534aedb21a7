mod common;

use common::{smooth_grid, NeighbourPredictor};
use mdvc::coding::{decode_description, decode_prefix, encode_description, CoderConfig, SegmentPolicy};
use mdvc::entropy_model::{EntropyModel, EntropyModelConfig, TemporalContext};
use mdvc::latent::LatentGrid;
use mdvc::schedule::ScheduleParams;
use mdvc::split::{merge, DescriptionSet};
use mdvc::MdvcError;

fn config(segments: SegmentPolicy) -> CoderConfig {
    CoderConfig {
        schedule: ScheduleParams::default(),
        segments,
    }
}

fn round_trip<P: mdvc::coding::Predictor>(model: &P, grid: &LatentGrid, s: usize, ctx: &TemporalContext, cfg: &CoderConfig) {
    let set = DescriptionSet::new(grid.h, grid.w, s).unwrap();
    let mut received = Vec::new();
    for id in 0..s {
        let (stream, stats) = encode_description(model, grid, &set, id, ctx, cfg).unwrap();
        let groups = stream.cuts.last().map_or(0, |c| c.end_group as usize);
        assert_eq!(stats.passes, groups);
        received.push(decode_description(model, &stream, &set, grid.c, grid.bound, ctx, &cfg.schedule).unwrap());
    }
    let (merged, mask) = merge(&set, grid.c, grid.bound, &received).unwrap();
    assert_eq!(mask.count(), 0);
    assert_eq!(&merged, grid);
}

#[test]
fn round_trip_over_a_thousand_seeds() {
    let policies = [SegmentPolicy::PerDescription, SegmentPolicy::PerGroup, SegmentPolicy::MaxBytes(24)];
    for seed in 0..1000u64 {
        let (h, w) = (2 + (seed % 5) as usize, 3 + (seed % 4) as usize);
        let grid = smooth_grid(h, w, 3, seed);
        let s = [1, 2, 4, 8][(seed % 4) as usize].min(h * w);
        let ctx = if seed % 3 == 0 {
            TemporalContext::new(Some(smooth_grid(h, w, 3, seed + 7)), None)
        } else {
            TemporalContext::default()
        };
        round_trip(&NeighbourPredictor, &grid, s, &ctx, &config(policies[(seed % 3) as usize]));
    }
}

#[test]
fn round_trip_with_the_transformer_for_each_description_count() {
    let cfg = EntropyModelConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        mlp_dim: 16,
        latent_channels: 4,
        seed: 3,
        ..Default::default()
    };
    let model = EntropyModel::new(cfg).unwrap();
    let grid = smooth_grid(4, 4, 4, 11);
    let ctx = TemporalContext::new(Some(smooth_grid(4, 4, 4, 12)), Some(smooth_grid(4, 4, 4, 13)));
    for s in [1, 2, 4, 8] {
        round_trip(&model, &grid, s, &ctx, &CoderConfig::default());
    }
}

#[test]
fn encoding_is_deterministic() {
    let grid = smooth_grid(8, 8, 4, 5);
    let set = DescriptionSet::new(8, 8, 4).unwrap();
    let ctx = TemporalContext::default();
    let a = encode_description(&NeighbourPredictor, &grid, &set, 2, &ctx, &CoderConfig::default()).unwrap();
    let b = encode_description(&NeighbourPredictor, &grid.clone(), &set, 2, &ctx, &CoderConfig::default()).unwrap();
    assert_eq!(a.0, b.0);
}

#[test]
fn truncation_at_each_group_boundary_keeps_the_prefix() {
    let grid = smooth_grid(8, 8, 4, 21);
    let set = DescriptionSet::new(8, 8, 2).unwrap();
    let cfg = config(SegmentPolicy::PerGroup);
    let ctx = TemporalContext::default();
    let (stream, _) = encode_description(&NeighbourPredictor, &grid, &set, 1, &ctx, &cfg).unwrap();
    let schedule = mdvc::coding::description_schedule(&set, 1, &cfg.schedule);
    assert_eq!(stream.cuts.len(), schedule.len());
    for k in 0..stream.cuts.len() {
        let mut cut = stream.clone();
        cut.payload.truncate(stream.segment_range(k).start);
        let out = decode_prefix(&NeighbourPredictor, &cut, &set, 4, 127, &ctx, &cfg.schedule, usize::MAX).unwrap();
        assert_eq!(out.groups_decoded, k);
        let expected: Vec<usize> = {
            let mut p: Vec<usize> = schedule.prefix(k).collect();
            p.sort_unstable();
            p
        };
        assert_eq!(out.tokens.positions, expected);
        for (i, &p) in out.tokens.positions.iter().enumerate() {
            assert_eq!(&out.tokens.values[i * 4..(i + 1) * 4], grid.token(p));
        }
        let err = decode_description(&NeighbourPredictor, &cut, &set, 4, 127, &ctx, &cfg.schedule).unwrap_err();
        assert!(matches!(&err, MdvcError::Corruption(m) if m.contains(&format!("group {k} "))), "{err}");
    }
}

#[test]
fn corrupting_one_description_leaves_the_others_intact() {
    let grid = smooth_grid(8, 8, 4, 31);
    let set = DescriptionSet::new(8, 8, 4).unwrap();
    let cfg = CoderConfig::default();
    let ctx = TemporalContext::default();
    let streams: Vec<_> = (0..4)
        .map(|id| encode_description(&NeighbourPredictor, &grid, &set, id, &ctx, &cfg).unwrap().0)
        .collect();
    let mut bad = streams[2].clone();
    let mid = bad.payload.len() / 2;
    bad.payload[mid] ^= 0x5a;
    assert!(decode_description(&NeighbourPredictor, &bad, &set, 4, 127, &ctx, &cfg.schedule).is_err());
    // A wrong context for one description only affects that description.
    let wrong = TemporalContext::new(Some(smooth_grid(8, 8, 4, 99)), None);
    let _ = decode_description(&NeighbourPredictor, &streams[1], &set, 4, 127, &wrong, &cfg.schedule);
    let good: Vec<_> = [0, 1, 3]
        .iter()
        .map(|&id| decode_description(&NeighbourPredictor, &streams[id], &set, 4, 127, &ctx, &cfg.schedule).unwrap())
        .collect();
    let (merged, mask) = merge(&set, 4, 127, &good).unwrap();
    for p in 0..64 {
        if set.description_of(p) == 2 {
            assert!(mask.0[p]);
        } else {
            assert_eq!(merged.token(p), grid.token(p));
        }
    }
}

#[test]
fn max_bytes_segments_respect_the_limit() {
    let grid = smooth_grid(16, 16, 8, 41);
    let set = DescriptionSet::new(16, 16, 1).unwrap();
    let max = 40;
    let (stream, _) =
        encode_description(&NeighbourPredictor, &grid, &set, 0, &TemporalContext::default(), &config(SegmentPolicy::MaxBytes(max))).unwrap();
    assert!(stream.cuts.len() > 1);
    for k in 0..stream.cuts.len() {
        let r = stream.segment_range(k);
        assert!(r.len() <= max || stream.segment_groups(k).len() == 1, "segment {k} has {} bytes", r.len());
    }
}

#[test]
fn payload_tracks_cross_entropy_on_a_large_grid() {
    let grid = smooth_grid(32, 32, 8, 51);
    let set = DescriptionSet::new(32, 32, 2).unwrap();
    let ctx = TemporalContext::default();
    let (mut bytes, mut bits) = (0usize, 0.0);
    for id in 0..2 {
        let (s, st) = encode_description(&NeighbourPredictor, &grid, &set, id, &ctx, &CoderConfig::default()).unwrap();
        bytes += s.payload.len();
        bits += st.model_bits;
    }
    let ratio = (bytes * 8) as f64 / bits;
    assert!((ratio - 1.0).abs() < 0.05, "payload/cross-entropy {ratio}");
}
