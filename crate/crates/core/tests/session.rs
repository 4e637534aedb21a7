mod common;

use common::{smooth_grid, NeighbourPredictor};
use mdvc::codec::{CodecConfig, FrameCodec};
use mdvc::coding::{CoderConfig, SegmentPolicy};
use mdvc::container::{CONTEXT_PREV1, CONTEXT_PREV2};
use mdvc::session::{context_flags, Decoder, Encoder, LossHandling, ReceivedDescription, ReceivedFrame, SessionConfig};
use mdvc::video::{synthetic_video, SyntheticConfig};

fn codec() -> FrameCodec {
    FrameCodec::new(CodecConfig::default()).unwrap()
}

fn session(s: usize, refresh: usize) -> SessionConfig {
    SessionConfig {
        descriptions: s,
        refresh_period: refresh,
        coder: CoderConfig {
            segments: SegmentPolicy::PerGroup,
            ..CoderConfig::default()
        },
    }
}

#[test]
fn refresh_schedule() {
    let p4: Vec<u8> = (0..9).map(|t| context_flags(t, 4)).collect();
    let both = CONTEXT_PREV1 | CONTEXT_PREV2;
    assert_eq!(p4, [0, CONTEXT_PREV1, both, both, 0, CONTEXT_PREV1, both, both, 0]);
    let p0: Vec<u8> = (0..5).map(|t| context_flags(t, 0)).collect();
    assert_eq!(p0, [0, CONTEXT_PREV1, both, both, both]);
}

#[test]
fn lossless_latent_sequence() {
    let codec = codec();
    for s in [1, 2, 4, 8] {
        for refresh in [0, 3] {
            let cfg = session(s, refresh);
            let mut enc = Encoder::new(&codec, &NeighbourPredictor, cfg);
            let mut dec = Decoder::new(&codec, &NeighbourPredictor, cfg, LossHandling::Infer);
            for t in 0..7 {
                let grid = smooth_grid(8, 8, 8, 100 * s as u64 + t);
                let (bits, _) = enc.encode_latent(&grid).unwrap();
                assert_eq!(bits.header.context_flags, context_flags(t as usize, refresh));
                let (out, rec) = dec.decode_latent(&ReceivedFrame::complete(&bits)).unwrap();
                assert_eq!(out, grid, "S={s} P={refresh} t={t}");
                assert_eq!(rec.lost_tokens, 0);
                assert!(rec.exact_context);
                assert_eq!(rec.rejected, 0);
            }
        }
    }
}

#[test]
fn decoded_frames_match_encoder_reconstruction() {
    let codec = codec();
    let video = synthetic_video(
        &SyntheticConfig {
            width: 16,
            height: 16,
            frames: 3,
            ..SyntheticConfig::default()
        },
        4,
    );
    let cfg = session(4, 4);
    let mut enc = Encoder::new(&codec, &NeighbourPredictor, cfg);
    let mut dec = Decoder::new(&codec, &NeighbourPredictor, cfg, LossHandling::Infer);
    for f in &video.frames {
        let (bits, report) = enc.encode(f).unwrap();
        let expected = codec.decode_frame(report.latent.as_ref().unwrap()).unwrap();
        let bytes = bits.to_bytes();
        let parsed = mdvc::container::FrameBitstream::from_bytes(&bytes).unwrap();
        let (frame, _, _) = dec.decode(&ReceivedFrame::complete(&parsed)).unwrap();
        assert_eq!(frame, expected);
    }
}

#[test]
fn loss_breaks_context_until_refresh() {
    let codec = codec();
    let cfg = session(4, 4);
    let mut enc = Encoder::new(&codec, &NeighbourPredictor, cfg);
    let mut dec = Decoder::new(&codec, &NeighbourPredictor, cfg, LossHandling::ZeroFill);
    for t in 0..6u64 {
        let grid = smooth_grid(8, 8, 8, 900 + t);
        let (bits, _) = enc.encode_latent(&grid).unwrap();
        let mut rx = ReceivedFrame::complete(&bits);
        if t == 1 {
            rx.descriptions.remove(2);
        }
        let (out, rec) = dec.decode_latent(&rx).unwrap();
        match t {
            0 => assert_eq!(out, grid),
            1 => {
                assert!(rec.exact_context);
                assert_eq!(rec.lost_tokens, 16);
            }
            2 | 3 => assert!(!rec.exact_context),
            _ => {
                assert!(rec.exact_context, "t={t}");
                if t == 4 {
                    assert_eq!(out, grid);
                }
            }
        }
    }
}

#[test]
fn partial_descriptions_need_exact_context() {
    let codec = codec();
    let cfg = session(2, 0);
    let mut enc = Encoder::new(&codec, &NeighbourPredictor, cfg);
    let mut dec = Decoder::new(&codec, &NeighbourPredictor, cfg, LossHandling::ZeroFill);
    // Frame 0 arrives with description 1 cut to its first segment: a valid
    // prefix under exact context.
    let g0 = smooth_grid(8, 8, 8, 1);
    let (b0, _) = enc.encode_latent(&g0).unwrap();
    let mut rx = ReceivedFrame::complete(&b0);
    rx.descriptions[1] = ReceivedDescription {
        stream: rx.descriptions[1].stream.clone(),
        segments: 1,
    };
    let (out, rec) = dec.decode_latent(&rx).unwrap();
    assert!(rec.lost_tokens > 0 && rec.lost_tokens < 32);
    let set = mdvc::split::DescriptionSet::new(8, 8, 2).unwrap();
    for p in set.positions(0) {
        assert_eq!(out.token(p), g0.token(p));
    }
    // Frame 1 references the damaged frame: the same cut is now discarded.
    let g1 = smooth_grid(8, 8, 8, 2);
    let (b1, _) = enc.encode_latent(&g1).unwrap();
    let mut rx = ReceivedFrame::complete(&b1);
    rx.descriptions[1].segments = 1;
    let (_, rec) = dec.decode_latent(&rx).unwrap();
    assert!(!rec.exact_context);
    assert!(rec.lost_tokens >= 32);
}
