use mdvc::codec::{CodecConfig, FrameCodec};
use mdvc::entropy_model::{EntropyModel, EntropyModelConfig};
use mdvc::harness::*;
use mdvc::session::{LossHandling, SessionConfig};
use mdvc::video::SyntheticConfig;
use mdvc::MdvcError;

fn bundle(dir: &std::path::Path, quality: usize) -> ModelBundle {
    let codec = FrameCodec::new(CodecConfig {
        seed: quality as u64,
        ..CodecConfig::for_quality(quality).unwrap()
    })
    .unwrap();
    let em = EntropyModel::new(EntropyModelConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        mlp_dim: 16,
        ..EntropyModelConfig::default()
    })
    .unwrap();
    let mut b = ModelBundle::new(codec, em);
    b.save(dir).unwrap();
    b
}

fn spec(root: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec {
        video: VideoSource::Synthetic {
            seed: 5,
            config: SyntheticConfig {
                width: 16,
                height: 16,
                frames: 5,
                ..SyntheticConfig::default()
            },
        },
        checkpoints: root.to_path_buf(),
        loss_grid: vec![0.0, 0.3, 1.0],
        seeds: vec![0, 1],
        rtt_grid: vec![0.0, 100.0],
        qualities: vec![1, 5],
        output_dir: root.join("out"),
        ..ExperimentSpec::default()
    }
}

#[test]
fn bundle_round_trip_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path(), 5);
    let loaded = ModelBundle::load(dir.path()).unwrap();
    assert_eq!(b.hash, loaded.hash);
    assert_eq!(b.hash.len(), 16);
    assert!(matches!(ModelBundle::load(&dir.path().join("missing")), Err(MdvcError::Checkpoint(_))));
}

#[test]
fn spec_json_and_validation() {
    let s = ExperimentSpec::default();
    let json = serde_json::to_string(&s).unwrap();
    let back = ExperimentSpec::from_json(&json).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.config_hash(), s.config_hash());
    let partial = ExperimentSpec::from_json(r#"{"quality": 2, "seeds": [9]}"#).unwrap();
    assert_eq!(partial.quality, 2);
    assert_ne!(partial.config_hash(), s.config_hash());
    for bad in [r#"{"qualty": 2}"#, r#"{"loss_grid": [1.5]}"#, r#"{"seeds": []}"#, r#"{"description_counts": [2, 4]}"#] {
        assert!(matches!(ExperimentSpec::from_json(bad), Err(MdvcError::Config(_))), "{bad}");
    }
}

#[test]
fn lossless_network_path_equals_direct_decode() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path(), 5);
    let sp = spec(dir.path());
    let video = sp.video.load(0).unwrap();
    let enc = encode_video(&b, &video, &sp.session).unwrap();
    let direct = decode_video(&b, &enc, &sp.session, None, LossHandling::Infer).unwrap();
    let sweep = run_loss_sweep(&sp).unwrap();
    let row = sweep.rows.iter().find(|r| r.seed == 0 && r.loss_rate == 0.0).unwrap();
    let s = summarize(&direct);
    assert_eq!(row.psnr, s.psnr);
    assert_eq!(row.psnr_zero_fill, s.psnr);
    assert_eq!(row.token_loss, 0.0);
    assert_eq!(row.packet_loss, 0.0);
    assert_eq!(row.checkpoint_hash, b.hash);
    assert_eq!(row.config_hash, sp.config_hash());
    let full = sweep.rows.iter().find(|r| r.seed == 1 && r.loss_rate == 1.0).unwrap();
    assert_eq!(full.token_loss, 1.0);
    assert_eq!(sweep.summary.len(), 3);
    assert_eq!(sweep.records.len(), 2 * 3 * 5);
}

#[test]
fn bpp_overhead_is_relative_to_one_description() {
    let dir = tempfile::tempdir().unwrap();
    bundle(&dir.path().join("q1"), 1);
    bundle(&dir.path().join("q5"), 5);
    let sp = spec(dir.path());
    let out = run_bpp_overhead(&sp).unwrap();
    assert_eq!(out.rows.len(), 2 * 4);
    for r in out.rows.iter().filter(|r| r.descriptions == 1) {
        assert_eq!(r.overhead, 1.0);
    }
    assert_eq!(out.saturation.len(), 2);
    let path = dir.path().join("out/bpp.csv");
    write_csv(&path, &out.rows).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains("config_hash") && header.contains("checkpoint_hash") && header.contains("seeds"));
}

#[test]
fn retransmission_arm_respects_budget() {
    let dir = tempfile::tempdir().unwrap();
    bundle(&dir.path().join("q1"), 1);
    bundle(&dir.path().join("q5"), 5);
    let sp = ExperimentSpec {
        seeds: vec![3],
        session: SessionConfig {
            descriptions: 2,
            ..SessionConfig::default()
        },
        ..spec(dir.path())
    };
    let rows = run_rtx_compare(&sp).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);
    for r in rows.iter().filter(|r| r.arm == "rtx") {
        assert!(r.bytes_sent <= r.budget_bytes, "{r:?}");
    }
    for r in rows.iter().filter(|r| r.loss_rate == 0.0) {
        assert_eq!(r.packet_loss, 0.0, "{r:?}");
    }
    for arm in ["mdc", "rtx"] {
        let at = |rtt: f64| rows.iter().find(|r| r.arm == arm && r.rtt_ms == rtt && r.loss_rate == 0.3).unwrap().packet_loss;
        assert!(at(0.0) <= at(100.0), "{arm}");
    }
}

#[test]
fn runtime_breakdown_counts_passes() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path(), 5);
    let sp = ExperimentSpec {
        video: VideoSource::Synthetic {
            seed: 5,
            config: SyntheticConfig {
                width: 32,
                height: 32,
                frames: 2,
                ..SyntheticConfig::default()
            },
        },
        ..spec(dir.path())
    };
    let rep = run_runtime_breakdown_with(&sp, &b).unwrap();
    assert!(rep.passes_per_description.iter().all(|&p| p == sp.session.coder.schedule.steps));
    assert_eq!(rep.inference.len(), 3);
    assert_eq!(rep.inference[0].lost_tokens, 0.0);
    let share: f64 = rep.stages.iter().filter(|s| s.stage != "encode_total").map(|s| s.share).sum();
    assert!(share <= 1.0 + 1e-9);
}
