//! `mdvc`: train, code, simulate and evaluate from the command line.
//!
//! Every verb accepts `--config <file.json>`. Keys of that JSON object use the
//! flag names in snake_case and override the corresponding flags. For the
//! experiment verbs the file is an experiment spec.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mdvc::codec::{CodecConfig, FrameCodec};
use mdvc::coding::{CoderConfig, SegmentPolicy};
use mdvc::container::StreamFile;
use mdvc::entropy_model::{EntropyModel, EntropyModelConfig};
use mdvc::harness::{self, ExperimentSpec, ModelBundle, Transport, VideoSource, CODEC_STEM, EM_STEM};
use mdvc::packet::MTU;
use mdvc::schedule::ScheduleParams;
use mdvc::session::{LossHandling, SessionConfig};
use mdvc::sim::{ChannelModel, LossMode, LossTrace, FRAME_INTERVAL_MS};
use mdvc::train::{self, ClipPool, LatentPool, TrainConfig, TrainReport};
use mdvc::video::{read_video, write_video, SyntheticConfig, Video};
use mdvc::{MdvcError, Result};

#[derive(Parser)]
#[command(name = "mdvc", version, about = "Multiple-description neural video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the frame codec on the rate-distortion objective.
    TrainStage1(TrainArgs),
    /// Train the entropy model on frozen codec latents.
    TrainStage2(TrainArgs),
    /// Fine-tune codec and entropy model jointly.
    TrainStage3(TrainArgs),
    /// Encode a video into a stream file.
    Encode(EncodeArgs),
    /// Decode a stream file without loss.
    Decode(DecodeArgs),
    /// Send a stream file through the channel simulator and decode what arrives.
    Simulate(SimulateArgs),
    /// Quality over the loss grid, with and without loss inference.
    SweepLoss(ExperimentArgs),
    /// Bitrate overhead of multiple descriptions over the quality grid.
    SweepBpp(ExperimentArgs),
    /// Equal-budget comparison against single-description retransmission.
    CompareRtx(ExperimentArgs),
    /// Per-stage timing and inference time against loss rate.
    Runtime(ExperimentArgs),
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct TrainArgs {
    /// JSON file whose keys override flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Model directory; read by later stages and written by every stage.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Quality index into the six-point λ grid (stage I only).
    #[arg(long, default_value_t = 5)]
    quality: usize,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Square crop side in pixels.
    #[arg(long, default_value_t = 32)]
    crop: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic training clips.
    #[arg(long, default_value_t = 32)]
    pool_clips: usize,
    #[arg(long, default_value_t = 64)]
    clip_size: usize,
    #[arg(long, default_value_t = 6)]
    clip_frames: usize,
    /// Entropy-model width (stage II only).
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    mlp_dim: usize,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct VideoArgs {
    /// Raw rgb24 video with a JSON sidecar.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate a synthetic clip with this seed instead of reading `--input`.
    #[arg(long)]
    synthetic_seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
}

impl VideoArgs {
    fn source(&self) -> Result<VideoSource> {
        match (&self.input, self.synthetic_seed) {
            (Some(p), None) => Ok(VideoSource::Path(p.clone())),
            (None, Some(seed)) => Ok(VideoSource::Synthetic {
                seed,
                config: SyntheticConfig {
                    width: self.width,
                    height: self.height,
                    frames: self.frames,
                    ..SyntheticConfig::default()
                },
            }),
            _ => Err(MdvcError::Config("give exactly one of --input and --synthetic-seed".into())),
        }
    }

    fn load(&self) -> Result<Video> {
        let src = self.source()?;
        if let VideoSource::Path(p) = &src {
            if !p.exists() {
                return Err(MdvcError::Config(format!("video {} does not exist", p.display())));
            }
        }
        src.load(0)
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SessionArgs {
    #[arg(long, default_value_t = 4)]
    descriptions: usize,
    /// Frames between context refreshes; 0 disables them.
    #[arg(long, default_value_t = 4)]
    refresh_period: usize,
    /// Coding passes per description.
    #[arg(long, default_value_t = 12)]
    steps: usize,
    #[arg(long, default_value_t = 2.2)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = Segments::MaxBytes)]
    segments: Segments,
    /// Segment size limit for `--segments max-bytes`.
    #[arg(long, default_value_t = mdvc::packet::DEFAULT_SEGMENT_BYTES)]
    segment_bytes: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Segments {
    PerDescription,
    PerGroup,
    MaxBytes,
}

impl SessionArgs {
    fn config(&self) -> SessionConfig {
        SessionConfig {
            descriptions: self.descriptions,
            refresh_period: self.refresh_period,
            coder: CoderConfig {
                schedule: ScheduleParams {
                    steps: self.steps,
                    alpha: self.alpha,
                },
                segments: match self.segments {
                    Segments::PerDescription => SegmentPolicy::PerDescription,
                    Segments::PerGroup => SegmentPolicy::PerGroup,
                    Segments::MaxBytes => SegmentPolicy::MaxBytes(self.segment_bytes),
                },
            },
        }
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct EncodeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    video: VideoArgs,
    #[command(flatten)]
    #[serde(flatten)]
    session: SessionArgs,
    /// Stream file to write.
    #[arg(long)]
    output: PathBuf,
    /// JSON-lines per-frame encoder measurements.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Handling {
    Infer,
    ZeroFill,
}

impl From<Handling> for LossHandling {
    fn from(h: Handling) -> Self {
        match h {
            Handling::Infer => LossHandling::Infer,
            Handling::ZeroFill => LossHandling::ZeroFill,
        }
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct DecodeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream file to read.
    #[arg(long)]
    input: PathBuf,
    /// Raw rgb24 video to write (with sidecar).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Source video for PSNR and MS-SSIM.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    refresh_period: usize,
    #[arg(long, value_enum, default_value_t = Handling::Infer)]
    handling: Handling,
    /// JSON-lines per-frame decoder records.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    decode: DecodeArgs,
    /// Independent per-packet drop probability.
    #[arg(long, default_value_t = 0.0)]
    loss_rate: f64,
    /// Loss trace CSV; replaces `--loss-rate`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    trace_wrap: bool,
    #[arg(long, default_value_t = 20.0)]
    rtt_ms: f64,
    #[arg(long, default_value_t = 20_000.0)]
    bandwidth_kbps: f64,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = FRAME_INTERVAL_MS)]
    deadline_ms: f64,
    #[arg(long, default_value_t = MTU)]
    mtu: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enables retransmission with this total byte budget.
    #[arg(long)]
    rtx_budget: Option<usize>,
    /// JSON-lines per-packet delivery outcomes.
    #[arg(long)]
    outcomes: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment spec JSON; its keys override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    quality: Option<usize>,
    #[arg(long)]
    descriptions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    loss_grid: Option<Vec<f64>>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl ExperimentArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::default();
        if let Some(v) = &self.checkpoints {
            spec.checkpoints = v.clone();
        }
        if let Some(v) = &self.output_dir {
            spec.output_dir = v.clone();
        }
        if let Some(v) = self.quality {
            spec.quality = v;
        }
        if let Some(v) = self.descriptions {
            spec.session.descriptions = v;
        }
        if let Some(v) = &self.seeds {
            spec.seeds = v.clone();
        }
        if let Some(v) = &self.loss_grid {
            spec.loss_grid = v.clone();
        }
        if self.trace.is_some() {
            spec.trace = self.trace.clone();
        }
        let spec: ExperimentSpec = overlay(spec, self.config.as_deref())?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies the keys of the JSON object in `path` on top of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let config_err = |m: String| MdvcError::Config(format!("{}: {m}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
    let over: Value = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    let Value::Object(over) = over else {
        return Err(config_err("expected a JSON object".into()));
    };
    let Value::Object(mut merged) = serde_json::to_value(&base)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (k, v) in over {
        let key = k.replace('-', "_");
        if !merged.contains_key(&key) {
            return Err(config_err(format!("unknown key `{k}`")));
        }
        merged.insert(key, v);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| config_err(e.to_string()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    harness::write_jsonl(BufWriter::new(File::create(path)?), rows)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    stage: u8,
    checkpoint: &'a Path,
    steps: usize,
    final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_after: Option<f64>,
    checkpoint_hash: String,
}

fn train_config(a: &TrainArgs, stage: u8) -> TrainConfig {
    let (steps, lr, warmup) = match stage {
        1 => (3000, 2e-3, 50),
        2 => (2000, 2e-3, 50),
        _ => (300, 5e-4, 10),
    };
    TrainConfig {
        steps: a.steps.unwrap_or(steps),
        batch: a.batch,
        crop: a.crop,
        lr: a.lr.unwrap_or(lr),
        warmup: a.warmup.unwrap_or(warmup),
        seed: a.seed,
        pool_clips: a.pool_clips,
        clip: SyntheticConfig {
            width: a.clip_size,
            height: a.clip_size,
            frames: a.clip_frames,
            ..SyntheticConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn train_stage(args: TrainArgs, stage: u8) -> Result<()> {
    let a: TrainArgs = overlay(args.clone(), args.config.as_deref())?;
    let cfg = train_config(&a, stage);
    let dir = &a.checkpoint;
    let pool = ClipPool::synthetic(&cfg.clip, cfg.pool_clips, cfg.seed);
    let val_pool = ClipPool::synthetic(&cfg.clip, 8, cfg.seed.wrapping_add(7919));
    let side = cfg.crop / mdvc::codec::DOWNSAMPLE;
    let (report, before, after): (TrainReport, Option<f64>, Option<f64>) = match stage {
        1 => {
            let mut codec = FrameCodec::new(CodecConfig {
                seed: cfg.seed,
                ..CodecConfig::for_quality(a.quality)?
            })?;
            let rep = train::train_stage1(&mut codec, &pool, &cfg)?;
            codec.save(dir, CODEC_STEM)?;
            (rep, None, None)
        }
        2 => {
            let codec = FrameCodec::load(dir, CODEC_STEM)?;
            let mut em = EntropyModel::new(EntropyModelConfig {
                dim: a.dim,
                layers: a.layers,
                heads: a.heads,
                mlp_dim: a.mlp_dim,
                latent_channels: codec.cfg.latent_channels,
                bound: codec.cfg.bound,
                seed: cfg.seed,
                ..EntropyModelConfig::default()
            })?;
            let val = LatentPool::new(&codec, &val_pool)?.validation_set(cfg.seed, 64, side, None)?;
            let before = train::masked_bitrate(&em, &val)?;
            let rep = train::train_stage2(&mut em, &LatentPool::new(&codec, &pool)?, &cfg)?;
            em.save(dir, EM_STEM)?;
            (rep, Some(before), Some(train::masked_bitrate(&em, &val)?))
        }
        _ => {
            let mut bundle = ModelBundle::load(dir)?;
            let val = LatentPool::new(&bundle.codec, &val_pool)?.validation_set(cfg.seed, 32, side, None)?;
            let before = train::validation_lagrangian(&bundle.codec, &bundle.em, &val_pool, &val, cfg.crop)?.0;
            let rep = train::train_stage3(&mut bundle.codec, &mut bundle.em, &pool, &cfg)?;
            let after = train::validation_lagrangian(&bundle.codec, &bundle.em, &val_pool, &val, cfg.crop)?.0;
            bundle.save(dir)?;
            (rep, Some(before), Some(after))
        }
    };
    if let Some(log) = &a.log {
        write_jsonl(log, &report.history)?;
    }
    let hash = if stage == 1 { String::new() } else { harness::checkpoint_hash(dir)? };
    print_json(&TrainSummary {
        stage,
        checkpoint: dir,
        steps: report.history.len(),
        final_loss: report.tail_loss(50),
        validation_before: before,
        validation_after: after,
        checkpoint_hash: hash,
    })
}

#[derive(Serialize)]
struct EncodeSummary {
    frames: usize,
    bpp: f64,
    payload_bytes: usize,
    header_bytes: usize,
    clamped: usize,
    checkpoint_hash: String,
}

fn encode(args: EncodeArgs) -> Result<()> {
    let a: EncodeArgs = overlay(args.clone(), args.config.as_deref())?;
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let video = a.video.load()?;
    let enc = harness::encode_video(&bundle, &video, &a.session.config())?;
    let file = StreamFile {
        width: video.width as u32,
        height: video.height as u32,
        frames: enc.frames.clone(),
    };
    std::fs::write(&a.output, file.to_bytes())?;
    if let Some(path) = &a.metrics {
        let pixels = (video.width * video.height) as f64;
        let rows = enc.reports.iter().enumerate().map(|(t, r)| {
            serde_json::json!({
                "frame": t,
                "bpp": (r.payload_bytes * 8) as f64 / pixels,
                "payload_bytes": r.payload_bytes,
                "header_bytes": r.header_bytes,
                "clamped": r.clamped,
                "model_bits": r.coding.model_bits,
                "transform_ms": r.transform_time.as_secs_f64() * 1e3,
                "model_ms": r.coding.model_time.as_secs_f64() * 1e3,
                "coder_ms": r.coding.coder_time.as_secs_f64() * 1e3,
                "encode_ms": r.total_time.as_secs_f64() * 1e3,
            })
        });
        write_jsonl(path, rows)?;
    }
    print_json(&EncodeSummary {
        frames: enc.frames.len(),
        bpp: enc.bpp(),
        payload_bytes: enc.reports.iter().map(|r| r.payload_bytes).sum(),
        header_bytes: enc.header_bytes(),
        clamped: enc.reports.iter().map(|r| r.clamped).sum(),
        checkpoint_hash: bundle.hash,
    })
}

#[derive(Serialize)]
struct DecodeSummary {
    frames: usize,
    token_loss: f64,
    packet_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ms_ssim: Option<f64>,
    checkpoint_hash: String,
}

fn decode_with(a: &DecodeArgs, transport: Option<&Transport>, outcomes: Option<&Path>) -> Result<()> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input).map_err(|e| MdvcError::Config(format!("{}: {e}", a.input.display())))?;
    let file = StreamFile::from_bytes(&bytes)?;
    let reference = a.reference.as_deref().map(read_video).transpose()?;
    let session = SessionConfig {
        refresh_period: a.refresh_period,
        ..SessionConfig::default()
    };
    let decoded = harness::decode_stream(&bundle, &file.frames, reference.as_ref(), &session, transport, a.handling.into())?;
    if let Some(path) = &a.output {
        write_video(path, &Video::new(decoded.iter().map(|d| d.frame.clone()).collect())?)?;
    }
    if let Some(path) = &a.log {
        write_jsonl(path, decoded.iter().map(|d| &d.record))?;
    }
    if let Some(path) = outcomes {
        write_jsonl(path, decoded.iter().filter_map(|d| d.delivery.as_ref()).flat_map(|o| &o.packets))?;
    }
    let s = harness::summarize(&decoded);
    print_json(&DecodeSummary {
        frames: decoded.len(),
        token_loss: s.token_loss,
        packet_loss: s.packet_loss,
        psnr: reference.as_ref().map(|_| s.psnr),
        ms_ssim: reference.as_ref().map(|_| s.ms_ssim),
        checkpoint_hash: bundle.hash,
    })
}

fn decode(args: DecodeArgs) -> Result<()> {
    let a: DecodeArgs = overlay(args.clone(), args.config.as_deref())?;
    decode_with(&a, None, None)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let a: SimulateArgs = overlay(args.clone(), args.decode.config.as_deref())?;
    let mut channel = ChannelModel::iid(a.loss_rate, a.rtt_ms, a.bandwidth_kbps, a.channels);
    if let Some(path) = &a.trace {
        channel.mode = LossMode::Trace {
            trace: LossTrace::load(path)?,
            wrap: a.trace_wrap,
        };
    }
    let transport = Transport {
        channel,
        seed: a.seed,
        deadline_ms: a.deadline_ms,
        mtu: a.mtu,
        rtx_budget: a.rtx_budget,
    };
    decode_with(&a.decode, Some(&transport), a.outcomes.as_deref())
}

fn sweep_loss(args: ExperimentArgs) -> Result<()> {
    let spec = args.spec()?;
    let out = harness::run_loss_sweep(&spec)?;
    let dir = &spec.output_dir;
    harness::write_csv(&dir.join("loss_sweep.csv"), &out.rows)?;
    harness::write_csv(&dir.join("loss_summary.csv"), &out.summary)?;
    let records = out.records.iter().map(|(rate, seed, r)| {
        let mut v = serde_json::to_value(r).expect("record serializes");
        v["loss_grid_rate"] = (*rate).into();
        v["seed"] = (*seed).into();
        v
    });
    write_jsonl(&dir.join("inference.jsonl"), records)?;
    for r in &out.summary {
        print_json(r)?;
    }
    Ok(())
}

fn sweep_bpp(args: ExperimentArgs) -> Result<()> {
    let spec = args.spec()?;
    let out = harness::run_bpp_overhead(&spec)?;
    harness::write_csv(&spec.output_dir.join("bpp_overhead.csv"), &out.rows)?;
    harness::write_csv(&spec.output_dir.join("bpp_saturation.csv"), &out.saturation)?;
    for r in &out.saturation {
        print_json(r)?;
    }
    Ok(())
}

fn compare_rtx(args: ExperimentArgs) -> Result<()> {
    let spec = args.spec()?;
    let rows = harness::run_rtx_compare(&spec)?;
    harness::write_csv(&spec.output_dir.join("rtx_compare.csv"), &rows)?;
    println!("{} rows written to {}", rows.len(), spec.output_dir.join("rtx_compare.csv").display());
    Ok(())
}

fn runtime(args: ExperimentArgs) -> Result<()> {
    let spec = args.spec()?;
    let rep = harness::run_runtime_breakdown(&spec)?;
    harness::write_csv(&spec.output_dir.join("runtime_stages.csv"), &rep.stages)?;
    harness::write_csv(&spec.output_dir.join("runtime_inference.csv"), &rep.inference)?;
    for r in &rep.stages {
        print_json(r)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainStage1(a) => train_stage(a, 1),
        Command::TrainStage2(a) => train_stage(a, 2),
        Command::TrainStage3(a) => train_stage(a, 3),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Simulate(a) => simulate(a),
        Command::SweepLoss(a) => sweep_loss(a),
        Command::SweepBpp(a) => sweep_bpp(a),
        Command::CompareRtx(a) => compare_rtx(a),
        Command::Runtime(a) => runtime(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
