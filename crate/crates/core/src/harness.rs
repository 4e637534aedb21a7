//! End-to-end experiments: encode, packetize, simulate delivery, decode with or
//! without loss inference, and measure. Each experiment returns typed rows that
//! serialize to CSV; every row carries its seed, the experiment config hash and
//! the checkpoint hash.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::FrameCodec;
use crate::coding::description_schedule;
use crate::container::FrameBitstream;
use crate::entropy_model::EntropyModel;
use crate::error::{MdvcError, Result};
use crate::metrics::{ms_ssim, psnr};
use crate::packet::{depacketize, packetize, Packet, PacketizerConfig, SessionParams, MTU};
use crate::session::{context_flags, Decoder, EncodeReport, Encoder, InferenceRecord, LossHandling, ReceivedFrame, SessionConfig};
use crate::schedule::ScheduleParams;
use crate::sim::{ChannelModel, DeliveryOutcome, LossMode, LossTrace, RtxConfig, Simulator, FRAME_INTERVAL_MS};
use crate::split::DescriptionSet;
use crate::video::{read_video, synthetic_video, Frame, SyntheticConfig, Video};

pub const CODEC_STEM: &str = "codec";
pub const EM_STEM: &str = "em";

/// A trained frame codec and entropy model stored side by side in one directory.
pub struct ModelBundle {
    pub codec: FrameCodec,
    pub em: EntropyModel,
    /// Short SHA-256 of both checkpoint files.
    pub hash: String,
}

impl ModelBundle {
    pub fn new(codec: FrameCodec, em: EntropyModel) -> Self {
        Self {
            codec,
            em,
            hash: String::new(),
        }
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.codec.save(dir, CODEC_STEM)?;
        self.em.save(dir, EM_STEM)?;
        self.hash = checkpoint_hash(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let codec = FrameCodec::load(dir, CODEC_STEM)?;
        let em = EntropyModel::load(dir, EM_STEM)?;
        if em.cfg.latent_channels != codec.cfg.latent_channels || em.cfg.bound != codec.cfg.bound {
            return Err(MdvcError::Checkpoint(format!(
                "{}: entropy model expects {} channels with bound {}, codec has {} and {}",
                dir.display(),
                em.cfg.latent_channels,
                em.cfg.bound,
                codec.cfg.latent_channels,
                codec.cfg.bound
            )));
        }
        Ok(Self {
            codec,
            em,
            hash: checkpoint_hash(dir)?,
        })
    }
}

/// SHA-256 over the codec and entropy-model checkpoint files, first 16 hex digits.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for stem in [CODEC_STEM, EM_STEM] {
        let path = dir.join(format!("{stem}.ckpt"));
        let bytes = std::fs::read(&path).map_err(|e| MdvcError::Checkpoint(format!("{}: {e}", path.display())))?;
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize())[..16].to_string())
}

/// Directory of the bundle for `quality` under `root`: `root/q<quality>` when it
/// exists, else `root` itself.
pub fn bundle_dir(root: &Path, quality: usize) -> PathBuf {
    let sub = root.join(format!("q{quality}"));
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoSource {
    /// Procedural clip; evaluation seed `k` uses generator seed `seed + k`.
    Synthetic { seed: u64, config: SyntheticConfig },
    /// Raw `rgb24` file or frame directory with its JSON sidecar.
    Path(PathBuf),
}

impl VideoSource {
    pub fn load(&self, eval_seed: u64) -> Result<Video> {
        match self {
            VideoSource::Synthetic { seed, config } => Ok(synthetic_video(config, seed.wrapping_add(eval_seed))),
            VideoSource::Path(p) => read_video(p),
        }
    }
}

/// One experiment description, read from JSON. Missing fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub video: VideoSource,
    /// Root of the trained bundles (`q<k>/` per quality index, or one bundle).
    pub checkpoints: PathBuf,
    pub quality: usize,
    pub session: SessionConfig,
    pub loss_grid: Vec<f64>,
    /// Optional loss trace; when set, the loss sweep runs the trace once per seed.
    pub trace: Option<PathBuf>,
    pub trace_wrap: bool,
    pub channels: usize,
    pub rtt_ms: f64,
    /// Per-channel bandwidth.
    pub bandwidth_kbps: f64,
    pub rtt_grid: Vec<f64>,
    pub deadline_ms: f64,
    pub mtu: usize,
    /// Description counts of the bpp-overhead sweep; must start with 1.
    pub description_counts: Vec<usize>,
    /// Quality indices of the bpp sweep and the retransmission arm's ladder.
    pub qualities: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            video: VideoSource::Synthetic {
                seed: 1000,
                config: SyntheticConfig {
                    width: 32,
                    height: 32,
                    frames: 20,
                    ..SyntheticConfig::default()
                },
            },
            checkpoints: PathBuf::from("checkpoints"),
            quality: 5,
            session: SessionConfig::default(),
            loss_grid: (0..=8).map(|i| i as f64 / 10.0).collect(),
            trace: None,
            trace_wrap: false,
            channels: 4,
            rtt_ms: 20.0,
            bandwidth_kbps: 20_000.0,
            rtt_grid: vec![0.0, 10.0, 40.0, 100.0],
            deadline_ms: FRAME_INTERVAL_MS,
            mtu: MTU,
            description_counts: vec![1, 2, 4, 8],
            qualities: (0..6).collect(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| MdvcError::Config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MdvcError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdvcError::Config(m));
        if let Some(&v) = self.loss_grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("loss grid value {v} outside [0, 1]"));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.quality >= 6 || self.qualities.iter().any(|&q| q >= 6) {
            return bad("quality indices must be in 0..=5".into());
        }
        if self.session.descriptions == 0 || self.channels == 0 {
            return bad("description and channel counts must be positive".into());
        }
        if self.description_counts.first() != Some(&1) {
            return bad("description_counts must start with 1".into());
        }
        if self.rtt_grid.iter().chain([&self.rtt_ms]).any(|&r| !(r >= 0.0)) || !(self.deadline_ms > 0.0) {
            return bad("RTTs must be non-negative and the deadline positive".into());
        }
        if let VideoSource::Path(p) = &self.video {
            if !p.exists() {
                return bad(format!("video {} does not exist", p.display()));
            }
        }
        if let Some(t) = &self.trace {
            if !t.exists() {
                return bad(format!("trace {} does not exist", t.display()));
            }
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    fn channel(&self, rate: f64, rtt_ms: f64) -> Result<ChannelModel> {
        let mut m = ChannelModel::iid(rate, rtt_ms, self.bandwidth_kbps, self.channels);
        if let Some(path) = &self.trace {
            m.mode = LossMode::Trace {
                trace: LossTrace::load(path)?,
                wrap: self.trace_wrap,
            };
        }
        Ok(m)
    }
}

/// A coded video with per-frame encoder reports.
pub struct EncodedVideo {
    pub source: Video,
    pub frames: Vec<FrameBitstream>,
    pub reports: Vec<EncodeReport>,
}

impl EncodedVideo {
    /// Mean payload bits per source pixel.
    pub fn bpp(&self) -> f64 {
        let bits: usize = self.reports.iter().map(|r| r.payload_bytes * 8).sum();
        bits as f64 / (self.source.width * self.source.height * self.frames.len().max(1)) as f64
    }

    pub fn header_bytes(&self) -> usize {
        self.reports.iter().map(|r| r.header_bytes).sum()
    }
}

pub fn encode_video(bundle: &ModelBundle, video: &Video, session: &SessionConfig) -> Result<EncodedVideo> {
    let mut enc = Encoder::new(&bundle.codec, &bundle.em, *session);
    let mut frames = Vec::with_capacity(video.len());
    let mut reports = Vec::with_capacity(video.len());
    for f in &video.frames {
        let (bits, report) = enc.encode(f)?;
        frames.push(bits);
        reports.push(report);
    }
    Ok(EncodedVideo {
        source: video.clone(),
        frames,
        reports,
    })
}

/// Network path for [`decode_video`].
#[derive(Clone, Debug)]
pub struct Transport {
    pub channel: ChannelModel,
    pub seed: u64,
    pub deadline_ms: f64,
    pub mtu: usize,
    /// Total bytes the sender may spend over the run; enables retransmission.
    pub rtx_budget: Option<usize>,
}

pub struct DecodedFrame {
    pub frame: Frame,
    pub record: InferenceRecord,
    pub delivery: Option<DeliveryOutcome>,
    /// Descriptions that arrived with every segment.
    pub complete_descriptions: usize,
}

/// Per-frame measurements, one JSON line each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub frame: usize,
    /// Payload bits over source pixels; container headers excluded.
    pub bpp: f64,
    pub header_bytes: usize,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub token_loss: f64,
    pub descriptions_received: usize,
    pub encode_ms: f64,
    pub transform_ms: f64,
    pub model_ms: f64,
    pub coder_ms: f64,
    pub infer_ms: f64,
    pub decode_ms: f64,
}

pub fn metrics_records(enc: &EncodedVideo, decoded: &[DecodedFrame]) -> Vec<MetricsRecord> {
    let pixels = (enc.source.width * enc.source.height) as f64;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    enc.reports
        .iter()
        .zip(decoded)
        .enumerate()
        .map(|(t, (r, d))| MetricsRecord {
            frame: t,
            bpp: (r.payload_bytes * 8) as f64 / pixels,
            header_bytes: r.header_bytes,
            psnr: d.record.psnr.unwrap_or(0.0),
            ms_ssim: d.record.ms_ssim.unwrap_or(0.0),
            token_loss: d.record.loss_rate,
            descriptions_received: d.complete_descriptions,
            encode_ms: ms(r.total_time),
            transform_ms: ms(r.transform_time),
            model_ms: ms(r.coding.model_time),
            coder_ms: ms(r.coding.coder_time),
            infer_ms: d.record.infer_ms,
            decode_ms: d.record.decode_ms,
        })
        .collect()
}

/// Decodes `enc`, optionally after sending each frame through `transport`,
/// and scores every frame against the source.
pub fn decode_video(
    bundle: &ModelBundle,
    enc: &EncodedVideo,
    session: &SessionConfig,
    transport: Option<&Transport>,
    handling: LossHandling,
) -> Result<Vec<DecodedFrame>> {
    decode_stream(bundle, &enc.frames, Some(&enc.source), session, transport, handling)
}

/// Decodes coded frames, optionally after sending each through `transport`.
/// Frame `t` is sent at `t * FRAME_INTERVAL_MS`. Quality fields of the
/// records are filled when `reference` is given.
pub fn decode_stream(
    bundle: &ModelBundle,
    frames: &[FrameBitstream],
    reference: Option<&Video>,
    session: &SessionConfig,
    transport: Option<&Transport>,
    handling: LossHandling,
) -> Result<Vec<DecodedFrame>> {
    if let Some(v) = reference {
        if v.len() < frames.len() {
            return Err(MdvcError::Config(format!("reference has {} frames, stream has {}", v.len(), frames.len())));
        }
    }
    let mut dec = Decoder::new(&bundle.codec, &bundle.em, *session, handling);
    let mut sim = transport.map(|t| Simulator::new(t.channel.clone(), t.seed)).transpose()?;
    let packet_lists = match transport {
        Some(t) => {
            let cfg = PacketizerConfig { mtu: t.mtu };
            let mut seq = 0u32;
            let mut lists = Vec::with_capacity(frames.len());
            for f in frames {
                let ps = packetize(f, &cfg, seq)?;
                seq = seq.wrapping_add(ps.len() as u32);
                lists.push(ps);
            }
            lists
        }
        None => Vec::new(),
    };
    let first_bytes: Vec<usize> = packet_lists.iter().map(|ps| ps.iter().map(Packet::wire_len).sum()).collect();
    let mut spent = 0usize;
    let mut out = Vec::with_capacity(frames.len());
    for (t, bits) in frames.iter().enumerate() {
        let (rx, delivery) = match (transport, sim.as_mut()) {
            (Some(tr), Some(sim)) => {
                let rtx = tr.rtx_budget.map(|total| {
                    let future: usize = first_bytes[t + 1..].iter().sum();
                    RtxConfig {
                        byte_budget: total.saturating_sub(spent + future),
                    }
                });
                let ps = &packet_lists[t];
                let outcome = sim.send_frame(ps, t as f64 * FRAME_INTERVAL_MS, tr.deadline_ms, rtx)?;
                spent += outcome.bytes_sent();
                let arrived: Vec<&Packet> = ps.iter().zip(&outcome.packets).filter(|(_, o)| o.delivered).map(|(p, _)| p).collect();
                let flags = context_flags(t, session.refresh_period);
                let rx = depacketize(bits.header.frame_index, &arrived, &SessionParams::of(&bits.header), flags);
                (rx, Some(outcome))
            }
            _ => (ReceivedFrame::complete(bits), None),
        };
        let complete_descriptions = complete_descriptions(&rx)?;
        let (frame, _, mut record) = dec.decode(&rx)?;
        if let Some(v) = reference {
            record.psnr = Some(psnr(&v.frames[t], &frame)?);
            record.ms_ssim = Some(ms_ssim(&v.frames[t], &frame)?);
        }
        out.push(DecodedFrame {
            frame,
            record,
            delivery,
            complete_descriptions,
        });
    }
    Ok(out)
}

fn complete_descriptions(rx: &ReceivedFrame) -> Result<usize> {
    let h = &rx.header;
    let set = DescriptionSet::new(h.h as usize, h.w as usize, h.s as usize)?;
    let params = ScheduleParams {
        steps: h.steps as usize,
        alpha: h.alpha,
    };
    Ok(rx
        .descriptions
        .iter()
        .filter(|d| {
            let total = description_schedule(&set, d.stream.id as usize, &params).len();
            let covered = d.segments.min(d.stream.cuts.len()).checked_sub(1).map_or(0, |k| d.stream.cuts[k].end_group as usize);
            covered >= total
        })
        .count())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs.iter().copied());
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Quality and loss summary of a decoded run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub psnr: f64,
    pub ms_ssim: f64,
    pub token_loss: f64,
    pub packet_loss: f64,
    pub bytes_sent: usize,
}

pub fn summarize(frames: &[DecodedFrame]) -> RunSummary {
    let packets: usize = frames.iter().filter_map(|f| f.delivery.as_ref()).map(|d| d.packets.len()).sum();
    let delivered: usize = frames.iter().filter_map(|f| f.delivery.as_ref()).map(|d| d.delivered()).sum();
    RunSummary {
        psnr: mean(frames.iter().map(|f| f.record.psnr.unwrap_or(0.0))),
        ms_ssim: mean(frames.iter().map(|f| f.record.ms_ssim.unwrap_or(0.0))),
        token_loss: mean(frames.iter().map(|f| f.record.loss_rate)),
        packet_loss: if packets == 0 { 0.0 } else { 1.0 - delivered as f64 / packets as f64 },
        bytes_sent: frames.iter().filter_map(|f| f.delivery.as_ref()).map(|d| d.bytes_sent()).sum(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSweepRow {
    pub loss_rate: f64,
    pub seed: u64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub psnr_zero_fill: f64,
    pub ms_ssim_zero_fill: f64,
    pub token_loss: f64,
    pub packet_loss: f64,
    pub bpp: f64,
    pub frames: usize,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummaryRow {
    pub loss_rate: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ms_ssim_mean: f64,
    pub ms_ssim_std: f64,
    pub psnr_zero_fill_mean: f64,
    pub psnr_zero_fill_std: f64,
    pub ms_ssim_zero_fill_mean: f64,
    pub token_loss_mean: f64,
    pub packet_loss_mean: f64,
    pub seeds: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

pub struct LossSweep {
    pub rows: Vec<LossSweepRow>,
    pub summary: Vec<LossSummaryRow>,
    /// Per-frame decoder records of the inference-enabled runs, tagged by loss rate and seed.
    pub records: Vec<(f64, u64, InferenceRecord)>,
}

/// PSNR/MS-SSIM over the loss grid, with and without loss inference. Each
/// seed selects the evaluation video and the channel's drop draws; points of
/// one seed share the same draws, so their loss patterns are nested.
pub fn run_loss_sweep(spec: &ExperimentSpec) -> Result<LossSweep> {
    spec.validate()?;
    let bundle = ModelBundle::load(&bundle_dir(&spec.checkpoints, spec.quality))?;
    run_loss_sweep_with(spec, &bundle)
}

pub fn run_loss_sweep_with(spec: &ExperimentSpec, bundle: &ModelBundle) -> Result<LossSweep> {
    let hash = spec.config_hash();
    let grid: Vec<f64> = if spec.trace.is_some() { vec![f64::NAN] } else { spec.loss_grid.clone() };
    let per_seed: Vec<Result<Vec<(LossSweepRow, Vec<InferenceRecord>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = spec
            .seeds
            .iter()
            .map(|&seed| {
                let grid = &grid;
                let hash = &hash;
                scope.spawn(move || -> Result<Vec<(LossSweepRow, Vec<InferenceRecord>)>> {
                    let video = spec.video.load(seed)?;
                    let enc = encode_video(bundle, &video, &spec.session)?;
                    let mut rows = Vec::new();
                    for &rate in grid {
                        let transport = Transport {
                            channel: spec.channel(if rate.is_nan() { 0.0 } else { rate }, spec.rtt_ms)?,
                            seed,
                            deadline_ms: spec.deadline_ms,
                            mtu: spec.mtu,
                            rtx_budget: None,
                        };
                        let inf = decode_video(bundle, &enc, &spec.session, Some(&transport), LossHandling::Infer)?;
                        let zf = decode_video(bundle, &enc, &spec.session, Some(&transport), LossHandling::ZeroFill)?;
                        let (a, b) = (summarize(&inf), summarize(&zf));
                        rows.push((
                            LossSweepRow {
                                loss_rate: if rate.is_nan() { a.packet_loss } else { rate },
                                seed,
                                psnr: a.psnr,
                                ms_ssim: a.ms_ssim,
                                psnr_zero_fill: b.psnr,
                                ms_ssim_zero_fill: b.ms_ssim,
                                token_loss: a.token_loss,
                                packet_loss: a.packet_loss,
                                bpp: enc.bpp(),
                                frames: enc.frames.len(),
                                config_hash: hash.clone(),
                                checkpoint_hash: bundle.hash.clone(),
                            },
                            inf.into_iter().map(|f| f.record).collect(),
                        ));
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for r in per_seed {
        for (row, recs) in r? {
            records.extend(recs.into_iter().map(|rec| (row.loss_rate, row.seed, rec)));
            rows.push(row);
        }
    }
    let seeds = spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    let summary = (0..grid.len())
        .map(|i| {
            let pts: Vec<&LossSweepRow> = rows.iter().skip(i).step_by(grid.len()).collect();
            let col = |f: fn(&LossSweepRow) -> f64| mean_std(&pts.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (pm, ps) = col(|r| r.psnr);
            let (mm, ms) = col(|r| r.ms_ssim);
            let (zm, zs) = col(|r| r.psnr_zero_fill);
            LossSummaryRow {
                loss_rate: col(|r| r.loss_rate).0,
                psnr_mean: pm,
                psnr_std: ps,
                ms_ssim_mean: mm,
                ms_ssim_std: ms,
                psnr_zero_fill_mean: zm,
                psnr_zero_fill_std: zs,
                ms_ssim_zero_fill_mean: col(|r| r.ms_ssim_zero_fill).0,
                token_loss_mean: col(|r| r.token_loss).0,
                packet_loss_mean: col(|r| r.packet_loss).0,
                seeds: seeds.clone(),
                config_hash: hash.clone(),
                checkpoint_hash: bundle.hash.clone(),
            }
        })
        .collect();
    Ok(LossSweep { rows, summary, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BppRow {
    pub quality: usize,
    pub lambda: f64,
    pub descriptions: usize,
    pub bpp: f64,
    pub overhead: f64,
    pub header_bytes_per_frame: f64,
    pub seeds: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// Whether the overhead curve flattens: the step from 4 to 8 descriptions is
/// smaller than the step from 1 to 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub quality: usize,
    pub early_step: f64,
    pub late_step: f64,
    pub saturating: bool,
}

pub struct BppSweep {
    pub rows: Vec<BppRow>,
    pub saturation: Vec<Saturation>,
}

pub fn run_bpp_overhead(spec: &ExperimentSpec) -> Result<BppSweep> {
    spec.validate()?;
    let mut bundles = Vec::new();
    for &q in &spec.qualities {
        bundles.push((q, ModelBundle::load(&bundle_dir(&spec.checkpoints, q))?));
    }
    let refs: Vec<(usize, &ModelBundle)> = bundles.iter().map(|(q, b)| (*q, b)).collect();
    run_bpp_overhead_with(spec, &refs)
}

pub fn run_bpp_overhead_with(spec: &ExperimentSpec, bundles: &[(usize, &ModelBundle)]) -> Result<BppSweep> {
    let hash = spec.config_hash();
    let seeds = spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    let videos = spec.seeds.iter().map(|&s| spec.video.load(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut saturation = Vec::new();
    for (q, bundle) in bundles {
        let mut bpps = Vec::new();
        for &s in &spec.description_counts {
            let session = SessionConfig {
                descriptions: s,
                ..spec.session
            };
            let (mut bits, mut pixels, mut header, mut frames) = (0usize, 0usize, 0usize, 0usize);
            for v in &videos {
                let enc = encode_video(bundle, v, &session)?;
                bits += enc.reports.iter().map(|r| r.payload_bytes * 8).sum::<usize>();
                pixels += v.width * v.height * v.len();
                header += enc.header_bytes();
                frames += v.len();
            }
            let bpp = bits as f64 / pixels as f64;
            bpps.push((s, bpp));
            rows.push(BppRow {
                quality: *q,
                lambda: bundle.codec.cfg.lambda,
                descriptions: s,
                bpp,
                overhead: bpp / bpps[0].1,
                header_bytes_per_frame: header as f64 / frames as f64,
                seeds: seeds.clone(),
                config_hash: hash.clone(),
                checkpoint_hash: bundle.hash.clone(),
            });
        }
        let at = |s: usize| bpps.iter().find(|&&(k, _)| k == s).map(|&(_, b)| b / bpps[0].1);
        if let (Some(o1), Some(o2), Some(o4), Some(o8)) = (at(1), at(2), at(4), at(8)) {
            saturation.push(Saturation {
                quality: *q,
                early_step: o2 - o1,
                late_step: o8 - o4,
                saturating: o8 - o4 < o2 - o1,
            });
        }
    }
    Ok(BppSweep { rows, saturation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtxRow {
    pub rtt_ms: f64,
    pub loss_rate: f64,
    pub seed: u64,
    /// `mdc` (multiple descriptions, no retransmission) or `rtx` (one description with retransmission).
    pub arm: String,
    pub quality: usize,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub bytes_sent: usize,
    pub budget_bytes: usize,
    pub packet_loss: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// Equal-byte-budget comparison. The budget of a run is the multiple-description
/// arm's wire bytes. The retransmission arm codes one description at the highest
/// quality whose first transmissions fit `budget * (1 - loss)`, and may spend
/// the rest of the budget on retransmissions. Each RTT point's deadline is
/// `deadline_ms + rtt / 2`, so loss-free first attempts always arrive.
pub fn run_rtx_compare(spec: &ExperimentSpec) -> Result<Vec<RtxRow>> {
    spec.validate()?;
    let mut ladder = Vec::new();
    for &q in &spec.qualities {
        ladder.push((q, ModelBundle::load(&bundle_dir(&spec.checkpoints, q))?));
    }
    let mdc = ModelBundle::load(&bundle_dir(&spec.checkpoints, spec.quality))?;
    let refs: Vec<(usize, &ModelBundle)> = ladder.iter().map(|(q, b)| (*q, b)).collect();
    run_rtx_compare_with(spec, &mdc, &refs)
}

fn wire_bytes(enc: &EncodedVideo, mtu: usize) -> Result<usize> {
    let cfg = PacketizerConfig { mtu };
    let mut total = 0;
    for f in &enc.frames {
        total += packetize(f, &cfg, 0)?.iter().map(Packet::wire_len).sum::<usize>();
    }
    Ok(total)
}

pub fn run_rtx_compare_with(spec: &ExperimentSpec, mdc: &ModelBundle, ladder: &[(usize, &ModelBundle)]) -> Result<Vec<RtxRow>> {
    if ladder.is_empty() {
        return Err(MdvcError::Config("the retransmission arm needs at least one quality".into()));
    }
    let hash = spec.config_hash();
    let single = SessionConfig {
        descriptions: 1,
        ..spec.session
    };
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let video = spec.video.load(seed)?;
        let enc = encode_video(mdc, &video, &spec.session)?;
        let budget = wire_bytes(&enc, spec.mtu)?;
        let singles = ladder
            .iter()
            .map(|(q, b)| {
                let e = encode_video(b, &video, &single)?;
                let bytes = wire_bytes(&e, spec.mtu)?;
                Ok((*q, *b, e, bytes))
            })
            .collect::<Result<Vec<_>>>()?;
        for &rtt in &spec.rtt_grid {
            for &loss in &spec.loss_grid {
                let transport = Transport {
                    channel: spec.channel(loss, rtt)?,
                    seed,
                    deadline_ms: spec.deadline_ms + rtt / 2.0,
                    mtu: spec.mtu,
                    rtx_budget: None,
                };
                let m = summarize(&decode_video(mdc, &enc, &spec.session, Some(&transport), LossHandling::Infer)?);
                rows.push(RtxRow {
                    rtt_ms: rtt,
                    loss_rate: loss,
                    seed,
                    arm: "mdc".into(),
                    quality: spec.quality,
                    psnr: m.psnr,
                    ms_ssim: m.ms_ssim,
                    bytes_sent: m.bytes_sent,
                    budget_bytes: budget,
                    packet_loss: m.packet_loss,
                    config_hash: hash.clone(),
                    checkpoint_hash: mdc.hash.clone(),
                });
                let cap = budget as f64 * (1.0 - loss);
                let pick = singles
                    .iter()
                    .filter(|s| s.3 as f64 <= cap)
                    .max_by_key(|s| s.0)
                    .or_else(|| singles.iter().min_by_key(|s| s.3))
                    .expect("ladder is not empty");
                let (q, bundle, e, _) = pick;
                let transport = Transport {
                    rtx_budget: Some(budget),
                    ..transport
                };
                let r = summarize(&decode_video(bundle, e, &single, Some(&transport), LossHandling::ZeroFill)?);
                rows.push(RtxRow {
                    rtt_ms: rtt,
                    loss_rate: loss,
                    seed,
                    arm: "rtx".into(),
                    quality: *q,
                    psnr: r.psnr,
                    ms_ssim: r.ms_ssim,
                    bytes_sent: r.bytes_sent,
                    budget_bytes: budget,
                    packet_loss: r.packet_loss,
                    config_hash: hash.clone(),
                    checkpoint_hash: bundle.hash.clone(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub stage: String,
    pub ms_per_frame: f64,
    pub share: f64,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTimeRow {
    pub loss_rate: f64,
    pub infer_ms: f64,
    pub lost_tokens: f64,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

pub struct RuntimeReport {
    pub stages: Vec<RuntimeRow>,
    pub inference: Vec<InferenceTimeRow>,
    /// Model passes per description, one entry per coded description.
    pub passes_per_description: Vec<usize>,
}

pub fn run_runtime_breakdown(spec: &ExperimentSpec) -> Result<RuntimeReport> {
    spec.validate()?;
    let bundle = ModelBundle::load(&bundle_dir(&spec.checkpoints, spec.quality))?;
    run_runtime_breakdown_with(spec, &bundle)
}

pub fn run_runtime_breakdown_with(spec: &ExperimentSpec, bundle: &ModelBundle) -> Result<RuntimeReport> {
    let hash = spec.config_hash();
    let seed = spec.seeds[0];
    let video = spec.video.load(seed)?;
    let enc = encode_video(bundle, &video, &spec.session)?;
    let frames = enc.reports.len().max(1) as f64;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3 / frames;
    let sum = |f: fn(&EncodeReport) -> std::time::Duration| enc.reports.iter().map(f).sum::<std::time::Duration>();
    let total = ms(sum(|r| r.total_time));
    let parts = [
        ("transform", ms(sum(|r| r.transform_time))),
        ("transformer_passes", ms(sum(|r| r.coding.model_time))),
        ("range_coding", ms(sum(|r| r.coding.coder_time))),
    ];
    let mut stages: Vec<RuntimeRow> = parts
        .iter()
        .map(|&(stage, v)| RuntimeRow {
            stage: stage.into(),
            ms_per_frame: v,
            share: v / total,
            seed,
            config_hash: hash.clone(),
            checkpoint_hash: bundle.hash.clone(),
        })
        .collect();
    stages.push(RuntimeRow {
        stage: "encode_total".into(),
        ms_per_frame: total,
        share: 1.0,
        seed,
        config_hash: hash.clone(),
        checkpoint_hash: bundle.hash.clone(),
    });
    let mut passes_per_description = Vec::new();
    for f in &enc.frames {
        let set = DescriptionSet::new(f.header.h as usize, f.header.w as usize, f.header.s as usize)?;
        let params = ScheduleParams {
            steps: f.header.steps as usize,
            alpha: f.header.alpha,
        };
        for id in 0..set.s {
            passes_per_description.push(description_schedule(&set, id, &params).len());
        }
    }
    let mut inference = Vec::new();
    for &rate in &spec.loss_grid {
        let transport = Transport {
            channel: spec.channel(rate, spec.rtt_ms)?,
            seed,
            deadline_ms: spec.deadline_ms,
            mtu: spec.mtu,
            rtx_budget: None,
        };
        let dec = decode_video(bundle, &enc, &spec.session, Some(&transport), LossHandling::Infer)?;
        inference.push(InferenceTimeRow {
            loss_rate: rate,
            infer_ms: mean(dec.iter().map(|d| d.record.infer_ms)),
            lost_tokens: mean(dec.iter().map(|d| d.record.lost_tokens as f64)),
            seed,
            config_hash: hash.clone(),
            checkpoint_hash: bundle.hash.clone(),
        });
    }
    Ok(RuntimeReport {
        stages,
        inference,
        passes_per_description,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
