//! Discrete-event delivery of packets over one or more lossy channels, with an
//! optional retransmission model.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdvcError, Result};
use crate::packet::Packet;

/// Inter-frame interval at 30 frames per second, in milliseconds.
pub const FRAME_INTERVAL_MS: f64 = 1000.0 / 30.0;
/// Retransmission timeout as a multiple of the round-trip time.
pub const RTX_TIMEOUT_RTT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_ms: f64,
    pub channel_id: usize,
    pub throughput_kbps: f64,
    pub drop_prob: f64,
}

/// Per-channel throughput and drop probability sampled over time.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    /// Rows per channel, sorted by time.
    channels: Vec<Vec<TraceRow>>,
}

impl LossTrace {
    pub fn new(rows: Vec<TraceRow>) -> Result<Self> {
        let count = rows.iter().map(|r| r.channel_id + 1).max().unwrap_or(0);
        let mut channels = vec![Vec::new(); count];
        for r in rows {
            if !(0.0..=1.0).contains(&r.drop_prob) || !r.throughput_kbps.is_finite() || r.throughput_kbps <= 0.0 || !r.time_ms.is_finite() {
                return Err(MdvcError::Trace(format!(
                    "row at {} ms on channel {} has drop_prob {} and throughput {}",
                    r.time_ms, r.channel_id, r.drop_prob, r.throughput_kbps
                )));
            }
            let ch = &mut channels[r.channel_id];
            if ch.last().is_some_and(|l: &TraceRow| l.time_ms >= r.time_ms) {
                return Err(MdvcError::Trace(format!(
                    "times on channel {} are not strictly increasing at {} ms",
                    r.channel_id, r.time_ms
                )));
            }
            ch.push(r);
        }
        if let Some(empty) = channels.iter().position(Vec::is_empty) {
            return Err(MdvcError::Trace(format!("channel {empty} has no rows")));
        }
        Ok(Self { channels })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.channels.iter().flatten()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["time_ms", "channel_id", "throughput_kbps", "drop_prob"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(MdvcError::Trace(format!("trace header must be {}", expected.join(","))));
        }
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRow>, _>>()
            .map_err(|e| MdvcError::Trace(e.to_string()))?;
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| MdvcError::Trace(format!("{}: {e}", path.display())))?;
        Self::read_csv(f)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut rows: Vec<&TraceRow> = self.rows().collect();
        rows.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms).then(a.channel_id.cmp(&b.channel_id)));
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Row governing `channel` at time `t`. The trace covers each channel from its
    /// first sample to one sampling step past its last.
    pub fn row_at(&self, channel: usize, t: f64, wrap: bool) -> Result<&TraceRow> {
        let rows = self
            .channels
            .get(channel)
            .ok_or_else(|| MdvcError::Trace(format!("trace has no channel {channel}")))?;
        let first = rows[0].time_ms;
        let step = if rows.len() > 1 {
            rows[rows.len() - 1].time_ms - rows[rows.len() - 2].time_ms
        } else {
            f64::INFINITY
        };
        let end = rows[rows.len() - 1].time_ms + step;
        let mut t = t;
        if t < first || t >= end {
            if !wrap || !end.is_finite() {
                return Err(MdvcError::Trace(format!(
                    "simulation time {t:.3} ms outside the trace span [{first}, {end}) of channel {channel}"
                )));
            }
            t = first + (t - first).rem_euclid(end - first);
        }
        let i = rows.partition_point(|r| r.time_ms <= t);
        Ok(&rows[i - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossMode {
    Iid { rate: f64 },
    #[serde(skip)]
    Trace { trace: LossTrace, wrap: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelModel {
    pub mode: LossMode,
    pub rtt_ms: f64,
    /// Per-channel bandwidth in iid mode; trace mode takes throughput from the trace.
    pub bandwidth_kbps: f64,
    pub channels: usize,
}

impl ChannelModel {
    pub fn iid(rate: f64, rtt_ms: f64, bandwidth_kbps: f64, channels: usize) -> Self {
        Self {
            mode: LossMode::Iid { rate },
            rtt_ms,
            bandwidth_kbps,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(MdvcError::Config("channel count must be at least 1".into()));
        }
        if !(self.rtt_ms >= 0.0) || !(self.bandwidth_kbps > 0.0) {
            return Err(MdvcError::Config(format!(
                "RTT {} ms must be non-negative and bandwidth {} kbps positive",
                self.rtt_ms, self.bandwidth_kbps
            )));
        }
        match &self.mode {
            LossMode::Iid { rate } if !(0.0..=1.0).contains(rate) => {
                Err(MdvcError::Config(format!("loss rate {rate} outside [0, 1]")))
            }
            LossMode::Trace { trace, .. } if trace.channel_count() < self.channels => Err(MdvcError::Trace(format!(
                "trace has {} channels, {} configured",
                trace.channel_count(),
                self.channels
            ))),
            _ => Ok(()),
        }
    }

    /// Drop probability and bandwidth of `channel` at time `t`.
    fn conditions(&self, channel: usize, t: f64) -> Result<(f64, f64)> {
        match &self.mode {
            LossMode::Iid { rate } => Ok((*rate, self.bandwidth_kbps)),
            LossMode::Trace { trace, wrap } => {
                let r = trace.row_at(channel, t, *wrap)?;
                Ok((r.drop_prob, r.throughput_kbps))
            }
        }
    }
}

/// Chooses the channel a packet is sent on.
pub trait AssignmentPolicy {
    fn channel(&self, packet: &Packet, channels: usize) -> usize;
}

/// Description `d` goes to channel `d mod channels`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByDescription;

impl AssignmentPolicy for ByDescription {
    fn channel(&self, packet: &Packet, channels: usize) -> usize {
        packet.description as usize % channels
    }
}

/// Fate of one packet, one JSON line in the outcome log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketOutcome {
    pub packet_id: u32,
    pub frame: u32,
    pub description: u16,
    pub channel: usize,
    /// Time of the first transmission.
    pub sent_ms: f64,
    pub delivered: bool,
    /// Arrival of the successful copy, if one arrived in time.
    pub arrival_ms: Option<f64>,
    pub attempts: u32,
    /// Wire bytes sent for this packet over all attempts.
    pub bytes_sent: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeliveryOutcome {
    pub packets: Vec<PacketOutcome>,
}

impl DeliveryOutcome {
    pub fn delivered(&self) -> usize {
        self.packets.iter().filter(|p| p.delivered).count()
    }

    pub fn loss_rate(&self) -> f64 {
        if self.packets.is_empty() {
            return 0.0;
        }
        1.0 - self.delivered() as f64 / self.packets.len() as f64
    }

    pub fn bytes_sent(&self) -> usize {
        self.packets.iter().map(|p| p.bytes_sent).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.packets {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Retransmission settings; `None` in [`Simulator::send_frame`] means a single attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtxConfig {
    /// Bytes the sender may put on the wire for this frame, retransmissions included.
    pub byte_budget: usize,
}

/// Channel state that persists across frames: queue occupancy and the seed
/// from which every drop decision is derived.
pub struct Simulator<A: AssignmentPolicy = ByDescription> {
    pub model: ChannelModel,
    pub policy: A,
    pub seed: u64,
    free_at: Vec<f64>,
}

impl Simulator<ByDescription> {
    pub fn new(model: ChannelModel, seed: u64) -> Result<Self> {
        Self::with_policy(model, ByDescription, seed)
    }
}

impl<A: AssignmentPolicy> Simulator<A> {
    pub fn with_policy(model: ChannelModel, policy: A, seed: u64) -> Result<Self> {
        model.validate()?;
        let free_at = vec![0.0; model.channels];
        Ok(Self {
            model,
            policy,
            seed,
            free_at,
        })
    }

    /// Uniform draw shared by every run with the same seed, packet and attempt.
    fn draw(&self, seq: u32, attempt: u32) -> f64 {
        let key = self.seed ^ ((seq as u64) << 20 | attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        ChaCha8Rng::seed_from_u64(key).random()
    }

    /// Sends one frame's packets starting at `start_ms`. A packet counts as
    /// delivered if a copy arrives by `start_ms + deadline_ms`.
    pub fn send_frame(&mut self, packets: &[Packet], start_ms: f64, deadline_ms: f64, rtx: Option<RtxConfig>) -> Result<DeliveryOutcome> {
        let deadline = start_ms + deadline_ms;
        let rtt = self.model.rtt_ms;
        let mut out: Vec<PacketOutcome> = Vec::with_capacity(packets.len());
        let mut heap = BinaryHeap::new();
        for (i, p) in packets.iter().enumerate() {
            let channel = self.policy.channel(p, self.model.channels);
            if channel >= self.model.channels {
                return Err(MdvcError::Config(format!("policy chose channel {channel} of {}", self.model.channels)));
            }
            out.push(PacketOutcome {
                packet_id: p.seq,
                frame: p.frame,
                description: p.description,
                channel,
                sent_ms: f64::NAN,
                delivered: false,
                arrival_ms: None,
                attempts: 0,
                bytes_sent: 0,
            });
            heap.push(Reverse((start_ms.to_bits(), i)));
        }
        let mut spent = 0usize;
        while let Some(Reverse((ready_bits, i))) = heap.pop() {
            let ready = f64::from_bits(ready_bits);
            let o = &mut out[i];
            let size = packets[i].wire_len();
            let send = ready.max(self.free_at[o.channel]);
            if o.attempts > 0 {
                let budget_left = rtx.is_some_and(|r| spent + size <= r.byte_budget);
                if !budget_left || send > deadline {
                    continue;
                }
            }
            let (drop_p, kbps) = self.model.conditions(o.channel, send)?;
            let ser = size as f64 * 8.0 / kbps;
            self.free_at[o.channel] = send + ser;
            let arrival = send + ser + rtt / 2.0;
            if o.attempts == 0 {
                o.sent_ms = send;
            }
            let dropped = self.draw(packets[i].seq, o.attempts) < drop_p;
            o.attempts += 1;
            o.bytes_sent += size;
            spent += size;
            if !dropped && arrival <= deadline {
                o.delivered = true;
                o.arrival_ms = Some(arrival);
            } else if rtx.is_some() && dropped {
                let retry = send + RTX_TIMEOUT_RTT * rtt;
                heap.push(Reverse((retry.max(send).to_bits(), i)));
            }
        }
        Ok(DeliveryOutcome { packets: out })
    }
}

/// Fully random seeded loss pattern for tests and examples.
pub fn random_trace(channels: usize, rows: usize, step_ms: f64, seed: u64) -> LossTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(channels * rows);
    for i in 0..rows {
        for ch in 0..channels {
            all.push(TraceRow {
                time_ms: i as f64 * step_ms,
                channel_id: ch,
                throughput_kbps: rng.random_range(2_000.0..20_000.0),
                drop_prob: rng.random_range(0.0..0.6),
            });
        }
    }
    LossTrace::new(all).expect("generated rows are valid")
}
