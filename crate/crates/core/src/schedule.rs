//! Quasi-low-discrepancy coding schedules: an ordered partition of one
//! description's token positions into groups of non-decreasing size.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub alpha: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 12, alpha: 2.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QldsSchedule {
    /// Token indices (into the frame's raster order) coded at each step.
    pub groups: Vec<Vec<usize>>,
}

impl QldsSchedule {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Token positions of groups `0..end`.
    pub fn prefix(&self, end: usize) -> impl Iterator<Item = usize> + '_ {
        self.groups[..end].iter().flatten().copied()
    }
}

fn interleave_bits(r: u32, q: u32, bits: u32) -> u64 {
    let mut z = 0u64;
    for b in 0..bits {
        z |= (((q >> b) & 1) as u64) << (2 * b);
        z |= (((r >> b) & 1) as u64) << (2 * b + 1);
    }
    z
}

fn reverse_bits(v: u64, width: u32) -> u64 {
    if width == 0 {
        0
    } else {
        v.reverse_bits() >> (64 - width)
    }
}

/// Orders grid positions by the bit-reversed Morton code of their `(row, col)`,
/// which visits the grid coarse-to-fine so every prefix is spread out.
pub fn low_discrepancy_order(positions: &[usize], w: usize, h: usize) -> Vec<usize> {
    let bits = (h.max(w).max(1) as u64).next_power_of_two().trailing_zeros();
    let mut keyed: Vec<(u64, usize)> = positions
        .iter()
        .map(|&p| {
            let (r, q) = ((p / w) as u32, (p % w) as u32);
            (reverse_bits(interleave_bits(r, q, bits), 2 * bits), p)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, p)| p).collect()
}

/// Group sizes: cumulative counts `round(n * (i / steps)^alpha)` differenced and
/// sorted ascending. When `n >= steps` every group gets at least one token by
/// moving tokens out of the largest groups; otherwise empty groups are dropped.
pub fn group_sizes(n: usize, params: &ScheduleParams) -> Vec<usize> {
    let steps = params.steps.max(1);
    let cum: Vec<usize> = (0..=steps)
        .map(|i| (n as f64 * (i as f64 / steps as f64).powf(params.alpha)).round() as usize)
        .collect();
    let mut sizes: Vec<usize> = cum.windows(2).map(|w| w[1] - w[0]).collect();
    sizes.sort_unstable();
    if n >= steps {
        while let Some(z) = sizes.iter().position(|&s| s == 0) {
            let largest = sizes.len() - 1;
            sizes[largest] -= 1;
            sizes[z] += 1;
            sizes.sort_unstable();
        }
    } else {
        sizes.retain(|&s| s > 0);
    }
    sizes
}

/// Schedule for the given description positions of an `h x w` grid.
pub fn build_schedule(positions: &[usize], h: usize, w: usize, params: &ScheduleParams) -> QldsSchedule {
    let order = low_discrepancy_order(positions, w, h);
    let mut groups = Vec::new();
    let mut start = 0;
    for size in group_sizes(order.len(), params) {
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    QldsSchedule { groups }
}
