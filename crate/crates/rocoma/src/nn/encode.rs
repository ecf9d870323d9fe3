//! Fixed feature encodings of grid states. Counts are normalized so the
//! networks see inputs of comparable scale regardless of fleet or grid size,
//! and time of day enters as a sine/cosine pair so midnight wraps smoothly.

use crate::mdp::{Grid, JointState, SLOT_OFFSETS};

/// Normalization constants shared by every encoder of one deployment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeNorm {
    pub fleet_size: f64,
    /// Largest charger count across regions; 1 if there are none.
    pub max_chargers: f64,
}

impl EncodeNorm {
    pub fn new(fleet_size: u32, max_chargers: u32) -> Self {
        EncodeNorm {
            fleet_size: f64::from(fleet_size.max(1)),
            max_chargers: f64::from(max_chargers.max(1)),
        }
    }
}

/// Length of the per-region (agent-local) encoding: own counts (5), each
/// non-self neighborhood slot's vacant/demand/empty-charger counts (4 x 3,
/// zeros off-grid), time of day (2), and grid coordinates (2).
pub const LOCAL_ENCODING_LEN: usize = 5 + 4 * 3 + 2 + 2;

/// Length of the joint (centralized critic) encoding for `n` regions.
pub fn joint_encoding_len(n_regions: usize) -> usize {
    5 * n_regions + 2
}

fn push_region(out: &mut Vec<f64>, state: &JointState, region: usize, norm: &EncodeNorm) {
    let r = &state.regions[region];
    out.push(f64::from(r.vacant) / norm.fleet_size);
    out.push(f64::from(r.low_battery) / norm.fleet_size);
    out.push(f64::from(r.demand) / norm.fleet_size);
    out.push(f64::from(r.empty_chargers) / f64::from(r.chargers.max(1)));
    out.push(f64::from(r.chargers) / norm.max_chargers);
}

fn push_time(out: &mut Vec<f64>, state: &JointState) {
    let phase = 2.0 * std::f64::consts::PI * state.time_of_day;
    out.push(phase.sin());
    out.push(phase.cos());
}

/// Agent-local view: the agent's own region counts, the counts its
/// rebalancing decision routes between (each adjacent slot's vacant, demand,
/// and empty chargers, in slot order, zeros where the slot leaves the grid),
/// time of day, and the agent's normalized grid coordinates.
pub fn encode_local(state: &JointState, region: usize, grid: &Grid, norm: &EncodeNorm) -> Vec<f64> {
    let mut out = Vec::with_capacity(LOCAL_ENCODING_LEN);
    push_region(&mut out, state, region, norm);
    let (row, col) = grid.position(region);
    for (dr, dc) in &SLOT_OFFSETS[1..] {
        let nr = row as i64 + dr;
        let nc = col as i64 + dc;
        if nr >= 0 && nr < grid.rows() as i64 && nc >= 0 && nc < grid.cols() as i64 {
            let r = &state.regions[grid.index(nr as usize, nc as usize)];
            out.push(f64::from(r.vacant) / norm.fleet_size);
            out.push(f64::from(r.demand) / norm.fleet_size);
            out.push(f64::from(r.empty_chargers) / f64::from(r.chargers.max(1)));
        } else {
            out.extend_from_slice(&[0.0, 0.0, 0.0]);
        }
    }
    push_time(&mut out, state);
    out.push(row as f64 / (grid.rows() - 1).max(1) as f64);
    out.push(col as f64 / (grid.cols() - 1).max(1) as f64);
    out
}

/// Centralized view: every region's counts plus time of day.
pub fn encode_joint(state: &JointState, norm: &EncodeNorm) -> Vec<f64> {
    let mut out = Vec::with_capacity(joint_encoding_len(state.regions.len()));
    for i in 0..state.regions.len() {
        push_region(&mut out, state, i, norm);
    }
    push_time(&mut out, state);
    out
}
