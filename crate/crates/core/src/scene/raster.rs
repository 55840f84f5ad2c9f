//! Ego-centred bird's-eye-view rasterization.
//!
//! Channel layout for `F = history_channels`:
//!
//! | channel   | content                                              |
//! |-----------|------------------------------------------------------|
//! | `0..F`    | binary occupancy of all agents at F evenly spaced past frames, oldest first, last = current |
//! | `F`       | ego footprint at the current frame                   |
//! | `F + 1`   | road band `|y| <= road_half_width`                   |
//! | `F + 2`   | current speed / `speed_norm` inside each footprint   |
//!
//! Pixel `(row, col)` has its centre at
//! `x = (col + 0.5 − S/2)·res`, `y = (S/2 − row − 0.5)·res`, so the ego sits at
//! the grid centre heading towards increasing columns.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::RasterConfig;
use super::kinematics::AgentState;

/// Frames of ego-frame agent states. Agent 0 of every frame is the ego.
pub type History = [Vec<AgentState>];

pub fn rasterize(history: &History, cfg: &RasterConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if history.is_empty() {
        return Err(Error::Config("rasterize: empty history".into()));
    }
    let s = cfg.size;
    let f = cfg.history_channels;
    let mut data = vec![0f32; cfg.channels() * s * s];
    let plane = s * s;
    let mut clipped = 0usize;

    let n = history.len();
    for (ch, frame) in history_frames(n, f).into_iter().enumerate() {
        let dst = &mut data[ch * plane..(ch + 1) * plane];
        for agent in &history[frame] {
            if !paint(dst, agent, cfg, 1.0) {
                clipped += 1;
            }
        }
    }

    let current = &history[n - 1];
    if let Some(ego) = current.first() {
        paint(&mut data[f * plane..(f + 1) * plane], ego, cfg, 1.0);
    }

    let road = &mut data[(f + 1) * plane..(f + 2) * plane];
    for row in 0..s {
        let (_, y) = pixel_center(row, 0, cfg);
        if y.abs() <= cfg.road_half_width {
            road[row * s..(row + 1) * s].fill(1.0);
        }
    }

    let speed = &mut data[(f + 2) * plane..(f + 3) * plane];
    for agent in current {
        let v = (agent.speed / cfg.speed_norm).clamp(0.0, 1.0) as f32;
        paint(speed, agent, cfg, v);
    }

    if clipped > 0 {
        log::debug!("rasterize: {clipped} agent footprints fully outside the raster");
    }
    Tensor::new(&[cfg.channels(), s, s], data)
}

/// Indices of the `f` frames sampled from `n`, evenly spaced and ending at the
/// last frame.
pub fn history_frames(n: usize, f: usize) -> Vec<usize> {
    let stride = (n / f).max(1);
    (0..f)
        .map(|i| (n - 1).saturating_sub((f - 1 - i) * stride))
        .collect()
}

pub fn pixel_center(row: usize, col: usize, cfg: &RasterConfig) -> (f64, f64) {
    let half = cfg.size as f64 / 2.0;
    (
        (col as f64 + 0.5 - half) * cfg.meters_per_pixel,
        (half - row as f64 - 0.5) * cfg.meters_per_pixel,
    )
}

/// Writes `max(existing, value)` into every pixel whose centre lies in the
/// agent's oriented footprint. Returns false if nothing was inside the grid.
fn paint(plane: &mut [f32], a: &AgentState, cfg: &RasterConfig, value: f32) -> bool {
    let s = cfg.size as isize;
    let res = cfg.meters_per_pixel;
    let (hl, hw) = (cfg.agent_length / 2.0, cfg.agent_width / 2.0);
    let reach = (hl * hl + hw * hw).sqrt();
    let half = cfg.size as f64 / 2.0;
    let col_lo = ((a.x - reach) / res + half - 0.5).floor() as isize;
    let col_hi = ((a.x + reach) / res + half - 0.5).ceil() as isize;
    let row_lo = (half - 0.5 - (a.y + reach) / res).floor() as isize;
    let row_hi = (half - 0.5 - (a.y - reach) / res).ceil() as isize;
    let (sin, cos) = a.heading.sin_cos();
    let mut any = false;
    for row in row_lo.max(0)..=row_hi.min(s - 1) {
        for col in col_lo.max(0)..=col_hi.min(s - 1) {
            let (px, py) = pixel_center(row as usize, col as usize, cfg);
            let (dx, dy) = (px - a.x, py - a.y);
            let along = cos * dx + sin * dy;
            let across = -sin * dx + cos * dy;
            if along.abs() <= hl && across.abs() <= hw {
                let p = &mut plane[row as usize * cfg.size + col as usize];
                *p = p.max(value);
                any = true;
            }
        }
    }
    any
}
