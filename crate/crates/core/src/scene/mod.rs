//! Synthetic driving scenes standing in for a recorded motion dataset.
//!
//! Each scene simulates 10 s at 5 Hz: 25 past frames are rasterized around
//! the ego vehicle and the following 25 ego positions, expressed in the ego
//! frame at the last past frame, are the prediction target.

mod config;
mod dataset;
mod kinematics;
mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{RasterConfig, ShiftConfig};
pub use dataset::{decode_dataset, decode_header, encode_dataset, read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION};
pub use kinematics::{rollout, to_frame, wrap_angle, AgentState};
pub use raster::{history_frames, pixel_center, rasterize, History};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seconds between frames (5 Hz).
pub const FRAME_DT: f64 = 0.2;
pub const PAST_FRAMES: usize = 25;
/// Prediction horizon T.
pub const HORIZON: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    InDomain,
    Shifted,
}

impl SplitTag {
    pub fn as_u8(self) -> u8 {
        match self {
            SplitTag::InDomain => 0,
            SplitTag::Shifted => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SplitTag::InDomain),
            1 => Ok(SplitTag::Shifted),
            _ => Err(Error::Format(format!("unknown split tag {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::InDomain => "in_domain",
            SplitTag::Shifted => "shifted",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" | "in_domain" => Ok(SplitTag::InDomain),
            "shifted" | "out" => Ok(SplitTag::Shifted),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected in|shifted)"))),
        }
    }
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub split: SplitTag,
    /// `(C, S, S)`, values in `[0, 1]`.
    pub raster: Tensor<f32>,
    /// `HORIZON` ego-frame positions in meters.
    pub future: Vec<[f32; 2]>,
}

impl SceneSample {
    pub fn check_invariants(&self) -> Result<()> {
        if self.future.len() != HORIZON || self.future.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("scene {}: future must hold {HORIZON} finite points", self.scene_id)));
        }
        if self.raster.rank() != 3 || self.raster.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!("scene {}: raster must be (C,S,S) in [0,1]", self.scene_id)));
        }
        Ok(())
    }

    pub fn future_f64(&self) -> Vec<[f64; 2]> {
        self.future.iter().map(|p| [p[0] as f64, p[1] as f64]).collect()
    }
}

/// Full-precision kinematics behind a scene, before rasterization.
#[derive(Clone, Debug)]
pub struct SimulatedScene {
    /// `PAST_FRAMES` frames of ego-frame states; agent 0 is the ego.
    pub history: Vec<Vec<AgentState>>,
    /// Ego-frame future ego positions.
    pub future: Vec<[f64; 2]>,
    /// World-frame initial states, ego first.
    pub initial: Vec<AgentState>,
}

/// Stable per-scene RNG seed derived from the config seed and scene seed.
fn scene_rng(cfg_seed: u64, seed: u64) -> ChaCha8Rng {
    let mut z = cfg_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_agent(cfg: &ShiftConfig, rng: &mut ChaCha8Rng) -> AgentState {
    let (lo, hi) = cfg.speed_range;
    let speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let zt: f64 = StandardNormal.sample(rng);
    let za: f64 = StandardNormal.sample(rng);
    let turn_rate = (cfg.turn_rate_mean + cfg.turn_rate_sigma * zt).clamp(-cfg.max_turn_rate, cfg.max_turn_rate);
    AgentState {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        speed,
        accel: cfg.accel_sigma * za,
        turn_rate,
    }
}

/// Simulates the kinematics of one scene. Pure in `(cfg, seed)`.
pub fn simulate(cfg: &ShiftConfig, seed: u64) -> Result<SimulatedScene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, seed);
    let frames = PAST_FRAMES + HORIZON;
    let now = PAST_FRAMES - 1;

    let ego0 = sample_agent(cfg, &mut rng);
    let ego_track = rollout(ego0, FRAME_DT, frames);
    let ego_now = ego_track[now];

    let (amin, amax) = cfg.agent_count_range;
    let others = rng.gen_range(amin..=amax);
    let mut tracks = vec![ego_track];
    for _ in 0..others {
        let mut a = sample_agent(cfg, &mut rng);
        a.heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        // Place the agent so it sits within ±24 m of the ego at the current frame.
        let ox: f64 = rng.gen_range(-24.0..24.0);
        let oy: f64 = rng.gen_range(-24.0..24.0);
        let raw = rollout(a, FRAME_DT, frames);
        let (sx, sy) = (ego_now.x + ox - raw[now].x, ego_now.y + oy - raw[now].y);
        tracks.push(
            raw.into_iter()
                .map(|s| AgentState { x: s.x + sx, y: s.y + sy, ..s })
                .collect(),
        );
    }

    let history = (0..PAST_FRAMES)
        .map(|f| tracks.iter().map(|t| t[f].to_frame_of(&ego_now)).collect())
        .collect();
    let future = tracks[0][PAST_FRAMES..]
        .iter()
        .map(|s| {
            let (x, y) = to_frame(s.x, s.y, &ego_now);
            [x, y]
        })
        .collect();
    let initial = tracks.iter().map(|t| t[0]).collect();
    Ok(SimulatedScene {
        history,
        future,
        initial,
    })
}

/// Simulates and rasterizes one scene; `scene_id = seed`.
pub fn generate_scene(cfg: &ShiftConfig, raster: &RasterConfig, split: SplitTag, seed: u64) -> Result<SceneSample> {
    let sim = simulate(cfg, seed)?;
    let raster = rasterize(&sim.history, raster)?;
    Ok(SceneSample {
        scene_id: seed,
        split,
        raster,
        future: sim.future.iter().map(|p| [p[0] as f32, p[1] as f32]).collect(),
    })
}

/// `count` scenes with consecutive seeds starting at `first_seed`.
pub fn generate_dataset(
    cfg: &ShiftConfig,
    raster: &RasterConfig,
    split: SplitTag,
    first_seed: u64,
    count: usize,
) -> Result<Vec<SceneSample>> {
    (0..count as u64)
        .map(|i| generate_scene(cfg, raster, split, first_seed + i))
        .collect()
}
