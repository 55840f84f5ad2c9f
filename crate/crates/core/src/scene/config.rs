use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Behaviour distributions for one domain. Two configs that differ only in
/// these knobs produce a controlled distributional shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Uniform range of initial speeds, m/s.
    pub speed_range: (f64, f64),
    /// Turn rates are `turn_rate_mean + turn_rate_sigma·N(0,1)`, clipped to
    /// `±max_turn_rate`, rad/s.
    pub turn_rate_mean: f64,
    pub turn_rate_sigma: f64,
    pub max_turn_rate: f64,
    /// Accelerations are `accel_sigma·N(0,1)`, m/s².
    pub accel_sigma: f64,
    /// Inclusive range for the number of non-ego agents.
    pub agent_count_range: (usize, usize),
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self::in_domain()
    }
}

impl ShiftConfig {
    pub fn in_domain() -> Self {
        Self {
            speed_range: (3.0, 10.0),
            turn_rate_mean: 0.0,
            turn_rate_sigma: 0.06,
            max_turn_rate: 0.5,
            accel_sigma: 0.4,
            agent_count_range: (0, 4),
            seed: 0,
        }
    }

    /// Faster, twistier driving with harder braking.
    pub fn shifted() -> Self {
        Self {
            speed_range: (3.0, 13.0),
            turn_rate_sigma: 0.16,
            accel_sigma: 0.8,
            agent_count_range: (2, 7),
            ..Self::in_domain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range;
        let (alo, ahi) = self.agent_count_range;
        let finite = [lo, hi, self.turn_rate_mean, self.turn_rate_sigma, self.max_turn_rate, self.accel_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("shift config values must be finite".into()));
        }
        if lo < 0.0 || lo > hi || alo > ahi {
            return Err(Error::Config(format!(
                "ranges must satisfy 0 <= min <= max: speed {:?}, agents {:?}",
                self.speed_range, self.agent_count_range
            )));
        }
        if self.turn_rate_sigma < 0.0 || self.accel_sigma < 0.0 || self.max_turn_rate < 0.0 {
            return Err(Error::Config("sigmas and max_turn_rate must be >= 0".into()));
        }
        if hi == 0.0 && ahi == 0 {
            return Err(Error::Config("degenerate scene: max speed 0 and no agents".into()));
        }
        Ok(())
    }

    /// Reads `speed_min`, `speed_max`, `turn_rate_mean`, `turn_rate_sigma`,
    /// `max_turn_rate`, `accel_sigma`, `agents_min`, `agents_max`, `seed` on top
    /// of `base`.
    pub fn from_kv(kv: &mut KvConfig, base: ShiftConfig) -> Result<Self> {
        let cfg = Self {
            speed_range: (
                kv.take_or("speed_min", base.speed_range.0)?,
                kv.take_or("speed_max", base.speed_range.1)?,
            ),
            turn_rate_mean: kv.take_or("turn_rate_mean", base.turn_rate_mean)?,
            turn_rate_sigma: kv.take_or("turn_rate_sigma", base.turn_rate_sigma)?,
            max_turn_rate: kv.take_or("max_turn_rate", base.max_turn_rate)?,
            accel_sigma: kv.take_or("accel_sigma", base.accel_sigma)?,
            agent_count_range: (
                kv.take_or("agents_min", base.agent_count_range.0)?,
                kv.take_or("agents_max", base.agent_count_range.1)?,
            ),
            seed: kv.take_or("seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Bird's-eye-view raster geometry and channel layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Grid side S in pixels.
    pub size: usize,
    pub meters_per_pixel: f64,
    /// Number of past frames kept as occupancy channels.
    pub history_channels: usize,
    pub road_half_width: f64,
    /// Speed that maps to 1.0 in the speed channel, m/s.
    pub speed_norm: f64,
    pub agent_length: f64,
    pub agent_width: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            size: 64,
            meters_per_pixel: 1.0,
            history_channels: 5,
            road_half_width: 6.0,
            speed_norm: 15.0,
            agent_length: 4.5,
            agent_width: 2.0,
        }
    }
}

impl RasterConfig {
    /// 128×128 at 0.5 m/px covers the same 64 m window as the default.
    pub fn full_scale() -> Self {
        Self {
            size: 128,
            meters_per_pixel: 0.5,
            ..Self::default()
        }
    }

    /// Raster of side `size` covering the default 64 m window.
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            meters_per_pixel: 64.0 / size as f64,
            ..Self::default()
        }
    }

    /// Occupancy frames + ego mask + road mask + speed map.
    pub fn channels(&self) -> usize {
        self.history_channels + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("raster size {} < 16", self.size)));
        }
        if self.history_channels == 0 || !(self.meters_per_pixel > 0.0) || !(self.speed_norm > 0.0) {
            return Err(Error::Config("raster needs >=1 history channel and positive scales".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig, base: RasterConfig) -> Result<Self> {
        let size = kv.take_or("raster_size", base.size)?;
        let default_res = if size == base.size {
            base.meters_per_pixel
        } else {
            base.meters_per_pixel * base.size as f64 / size as f64
        };
        let cfg = Self {
            size,
            meters_per_pixel: kv.take_or("meters_per_pixel", default_res)?,
            history_channels: kv.take_or("history_channels", base.history_channels)?,
            road_half_width: kv.take_or("road_half_width", base.road_half_width)?,
            speed_norm: kv.take_or("speed_norm", base.speed_norm)?,
            agent_length: base.agent_length,
            agent_width: base.agent_width,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
