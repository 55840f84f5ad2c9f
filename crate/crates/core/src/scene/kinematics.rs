//! Constant turn rate and acceleration (CTRA) motion, integrated in closed form.

/// Kinematic state of one agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, counter-clockwise from +x.
    pub heading: f64,
    /// m/s, never negative.
    pub speed: f64,
    /// m/s²
    pub accel: f64,
    /// rad/s
    pub turn_rate: f64,
}

impl AgentState {
    pub fn is_valid(&self, max_turn_rate: f64) -> bool {
        let finite = [self.x, self.y, self.heading, self.speed, self.accel, self.turn_rate]
            .iter()
            .all(|v| v.is_finite());
        finite && self.speed >= 0.0 && self.turn_rate.abs() <= max_turn_rate
    }

    /// Advances the state by `dt` seconds. Speed saturates at zero; a stopped
    /// agent neither moves nor turns.
    pub fn step(&self, dt: f64) -> AgentState {
        let mut s = *self;
        let mut remaining = dt;
        if s.accel < 0.0 && s.speed + s.accel * dt < 0.0 {
            let t_stop = -s.speed / s.accel;
            s = advance(&s, t_stop);
            s.speed = 0.0;
            remaining = 0.0;
        }
        if s.speed == 0.0 && s.accel <= 0.0 {
            return AgentState { speed: 0.0, ..s };
        }
        if remaining > 0.0 {
            s = advance(&s, remaining);
        }
        s
    }

    /// Converts into the frame whose origin is `origin`'s position with +x
    /// along its heading.
    pub fn to_frame_of(&self, origin: &AgentState) -> AgentState {
        let (px, py) = to_frame(self.x, self.y, origin);
        AgentState {
            x: px,
            y: py,
            heading: wrap_angle(self.heading - origin.heading),
            ..*self
        }
    }
}

/// World point into `origin`'s local frame.
pub fn to_frame(x: f64, y: f64, origin: &AgentState) -> (f64, f64) {
    let (s, c) = origin.heading.sin_cos();
    let (dx, dy) = (x - origin.x, y - origin.y);
    (c * dx + s * dy, -s * dx + c * dy)
}

pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + tau
    } else {
        w
    }
}

fn advance(s: &AgentState, dt: f64) -> AgentState {
    let (v0, a, w, th0) = (s.speed, s.accel, s.turn_rate, s.heading);
    let v1 = v0 + a * dt;
    let th1 = th0 + w * dt;
    let (dx, dy) = if w.abs() < 1e-9 {
        let d = v0 * dt + 0.5 * a * dt * dt;
        (d * th0.cos(), d * th0.sin())
    } else {
        let (s0, c0) = th0.sin_cos();
        let (s1, c1) = th1.sin_cos();
        let w2 = w * w;
        (
            (v1 * w * s1 - v0 * w * s0 + a * (c1 - c0)) / w2,
            (-v1 * w * c1 + v0 * w * c0 + a * (s1 - s0)) / w2,
        )
    };
    AgentState {
        x: s.x + dx,
        y: s.y + dy,
        heading: th1,
        speed: v1.max(0.0),
        ..*s
    }
}

/// Rolls `init` forward, returning `frames` states starting with `init`.
pub fn rollout(init: AgentState, dt: f64, frames: usize) -> Vec<AgentState> {
    let mut out = Vec::with_capacity(frames);
    let mut s = init;
    for _ in 0..frames {
        out.push(s);
        s = s.step(dt);
    }
    out
}
