//! Deterministic planar character world.
//!
//! The character is a point body with a heading, a controllable body height
//! and a sprung arm whose phase acts as a gait oscillator. Blocks tip over
//! when the character runs into them fast enough.
//!
//! Control runs at 30 Hz; each control tick integrates four semi-implicit
//! Euler substeps at 120 Hz.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONTROL_HZ: f64 = 30.0;
pub const SUBSTEPS: usize = 4;
pub const DT: f64 = 1.0 / (CONTROL_HZ * SUBSTEPS as f64);

pub const H_MIN: f64 = 0.3;
pub const H_MAX: f64 = 1.2;
pub const H_STAND: f64 = 0.9;
pub const V_MAX: f64 = 5.0;
pub const OMEGA_LIMIT: f64 = 6.0;

/// Forward acceleration at full command (m/s²).
pub const ACCEL_MAX: f64 = 2.5;
/// Linear drag (1/s).
pub const DRAG: f64 = 0.5;
/// Turn-rate target at full command (rad/s).
pub const TURN_MAX: f64 = 3.0;
pub const TURN_TAU: f64 = 0.1;
/// Height-rate target at full command (m/s).
pub const HEIGHT_RATE_MAX: f64 = 1.0;
pub const HEIGHT_TAU: f64 = 0.1;
/// Arm spring stiffness (rad²/s², a 0.5 Hz natural frequency).
pub const ARM_STIFFNESS: f64 = PI * PI;
pub const ARM_DAMPING: f64 = 0.5;
pub const ARM_GAIN: f64 = 12.0;

pub const CHARACTER_RADIUS: f64 = 0.3;
pub const OBJECT_RADIUS: f64 = 0.5;
/// Minimum approach speed (m/s) for a contact to push a block.
pub const IMPACT_MIN_SPEED: f64 = 0.5;
/// Tilt-rate gain per unit approach speed (rad/s per m/s).
pub const K_IMPACT: f64 = 0.8;
/// Restoring tilt speed while upright (rad/s).
pub const TILT_RELAX: f64 = 0.5;
/// Exponential decay of tilt rate (1/s).
pub const TILT_DAMPING: f64 = 0.5;
/// Up-dot below which a block counts as toppled.
pub const TOPPLE_UPDOT: f64 = 0.3;

/// Observation layout: `[h, ḣ, v_fwd, v_lat, ω, a, ȧ]`.
pub const OBS_DIM: usize = 7;
pub const ACTION_DIM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite state at t = {time:.4}s: {snapshot}")]
    NonFinite { time: f64, snapshot: String },
    #[error("could not place {count} objects without overlap in {attempts} attempts")]
    Placement { count: usize, attempts: usize },
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterState {
    pub p: [f64; 2],
    pub theta: f64,
    pub v: [f64; 2],
    pub omega: f64,
    pub h: f64,
    pub h_rate: f64,
    pub arm: f64,
    pub arm_rate: f64,
}

impl CharacterState {
    pub fn at_rest(theta: f64) -> Self {
        Self {
            p: [0.0, 0.0],
            theta,
            v: [0.0, 0.0],
            omega: 0.0,
            h: H_STAND,
            h_rate: 0.0,
            arm: 0.0,
            arm_rate: 0.0,
        }
    }

    pub fn heading(&self) -> [f64; 2] {
        [self.theta.cos(), self.theta.sin()]
    }

    /// World vector expressed in the character frame (x forward, y left).
    pub fn to_local(&self, w: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * w[0] + s * w[1], -s * w[0] + c * w[1]]
    }

    pub fn to_world(&self, l: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * l[0] - s * l[1], s * l[0] + c * l[1]]
    }

    pub fn speed(&self) -> f64 {
        self.v[0].hypot(self.v[1])
    }

    /// Overwrites the local-frame kinematic state from an observation
    /// vector, keeping position and heading.
    pub fn set_from_observation(&mut self, obs: &[f64; OBS_DIM]) {
        self.h = obs[0].clamp(H_MIN, H_MAX);
        self.h_rate = obs[1];
        self.v = self.to_world([obs[2], obs[3]]);
        self.omega = obs[4].clamp(-OMEGA_LIMIT, OMEGA_LIMIT);
        self.arm = obs[5].clamp(-1.0, 1.0);
        self.arm_rate = obs[6];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: String,
    pub color: String,
    pub p: [f64; 2],
    pub radius: f64,
    pub tilt: f64,
    pub tilt_rate: f64,
    pub toppled: bool,
    #[serde(default)]
    pub in_contact: bool,
}

impl SimObject {
    pub fn upright(id: impl Into<String>, color: impl Into<String>, p: [f64; 2]) -> Self {
        Self {
            id: id.into(),
            color: color.into(),
            p,
            radius: OBJECT_RADIUS,
            tilt: 0.0,
            tilt_rate: 0.0,
            toppled: false,
            in_contact: false,
        }
    }

    /// `u*·u_up`, the cosine of the tilt.
    pub fn updot(&self) -> f64 {
        self.tilt.cos()
    }

    pub fn is_toppled(&self) -> bool {
        self.toppled
    }
}

/// Bounded drive commands, each in `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub forward: f64,
    pub turn: f64,
    pub height: f64,
    pub arm: f64,
}

impl Action {
    pub fn new(forward: f64, turn: f64, height: f64, arm: f64) -> Self {
        Self {
            forward,
            turn,
            height,
            arm,
        }
        .clamped()
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Non-finite components become 0; the rest are clamped to `[-1, 1]`.
    pub fn clamped(self) -> Self {
        let c = |x: f64| if x.is_finite() { x.clamp(-1.0, 1.0) } else { 0.0 };
        Self {
            forward: c(self.forward),
            turn: c(self.turn),
            height: c(self.height),
            arm: c(self.arm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub character: CharacterState,
    pub objects: Vec<SimObject>,
    pub time: f64,
    pub tick: u64,
}

impl WorldState {
    pub fn new(character: CharacterState, objects: Vec<SimObject>) -> Result<Self, SimError> {
        let mut ids: Vec<&str> = objects.iter().map(|o| o.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::Config("object ids must be unique".into()));
        }
        Ok(Self {
            character,
            objects,
            time: 0.0,
            tick: 0,
        })
    }

    pub fn object(&self, id: &str) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Rotates the whole scene by `angle` about the origin, then translates it.
    pub fn transformed(&self, angle: f64, shift: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let tr = |p: [f64; 2]| {
            let r = rot(p);
            [r[0] + shift[0], r[1] + shift[1]]
        };
        let mut out = self.clone();
        out.character.p = tr(self.character.p);
        out.character.v = rot(self.character.v);
        out.character.theta = self.character.theta + angle;
        for o in &mut out.objects {
            o.p = tr(o.p);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Colors of the blocks to place; one block per entry.
    pub object_colors: Vec<String>,
    pub annulus: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            object_colors: ["red", "green", "blue", "orange"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            annulus: [3.0, 8.0],
        }
    }
}

impl EnvConfig {
    pub fn empty() -> Self {
        Self {
            object_colors: Vec::new(),
            annulus: [3.0, 8.0],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let [lo, hi] = self.annulus;
        if !(lo >= 0.0 && hi > lo) {
            return Err(SimError::Config(format!("bad annulus [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Character at the origin with a random heading; blocks placed uniformly
/// (by area) in the configured annulus without overlap.
pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Result<WorldState, SimError> {
    config.validate()?;
    let theta = rng.random_range(-PI..PI);
    let character = CharacterState::at_rest(theta);
    let [r0, r1] = config.annulus;
    let mut objects: Vec<SimObject> = Vec::with_capacity(config.object_colors.len());
    let attempts_max = 1000;
    let mut attempts = 0;
    for color in &config.object_colors {
        loop {
            attempts += 1;
            if attempts > attempts_max {
                return Err(SimError::Placement {
                    count: config.object_colors.len(),
                    attempts: attempts_max,
                });
            }
            let u: f64 = rng.random();
            let r = (r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt();
            let phi = rng.random_range(-PI..PI);
            let p = [r * phi.cos(), r * phi.sin()];
            let clear = objects.iter().all(|o| {
                let d = (o.p[0] - p[0]).hypot(o.p[1] - p[1]);
                d >= o.radius + OBJECT_RADIUS
            });
            if clear {
                objects.push(SimObject::upright(color.clone(), color.clone(), p));
                break;
            }
        }
    }
    WorldState::new(character, objects)
}

/// One control tick: `substeps` integration steps of [`DT`].
pub fn step(world: &WorldState, action: Action, substeps: usize) -> Result<WorldState, SimError> {
    let mut w = world.clone();
    step_in_place(&mut w, action, substeps)?;
    Ok(w)
}

pub fn step_in_place(w: &mut WorldState, action: Action, substeps: usize) -> Result<(), SimError> {
    let a = action.clamped();
    for _ in 0..substeps {
        substep(w, a, DT);
    }
    w.tick += 1;
    if !state_finite(w) {
        return Err(SimError::NonFinite {
            time: w.time,
            snapshot: serde_json::to_string(&w.character).unwrap_or_default(),
        });
    }
    Ok(())
}

fn state_finite(w: &WorldState) -> bool {
    let c = &w.character;
    [
        c.p[0], c.p[1], c.theta, c.v[0], c.v[1], c.omega, c.h, c.h_rate, c.arm, c.arm_rate,
    ]
    .iter()
    .all(|x| x.is_finite())
        && w
            .objects
            .iter()
            .all(|o| o.tilt.is_finite() && o.tilt_rate.is_finite())
}

/// Semi-implicit Euler: rates first, then positions from the new rates.
pub(crate) fn substep(w: &mut WorldState, a: Action, dt: f64) {
    let c = &mut w.character;

    // Linear: thrust along heading, linear drag, speed cap.
    let (s, co) = c.theta.sin_cos();
    let thrust = ACCEL_MAX * a.forward;
    c.v[0] += (thrust * co - DRAG * c.v[0]) * dt;
    c.v[1] += (thrust * s - DRAG * c.v[1]) * dt;
    let speed = c.speed();
    if speed > V_MAX {
        c.v[0] *= V_MAX / speed;
        c.v[1] *= V_MAX / speed;
    }

    // Turn rate and height rate track their commanded targets.
    c.omega += (TURN_MAX * a.turn - c.omega) * (dt / TURN_TAU);
    c.omega = c.omega.clamp(-OMEGA_LIMIT, OMEGA_LIMIT);
    c.h_rate += (HEIGHT_RATE_MAX * a.height - c.h_rate) * (dt / HEIGHT_TAU);

    // Arm: driven damped spring.
    let arm_acc = -ARM_STIFFNESS * c.arm - ARM_DAMPING * c.arm_rate + ARM_GAIN * a.arm;
    c.arm_rate += arm_acc * dt;

    c.p[0] += c.v[0] * dt;
    c.p[1] += c.v[1] * dt;
    c.theta = wrap_angle(c.theta + c.omega * dt);
    c.h += c.h_rate * dt;
    if c.h < H_MIN || c.h > H_MAX {
        c.h = c.h.clamp(H_MIN, H_MAX);
        c.h_rate = 0.0;
    }
    c.arm += c.arm_rate * dt;
    if c.arm.abs() > 1.0 {
        c.arm = c.arm.clamp(-1.0, 1.0);
        c.arm_rate = 0.0;
    }

    let (cp, cv) = (c.p, c.v);
    for o in &mut w.objects {
        update_object(o, cp, cv, dt);
    }
    w.time += dt;
}

fn update_object(o: &mut SimObject, cp: [f64; 2], cv: [f64; 2], dt: f64) {
    let d = [o.p[0] - cp[0], o.p[1] - cp[1]];
    let dist = d[0].hypot(d[1]);
    let touching = dist < o.radius + CHARACTER_RADIUS;
    if touching && !o.in_contact && !o.toppled {
        let approach = if dist > 1e-9 {
            (cv[0] * d[0] + cv[1] * d[1]) / dist
        } else {
            cv[0].hypot(cv[1])
        };
        if approach > IMPACT_MIN_SPEED {
            o.tilt_rate += K_IMPACT * approach;
        }
    }
    o.in_contact = touching;

    if o.toppled {
        // Falling completes at a rate of at least 1 rad/s.
        o.tilt = (o.tilt + o.tilt_rate.max(1.0) * dt).min(FRAC_PI_2);
        return;
    }
    o.tilt_rate *= (-TILT_DAMPING * dt).exp();
    let relax = if o.tilt > 0.0 { TILT_RELAX } else { 0.0 };
    o.tilt = (o.tilt + (o.tilt_rate - relax) * dt).clamp(0.0, FRAC_PI_2);
    if o.tilt.cos() < TOPPLE_UPDOT {
        o.toppled = true;
    }
}

/// Maps an angle into `[-π, π)`; angles already in range are returned as is.
pub fn wrap_angle(x: f64) -> f64 {
    if (-PI..PI).contains(&x) {
        return x;
    }
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y < -PI { y + 2.0 * PI } else { y }
}

/// Local-frame observation `[h, ḣ, v_fwd, v_lat, ω, a, ȧ]`.
pub fn observe(world: &WorldState) -> [f64; OBS_DIM] {
    let c = &world.character;
    let lv = c.to_local(c.v);
    [c.h, c.h_rate, lv[0], lv[1], c.omega, c.arm, c.arm_rate]
}
