//! Goals, rewards and termination for the facing, location and strike tasks.

use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{SimObject, WorldState, TOPPLE_UPDOT};

pub const GOAL_DIM: usize = 6;
pub const HORIZON: usize = 300;

/// Distance at which the location reward saturates (m).
pub const DELTA_POS: f64 = 2.0;
/// Minimum approach speed rewarded by the velocity term (m/s).
pub const DELTA_VEL: f64 = 0.5;
pub const FACING_CAP: f64 = 0.5;
pub const LOCATION_SATURATED: f64 = 0.8;
pub const STRIKE_SATURATED: f64 = 1.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("object `{0}` not found")]
    MissingObject(String),
    #[error("world has no objects to target")]
    NoObjects,
    #[error("goal does not match task {0:?}")]
    Mismatch(TaskKind),
    #[error("unknown task `{0}`")]
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Facing,
    Location,
    Strike,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Facing, TaskKind::Location, TaskKind::Strike];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Facing => "facing",
            TaskKind::Location => "location",
            TaskKind::Strike => "strike",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TaskError> {
        match s {
            "facing" => Ok(TaskKind::Facing),
            "location" => Ok(TaskKind::Location),
            "strike" => Ok(TaskKind::Strike),
            other => Err(TaskError::Unknown(other.to_string())),
        }
    }

    /// Target mean task reward for the adaptive weight; `None` means a
    /// constant weight of 1.
    pub fn reward_target(self) -> Option<f64> {
        match self {
            TaskKind::Facing => None,
            TaskKind::Location => Some(0.15),
            TaskKind::Strike => Some(0.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Goal {
    Facing { dir: [f64; 2] },
    Location { target: [f64; 2], object_id: String },
    Strike { object_id: String },
}

impl Goal {
    pub fn kind(&self) -> TaskKind {
        match self {
            Goal::Facing { .. } => TaskKind::Facing,
            Goal::Location { .. } => TaskKind::Location,
            Goal::Strike { .. } => TaskKind::Strike,
        }
    }

    pub fn object_id(&self) -> Option<&str> {
        match self {
            Goal::Facing { .. } => None,
            Goal::Location { object_id, .. } | Goal::Strike { object_id } => Some(object_id),
        }
    }

    /// Facing goal pointing from the character toward `to`.
    pub fn facing_toward(world: &WorldState, to: [f64; 2]) -> Self {
        let p = world.character.p;
        let d = [to[0] - p[0], to[1] - p[1]];
        let n = d[0].hypot(d[1]);
        let dir = if n > 1e-9 {
            [d[0] / n, d[1] / n]
        } else {
            world.character.heading()
        };
        Goal::Facing { dir }
    }
}

fn find<'a>(world: &'a WorldState, id: &str) -> Result<&'a SimObject, TaskError> {
    world
        .object(id)
        .ok_or_else(|| TaskError::MissingObject(id.to_string()))
}

/// Goal features in the character frame, zero-padded to [`GOAL_DIM`].
pub fn goal_features(world: &WorldState, goal: &Goal) -> Result<[f64; GOAL_DIM], TaskError> {
    let c = &world.character;
    let mut g = [0.0; GOAL_DIM];
    match goal {
        Goal::Facing { dir } => {
            let l = c.to_local(*dir);
            g[..2].copy_from_slice(&l);
        }
        Goal::Location { target, object_id } => {
            find(world, object_id)?;
            let l = c.to_local([target[0] - c.p[0], target[1] - c.p[1]]);
            g[..2].copy_from_slice(&l);
        }
        Goal::Strike { object_id } => {
            let o = find(world, object_id)?;
            let off = c.to_local([o.p[0] - c.p[0], o.p[1] - c.p[1]]);
            g[0] = off[0];
            g[1] = off[1];
            // Blocks do not translate, so their linear velocity slots stay 0.
            g[4] = o.updot();
            g[5] = o.tilt_rate;
        }
    }
    Ok(g)
}

pub fn reward_facing(world: &WorldState, dir: [f64; 2]) -> f64 {
    let d = world.character.heading();
    (d[0] * dir[0] + d[1] * dir[1]).min(FACING_CAP)
}

/// Position and velocity sub-rewards toward `target`, `(r_pos, r_vel, dist)`.
pub fn approach_terms(world: &WorldState, target: [f64; 2]) -> (f64, f64, f64) {
    let c = &world.character;
    let off = [target[0] - c.p[0], target[1] - c.p[1]];
    let dist = off[0].hypot(off[1]);
    let r_pos = (-0.25 * dist * dist).exp();
    let (v_proj, v_perp) = if dist > 1e-12 {
        let u = [off[0] / dist, off[1] / dist];
        let along = c.v[0] * u[0] + c.v[1] * u[1];
        let perp = [c.v[0] - along * u[0], c.v[1] - along * u[1]];
        (along, perp[0].hypot(perp[1]))
    } else {
        (0.0, c.speed())
    };
    let r_vel = (-0.25 * ((DELTA_VEL - v_proj).max(0.0) + 0.1 * v_perp)).exp();
    (r_pos, r_vel, dist)
}

pub fn reward_location(world: &WorldState, target: [f64; 2]) -> f64 {
    let (r_pos, r_vel, dist) = approach_terms(world, target);
    if dist <= DELTA_POS {
        LOCATION_SATURATED
    } else {
        0.2 * r_pos + 0.8 * r_vel
    }
}

pub fn reward_strike(world: &WorldState, object_id: &str) -> Result<f64, TaskError> {
    let o = find(world, object_id)?;
    let up = o.updot();
    if up < TOPPLE_UPDOT {
        return Ok(STRIKE_SATURATED);
    }
    let (r_pos, r_vel, _) = approach_terms(world, o.p);
    Ok(0.2 * r_pos + 0.8 * r_vel + 0.8 * (1.0 - up))
}

pub fn task_reward(world: &WorldState, goal: &Goal) -> Result<f64, TaskError> {
    match goal {
        Goal::Facing { dir } => Ok(reward_facing(world, *dir)),
        Goal::Location { target, object_id } => {
            find(world, object_id)?;
            Ok(reward_location(world, *target))
        }
        Goal::Strike { object_id } => reward_strike(world, object_id),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Continue,
    /// Location marker toppled.
    Knocked,
    Horizon,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::Continue
    }

    pub fn reason(self) -> &'static str {
        match self {
            Termination::Continue => "continue",
            Termination::Knocked => "block knocked over",
            Termination::Horizon => "horizon",
        }
    }
}

/// `t` is the number of control ticks taken so far.
pub fn check_termination(world: &WorldState, goal: Option<&Goal>, t: usize, horizon: usize) -> Termination {
    if let Some(Goal::Location { object_id, .. }) = goal {
        if world.object(object_id).is_some_and(|o| o.updot() < TOPPLE_UPDOT) {
            return Termination::Knocked;
        }
    }
    if t >= horizon {
        return Termination::Horizon;
    }
    Termination::Continue
}

pub fn sample_goal<R: Rng + ?Sized>(task: TaskKind, world: &WorldState, rng: &mut R) -> Result<Goal, TaskError> {
    match task {
        TaskKind::Facing => {
            let a = rng.random_range(-PI..PI);
            Ok(Goal::Facing { dir: [a.cos(), a.sin()] })
        }
        TaskKind::Location => {
            let o = world.objects.choose(rng).ok_or(TaskError::NoObjects)?;
            Ok(Goal::Location {
                target: o.p,
                object_id: o.id.clone(),
            })
        }
        TaskKind::Strike => {
            let o = world.objects.choose(rng).ok_or(TaskError::NoObjects)?;
            Ok(Goal::Strike {
                object_id: o.id.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::CharacterState;

    fn world_with(p: [f64; 2], theta: f64, v: [f64; 2], obj: Option<[f64; 2]>) -> WorldState {
        let mut c = CharacterState::at_rest(theta);
        c.p = p;
        c.v = v;
        let objects = obj
            .map(|q| vec![SimObject::upright("b", "blue", q)])
            .unwrap_or_default();
        WorldState::new(c, objects).unwrap()
    }

    #[test]
    fn facing_examples() {
        let w = world_with([0.0, 0.0], 0.0, [0.0, 0.0], None);
        assert_eq!(reward_facing(&w, [1.0, 0.0]), 0.5);
        assert!((reward_facing(&w, [0.3, (1.0f64 - 0.09).sqrt()]) - 0.3).abs() < 1e-12);
        assert_eq!(reward_facing(&w, [-1.0, 0.0]), -1.0);
    }

    #[test]
    fn location_hand_values() {
        let w = world_with([0.0, 0.0], 0.0, [0.0, 0.0], None);
        assert_eq!(reward_location(&w, [1.5, 0.0]), 0.8);
        let still = 0.2 * (-6.25f64).exp() + 0.8 * (-0.125f64).exp();
        assert!((reward_location(&w, [5.0, 0.0]) - still).abs() < 1e-12);
        assert!((still - 0.706384).abs() < 1e-6);
        let w = world_with([0.0, 0.0], 0.0, [0.5, 0.0], None);
        let moving = 0.2 * (-6.25f64).exp() + 0.8;
        assert!((reward_location(&w, [5.0, 0.0]) - moving).abs() < 1e-12);
        assert!((moving - 0.800386).abs() < 1e-6);
    }

    #[test]
    fn location_discontinuity_at_two_metres_is_kept() {
        let w = world_with([0.0, 0.0], 0.0, [0.5, 0.0], None);
        let far = reward_location(&w, [2.0 + 1e-9, 0.0]);
        assert!((far - (0.2 * (-1.0f64).exp() + 0.8)).abs() < 1e-8);
        assert!(far > 0.8735 && far < 0.8736);
        assert_eq!(reward_location(&w, [2.0, 0.0]), 0.8);
    }

    #[test]
    fn strike_examples() {
        let mut w = world_with([0.0, 0.0], 0.0, [0.0, 0.0], Some([0.0, 0.0]));
        let expect = 0.2 + 0.8 * (-0.125f64).exp();
        assert!((reward_strike(&w, "b").unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.905998).abs() < 1e-6);
        w.objects[0].tilt = 0.2f64.acos();
        assert_eq!(reward_strike(&w, "b").unwrap(), 1.4);
        assert!(reward_strike(&w, "nope").is_err());
    }

    #[test]
    fn goal_feature_examples() {
        let w = world_with([1.0, 1.0], 0.7, [0.0, 0.0], Some([4.0, 4.0]));
        let g = goal_features(&w, &Goal::Facing { dir: w.character.heading() }).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12);
        let left = w.character.to_world([0.0, 3.0]);
        let target = [1.0 + left[0], 1.0 + left[1]];
        let g = goal_features(
            &w,
            &Goal::Location {
                target,
                object_id: "b".into(),
            },
        )
        .unwrap();
        assert!(g[0].abs() < 1e-12 && (g[1] - 3.0).abs() < 1e-12);
        assert!(goal_features(&w, &Goal::Strike { object_id: "x".into() }).is_err());
    }

    #[test]
    fn termination_rules() {
        let mut w = world_with([0.0, 0.0], 0.0, [0.0, 0.0], Some([3.0, 0.0]));
        let loc = Goal::Location {
            target: [3.0, 0.0],
            object_id: "b".into(),
        };
        let strike = Goal::Strike { object_id: "b".into() };
        assert_eq!(check_termination(&w, Some(&loc), 10, HORIZON), Termination::Continue);
        w.objects[0].tilt = 0.25f64.acos();
        assert_eq!(check_termination(&w, Some(&loc), 10, HORIZON), Termination::Knocked);
        assert_eq!(Termination::Knocked.reason(), "block knocked over");
        assert_eq!(check_termination(&w, Some(&strike), 100, HORIZON), Termination::Continue);
        assert_eq!(reward_strike(&w, "b").unwrap(), 1.4);
        assert_eq!(check_termination(&w, Some(&strike), 300, HORIZON), Termination::Horizon);
    }
}
