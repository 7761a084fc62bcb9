//! Live session state, the per-tick controller step and the wire messages.
//!
//! The WebSocket server and the offline replayer both drive [`Session::tick`],
//! so a recorded command script reproduces a served trajectory exactly.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa::{aggregate_step, CardSet, QaError, Scorer, SelectionCache, TaskPolicy};
use crate::rl::LatentSource;
use crate::sim::{step_in_place, SimError, WorldState, SUBSTEPS};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid message: {0}")]
    Message(String),
    #[error("trace: {0}")]
    Trace(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SkillCommand { text: String },
    TaskCommand { text: String },
}

impl ClientMessage {
    /// Parses and validates one client text frame.
    pub fn parse(text: &str) -> Result<Self, SessionError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SessionError::Message(e.to_string()))?;
        let ty = v
            .get("type")
            .and_then(|t| t.as_str())
            .ok_or_else(|| SessionError::Message("missing \"type\"".into()))?;
        if ty != "skill_command" && ty != "task_command" {
            return Err(SessionError::Message(format!("unknown type \"{ty}\"")));
        }
        let msg: ClientMessage =
            serde_json::from_value(v).map_err(|e| SessionError::Message(e.to_string()))?;
        if msg.text().trim().is_empty() {
            return Err(SessionError::Message("empty command text".into()));
        }
        Ok(msg)
    }

    pub fn text(&self) -> &str {
        match self {
            ClientMessage::SkillCommand { text } | ClientMessage::TaskCommand { text } => text,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterView {
    pub p: [f64; 2],
    pub theta: f64,
    pub v: [f64; 2],
    pub h: f64,
    pub a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub id: String,
    pub color: String,
    pub p: [f64; 2],
    pub updot: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub task: BTreeMap<String, f64>,
    pub object: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    pub tick: u64,
    pub character: CharacterView,
    pub objects: Vec<ObjectView>,
    pub active_policy: String,
    pub active_object: String,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(FrameMessage),
    Error { msg: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialise")
    }
}

/// Pending commands; a later message of the same kind replaces an earlier one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mailbox {
    pub skill: Option<String>,
    pub task: Option<String>,
}

impl Mailbox {
    pub fn post(&mut self, msg: ClientMessage) {
        match msg {
            ClientMessage::SkillCommand { text } => self.skill = Some(text),
            ClientMessage::TaskCommand { text } => self.task = Some(text),
        }
    }

    pub fn take(&mut self) -> Mailbox {
        std::mem::take(self)
    }

    pub fn is_empty(&self) -> bool {
        self.skill.is_none() && self.task.is_none()
    }
}

/// Read-only pieces of the controller shared by every tick.
pub struct Controller {
    pub policies: HashMap<String, TaskPolicy>,
    pub cards: CardSet,
    pub latents: LatentSource,
    pub scorer: Box<dyn Scorer>,
}

pub struct Session {
    pub world: WorldState,
    pub skill_command: String,
    pub task_command: String,
    cache: SelectionCache,
}

/// Result of one tick: the frame and any command rejected while applying the mailbox.
#[derive(Clone, Debug, PartialEq)]
pub struct TickOutput {
    pub frame: FrameMessage,
    pub rejected: Vec<String>,
}

impl Session {
    pub fn new(world: WorldState, skill_command: impl Into<String>, task_command: impl Into<String>) -> Self {
        Self {
            world,
            skill_command: skill_command.into(),
            task_command: task_command.into(),
            cache: SelectionCache::new(),
        }
    }

    /// Applies pending commands, runs the controller once and advances the
    /// world one control tick. A command that cannot be routed is rejected
    /// and the previous command stays active.
    pub fn tick(&mut self, ctrl: &Controller, pending: Mailbox) -> Result<TickOutput, SessionError> {
        let mut rejected = Vec::new();
        let previous = (self.skill_command.clone(), self.task_command.clone());
        if let Some(s) = pending.skill {
            self.skill_command = s;
        }
        if let Some(t) = pending.task {
            self.task_command = t;
        }
        let decision = match self.decide(ctrl) {
            Ok(d) => d,
            Err(e) if (self.skill_command.clone(), self.task_command.clone()) != previous => {
                rejected.push(e.to_string());
                self.skill_command = previous.0;
                self.task_command = previous.1;
                self.decide(ctrl)?
            }
            Err(e) => return Err(e),
        };
        step_in_place(&mut self.world, decision.action, SUBSTEPS)?;
        let sel = &decision.selection;
        let scores = Scores {
            task: ctrl
                .cards
                .policies
                .iter()
                .map(|c| c.id.clone())
                .zip(sel.task_scores.iter().copied())
                .collect(),
            object: ctrl
                .cards
                .objects
                .iter()
                .map(|c| c.id.clone())
                .zip(sel.object_scores.iter().copied())
                .collect(),
        };
        Ok(TickOutput {
            frame: frame_of(&self.world, &sel.policy_id, &sel.object_id, scores),
            rejected,
        })
    }

    fn decide(&mut self, ctrl: &Controller) -> Result<crate::qa::StepDecision, SessionError> {
        Ok(aggregate_step(
            &self.world,
            &self.skill_command,
            &self.task_command,
            &ctrl.policies,
            &ctrl.cards,
            &ctrl.latents,
            ctrl.scorer.as_ref(),
            Some(&mut self.cache),
        )?)
    }
}

pub fn frame_of(world: &WorldState, policy: &str, object: &str, scores: Scores) -> FrameMessage {
    let c = &world.character;
    FrameMessage {
        tick: world.tick,
        character: CharacterView {
            p: c.p,
            theta: c.theta,
            v: c.v,
            h: c.h,
            a: c.arm,
        },
        objects: world
            .objects
            .iter()
            .map(|o| ObjectView {
                id: o.id.clone(),
                color: o.color.clone(),
                p: o.p,
                updot: o.updot(),
            })
            .collect(),
        active_policy: policy.to_string(),
        active_object: object.to_string(),
        scores,
    }
}

// ---------------------------------------------------------------------------
// Traces

/// One JSON line of a session trace. Commands are recorded with the tick
/// index they were applied before.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Start {
        world: WorldState,
        skill_command: String,
        task_command: String,
    },
    Command {
        before_tick: u64,
        message: ClientMessage,
    },
    Frame(FrameMessage),
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, r: &TraceRecord) -> Result<(), SessionError> {
        let line = serde_json::to_string(r).map_err(|e| SessionError::Trace(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| SessionError::Trace(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<(), SessionError> {
        self.out.flush().map_err(|e| SessionError::Trace(e.to_string()))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, SessionError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SessionError::Trace(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| SessionError::Trace(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Re-runs a trace offline from its start record, feeding each command
/// before the tick it was recorded against, and returns the frames produced.
pub fn replay(ctrl: &Controller, trace: &[TraceRecord]) -> Result<Vec<FrameMessage>, SessionError> {
    let mut session = match trace.first() {
        Some(TraceRecord::Start {
            world,
            skill_command,
            task_command,
        }) => Session::new(world.clone(), skill_command.clone(), task_command.clone()),
        _ => return Err(SessionError::Trace("first record must be a start record".into())),
    };
    let n_frames = trace.iter().filter(|r| matches!(r, TraceRecord::Frame(_))).count();
    let mut by_tick: BTreeMap<u64, Mailbox> = BTreeMap::new();
    for r in trace {
        if let TraceRecord::Command { before_tick, message } = r {
            by_tick.entry(*before_tick).or_default().post(message.clone());
        }
    }
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let pending = by_tick.remove(&session.world.tick).unwrap_or_default();
        frames.push(session.tick(ctrl, pending)?.frame);
    }
    Ok(frames)
}

/// Frames recorded in a trace, in order.
pub fn recorded_frames(trace: &[TraceRecord]) -> Vec<FrameMessage> {
    trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Frame(f) => Some(f.clone()),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_type_is_rejected() {
        assert!(ClientMessage::parse(r#"{"type":"dance","text":"x"}"#).is_err());
        assert!(ClientMessage::parse("not json").is_err());
        assert!(ClientMessage::parse(r#"{"type":"task_command","text":"  "}"#).is_err());
        assert_eq!(
            ClientMessage::parse(r#"{"type":"task_command","text":"face the red block"}"#).unwrap(),
            ClientMessage::TaskCommand {
                text: "face the red block".into()
            }
        );
    }

    #[test]
    fn mailbox_last_writer_wins() {
        let mut m = Mailbox::default();
        m.post(ClientMessage::TaskCommand { text: "a".into() });
        m.post(ClientMessage::SkillCommand { text: "s".into() });
        m.post(ClientMessage::TaskCommand { text: "b".into() });
        let got = m.take();
        assert_eq!(got.task.as_deref(), Some("b"));
        assert_eq!(got.skill.as_deref(), Some("s"));
        assert!(m.is_empty());
    }

    #[test]
    fn error_message_shape() {
        let v: serde_json::Value =
            serde_json::from_str(&ServerMessage::Error { msg: "bad".into() }.to_json()).unwrap();
        assert_eq!(v["type"], "error");
        assert_eq!(v["msg"], "bad");
    }
}
