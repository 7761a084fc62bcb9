//! Task-command routing through two multiple-choice questions, and the
//! per-tick multi-policy controller built on it.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, featurize_text, tokenize, EmbedError};
use crate::rl::{LatentSource, Policy, RlError};
use crate::sim::{observe, Action, WorldState};
use crate::tasks::{goal_features, Goal, TaskError, TaskKind};

#[derive(Debug, Error)]
pub enum QaError {
    #[error("empty command")]
    EmptyCommand,
    #[error("no {0} cards")]
    NoCards(&'static str),
    #[error("duplicate {kind} phrase {phrase:?}")]
    DuplicatePhrase { kind: &'static str, phrase: String },
    #[error("scoring the {question} question failed: {reason}")]
    Scorer { question: &'static str, reason: String },
    #[error("policy {policy:?} needs object {object:?}, which is not in the scene")]
    MissingObject { policy: String, object: String },
    #[error("no policy loaded for card {0:?}")]
    UnknownPolicy(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("card file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyCard {
    pub id: String,
    pub ability: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCard {
    pub id: String,
    pub appearance: String,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardSet {
    pub policies: Vec<PolicyCard>,
    pub objects: Vec<ObjectCard>,
}

pub fn ability_phrase(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Strike => "knock over a specified object",
        TaskKind::Location => "navigate to a specified destination",
        TaskKind::Facing => "orient himself to face a specified heading",
    }
}

impl CardSet {
    /// The three task cards plus one object card per colour. Object ids
    /// equal the colour, matching the simulator's object ids.
    pub fn for_colors<S: AsRef<str>>(colors: &[S]) -> Self {
        Self {
            policies: [TaskKind::Strike, TaskKind::Location, TaskKind::Facing]
                .iter()
                .map(|t| PolicyCard {
                    id: t.name().to_string(),
                    ability: ability_phrase(*t).to_string(),
                })
                .collect(),
            objects: colors
                .iter()
                .map(|c| ObjectCard {
                    id: c.as_ref().to_string(),
                    appearance: format!("the {} object", c.as_ref()),
                    color: c.as_ref().to_string(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), QaError> {
        if self.policies.is_empty() {
            return Err(QaError::NoCards("policy"));
        }
        if self.objects.is_empty() {
            return Err(QaError::NoCards("object"));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.policies {
            if !seen.insert(&p.ability) {
                return Err(QaError::DuplicatePhrase {
                    kind: "ability",
                    phrase: p.ability.clone(),
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if !seen.insert(&o.appearance) {
                return Err(QaError::DuplicatePhrase {
                    kind: "appearance",
                    phrase: o.appearance.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, QaError> {
        let c: CardSet = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// One multiple-choice question: a shared prompt and one ending per card.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub kind: QuestionKind,
    pub command: String,
    pub prompt: String,
    pub endings: Vec<String>,
    /// The card phrase behind each ending.
    pub choices: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Task,
    Object,
}

impl QuestionKind {
    fn name(self) -> &'static str {
        match self {
            QuestionKind::Task => "task",
            QuestionKind::Object => "object",
        }
    }
}

impl Question {
    /// Full candidate sequences, prompt followed by each ending.
    pub fn candidates(&self) -> Vec<String> {
        self.endings.iter().map(|e| format!("{} {e}", self.prompt)).collect()
    }
}

fn prompt(command: &str) -> Result<String, QaError> {
    if command.trim().is_empty() {
        return Err(QaError::EmptyCommand);
    }
    Ok(format!("Bob wants to {command}."))
}

pub fn build_task_question(command: &str, cards: &[PolicyCard]) -> Result<Question, QaError> {
    if cards.is_empty() {
        return Err(QaError::NoCards("policy"));
    }
    Ok(Question {
        kind: QuestionKind::Task,
        command: command.to_string(),
        prompt: prompt(command)?,
        endings: cards
            .iter()
            .map(|c| format!("This should be easy for him since he possesses the ability to {}.", c.ability))
            .collect(),
        choices: cards.iter().map(|c| c.ability.clone()).collect(),
    })
}

pub fn build_object_question(command: &str, cards: &[ObjectCard]) -> Result<Question, QaError> {
    if cards.is_empty() {
        return Err(QaError::NoCards("object"));
    }
    Ok(Question {
        kind: QuestionKind::Object,
        command: command.to_string(),
        prompt: prompt(command)?,
        endings: cards
            .iter()
            .map(|c| format!("He starts by turning his attention to {} nearby.", c.appearance))
            .collect(),
        choices: cards.iter().map(|c| c.appearance.clone()).collect(),
    })
}

pub trait Scorer: Send + Sync {
    fn score(&self, q: &Question) -> Result<Vec<f64>, QaError>;
}

/// Cosine similarity between the featurised command and each card phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineCosineScorer {
    /// Applied to the command in the object question only.
    pub synonyms: Option<HashMap<String, String>>,
}

pub fn color_synonyms() -> HashMap<String, String> {
    [("maroon", "red"), ("lime", "green"), ("cobalt", "blue"), ("violet", "purple")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

impl Default for BaselineCosineScorer {
    fn default() -> Self {
        Self {
            synonyms: Some(color_synonyms()),
        }
    }
}

impl BaselineCosineScorer {
    pub fn without_synonyms() -> Self {
        Self { synonyms: None }
    }

    fn rewrite(&self, q: &Question) -> String {
        match (&self.synonyms, q.kind) {
            (Some(map), QuestionKind::Object) => tokenize(&q.command)
                .into_iter()
                .map(|t| map.get(&t).cloned().unwrap_or(t))
                .collect::<Vec<_>>()
                .join(" "),
            _ => q.command.clone(),
        }
    }
}

impl Scorer for BaselineCosineScorer {
    fn score(&self, q: &Question) -> Result<Vec<f64>, QaError> {
        let cmd = featurize_text(&self.rewrite(q))?;
        q.choices
            .iter()
            .map(|c| Ok(cosine(&cmd, &featurize_text(c)?)))
            .collect()
    }
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    prompt: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct ExternalResponse {
    scores: Vec<f64>,
}

/// HTTP scorer: POSTs `{"prompt", "candidates"}` and expects `{"scores"}`.
/// Any failure falls back to the baseline scorer with a warning.
pub struct ExternalScorer {
    pub endpoint: String,
    pub timeout: Duration,
    pub fallback: BaselineCosineScorer,
    client: reqwest::blocking::Client,
}

impl ExternalScorer {
    pub fn new(endpoint: impl Into<String>) -> Result<Self, QaError> {
        Self::with_timeout(endpoint, Duration::from_secs(2))
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, QaError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| QaError::Scorer {
                question: "setup",
                reason: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            timeout,
            fallback: BaselineCosineScorer::default(),
            client,
        })
    }

    fn remote(&self, q: &Question) -> Result<Vec<f64>, String> {
        let body = ExternalRequest {
            prompt: &q.prompt,
            candidates: &q.endings,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| e.to_string())?;
        let parsed: ExternalResponse = resp.json().map_err(|e| e.to_string())?;
        if parsed.scores.len() != q.endings.len() {
            return Err(format!("{} scores for {} candidates", parsed.scores.len(), q.endings.len()));
        }
        if parsed.scores.iter().any(|s| !s.is_finite()) {
            return Err("non-finite score".into());
        }
        Ok(parsed.scores)
    }
}

impl Scorer for ExternalScorer {
    fn score(&self, q: &Question) -> Result<Vec<f64>, QaError> {
        match self.remote(q) {
            Ok(s) => Ok(s),
            Err(e) => {
                log::warn!("external scorer at {} failed ({e}); using baseline", self.endpoint);
                self.fallback.score(q)
            }
        }
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub policy_id: String,
    pub object_id: String,
    pub task_scores: Vec<f64>,
    pub object_scores: Vec<f64>,
}

pub fn select(command: &str, cards: &CardSet, scorer: &dyn Scorer) -> Result<Selection, QaError> {
    let tq = build_task_question(command, &cards.policies)?;
    let oq = build_object_question(command, &cards.objects)?;
    let wrap = |q: &Question, r: Result<Vec<f64>, QaError>| -> Result<Vec<f64>, QaError> {
        let s = r.map_err(|e| QaError::Scorer {
            question: q.kind.name(),
            reason: e.to_string(),
        })?;
        if s.len() != q.endings.len() {
            return Err(QaError::Scorer {
                question: q.kind.name(),
                reason: format!("{} scores for {} candidates", s.len(), q.endings.len()),
            });
        }
        Ok(s)
    };
    let task_scores = wrap(&tq, scorer.score(&tq))?;
    let object_scores = wrap(&oq, scorer.score(&oq))?;
    let p = argmax(&task_scores).ok_or(QaError::NoCards("policy"))?;
    let o = argmax(&object_scores).ok_or(QaError::NoCards("object"))?;
    Ok(Selection {
        policy_id: cards.policies[p].id.clone(),
        object_id: cards.objects[o].id.clone(),
        task_scores,
        object_scores,
    })
}

// ---------------------------------------------------------------------------
// Aggregation

/// A single-task policy with the task it was trained for.
#[derive(Clone, Debug)]
pub struct TaskPolicy {
    pub task: TaskKind,
    pub policy: Policy,
}

/// Builds the goal for `task` aimed at object `object_id`.
pub fn goal_for(task: TaskKind, world: &WorldState, object_id: &str, policy_id: &str) -> Result<Goal, QaError> {
    let obj = world.object(object_id).ok_or_else(|| QaError::MissingObject {
        policy: policy_id.to_string(),
        object: object_id.to_string(),
    })?;
    Ok(match task {
        TaskKind::Strike => Goal::Strike {
            object_id: obj.id.clone(),
        },
        TaskKind::Location => Goal::Location {
            target: obj.p,
            object_id: obj.id.clone(),
        },
        TaskKind::Facing => Goal::facing_toward(world, obj.p),
    })
}

/// Selection and latent cached on the command strings.
#[derive(Clone, Debug, Default)]
pub struct SelectionCache {
    task_command: Option<String>,
    selection: Option<Selection>,
    skill_command: Option<String>,
    z: Vec<f64>,
    pub recomputations: usize,
}

impl SelectionCache {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDecision {
    pub action: Action,
    pub selection: Selection,
    pub goal: Goal,
    pub z: Vec<f64>,
}

/// One tick of the multi-policy controller: encode the skill command,
/// route the task command, build the goal and query the chosen policy.
/// With `cache` the two lookups are reused while the commands are unchanged.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_step(
    world: &WorldState,
    skill_command: &str,
    task_command: &str,
    policies: &HashMap<String, TaskPolicy>,
    cards: &CardSet,
    latents: &LatentSource,
    scorer: &dyn Scorer,
    cache: Option<&mut SelectionCache>,
) -> Result<StepDecision, QaError> {
    let (selection, z) = match cache {
        Some(c) => {
            if c.skill_command.as_deref() != Some(skill_command) {
                c.z = latents.caption_latent(skill_command)?;
                c.skill_command = Some(skill_command.to_string());
            }
            if c.task_command.as_deref() != Some(task_command) || c.selection.is_none() {
                c.selection = Some(select(task_command, cards, scorer)?);
                c.task_command = Some(task_command.to_string());
                c.recomputations += 1;
            }
            (c.selection.clone().expect("set above"), c.z.clone())
        }
        None => (select(task_command, cards, scorer)?, latents.caption_latent(skill_command)?),
    };
    let tp = policies
        .get(&selection.policy_id)
        .ok_or_else(|| QaError::UnknownPolicy(selection.policy_id.clone()))?;
    let goal = goal_for(tp.task, world, &selection.object_id, &selection.policy_id)?;
    let g = goal_features(world, &goal)?;
    let action = tp.policy.mean_action(&observe(world), &g, &z)?;
    Ok(StepDecision {
        action,
        selection,
        goal,
        z,
    })
}

/// Canonical commands: every task verb with every colour. The verbs reuse
/// words from the ability phrases so the hashed featurizer separates them.
pub fn canonical_commands<S: AsRef<str>>(colors: &[S]) -> Vec<(String, TaskKind, String)> {
    let mut out = Vec::new();
    for (task, verb) in [
        (TaskKind::Strike, "knock over the"),
        (TaskKind::Location, "navigate to the"),
        (TaskKind::Facing, "orient to face the"),
    ] {
        for c in colors {
            out.push((format!("{verb} {} block", c.as_ref()), task, c.as_ref().to_string()));
        }
    }
    out
}

/// Paraphrased commands with the intended task and object colour.
pub fn paraphrase_commands() -> Vec<(&'static str, TaskKind, &'static str)> {
    use TaskKind::*;
    vec![
        ("knock over the blue block", Strike, "blue"),
        ("knock over the green block", Strike, "green"),
        ("go to the red block", Location, "red"),
        ("go to the orange block", Location, "orange"),
        ("face the purple block", Facing, "purple"),
        ("knock over the purple target", Strike, "purple"),
        ("turn towards the blue target", Facing, "blue"),
        ("turn towards the orange target", Facing, "orange"),
        ("face the orange target", Facing, "orange"),
        ("face the purple target", Facing, "purple"),
        ("go to the blue target", Location, "blue"),
        ("topple the red tower", Strike, "red"),
        ("face the orange obelisk", Facing, "orange"),
        ("navigate to the lime rectangular prism", Location, "green"),
        ("navigate toward the lime rectangular prism", Location, "green"),
        ("look at the stop sign", Facing, "red"),
        ("watch the sunset", Facing, "red"),
        ("knock over the cobalt block", Strike, "blue"),
        ("get close to the violet marker", Location, "purple"),
        ("destroy the green guy", Strike, "green"),
        ("mosey on down to the maroon saloon", Location, "red"),
    ]
}

/// Object colours of the paraphrase scene.
pub const PARAPHRASE_COLORS: [&str; 5] = ["red", "green", "blue", "orange", "purple"];
