//! Captioned motion clips, the synthetic skill corpus and its sampling
//! distributions.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::sim::{self, Action, CharacterState, WorldState, H_MAX, H_MIN, OBS_DIM};

pub const FPS: u32 = 30;
pub const DATASET_VERSION: u32 = 1;
pub const MAX_CAPTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("clip {clip}: field `{field}`: {msg}")]
    Schema {
        clip: String,
        field: String,
        msg: String,
    },
    #[error("clip {clip} has {count} captions, expected 1 to 4")]
    CaptionCount { clip: String, count: usize },
    #[error("unknown skill tag `{0}`")]
    UnknownSkill(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One frame of pose features, all expressed in the character frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct Pose {
    pub h: f64,
    pub v_fwd: f64,
    pub v_lat: f64,
    pub omega: f64,
    pub h_rate: f64,
    pub arm: f64,
    pub arm_rate: f64,
}

impl From<[f64; 7]> for Pose {
    fn from(a: [f64; 7]) -> Self {
        Self {
            h: a[0],
            v_fwd: a[1],
            v_lat: a[2],
            omega: a[3],
            h_rate: a[4],
            arm: a[5],
            arm_rate: a[6],
        }
    }
}

impl From<Pose> for [f64; 7] {
    fn from(p: Pose) -> Self {
        [p.h, p.v_fwd, p.v_lat, p.omega, p.h_rate, p.arm, p.arm_rate]
    }
}

impl Pose {
    /// Reorders into the simulator observation layout `[h, ḣ, v_fwd, v_lat, ω, a, ȧ]`.
    pub fn to_observation(&self) -> [f64; OBS_DIM] {
        [
            self.h,
            self.h_rate,
            self.v_fwd,
            self.v_lat,
            self.omega,
            self.arm,
            self.arm_rate,
        ]
    }

    pub fn from_observation(o: &[f64; OBS_DIM]) -> Self {
        Self {
            h: o[0],
            h_rate: o[1],
            v_fwd: o[2],
            v_lat: o[3],
            omega: o[4],
            arm: o[5],
            arm_rate: o[6],
        }
    }

    pub fn is_valid(&self) -> bool {
        let a: [f64; 7] = (*self).into();
        a.iter().all(|x| x.is_finite()) && (H_MIN..=H_MAX).contains(&self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedClip {
    pub id: String,
    pub captions: Vec<String>,
    pub frames: Vec<Pose>,
    pub subsequence: bool,
}

impl CaptionedClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / FPS as f64
    }

    pub fn observations(&self) -> Vec<[f64; OBS_DIM]> {
        self.frames.iter().map(Pose::to_observation).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub version: u32,
    pub clips: Vec<CaptionedClip>,
}

impl Dataset {
    pub fn new(clips: Vec<CaptionedClip>) -> Result<Self, DataError> {
        let d = Self {
            version: DATASET_VERSION,
            clips,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, id: &str) -> Option<&CaptionedClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Every distinct caption with the indices of clips carrying it.
    pub fn caption_index(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, clip) in self.clips.iter().enumerate() {
            for c in &clip.captions {
                match out.iter_mut().find(|(k, _)| k == c) {
                    Some((_, v)) => v.push(i),
                    None => out.push((c.clone(), vec![i])),
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for clip in &self.clips {
            if !seen.insert(clip.id.as_str()) {
                return Err(schema(&clip.id, "id", "duplicate clip id"));
            }
            validate_clip(clip)?;
        }
        Ok(())
    }
}

fn schema(clip: &str, field: &str, msg: impl Into<String>) -> DataError {
    DataError::Schema {
        clip: clip.to_string(),
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn validate_clip(clip: &CaptionedClip) -> Result<(), DataError> {
    let n = clip.captions.len();
    if n == 0 || n > MAX_CAPTIONS {
        return Err(DataError::CaptionCount {
            clip: clip.id.clone(),
            count: n,
        });
    }
    for c in &clip.captions {
        if crate::embed::tokenize(c).is_empty() {
            return Err(schema(&clip.id, "captions", format!("caption {c:?} has no tokens")));
        }
    }
    if clip.frames.len() < 2 {
        return Err(schema(&clip.id, "frames", "need at least 2 frames"));
    }
    // Full clips span at least one second; subsequences are exempt.
    if !clip.subsequence && clip.frames.len() < FPS as usize {
        return Err(schema(&clip.id, "frames", "clip shorter than 1 s"));
    }
    for (i, f) in clip.frames.iter().enumerate() {
        if !f.is_valid() {
            return Err(schema(
                &clip.id,
                &format!("frames[{i}]"),
                "non-finite value or height outside [0.3, 1.2]",
            ));
        }
    }
    Ok(())
}

/// Fixed per-feature affine normalisation of observations, fitted on the
/// dataset frames (observation order). Standard deviations are floored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    pub mean: [f64; OBS_DIM],
    pub std: [f64; OBS_DIM],
}

impl ObsNorm {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; OBS_DIM],
            std: [1.0; OBS_DIM],
        }
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        let mut mean = [0.0; OBS_DIM];
        let mut sq = [0.0; OBS_DIM];
        let mut n = 0.0;
        for f in d.clips.iter().flat_map(|c| &c.frames) {
            let o = f.to_observation();
            for j in 0..OBS_DIM {
                mean[j] += o[j];
                sq[j] += o[j] * o[j];
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Self::identity();
        }
        let mut std = [1.0; OBS_DIM];
        for j in 0..OBS_DIM {
            mean[j] /= n;
            std[j] = (sq[j] / n - mean[j] * mean[j]).max(0.0).sqrt().max(0.1);
        }
        Self { mean, std }
    }

    pub fn apply(&self, o: &[f64; OBS_DIM]) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        for j in 0..OBS_DIM {
            out[j] = (o[j] - self.mean[j]) / self.std[j];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Serialization

/// Serializes with the fixed field order `version, fps, clips` and
/// `id, captions, subsequence?, frames` per clip.
pub fn to_json(d: &Dataset) -> String {
    let mut root = Map::new();
    root.insert("version".into(), Value::from(d.version));
    root.insert("fps".into(), Value::from(FPS));
    let clips = d
        .clips
        .iter()
        .map(|c| {
            let mut m = Map::new();
            m.insert("id".into(), Value::from(c.id.clone()));
            m.insert("captions".into(), Value::from(c.captions.clone()));
            if c.subsequence {
                m.insert("subsequence".into(), Value::Bool(true));
            }
            let frames = c
                .frames
                .iter()
                .map(|f| Value::from(<[f64; 7]>::from(*f).to_vec()))
                .collect();
            m.insert("frames".into(), Value::Array(frames));
            Value::Object(m)
        })
        .collect();
    root.insert("clips".into(), Value::Array(clips));
    serde_json::to_string(&Value::Object(root)).expect("finite values serialize")
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub fn from_json(text: &str) -> Result<Dataset, DataError> {
    let root: Value = serde_json::from_str(text).map_err(|e| DataError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let root = root
        .as_object()
        .ok_or_else(|| schema("-", "(root)", "expected an object"))?;
    let version = root
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema("-", "version", "missing or not an integer"))?;
    if version != DATASET_VERSION as u64 {
        return Err(schema("-", "version", format!("unsupported version {version}")));
    }
    match root.get("fps").and_then(Value::as_u64) {
        Some(f) if f == FPS as u64 => {}
        _ => return Err(schema("-", "fps", format!("must be {FPS}"))),
    }
    let clips_v = root
        .get("clips")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("-", "clips", "missing or not an array"))?;
    let mut clips = Vec::with_capacity(clips_v.len());
    for (ci, cv) in clips_v.iter().enumerate() {
        clips.push(parse_clip(ci, cv)?);
    }
    let d = Dataset {
        version: version as u32,
        clips,
    };
    d.validate()?;
    Ok(d)
}

fn parse_clip(index: usize, v: &Value) -> Result<CaptionedClip, DataError> {
    let fallback = format!("#{index}");
    let obj = v
        .as_object()
        .ok_or_else(|| schema(&fallback, "(clip)", "expected an object"))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| schema(&fallback, "id", "missing or not a string"))?
        .to_string();
    let caps = obj
        .get("captions")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(&id, "captions", "missing or not an array"))?;
    let captions = caps
        .iter()
        .map(|c| {
            c.as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(&id, "captions", "entries must be strings"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let subsequence = match obj.get("subsequence") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(schema(&id, "subsequence", "must be a boolean")),
    };
    let fv = obj
        .get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(&id, "frames", "missing or not an array"))?;
    let mut frames = Vec::with_capacity(fv.len());
    for (i, f) in fv.iter().enumerate() {
        let arr = f
            .as_array()
            .filter(|a| a.len() == 7)
            .ok_or_else(|| schema(&id, &format!("frames[{i}]"), "expected 7 numbers"))?;
        let mut vals = [0.0; 7];
        for (k, x) in arr.iter().enumerate() {
            vals[k] = x
                .as_f64()
                .ok_or_else(|| schema(&id, &format!("frames[{i}][{k}]"), "not a number"))?;
        }
        frames.push(Pose::from(vals));
    }
    Ok(CaptionedClip {
        id,
        captions,
        frames,
        subsequence,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_json(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    from_json(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Sampling

pub fn sample_clip<'a, R: Rng + ?Sized>(
    d: &'a Dataset,
    rng: &mut R,
) -> Result<&'a CaptionedClip, DataError> {
    d.clips
        .choose(rng)
        .ok_or_else(|| DataError::Invalid("cannot sample from an empty dataset".into()))
}

/// A uniformly chosen pair of consecutive frames.
pub fn sample_transition<R: Rng + ?Sized>(
    clip: &CaptionedClip,
    rng: &mut R,
) -> Result<(Pose, Pose), DataError> {
    let n = clip.frames.len();
    if n < 2 {
        return Err(DataError::Invalid(format!(
            "clip {} has {n} frame(s); transitions need 2",
            clip.id
        )));
    }
    let t = rng.random_range(0..n - 1);
    Ok((clip.frames[t], clip.frames[t + 1]))
}

/// Contiguous slice with length uniform in `[min_len, n]`, flagged as a
/// subsequence so that it only feeds the reconstruction loss.
pub fn random_subsequence<R: Rng + ?Sized>(
    clip: &CaptionedClip,
    rng: &mut R,
    min_len: usize,
) -> Result<CaptionedClip, DataError> {
    let n = clip.frames.len();
    if min_len > n || min_len == 0 {
        return Err(DataError::Invalid(format!(
            "min_len {min_len} not in [1, {n}] for clip {}",
            clip.id
        )));
    }
    let len = rng.random_range(min_len..=n);
    let start = rng.random_range(0..=n - len);
    Ok(CaptionedClip {
        id: format!("{}[{}..{}]", clip.id, start, start + len),
        captions: clip.captions.clone(),
        frames: clip.frames[start..start + len].to_vec(),
        subsequence: true,
    })
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Kinematic targets of a scripted skill.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillScript {
    pub tag: &'static str,
    pub speed: f64,
    pub height: f64,
    pub turn_rate: f64,
    pub arm_amplitude: f64,
    /// Turn-rate swing coupled to arm phase (zigzag).
    pub weave: f64,
    pub captions: &'static [&'static str],
}

pub const SKILL_TAGS: [&str; 8] = [
    "idle",
    "walk",
    "sprint",
    "crouch_walk",
    "walk_backward",
    "turn_left",
    "turn_right",
    "zigzag",
];

pub fn skill_script(tag: &str) -> Result<SkillScript, DataError> {
    let s = |speed, height, turn_rate, arm_amplitude, weave, captions| SkillScript {
        tag: SKILL_TAGS.iter().find(|t| **t == tag).copied().unwrap_or("idle"),
        speed,
        height,
        turn_rate,
        arm_amplitude,
        weave,
        captions,
    };
    Ok(match tag {
        "idle" => s(0.0, 0.9, 0.0, 0.0, 0.0, &["stand still", "idle in place", "stand idle without moving"]),
        "walk" => s(1.0, 0.9, 0.0, 0.25, 0.0, &["walk forward", "walk forwards at a steady pace", "stroll ahead"]),
        "sprint" => s(
            3.5,
            1.0,
            0.0,
            0.6,
            0.0,
            &["sprint forward while swinging arms", "run forward fast", "dash ahead at full speed"],
        ),
        "crouch_walk" => s(
            1.0,
            0.5,
            0.0,
            0.15,
            0.0,
            &["crouch walk forward", "sneak forward while crouching", "move ahead low to the ground"],
        ),
        "walk_backward" => s(-1.0, 0.9, 0.0, 0.2, 0.0, &["walk backward", "back up slowly", "step backwards"]),
        "turn_left" => s(0.0, 0.9, 1.5, 0.0, 0.0, &["turn left in place", "spin to the left", "rotate left on the spot"]),
        "turn_right" => s(0.0, 0.9, -1.5, 0.0, 0.0, &["turn right in place", "spin to the right", "rotate right on the spot"]),
        "zigzag" => s(
            1.0,
            0.9,
            0.0,
            0.3,
            1.0,
            &["zigzag forward", "weave left and right while walking", "walk in a zigzag pattern"],
        ),
        other => return Err(DataError::UnknownSkill(other.to_string())),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub skills: Vec<String>,
    pub clips_per_skill: usize,
    pub seconds: f64,
    /// Relative jitter applied to each clip's kinematic targets.
    pub jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            skills: SKILL_TAGS.iter().map(|s| s.to_string()).collect(),
            clips_per_skill: 2,
            seconds: 10.0,
            jitter: 0.05,
        }
    }
}

/// Arm oscillates at the spring's natural frequency.
const ARM_OMEGA: f64 = PI;

/// Runs the simulator under a state-feedback controller tracking `script`.
/// The clip starts on its steady-state orbit at arm phase 0.
fn script_clip(script: &SkillScript, frames: usize) -> Vec<Pose> {
    let mut c = CharacterState::at_rest(0.0);
    c.v = [script.speed, 0.0];
    c.h = script.height;
    c.omega = script.turn_rate;
    c.arm_rate = script.arm_amplitude * ARM_OMEGA;
    let mut w = WorldState::new(c, vec![]).expect("no objects");
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let obs = sim::observe(&w);
        out.push(Pose::from_observation(&obs));
        let t = k as f64 / FPS as f64;
        let phase = ARM_OMEGA * t;
        let a_ref = script.arm_amplitude * phase.sin();
        let a_rate_ref = script.arm_amplitude * ARM_OMEGA * phase.cos();
        let weave = if script.arm_amplitude > 0.0 {
            script.weave * a_ref / script.arm_amplitude
        } else {
            0.0
        };
        let omega_ref = script.turn_rate + weave;
        let omega_dot_ref = if script.arm_amplitude > 0.0 {
            script.weave * a_rate_ref / script.arm_amplitude
        } else {
            0.0
        };

        let forward =
            sim::DRAG * script.speed / sim::ACCEL_MAX + 2.0 * (script.speed - obs[2]);
        let turn = (omega_ref + sim::TURN_TAU * omega_dot_ref) / sim::TURN_MAX;
        let height = 5.0 * (script.height - obs[0]) / sim::HEIGHT_RATE_MAX;
        let arm = (sim::ARM_DAMPING * a_rate_ref
            + 20.0 * (a_ref - obs[5])
            + 4.0 * (a_rate_ref - obs[6]))
            / sim::ARM_GAIN;
        sim::step_in_place(&mut w, Action::new(forward, turn, height, arm), sim::SUBSTEPS)
            .expect("scripted controller stays finite");
    }
    out
}

pub fn generate_synthetic_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset, DataError> {
    if config.skills.len() < 6 {
        return Err(DataError::Invalid(format!(
            "need at least 6 skills, got {}",
            config.skills.len()
        )));
    }
    if config.clips_per_skill == 0 || !(config.seconds >= 1.0) {
        return Err(DataError::Invalid("clips_per_skill >= 1 and seconds >= 1 required".into()));
    }
    let scripts = config
        .skills
        .iter()
        .map(|t| skill_script(t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (config.seconds * FPS as f64).round() as usize;
    let mut clips = Vec::new();
    for base in &scripts {
        for k in 0..config.clips_per_skill {
            let mut jit = || 1.0 + config.jitter * rng.random_range(-1.0..=1.0);
            let script = SkillScript {
                speed: base.speed * jit(),
                turn_rate: base.turn_rate * jit(),
                arm_amplitude: base.arm_amplitude * jit(),
                weave: base.weave * jit(),
                ..base.clone()
            };
            clips.push(CaptionedClip {
                id: format!("{}_{k}", base.tag),
                captions: base.captions.iter().map(|s| s.to_string()).collect(),
                frames: script_clip(&script, frames),
                subsequence: false,
            });
        }
    }
    Dataset::new(clips)
}

/// Skill tag of a generated clip id (`walk_0` → `walk`).
pub fn skill_of(clip_id: &str) -> &str {
    clip_id.rsplit_once('_').map(|(s, _)| s).unwrap_or(clip_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> CaptionedClip {
        CaptionedClip {
            id: "c".into(),
            captions: vec!["walk forward".into()],
            frames: (0..n)
                .map(|i| Pose {
                    h: 0.9,
                    v_fwd: i as f64,
                    ..Default::default()
                })
                .collect(),
            subsequence: false,
        }
    }

    #[test]
    fn default_corpus_shape() {
        let d = generate_synthetic_dataset(&DatasetConfig::default(), 0).unwrap();
        assert_eq!(d.len(), 16);
        assert!(d.clips.iter().all(|c| c.len() == 300));
    }

    #[test]
    fn idle_is_still() {
        let d = generate_synthetic_dataset(&DatasetConfig::default(), 0).unwrap();
        for c in d.clips.iter().filter(|c| skill_of(&c.id) == "idle") {
            assert!(c.frames.iter().all(|f| f.v_fwd.abs() <= 0.05 && f.v_lat.abs() <= 0.05));
        }
    }

    #[test]
    fn skills_track_their_targets() {
        let d = generate_synthetic_dataset(&DatasetConfig::default(), 0).unwrap();
        let mean = |c: &CaptionedClip, f: fn(&Pose) -> f64| {
            c.frames.iter().map(f).sum::<f64>() / c.len() as f64
        };
        let sprint = d.clip("sprint_0").unwrap();
        assert!((mean(sprint, |p| p.v_fwd) - 3.5).abs() < 0.3);
        let crouch = d.clip("crouch_walk_0").unwrap();
        assert!((mean(crouch, |p| p.h) - 0.5).abs() < 0.02);
        let amp = sprint.frames.iter().map(|p| p.arm.abs()).fold(0.0, f64::max);
        assert!((amp - 0.6).abs() < 0.1, "{amp}");
        let left = d.clip("turn_left_0").unwrap();
        assert!((mean(left, |p| p.omega) - 1.5).abs() < 0.15);
    }

    #[test]
    fn unknown_skill_rejected() {
        let mut cfg = DatasetConfig::default();
        cfg.skills[0] = "moonwalk".into();
        assert!(matches!(
            generate_synthetic_dataset(&cfg, 0),
            Err(DataError::UnknownSkill(_))
        ));
    }

    #[test]
    fn subsequence_of_full_length_is_the_clip() {
        let c = clip(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_subsequence(&c, &mut rng, 40).unwrap();
        assert_eq!(s.frames, c.frames);
        assert!(s.subsequence);
        assert!(random_subsequence(&c, &mut rng, 41).is_err());
    }

    #[test]
    fn two_frame_clip_has_one_transition() {
        let c = clip(2);
        let (a, b) = sample_transition(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((a, b), (c.frames[0], c.frames[1]));
        assert!(sample_transition(&clip(1), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn byte_offset_counts_lines() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("abc", 1, 3), 2);
    }
}
