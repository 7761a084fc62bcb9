//! Goal- and latent-conditioned PPO with an adversarial skill reward.

use std::f64::consts::{LN_2, PI};

use ndarray::{Array2, ArrayView2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{disc_update, DiscError, DiscLossConfig, Discriminator, Transition};
use crate::embed::{featurize_text, EmbedError, EmbeddingModel};
use crate::motion::{sample_transition, Dataset, ObsNorm, Pose};
use crate::nn::{
    adam_step, pca_project, AdamConfig, AdamState, Graph, Mlp, MlpSpec, NnError, ParamSet, ParamVars, Params,
    PcaBasis, Scalar, Var,
};
use crate::sim::{self, Action, EnvConfig, SimError, WorldState, ACTION_DIM, OBS_DIM};
use crate::tasks::{self, check_termination, goal_features, Goal, TaskError, TaskKind, GOAL_DIM};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Goal offsets are scaled into a unit-ish range before entering the networks.
pub const GOAL_SCALE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("latent dimension {got} does not match {expected}")]
    LatentDim { got: usize, expected: usize },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Data(#[from] crate::motion::DataError),
}

// ---------------------------------------------------------------------------
// Networks

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub mlp: Mlp,
    /// Mean network plus `pi.log_std` (1×4).
    pub params: ParamSet,
    pub norm: ObsNorm,
    pub d_z: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueFn {
    pub mlp: Mlp,
    pub params: ParamSet,
    /// Network output is multiplied by this factor.
    pub scale: f64,
}

pub fn input_dim(d_z: usize) -> usize {
    OBS_DIM + GOAL_DIM + d_z
}

/// Network input `[norm(s), scaled g, z]`.
pub fn policy_input(norm: &ObsNorm, s: &[f64; OBS_DIM], g: &[f64; GOAL_DIM], z: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(OBS_DIM + GOAL_DIM + z.len());
    x.extend(norm.apply(s));
    x.extend(g.iter().enumerate().map(|(i, v)| if i < 4 { v * GOAL_SCALE } else { *v }));
    x.extend_from_slice(z);
    x
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(d_z: usize, hidden: &[usize], norm: ObsNorm, rng: &mut R) -> Result<Self, RlError> {
        let mlp = Mlp::new(MlpSpec::new(input_dim(d_z), hidden, ACTION_DIM), "pi")?;
        let mut params = Params::new();
        mlp.init(&mut params, rng, 0.01)?;
        params.insert("pi.log_std", Array2::from_elem((1, ACTION_DIM), 0.2f32.ln()))?;
        Ok(Self { mlp, params, norm, d_z })
    }

    pub fn log_std(&self) -> [f64; ACTION_DIM] {
        let ls = self.params.get("pi.log_std").expect("log_std");
        let mut out = [0.0; ACTION_DIM];
        for (o, v) in out.iter_mut().zip(ls.iter()) {
            *o = (*v as f64).clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        out
    }

    pub fn means(&self, x: ArrayView2<f32>) -> Result<Array2<f32>, RlError> {
        Ok(self.mlp.forward_batch(&self.params, x)?)
    }

    pub fn mean_action(&self, s: &[f64; OBS_DIM], g: &[f64; GOAL_DIM], z: &[f64]) -> Result<Action, RlError> {
        self.check_z(z)?;
        let x = to_row(&policy_input(&self.norm, s, g, z));
        let mu = self.means(x.view())?;
        Ok(squash(&[mu[[0, 0]] as f64, mu[[0, 1]] as f64, mu[[0, 2]] as f64, mu[[0, 3]] as f64]))
    }

    fn check_z(&self, z: &[f64]) -> Result<(), RlError> {
        if z.len() != self.d_z {
            return Err(RlError::LatentDim {
                got: z.len(),
                expected: self.d_z,
            });
        }
        Ok(())
    }
}

impl ValueFn {
    pub fn new<R: Rng + ?Sized>(d_z: usize, hidden: &[usize], scale: f64, rng: &mut R) -> Result<Self, RlError> {
        let mlp = Mlp::new(MlpSpec::new(input_dim(d_z), hidden, 1), "v")?;
        let mut params = Params::new();
        mlp.init(&mut params, rng, 0.1)?;
        Ok(Self { mlp, params, scale })
    }

    pub fn values(&self, x: ArrayView2<f32>) -> Result<Vec<f64>, RlError> {
        let v = self.mlp.forward_batch(&self.params, x)?;
        Ok(v.iter().map(|&y| y as f64 * self.scale).collect())
    }
}

fn to_row(x: &[f64]) -> Array2<f32> {
    Array2::from_shape_fn((1, x.len()), |(_, j)| x[j] as f32)
}

pub fn squash(u: &[f64; ACTION_DIM]) -> Action {
    Action::new(u[0].tanh(), u[1].tanh(), u[2].tanh(), u[3].tanh())
}

/// Diagonal Gaussian log-density of the pre-squash sample.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((u, m), ls)| {
            let d = (u - m) / ls.exp();
            -0.5 * d * d - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `log |d tanh(u) / du|` summed over dimensions, in a stable form.
pub fn tanh_log_det(u: &[f64]) -> f64 {
    u.iter()
        .map(|&x| 2.0 * (LN_2 - x - softplus(-2.0 * x)))
        .sum()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub action: Action,
    /// Pre-squash Gaussian sample.
    pub u: [f64; ACTION_DIM],
    /// Log-density of `action` including the tanh change of variables.
    pub log_prob: f64,
    /// Log-density of `u` under the Gaussian (used in the PPO ratio).
    pub log_prob_u: f64,
}

pub fn sample_from_mean<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64; ACTION_DIM], rng: &mut R) -> PolicySample {
    let mut u = [0.0; ACTION_DIM];
    for k in 0..ACTION_DIM {
        let n: f64 = StandardNormal.sample(rng);
        u[k] = mean[k] + log_std[k].exp() * n;
    }
    let log_prob_u = gaussian_log_prob(&u, mean, log_std);
    PolicySample {
        action: squash(&u),
        u,
        log_prob: log_prob_u - tanh_log_det(&u),
        log_prob_u,
    }
}

pub fn policy_sample<R: Rng + ?Sized>(
    policy: &Policy,
    s: &[f64; OBS_DIM],
    g: &[f64; GOAL_DIM],
    z: &[f64],
    rng: &mut R,
) -> Result<PolicySample, RlError> {
    policy.check_z(z)?;
    let x = to_row(&policy_input(&policy.norm, s, g, z));
    let mu = policy.means(x.view())?;
    let mean: Vec<f64> = mu.iter().map(|&v| v as f64).collect();
    Ok(sample_from_mean(&mean, &policy.log_std(), rng))
}

// ---------------------------------------------------------------------------
// Rewards and the adaptive task weight

pub fn composite_reward(r_skill: f64, r_task: f64, lambda: Option<f64>) -> f64 {
    match lambda {
        Some(l) => r_skill + l * r_task,
        None => r_skill,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTaskWeight {
    pub lambda: f64,
    pub kp: f64,
    pub eps: f64,
    /// `None` disables the controller (constant weight).
    pub target: Option<f64>,
    pub bounds: [f64; 2],
}

impl AdaptiveTaskWeight {
    pub fn for_task(task: TaskKind) -> Self {
        match task.reward_target() {
            Some(t) => Self {
                lambda: 3.0,
                kp: 0.1,
                eps: 1e-5,
                target: Some(t),
                bounds: [0.5, 3.0],
            },
            None => Self {
                lambda: 1.0,
                kp: 0.1,
                eps: 1e-5,
                target: None,
                bounds: [0.5, 3.0],
            },
        }
    }
}

/// Log-space proportional step toward the target mean task reward, clamped
/// to the configured bounds.
pub fn update_task_weight(state: &AdaptiveTaskWeight, mean_task_reward: f64) -> AdaptiveTaskWeight {
    let mut next = state.clone();
    if let Some(target) = state.target {
        let err = (target + state.eps).ln() - (mean_task_reward.max(0.0) + state.eps).ln();
        let l = (state.lambda.ln() + state.kp * err).exp();
        next.lambda = l.clamp(state.bounds[0], state.bounds[1]);
    }
    next
}

// ---------------------------------------------------------------------------
// Conditioning vectors

/// Source of the conditioning vector fed to the policy and discriminator.
#[derive(Clone, Debug)]
pub enum LatentSource {
    /// Learned skill embedding: clips are encoded with the motion encoder,
    /// commands with the text encoder.
    Learned(EmbeddingModel),
    /// The frozen 256-D caption featurizer.
    Raw,
    /// Caption features projected onto a PCA basis and re-normalised.
    Pca(PcaBasis),
}

impl LatentSource {
    pub fn name(&self) -> &'static str {
        match self {
            LatentSource::Learned(_) => "learned",
            LatentSource::Raw => "raw",
            LatentSource::Pca(_) => "pca",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LatentSource::Learned(m) => m.d_z(),
            LatentSource::Raw => crate::embed::TEXT_DIM,
            LatentSource::Pca(b) => b.k(),
        }
    }

    /// Conditioning vector for a natural-language command.
    pub fn caption_latent(&self, caption: &str) -> Result<Vec<f64>, RlError> {
        match self {
            LatentSource::Learned(m) => Ok(m.encode_text(caption)?.as_slice().to_vec()),
            LatentSource::Raw => Ok(featurize_text(caption)?),
            LatentSource::Pca(b) => {
                let p = pca_project(b, &featurize_text(caption)?)?;
                Ok(crate::embed::SkillLatent::new(p)?.as_slice().to_vec())
            }
        }
    }

    /// Candidate training latents per clip. The learned source encodes the
    /// motion itself; the text-feature sources use each caption.
    pub fn clip_latents(&self, dataset: &Dataset) -> Result<Vec<Vec<Vec<f64>>>, RlError> {
        dataset
            .clips
            .iter()
            .map(|clip| match self {
                LatentSource::Learned(m) => {
                    let n = clip.len().min(m.config.n_max);
                    Ok(vec![m.encode_motion(&clip.frames[..n])?.as_slice().to_vec()])
                }
                _ => clip.captions.iter().map(|c| self.caption_latent(c)).collect(),
            })
            .collect()
    }
}

/// PCA basis of dimension `k` fitted on every distinct caption's features.
pub fn fit_caption_pca(dataset: &Dataset, k: usize) -> Result<PcaBasis, RlError> {
    let feats = dataset
        .caption_index()
        .iter()
        .map(|(c, _)| featurize_text(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(crate::nn::pca_fit(&feats, k)?)
}

// ---------------------------------------------------------------------------
// Rollouts

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_envs: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub lr_disc: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Discriminator minibatch steps per epoch.
    pub disc_steps: usize,
    pub disc_batch: usize,
    pub disc_loss: DiscLossConfig,
    pub marginal: bool,
    /// Probability that an episode starts from a random frame of its clip.
    pub ref_state_init: f64,
    pub value_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_envs: 64,
            steps_per_epoch: 32,
            epochs: 1000,
            horizon: tasks::HORIZON,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            ppo_epochs: 4,
            minibatches: 4,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            lr_disc: 3e-4,
            entropy_coef: 1e-3,
            max_grad_norm: 1.0,
            policy_hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            disc_hidden: vec![64, 64],
            disc_steps: 2,
            disc_batch: 256,
            disc_loss: DiscLossConfig::default(),
            marginal: false,
            ref_state_init: 0.5,
            value_scale: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if self.n_envs == 0 || self.steps_per_epoch == 0 {
            return bad("n_envs and steps_per_epoch must be positive");
        }
        if self.minibatches == 0 || self.n_envs * self.steps_per_epoch < self.minibatches {
            return bad("buffer smaller than the number of minibatches");
        }
        if !(0.0..=1.0).contains(&self.disc_loss.w_d) || self.disc_loss.w_gp < 0.0 {
            return bad("w_d must lie in [0, 1] and w_gp must be non-negative");
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma in [0, 1) and gae_lambda in [0, 1] required");
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.n_envs * self.steps_per_epoch * self.epochs
    }
}

/// Per-environment episode state.
#[derive(Clone, Debug)]
pub struct EnvSlot {
    pub world: WorldState,
    pub goal: Option<Goal>,
    pub clip: usize,
    pub z: usize,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

/// Flat `[step][env]` storage of one epoch of experience.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub steps: usize,
    pub inputs: Vec<f32>,
    pub input_dim: usize,
    pub u: Vec<[f64; ACTION_DIM]>,
    pub log_prob: Vec<f64>,
    pub value: Vec<f64>,
    pub r_skill: Vec<f64>,
    pub r_task: Vec<f64>,
    pub reward: Vec<f64>,
    pub lambda: Option<f64>,
    pub done: Vec<bool>,
    pub terminal: Vec<bool>,
    /// `V(s′)` recorded for truncated episodes.
    pub bootstrap: Vec<f64>,
    pub last_value: Vec<f64>,
    pub clip: Vec<usize>,
    pub z: Vec<Vec<f64>>,
    pub s: Vec<[f64; OBS_DIM]>,
    pub s_next: Vec<[f64; OBS_DIM]>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn input_rows(&self, idx: &[usize]) -> Array2<f32> {
        let d = self.input_dim;
        Array2::from_shape_fn((idx.len(), d), |(i, j)| self.inputs[idx[i] * d + j])
    }
}

/// Everything a rollout needs besides the networks.
pub struct RolloutContext<'a> {
    pub dataset: &'a Dataset,
    pub latents: &'a [Vec<Vec<f64>>],
    pub task: Option<TaskKind>,
    pub env: EnvConfig,
    pub horizon: usize,
    pub ref_state_init: f64,
}

impl RolloutContext<'_> {
    pub fn reset_slot(&self, slot: &mut EnvSlot) -> Result<(), RlError> {
        let rng = &mut slot.rng;
        let mut world = sim::reset(&self.env, rng)?;
        slot.clip = rng.random_range(0..self.dataset.len());
        slot.z = rng.random_range(0..self.latents[slot.clip].len());
        if rng.random::<f64>() < self.ref_state_init {
            let clip = &self.dataset.clips[slot.clip];
            let f = clip.frames[rng.random_range(0..clip.len())];
            world.character.set_from_observation(&f.to_observation());
        }
        slot.goal = match self.task {
            Some(t) => Some(tasks::sample_goal(t, &world, rng)?),
            None => None,
        };
        slot.world = world;
        slot.t = 0;
        Ok(())
    }

    pub fn new_slots(&self, seed: u64, n: usize) -> Result<Vec<EnvSlot>, RlError> {
        (0..n)
            .map(|i| {
                let mut slot = EnvSlot {
                    world: WorldState::new(sim::CharacterState::at_rest(0.0), vec![])?,
                    goal: None,
                    clip: 0,
                    z: 0,
                    t: 0,
                    rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64)),
                };
                self.reset_slot(&mut slot)?;
                Ok(slot)
            })
            .collect()
    }

    fn goal_vec(&self, slot: &EnvSlot) -> Result<[f64; GOAL_DIM], RlError> {
        Ok(match &slot.goal {
            Some(g) => goal_features(&slot.world, g)?,
            None => [0.0; GOAL_DIM],
        })
    }
}

pub fn collect_rollouts(
    ctx: &RolloutContext,
    slots: &mut [EnvSlot],
    policy: &Policy,
    value: &ValueFn,
    disc: &Discriminator,
    lambda: Option<f64>,
    steps: usize,
) -> Result<RolloutBuffer, RlError> {
    let n = slots.len();
    let d_in = input_dim(policy.d_z);
    if disc.d_z != policy.d_z {
        return Err(RlError::LatentDim {
            got: disc.d_z,
            expected: policy.d_z,
        });
    }
    let mut buf = RolloutBuffer {
        n_envs: n,
        steps,
        input_dim: d_in,
        lambda,
        ..Default::default()
    };
    let log_std = policy.log_std();
    let mut x = Array2::<f32>::zeros((n, d_in));
    for _ in 0..steps {
        let mut obs = Vec::with_capacity(n);
        for (i, slot) in slots.iter().enumerate() {
            let s = sim::observe(&slot.world);
            let g = ctx.goal_vec(slot)?;
            let z = &ctx.latents[slot.clip][slot.z];
            if z.len() != policy.d_z {
                return Err(RlError::LatentDim {
                    got: z.len(),
                    expected: policy.d_z,
                });
            }
            for (j, v) in policy_input(&policy.norm, &s, &g, z).into_iter().enumerate() {
                x[[i, j]] = v as f32;
            }
            obs.push(s);
        }
        let mu = policy.means(x.view())?;
        let vals = value.values(x.view())?;
        buf.inputs.extend(x.iter());
        let mut transitions = Vec::with_capacity(n);
        let mut r_task = Vec::with_capacity(n);
        let mut ends = Vec::with_capacity(n);
        for (i, slot) in slots.iter_mut().enumerate() {
            let mean: Vec<f64> = mu.row(i).iter().map(|&v| v as f64).collect();
            let smp = sample_from_mean(&mean, &log_std, &mut slot.rng);
            sim::step_in_place(&mut slot.world, smp.action, sim::SUBSTEPS)?;
            slot.t += 1;
            let s_next = sim::observe(&slot.world);
            let rt = match &slot.goal {
                Some(g) => tasks::task_reward(&slot.world, g)?,
                None => 0.0,
            };
            let term = check_termination(&slot.world, slot.goal.as_ref(), slot.t, ctx.horizon);
            let z = ctx.latents[slot.clip][slot.z].clone();
            transitions.push(Transition {
                s: obs[i],
                s_next,
                z: z.clone(),
            });
            buf.u.push(smp.u);
            buf.log_prob.push(smp.log_prob_u);
            buf.value.push(vals[i]);
            buf.clip.push(slot.clip);
            buf.z.push(z);
            buf.s.push(obs[i]);
            buf.s_next.push(s_next);
            r_task.push(rt);
            ends.push(term);
        }
        let r_skill = disc.skill_rewards(&transitions)?;
        // Values of the post-step states, needed to bootstrap truncated episodes.
        let needs_boot = ends.iter().any(|t| *t == tasks::Termination::Horizon);
        let boot = if needs_boot {
            let mut xb = Array2::<f32>::zeros((n, d_in));
            for (i, slot) in slots.iter().enumerate() {
                let g = ctx.goal_vec(slot)?;
                let z = &ctx.latents[slot.clip][slot.z];
                for (j, v) in policy_input(&policy.norm, &transitions[i].s_next, &g, z).into_iter().enumerate() {
                    xb[[i, j]] = v as f32;
                }
            }
            value.values(xb.view())?
        } else {
            vec![0.0; n]
        };
        for i in 0..n {
            let rs = r_skill[i];
            buf.r_skill.push(rs);
            buf.r_task.push(r_task[i]);
            buf.reward.push(composite_reward(rs, r_task[i], lambda));
            let term = ends[i];
            buf.done.push(term.is_done());
            buf.terminal.push(term == tasks::Termination::Knocked);
            buf.bootstrap.push(if term == tasks::Termination::Horizon { boot[i] } else { 0.0 });
            if term.is_done() {
                ctx.reset_slot(&mut slots[i])?;
            }
        }
    }
    for (i, slot) in slots.iter().enumerate() {
        let s = sim::observe(&slot.world);
        let g = ctx.goal_vec(slot)?;
        let z = &ctx.latents[slot.clip][slot.z];
        for (j, v) in policy_input(&policy.norm, &s, &g, z).into_iter().enumerate() {
            x[[i, j]] = v as f32;
        }
    }
    buf.last_value = value.values(x.view())?;
    Ok(buf)
}

/// Generalised advantage estimates and returns over a `[step][env]` buffer.
#[allow(clippy::too_many_arguments)]
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    done: &[bool],
    terminal: &[bool],
    bootstrap: &[f64],
    last_value: &[f64],
    n_envs: usize,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let steps = rewards.len() / n_envs;
    let mut adv = vec![0.0; rewards.len()];
    for e in 0..n_envs {
        let mut gae = 0.0;
        for t in (0..steps).rev() {
            let i = t * n_envs + e;
            let next_v = if done[i] {
                if terminal[i] {
                    0.0
                } else {
                    bootstrap[i]
                }
            } else if t + 1 == steps {
                last_value[e]
            } else {
                values[i + n_envs]
            };
            let delta = rewards[i] + gamma * next_v - values[i];
            let carry = if done[i] { 0.0 } else { gamma * lam * gae };
            gae = delta + carry;
            adv[i] = gae;
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

// ---------------------------------------------------------------------------
// PPO losses

pub struct PpoBatch<T> {
    pub x: Array2<T>,
    pub u: Array2<T>,
    pub log_prob_old: Array2<T>,
    pub adv: Array2<T>,
}

/// Records Gaussian log-densities of `u` (B×1) and the clamped log-std row.
pub fn log_prob_graph<T: Scalar>(policy: &Policy, g: &mut Graph<T>, pv: &ParamVars, x: Var, u: Var) -> (Var, Var) {
    let mu = policy.mlp.graph(g, pv, x);
    let b = g.shape(x).0;
    let ls = g.clamp(
        pv.get("pi.log_std"),
        T::from_f64(LOG_STD_MIN).unwrap(),
        T::from_f64(LOG_STD_MAX).unwrap(),
    );
    let lsr = g.repeat_rows(ls, b);
    let nls = g.neg(lsr);
    let inv = g.exp(nls);
    let diff = g.sub(u, mu);
    let zd = g.mul(diff, inv);
    let sq = g.square(zd);
    let quad = g.sum_cols(sq);
    let quad = g.scale(quad, T::from_f64(-0.5).unwrap());
    let norm = g.sum_cols(lsr);
    let lp = g.sub(quad, norm);
    let c = -0.5 * (2.0 * PI).ln() * ACTION_DIM as f64;
    (g.add_scalar(lp, T::from_f64(c).unwrap()), ls)
}

/// Clipped surrogate loss with entropy bonus. Returns `(loss, ratio)`.
pub fn ppo_policy_loss_graph<T: Scalar>(
    policy: &Policy,
    g: &mut Graph<T>,
    pv: &ParamVars,
    batch: &PpoBatch<T>,
    clip: f64,
    entropy_coef: f64,
) -> (Var, Var) {
    let x = g.input(batch.x.clone());
    let u = g.input(batch.u.clone());
    let old = g.input(batch.log_prob_old.clone());
    let adv = g.input(batch.adv.clone());
    let (lp, ls) = log_prob_graph(policy, g, pv, x, u);
    let d = g.sub(lp, old);
    let ratio = g.exp(d);
    let s1 = g.mul(ratio, adv);
    let rc = g.clamp(ratio, T::from_f64(1.0 - clip).unwrap(), T::from_f64(1.0 + clip).unwrap());
    let s2 = g.mul(rc, adv);
    let surr = g.min(s1, s2);
    let m = g.mean(surr);
    let pg = g.neg(m);
    // Entropy of the diagonal Gaussian.
    let ent = g.sum(ls);
    let ent = g.add_scalar(ent, T::from_f64(0.5 * (2.0 * PI * std::f64::consts::E).ln() * ACTION_DIM as f64).unwrap());
    let ent = g.scale(ent, T::from_f64(-entropy_coef).unwrap());
    (g.add(pg, ent), ratio)
}

pub fn value_loss_graph<T: Scalar>(value: &ValueFn, g: &mut Graph<T>, pv: &ParamVars, x: &Array2<T>, ret: &Array2<T>) -> Var {
    let xv = g.input(x.clone());
    let target = g.input(ret.mapv(|r| r / T::from_f64(value.scale).unwrap()));
    let v = value.mlp.graph(g, pv, xv);
    let d = g.sub(v, target);
    let sq = g.square(d);
    g.mean(sq)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoMetrics {
    pub pi_loss: f64,
    pub v_loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    /// Mean |ratio − 1| on the first minibatch of the update.
    pub first_ratio_dev: f64,
    pub skipped: usize,
}

pub struct Optimizers {
    pub policy: AdamState<f32>,
    pub value: AdamState<f32>,
    pub disc: AdamState<f32>,
}

impl Optimizers {
    pub fn new(policy: &Policy, value: &ValueFn, disc: &Discriminator, max_grad_norm: f64) -> Self {
        let cfg = AdamConfig {
            max_grad_norm: Some(max_grad_norm),
            ..Default::default()
        };
        Self {
            policy: AdamState::new(&policy.params, cfg),
            value: AdamState::new(&value.params, cfg),
            disc: AdamState::new(&disc.params, cfg),
        }
    }
}

pub fn ppo_update<R: Rng + ?Sized>(
    buf: &RolloutBuffer,
    policy: &mut Policy,
    value: &mut ValueFn,
    opt: &mut Optimizers,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PpoMetrics, RlError> {
    let (mut adv, ret) = compute_gae(
        &buf.reward,
        &buf.value,
        &buf.done,
        &buf.terminal,
        &buf.bootstrap,
        &buf.last_value,
        buf.n_envs,
        cfg.gamma,
        cfg.gae_lambda,
    );
    let n = adv.len();
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
    let mb = n / cfg.minibatches;
    let mut m = PpoMetrics::default();
    let mut count = 0.0;
    let mut first = true;
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.ppo_epochs {
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        for chunk in idx.chunks(mb).take(cfg.minibatches) {
            let x = buf.input_rows(chunk);
            let batch = PpoBatch {
                u: Array2::from_shape_fn((chunk.len(), ACTION_DIM), |(i, k)| buf.u[chunk[i]][k] as f32),
                log_prob_old: Array2::from_shape_fn((chunk.len(), 1), |(i, _)| buf.log_prob[chunk[i]] as f32),
                adv: Array2::from_shape_fn((chunk.len(), 1), |(i, _)| adv[chunk[i]] as f32),
                x,
            };
            let mut g = Graph::<f32>::new();
            let pv = g.params(&policy.params);
            let (loss, ratio) = ppo_policy_loss_graph(policy, &mut g, &pv, &batch, cfg.clip, cfg.entropy_coef);
            let lv = g.scalar(loss) as f64;
            let r = g.value(ratio);
            let rn = r.len() as f64;
            let kl = r.iter().map(|&q| -(q as f64).ln()).sum::<f64>() / rn;
            let cf = r.iter().filter(|&&q| ((q as f64) - 1.0).abs() > cfg.clip).count() as f64 / rn;
            if first {
                m.first_ratio_dev = r.iter().map(|&q| ((q as f64) - 1.0).abs()).sum::<f64>() / rn;
                first = false;
            }
            if lv.is_finite() {
                let grads = policy.params.with_arrays(g.backward(loss)?);
                adam_step(&mut opt.policy, &mut policy.params, &grads, cfg.lr_policy)?;
                clamp_log_std(policy);
            } else {
                m.skipped += 1;
            }
            let rt = Array2::from_shape_fn((chunk.len(), 1), |(i, _)| ret[chunk[i]] as f32);
            let mut gv = Graph::<f32>::new();
            let pvv = gv.params(&value.params);
            let vl = value_loss_graph(value, &mut gv, &pvv, &batch.x, &rt);
            let vv = gv.scalar(vl) as f64;
            if vv.is_finite() {
                let grads = value.params.with_arrays(gv.backward(vl)?);
                adam_step(&mut opt.value, &mut value.params, &grads, cfg.lr_value)?;
            } else {
                m.skipped += 1;
            }
            m.pi_loss += lv;
            m.v_loss += vv;
            m.kl += kl;
            m.clip_frac += cf;
            count += 1.0;
        }
    }
    m.pi_loss /= count;
    m.v_loss /= count;
    m.kl /= count;
    m.clip_frac /= count;
    Ok(m)
}

fn clamp_log_std(policy: &mut Policy) {
    if let Some(ls) = policy.params.get_mut("pi.log_std") {
        for v in ls.iter_mut() {
            *v = v.clamp(LOG_STD_MIN as f32, LOG_STD_MAX as f32);
        }
    }
}

// ---------------------------------------------------------------------------
// Discriminator data

fn pose_obs(p: &Pose) -> [f64; OBS_DIM] {
    p.to_observation()
}

/// Clips that share no caption with clip `i`.
pub fn other_clips(dataset: &Dataset) -> Vec<Vec<usize>> {
    (0..dataset.len())
        .map(|i| {
            let mine = &dataset.clips[i].captions;
            let others: Vec<usize> = (0..dataset.len())
                .filter(|&j| j != i && !dataset.clips[j].captions.iter().any(|c| mine.contains(c)))
                .collect();
            if others.is_empty() {
                (0..dataset.len()).filter(|&j| j != i).collect()
            } else {
                others
            }
        })
        .collect()
}

/// Samples `(real, agent, other)` discriminator batches from a buffer.
pub fn disc_batches<R: Rng + ?Sized>(
    buf: &RolloutBuffer,
    dataset: &Dataset,
    others: &[Vec<usize>],
    size: usize,
    rng: &mut R,
) -> Result<(Vec<Transition>, Vec<Transition>, Vec<Transition>), RlError> {
    let mut real = Vec::with_capacity(size);
    let mut agent = Vec::with_capacity(size);
    let mut other = Vec::with_capacity(size);
    for _ in 0..size {
        let i = rng.random_range(0..buf.len());
        let c = buf.clip[i];
        let z = buf.z[i].clone();
        agent.push(Transition {
            s: buf.s[i],
            s_next: buf.s_next[i],
            z: z.clone(),
        });
        let (a, b) = sample_transition(&dataset.clips[c], rng)?;
        real.push(Transition {
            s: pose_obs(&a),
            s_next: pose_obs(&b),
            z: z.clone(),
        });
        let oc = *others[c].choose(rng).unwrap_or(&c);
        let (a, b) = sample_transition(&dataset.clips[oc], rng)?;
        other.push(Transition {
            s: pose_obs(&a),
            s_next: pose_obs(&b),
            z,
        });
    }
    Ok((real, agent, other))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub r_skill: f64,
    pub r_task: f64,
    pub lambda: f64,
    pub disc_loss: f64,
    pub pi_loss: f64,
    pub v_loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
}

pub const LOG_HEADER: &str = "epoch,r_skill,r_task,lambda,disc_loss,pi_loss,v_loss,kl,clip_frac";

impl TrainLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.r_skill,
            self.r_task,
            self.lambda,
            self.disc_loss,
            self.pi_loss,
            self.v_loss,
            self.kl,
            self.clip_frac
        )
    }
}

pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub task: Option<TaskKind>,
    pub policy: Policy,
    pub value: ValueFn,
    pub disc: Discriminator,
    pub lambda: AdaptiveTaskWeight,
    pub log: Vec<TrainLogRow>,
    pub config: TrainConfig,
}

pub fn env_for(task: Option<TaskKind>) -> EnvConfig {
    match task {
        Some(TaskKind::Location) | Some(TaskKind::Strike) => EnvConfig::default(),
        _ => EnvConfig::empty(),
    }
}

/// Alternates rollouts, discriminator steps, PPO updates and task-weight
/// updates. `on_epoch` sees every log row as it is produced.
pub fn train_policy(
    task: Option<TaskKind>,
    dataset: &Dataset,
    latents: &LatentSource,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainLogRow),
) -> Result<TrainedPolicy, RlError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = ObsNorm::from_dataset(dataset);
    let d_z = latents.dim();
    let clip_latents = latents.clip_latents(dataset)?;
    let mut policy = Policy::new(d_z, &cfg.policy_hidden, norm.clone(), &mut rng)?;
    let mut value = ValueFn::new(d_z, &cfg.value_hidden, cfg.value_scale, &mut rng)?;
    let mut disc = Discriminator::new(d_z, &cfg.disc_hidden, norm, cfg.marginal, &mut rng)?;
    let mut opt = Optimizers::new(&policy, &value, &disc, cfg.max_grad_norm);
    let mut weight = match task {
        Some(t) => AdaptiveTaskWeight::for_task(t),
        None => AdaptiveTaskWeight {
            lambda: 0.0,
            kp: 0.0,
            eps: 1e-5,
            target: None,
            bounds: [0.5, 3.0],
        },
    };
    let ctx = RolloutContext {
        dataset,
        latents: &clip_latents,
        task,
        env: env_for(task),
        horizon: cfg.horizon,
        ref_state_init: cfg.ref_state_init,
    };
    let mut slots = ctx.new_slots(seed, cfg.n_envs)?;
    let others = other_clips(dataset);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = task.map(|_| weight.lambda);
        let buf = collect_rollouts(&ctx, &mut slots, &policy, &value, &disc, lambda, cfg.steps_per_epoch)?;
        let mut d_loss = 0.0;
        for _ in 0..cfg.disc_steps {
            let (real, agent, other) = disc_batches(&buf, dataset, &others, cfg.disc_batch, &mut rng)?;
            d_loss += disc_update(&mut disc, &mut opt.disc, &real, &agent, &other, &cfg.disc_loss, cfg.lr_disc)?;
        }
        d_loss /= cfg.disc_steps.max(1) as f64;
        let m = ppo_update(&buf, &mut policy, &mut value, &mut opt, cfg, &mut rng)?;
        let n = buf.len() as f64;
        let r_task = buf.r_task.iter().sum::<f64>() / n;
        let row = TrainLogRow {
            epoch,
            r_skill: buf.r_skill.iter().sum::<f64>() / n,
            r_task,
            lambda: weight.lambda,
            disc_loss: d_loss,
            pi_loss: m.pi_loss,
            v_loss: m.v_loss,
            kl: m.kl,
            clip_frac: m.clip_frac,
        };
        if ![row.r_skill, row.disc_loss, row.pi_loss, row.v_loss].iter().all(|v| v.is_finite()) {
            return Err(RlError::Diverged {
                epoch,
                reason: format!("{row:?}"),
            });
        }
        if task.is_some() {
            weight = update_task_weight(&weight, r_task);
        }
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainedPolicy {
        task,
        policy,
        value,
        disc,
        lambda: weight,
        log,
        config: cfg.clone(),
    })
}
