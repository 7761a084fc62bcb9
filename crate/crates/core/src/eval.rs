//! Coverage metric, coverage curves, latent interpolation sweeps and the
//! conditioning / discriminator comparisons.
//!
//! State distance is Euclidean on the raw 7-feature observation.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{slerp, EmbedError, EmbeddingModel, SkillLatent};
use crate::motion::{skill_of, Dataset};
use crate::rl::{fit_caption_pca, policy_input, train_policy, LatentSource, Policy, RlError, TrainConfig};
use crate::sim::{self, EnvConfig, SimError, WorldState, OBS_DIM, TOPPLE_UPDOT};
use crate::tasks::{check_termination, goal_features, sample_goal, Goal, TaskKind, Termination, DELTA_POS, GOAL_DIM};

pub type State = [f64; OBS_DIM];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("coverage needs non-empty trajectory and clip")]
    Empty,
    #[error("epsilon grid must be non-negative and ascending")]
    Grid,
    #[error("training budgets differ: {0}")]
    Budget(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn dist2(a: &State, b: &State) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of clip states within `eps` of some trajectory state.
pub fn coverage(traj: &[State], clip: &[State], eps: f64) -> Result<f64, EvalError> {
    if traj.is_empty() || clip.is_empty() {
        return Err(EvalError::Empty);
    }
    let e2 = eps * eps;
    let hit = clip
        .iter()
        .filter(|c| traj.iter().any(|s| dist2(c, s) <= e2))
        .count();
    Ok(hit as f64 / clip.len() as f64)
}

/// Distance from each clip state to its nearest trajectory state.
pub fn min_distances(traj: &[State], clip: &[State]) -> Result<Vec<f64>, EvalError> {
    if traj.is_empty() || clip.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(clip
        .iter()
        .map(|c| traj.iter().map(|s| dist2(c, s)).fold(f64::INFINITY, f64::min).sqrt())
        .collect())
}

/// Same result as [`coverage`], using a uniform grid over the two
/// highest-variance coordinates of the trajectory to prune candidates.
pub fn coverage_grid(traj: &[State], clip: &[State], eps: f64) -> Result<f64, EvalError> {
    if traj.is_empty() || clip.is_empty() {
        return Err(EvalError::Empty);
    }
    if eps <= 1e-12 {
        return coverage(traj, clip, eps);
    }
    let n = traj.len() as f64;
    let mut var: Vec<(usize, f64)> = (0..OBS_DIM)
        .map(|k| {
            let m = traj.iter().map(|s| s[k]).sum::<f64>() / n;
            (k, traj.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>())
        })
        .collect();
    var.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (a, b) = (var[0].0, var[1].0);
    let cell = |s: &State| ((s[a] / eps).floor() as i64, (s[b] / eps).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, s) in traj.iter().enumerate() {
        grid.entry(cell(s)).or_default().push(j);
    }
    let e2 = eps * eps;
    let mut hit = 0usize;
    for c in clip {
        let (ci, cj) = cell(c);
        let found = (-1..=1).any(|di| {
            (-1..=1).any(|dj| {
                grid.get(&(ci + di, cj + dj))
                    .is_some_and(|v| v.iter().any(|&j| dist2(c, &traj[j]) <= e2))
            })
        });
        hit += found as usize;
    }
    Ok(hit as f64 / clip.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            epsilons: (0..31).map(|i| i as f64 * 0.1).collect(),
            steps: 300,
            seed: 0,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = !self.epsilons.is_empty()
            && self.epsilons.iter().all(|e| e.is_finite() && *e >= 0.0)
            && self.epsilons.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(EvalError::Grid)
        }
    }

    /// Index of the grid point closest to `eps`.
    pub fn index_of(&self, eps: f64) -> usize {
        let mut best = 0;
        for (i, e) in self.epsilons.iter().enumerate() {
            if (e - eps).abs() < (self.epsilons[best] - eps).abs() {
                best = i;
            }
        }
        best
    }
}

/// Deterministic no-task rollouts, one per latent, batched through the
/// policy. Every episode starts at rest in an empty arena.
pub fn rollout_batch(policy: &Policy, latents: &[Vec<f64>], steps: usize, seed: u64) -> Result<Vec<Vec<State>>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = EnvConfig::empty();
    let mut worlds = latents
        .iter()
        .map(|_| sim::reset(&env, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let n = latents.len();
    let d_in = OBS_DIM + GOAL_DIM + policy.d_z;
    let goal = [0.0; GOAL_DIM];
    let mut out: Vec<Vec<State>> = vec![Vec::with_capacity(steps + 1); n];
    let mut x = Array2::<f32>::zeros((n, d_in));
    for (i, w) in worlds.iter().enumerate() {
        out[i].push(sim::observe(w));
    }
    for _ in 0..steps {
        for i in 0..n {
            if latents[i].len() != policy.d_z {
                return Err(RlError::LatentDim {
                    got: latents[i].len(),
                    expected: policy.d_z,
                }
                .into());
            }
            let s = out[i].last().expect("non-empty");
            for (j, v) in policy_input(&policy.norm, s, &goal, &latents[i]).into_iter().enumerate() {
                x[[i, j]] = v as f32;
            }
        }
        let mu = policy.means(x.view()).map_err(EvalError::Rl)?;
        for (i, w) in worlds.iter_mut().enumerate() {
            let u = [mu[[i, 0]] as f64, mu[[i, 1]] as f64, mu[[i, 2]] as f64, mu[[i, 3]] as f64];
            sim::step_in_place(w, crate::rl::squash(&u), sim::SUBSTEPS)?;
            out[i].push(sim::observe(w));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipCoverage {
    pub clip_id: String,
    /// Caption-averaged coverage per grid point.
    pub coverage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub epsilons: Vec<f64>,
    pub mean: Vec<f64>,
    pub per_clip: Vec<ClipCoverage>,
    pub skipped: Vec<String>,
}

impl CoverageReport {
    pub fn at(&self, eps: f64) -> f64 {
        let cfg = CoverageConfig {
            epsilons: self.epsilons.clone(),
            steps: 0,
            seed: 0,
        };
        self.mean[cfg.index_of(eps)]
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("epsilon,coverage\n");
        for (e, c) in self.epsilons.iter().zip(&self.mean) {
            s.push_str(&format!("{e},{c}\n"));
        }
        s
    }

    /// Per-skill coverage at `eps`, averaged over that skill's clips.
    pub fn per_skill(&self, eps: f64) -> Vec<(String, f64)> {
        let cfg = CoverageConfig {
            epsilons: self.epsilons.clone(),
            steps: 0,
            seed: 0,
        };
        let k = cfg.index_of(eps);
        let mut acc: Vec<(String, f64, usize)> = Vec::new();
        for c in &self.per_clip {
            let tag = skill_of(&c.clip_id).to_string();
            match acc.iter_mut().find(|(t, _, _)| *t == tag) {
                Some(e) => {
                    e.1 += c.coverage[k];
                    e.2 += 1;
                }
                None => acc.push((tag, c.coverage[k], 1)),
            }
        }
        acc.into_iter().map(|(t, s, n)| (t, s / n as f64)).collect()
    }
}

/// For every (clip, caption) pair, roll out with the caption's latent and
/// measure coverage of that clip. Averages over captions, then clips.
pub fn coverage_curve(
    policy: &Policy,
    latents: &LatentSource,
    dataset: &Dataset,
    cfg: &CoverageConfig,
) -> Result<CoverageReport, EvalError> {
    cfg.validate()?;
    let mut zs = Vec::new();
    let mut owner = Vec::new();
    let mut skipped = Vec::new();
    for (ci, clip) in dataset.clips.iter().enumerate() {
        for cap in &clip.captions {
            match latents.caption_latent(cap) {
                Ok(z) => {
                    zs.push(z);
                    owner.push(ci);
                }
                Err(e) => {
                    log::warn!("skipping {} / {cap:?}: {e}", clip.id);
                    skipped.push(format!("{}: {cap}", clip.id));
                }
            }
        }
    }
    let trajs = rollout_batch(policy, &zs, cfg.steps, cfg.seed)?;
    let ne = cfg.epsilons.len();
    let mut sums = vec![vec![0.0; ne]; dataset.len()];
    let mut counts = vec![0usize; dataset.len()];
    for (traj, &ci) in trajs.iter().zip(&owner) {
        let clip = dataset.clips[ci].observations();
        let md = min_distances(traj, &clip)?;
        for (k, e) in cfg.epsilons.iter().enumerate() {
            sums[ci][k] += md.iter().filter(|d| **d <= *e).count() as f64 / md.len() as f64;
        }
        counts[ci] += 1;
    }
    let mut per_clip = Vec::new();
    for (ci, clip) in dataset.clips.iter().enumerate() {
        if counts[ci] == 0 {
            continue;
        }
        per_clip.push(ClipCoverage {
            clip_id: clip.id.clone(),
            coverage: sums[ci].iter().map(|s| s / counts[ci] as f64).collect(),
        });
    }
    let mut mean = vec![0.0; ne];
    for c in &per_clip {
        for k in 0..ne {
            mean[k] += c.coverage[k] / per_clip.len().max(1) as f64;
        }
    }
    Ok(CoverageReport {
        epsilons: cfg.epsilons.clone(),
        mean,
        per_clip,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Interpolation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub mean_speed: f64,
    pub mean_height: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("t,mean_speed,mean_height\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.t, r.mean_speed, r.mean_height));
    }
    s
}

pub fn trajectory_stats(traj: &[State]) -> (f64, f64) {
    let n = traj.len() as f64;
    let speed = traj.iter().map(|s| s[2].hypot(s[3])).sum::<f64>() / n;
    let height = traj.iter().map(|s| s[0]).sum::<f64>() / n;
    (speed, height)
}

/// Rolls out `k` evenly spaced slerp points between two command latents.
pub fn interpolation_sweep(
    policy: &Policy,
    latents: &LatentSource,
    c1: &str,
    c2: &str,
    k: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    let z1 = SkillLatent::new(latents.caption_latent(c1)?)?;
    let z2 = SkillLatent::new(latents.caption_latent(c2)?)?;
    let ts: Vec<f64> = (0..k).map(|i| if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 }).collect();
    let zs = ts
        .iter()
        .map(|&t| Ok(slerp(&z1, &z2, t)?.as_slice().to_vec()))
        .collect::<Result<Vec<_>, EmbedError>>()?;
    // Same start state for every point so only the latent varies.
    let trajs = zs
        .iter()
        .map(|z| rollout_batch(policy, std::slice::from_ref(z), steps, seed).map(|mut v| v.remove(0)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ts
        .iter()
        .zip(&trajs)
        .map(|(&t, tr)| {
            let (mean_speed, mean_height) = trajectory_stats(tr);
            SweepRow {
                t,
                mean_speed,
                mean_height,
            }
        })
        .collect())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

// ---------------------------------------------------------------------------
// Comparisons

pub fn check_budgets(cfgs: &[&TrainConfig]) -> Result<(), EvalError> {
    if let Some(first) = cfgs.first() {
        for c in cfgs {
            if c.samples() != first.samples() || c.steps_per_epoch != first.steps_per_epoch {
                return Err(EvalError::Budget(format!(
                    "{} vs {} samples",
                    c.samples(),
                    first.samples()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub seed: u64,
    pub report: CoverageReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub name: String,
    /// Seed-averaged curve.
    pub mean_curve: Vec<f64>,
    pub at_eps: f64,
    pub min_skill_at_eps: f64,
}

pub fn summarize(results: &[VariantResult], eps: f64) -> Vec<ComparisonSummary> {
    let mut names: Vec<String> = Vec::new();
    for r in results {
        if !names.contains(&r.name) {
            names.push(r.name.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&VariantResult> = results.iter().filter(|r| r.name == name).collect();
            let n = rs.len() as f64;
            let ne = rs[0].report.mean.len();
            let mean_curve = (0..ne).map(|k| rs.iter().map(|r| r.report.mean[k]).sum::<f64>() / n).collect();
            let at_eps = rs.iter().map(|r| r.report.at(eps)).sum::<f64>() / n;
            let min_skill_at_eps = rs
                .iter()
                .map(|r| r.report.per_skill(eps).iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / n;
            ComparisonSummary {
                name,
                mean_curve,
                at_eps,
                min_skill_at_eps,
            }
        })
        .collect()
}

/// Trains one no-task policy per conditioning variant and seed under the
/// same configuration and evaluates each with the same protocol.
pub fn baseline_comparison(
    dataset: &Dataset,
    model: &EmbeddingModel,
    cfg: &TrainConfig,
    seeds: &[u64],
    cov: &CoverageConfig,
) -> Result<Vec<VariantResult>, EvalError> {
    let pca = fit_caption_pca(dataset, model.d_z())?;
    let variants = [
        LatentSource::Learned(model.clone()),
        LatentSource::Raw,
        LatentSource::Pca(pca),
    ];
    run_variants(dataset, &variants.iter().map(|v| (v.name().to_string(), v.clone(), cfg.clone())).collect::<Vec<_>>(), seeds, cov)
}

/// Joint versus marginal discriminator at equal budget.
pub fn ablation_joint_vs_marginal(
    dataset: &Dataset,
    model: &EmbeddingModel,
    cfg: &TrainConfig,
    seeds: &[u64],
    cov: &CoverageConfig,
) -> Result<Vec<VariantResult>, EvalError> {
    let src = LatentSource::Learned(model.clone());
    let joint = TrainConfig {
        marginal: false,
        ..cfg.clone()
    };
    let marginal = TrainConfig {
        marginal: true,
        ..cfg.clone()
    };
    run_variants(
        dataset,
        &[("joint".into(), src.clone(), joint), ("marginal".into(), src, marginal)],
        seeds,
        cov,
    )
}

pub fn run_variants(
    dataset: &Dataset,
    variants: &[(String, LatentSource, TrainConfig)],
    seeds: &[u64],
    cov: &CoverageConfig,
) -> Result<Vec<VariantResult>, EvalError> {
    check_budgets(&variants.iter().map(|v| &v.2).collect::<Vec<_>>())?;
    let mut out = Vec::new();
    for &seed in seeds {
        for (name, src, cfg) in variants {
            let trained = train_policy(None, dataset, src, cfg, seed, |_| {})?;
            let report = coverage_curve(&trained.policy, src, dataset, cov)?;
            log::info!("{name} seed {seed}: coverage@1 = {:.3}", report.at(1.0));
            out.push(VariantResult {
                name: name.clone(),
                seed,
                report,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Task completion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvalReport {
    pub task: TaskKind,
    pub episodes: usize,
    pub successes: usize,
    /// Seconds to success, for successful episodes.
    pub times: Vec<f64>,
}

impl TaskEvalReport {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }
}

/// Whether the episode goal counts as achieved in `world`.
pub fn task_achieved(world: &WorldState, goal: &Goal) -> bool {
    match goal {
        Goal::Location { target, .. } => {
            let p = world.character.p;
            (target[0] - p[0]).hypot(target[1] - p[1]) <= DELTA_POS
        }
        Goal::Strike { object_id } => world.object(object_id).is_some_and(|o| o.updot() < TOPPLE_UPDOT),
        Goal::Facing { dir } => {
            let h = world.character.heading();
            h[0] * dir[0] + h[1] * dir[1] >= 0.95
        }
    }
}

/// Batched deterministic episodes with random goals; success is checked
/// after every tick up to `steps`. Location episodes that knock their
/// marker over before arriving count as failures.
pub fn task_completion(
    policy: &Policy,
    task: TaskKind,
    z: &[f64],
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<TaskEvalReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = crate::rl::env_for(Some(task));
    let mut worlds = Vec::with_capacity(episodes);
    let mut goals = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let w = sim::reset(&env, &mut rng)?;
        goals.push(sample_goal(task, &w, &mut rng).map_err(RlError::from)?);
        worlds.push(w);
    }
    let d_in = OBS_DIM + GOAL_DIM + policy.d_z;
    let mut x = Array2::<f32>::zeros((episodes, d_in));
    let mut done = vec![false; episodes];
    let mut times = vec![None; episodes];
    for t in 1..=steps {
        for i in 0..episodes {
            let s = sim::observe(&worlds[i]);
            let g = goal_features(&worlds[i], &goals[i]).map_err(RlError::from)?;
            for (j, v) in policy_input(&policy.norm, &s, &g, z).into_iter().enumerate() {
                x[[i, j]] = v as f32;
            }
        }
        let mu = policy.means(x.view())?;
        for i in 0..episodes {
            if done[i] {
                continue;
            }
            let u = [mu[[i, 0]] as f64, mu[[i, 1]] as f64, mu[[i, 2]] as f64, mu[[i, 3]] as f64];
            sim::step_in_place(&mut worlds[i], crate::rl::squash(&u), sim::SUBSTEPS)?;
            if task_achieved(&worlds[i], &goals[i]) {
                done[i] = true;
                times[i] = Some(t as f64 / sim::CONTROL_HZ);
            } else if check_termination(&worlds[i], Some(&goals[i]), t, usize::MAX) == Termination::Knocked {
                done[i] = true;
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    let times: Vec<f64> = times.into_iter().flatten().collect();
    Ok(TaskEvalReport {
        task,
        episodes,
        successes: times.len(),
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> State {
        [v, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    }

    #[test]
    fn coverage_examples() {
        let clip = [s(0.0), s(1.0), s(2.0), s(3.0)];
        assert_eq!(coverage(&clip, &clip, 0.0).unwrap(), 1.0);
        assert_eq!(coverage(&[s(10.0)], &clip, 1.0).unwrap(), 0.0);
        assert_eq!(coverage(&[s(0.5)], &clip, 0.6).unwrap(), 0.5);
        assert!(coverage(&[], &clip, 1.0).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
    }

    #[test]
    fn grid_validation() {
        assert!(CoverageConfig::default().validate().is_ok());
        assert_eq!(CoverageConfig::default().epsilons.len(), 31);
        let bad = CoverageConfig {
            epsilons: vec![0.5, 0.2],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
