//! Finite-difference gradient checks for every trainable module.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adversary::{disc_loss_graph, DiscLossConfig, Discriminator};
use crate::embed::{embedding_loss_graph, BatchItem, EmbedConfig, EmbeddingModel};
use crate::motion::{generate_synthetic_dataset, sample_clip, sample_transition, Dataset, DatasetConfig, ObsNorm, Pose};
use crate::nn::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::{Graph, Mlp, MlpSpec, NnError, OutputTransform, Params};
use crate::rl::{input_dim, log_prob_graph, policy_input, ppo_policy_loss_graph, value_loss_graph, Policy, PpoBatch, ValueFn};
use crate::sim::{ACTION_DIM, OBS_DIM};
use crate::tasks::GOAL_DIM;

pub const PROBES: usize = 100;
pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub report: GradCheckReport,
}

fn gauss<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A consecutive frame pair from the corpus, as observations.
fn corpus_pair<R: Rng>(data: &Dataset, rng: &mut R) -> ([f64; OBS_DIM], [f64; OBS_DIM]) {
    let (a, b) = sample_transition(sample_clip(data, rng).expect("non-empty"), rng).expect("two frames");
    (a.into(), b.into())
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn in_module(module: &str, e: NnError) -> NnError {
    NnError::Invalid(format!("{module}: {e}"))
}

fn err(e: impl std::fmt::Display) -> NnError {
    NnError::Invalid(e.to_string())
}

/// Runs the checks with `probes` probes per module at the default step.
pub fn run(probes: usize, seed: u64) -> Result<Vec<ModuleCheck>, NnError> {
    run_with_step(probes, seed, STEP)
}

pub fn run_with_step(probes: usize, seed: u64, step: f64) -> Result<Vec<ModuleCheck>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let d_z = 4;

    // Plain MLP with a squashing head.
    let mlp = Mlp::new(MlpSpec::new(5, &[8, 8], 3).with_output(OutputTransform::Tanh), "m")?;
    let mut p32 = Params::new();
    mlp.init(&mut p32, &mut rng, 1.0)?;
    let x = gauss(&mut rng, 6, 5, 1.0);
    let y = gauss(&mut rng, 6, 3, 0.5);
    let report = check_gradients(
        &p32.cast::<f64>(),
        |g, pv| {
            let xi = g.input(x.clone());
            let out = mlp.graph(g, pv, xi);
            let yi = g.input(y.clone());
            let d = g.sub(out, yi);
            let sq = g.square(d);
            Ok(g.mean(sq))
        },
        probes,
        step,
        &mut rng,
    )
    .map_err(|e| in_module("mlp", e))?;
    out.push(ModuleCheck { module: "mlp", report });

    // Skill embedding: motion encoder, decoder and text head in one loss.
    let data_cfg = DatasetConfig {
        clips_per_skill: 1,
        seconds: 1.0,
        ..Default::default()
    };
    let data = generate_synthetic_dataset(&data_cfg, seed).map_err(err)?;
    let cfg = EmbedConfig {
        d_model: 8,
        d_z,
        ffn: 8,
        text_hidden: 8,
        ..Default::default()
    };
    let model = EmbeddingModel::new(cfg, &data, &mut rng).map_err(err)?;
    let frames = |k: usize, n: usize| -> Vec<Pose> { data.clips[k].frames[..n].to_vec() };
    let batch = vec![
        BatchItem {
            frames: frames(0, 2),
            caption: Some(data.clips[0].captions[0].clone()),
        },
        BatchItem {
            frames: frames(1, 5),
            caption: Some(data.clips[1].captions[1].clone()),
        },
        BatchItem {
            frames: frames(1, 3),
            caption: None,
        },
    ];
    let report = check_gradients(
        &model.params.cast::<f64>(),
        |g, pv| Ok(embedding_loss_graph(&model, g, pv, &batch).map_err(err)?.0),
        probes,
        step,
        &mut rng,
    )
    .map_err(|e| in_module("skill-embed", e))?;
    out.push(ModuleCheck { module: "skill-embed", report });

    // Discriminator loss including the gradient penalty.
    let norm = ObsNorm::from_dataset(&data);
    let disc = Discriminator::new(d_z, &[16, 16], norm.clone(), false, &mut rng).map_err(err)?;
    let batch = |n: usize, rng: &mut ChaCha8Rng| -> Result<Array2<f64>, NnError> {
        let ts: Vec<_> = (0..n)
            .map(|_| {
                let (s, s_next) = corpus_pair(&data, rng);
                crate::adversary::Transition {
                    s,
                    s_next,
                    z: unit(rng, d_z),
                }
            })
            .collect();
        disc.inputs::<f64>(&ts).map_err(err)
    };
    let (real, agent, other) = (batch(6, &mut rng)?, batch(6, &mut rng)?, batch(6, &mut rng)?);
    let dcfg = DiscLossConfig::default();
    let report = check_gradients(
        &disc.params.cast::<f64>(),
        |g, pv| disc_loss_graph(&disc, g, pv, &real, &agent, &other, &dcfg).map_err(err),
        probes,
        step,
        &mut rng,
    )
    .map_err(|e| in_module("discriminator", e))?;
    out.push(ModuleCheck { module: "discriminator", report });

    // PPO surrogate with some ratios inside and some outside the clip range.
    let policy = Policy::new(d_z, &[16, 16], norm.clone(), &mut rng).map_err(err)?;
    let n = 16;
    let mut x = Array2::zeros((n, input_dim(d_z)));
    for i in 0..n {
        let mut gvec = [0.0; GOAL_DIM];
        for v in &mut gvec {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let row = policy_input(&norm, &corpus_pair(&data, &mut rng).0, &gvec, &unit(&mut rng, d_z));
        for (j, v) in row.into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let pp = policy.params.cast::<f64>();
    let mean = policy.mlp.forward_batch(&pp, x.view())?;
    let u = &mean + &gauss(&mut rng, n, ACTION_DIM, 0.2);
    // Old log-probabilities put the ratios at e^{+-0.05} and e^{+-0.5}, well
    // inside and well outside the clip range, never on its boundary.
    let current = {
        let mut g = Graph::new();
        let pv = g.params(&pp);
        let (xi, ui) = (g.input(x.clone()), g.input(u.clone()));
        let (lp, _) = log_prob_graph(&policy, &mut g, &pv, xi, ui);
        g.value(lp).clone()
    };
    let offsets = [0.05, -0.05, 0.5, -0.5];
    let old = Array2::from_shape_fn((n, 1), |(i, _)| current[[i, 0]] - offsets[i % 4]);
    let adv = gauss(&mut rng, n, 1, 1.0);
    let pb = PpoBatch {
        x: x.clone(),
        u,
        log_prob_old: old,
        adv,
    };
    let report = check_gradients(
        &pp,
        |g, pv| Ok(ppo_policy_loss_graph(&policy, g, pv, &pb, 0.2, 1e-3).0),
        probes,
        step,
        &mut rng,
    )
    .map_err(|e| in_module("policy", e))?;
    out.push(ModuleCheck { module: "policy", report });

    let value = ValueFn::new(d_z, &[16, 16], 10.0, &mut rng).map_err(err)?;
    let ret = gauss(&mut rng, n, 1, 5.0);
    let report = check_gradients(
        &value.params.cast::<f64>(),
        |g, pv| Ok(value_loss_graph(&value, g, pv, &x, &ret)),
        probes,
        step,
        &mut rng,
    )
    .map_err(|e| in_module("value", e))?;
    out.push(ModuleCheck { module: "value", report });
    Ok(out)
}
