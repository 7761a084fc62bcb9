//! Latent-conditioned transition discriminator and the skill reward.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::ObsNorm;
use crate::nn::{adam_step, AdamState, Graph, Mlp, MlpSpec, NnError, ParamSet, ParamVars, Params, Scalar, Var};
use crate::sim::OBS_DIM;

pub const D_MIN: f64 = 1e-4;
pub const D_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("latent has dimension {got}, discriminator expects {expected}")]
    LatentDim { got: usize, expected: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscLossConfig {
    /// Weight of agent negatives; other-clip negatives get `1 − w_d`.
    pub w_d: f64,
    pub w_gp: f64,
}

impl Default for DiscLossConfig {
    fn default() -> Self {
        Self { w_d: 0.5, w_gp: 5.0 }
    }
}

/// One `(s, s′, z)` sample in raw observation units.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: [f64; OBS_DIM],
    pub s_next: [f64; OBS_DIM],
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub mlp: Mlp,
    pub params: ParamSet,
    pub norm: ObsNorm,
    pub d_z: usize,
    /// Marginal mode: the latent input is zeroed, so scores ignore `z`.
    pub marginal: bool,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        d_z: usize,
        hidden: &[usize],
        norm: ObsNorm,
        marginal: bool,
        rng: &mut R,
    ) -> Result<Self, DiscError> {
        let mlp = Mlp::new(MlpSpec::new(2 * OBS_DIM + d_z, hidden, 1), "disc")?;
        let mut params = Params::new();
        mlp.init(&mut params, rng, 0.1)?;
        Ok(Self {
            mlp,
            params,
            norm,
            d_z,
            marginal,
        })
    }

    pub fn input_dim(&self) -> usize {
        2 * OBS_DIM + self.d_z
    }

    /// Network inputs `[norm(s), norm(s′), z]`, one row per transition.
    pub fn inputs<T: Scalar>(&self, batch: &[Transition]) -> Result<Array2<T>, DiscError> {
        let mut x = Array2::zeros((batch.len(), self.input_dim()));
        for (i, t) in batch.iter().enumerate() {
            if t.z.len() != self.d_z {
                return Err(DiscError::LatentDim {
                    got: t.z.len(),
                    expected: self.d_z,
                });
            }
            let (a, b) = (self.norm.apply(&t.s), self.norm.apply(&t.s_next));
            for j in 0..OBS_DIM {
                x[[i, j]] = T::from_f64(a[j]).unwrap();
                x[[i, OBS_DIM + j]] = T::from_f64(b[j]).unwrap();
            }
            if !self.marginal {
                for (j, v) in t.z.iter().enumerate() {
                    x[[i, 2 * OBS_DIM + j]] = T::from_f64(*v).unwrap();
                }
            }
        }
        Ok(x)
    }

    /// Clamped probabilities `D(s, s′, z)`.
    pub fn scores(&self, batch: &[Transition]) -> Result<Vec<f64>, DiscError> {
        let x = self.inputs::<f32>(batch)?;
        let logits = self.mlp.forward_batch(&self.params, x.view())?;
        Ok(logits.iter().map(|&l| prob_from_logit(l as f64)).collect())
    }

    pub fn disc_score(&self, t: &Transition) -> Result<f64, DiscError> {
        Ok(self.scores(std::slice::from_ref(t))?[0])
    }

    pub fn skill_rewards(&self, batch: &[Transition]) -> Result<Vec<f64>, DiscError> {
        Ok(self.scores(batch)?.into_iter().map(skill_reward_from_score).collect())
    }
}

pub fn prob_from_logit(l: f64) -> f64 {
    let p = if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    };
    p.clamp(D_MIN, D_MAX)
}

/// `−log(1 − D)`.
pub fn skill_reward_from_score(d: f64) -> f64 {
    -(1.0 - d.clamp(D_MIN, D_MAX)).ln()
}

fn clamped_prob<T: Scalar>(g: &mut Graph<T>, logit: Var) -> Var {
    let p = g.sigmoid(logit);
    g.clamp(p, T::from_f64(D_MIN).unwrap(), T::from_f64(D_MAX).unwrap())
}

fn mean_log<T: Scalar>(g: &mut Graph<T>, p: Var, complement: bool) -> Var {
    let q = if complement {
        let n = g.neg(p);
        g.add_scalar(n, T::one())
    } else {
        p
    };
    let l = g.log(q);
    g.mean(l)
}

/// Records `E‖∂D/∂(s, s′)‖²` on the given input rows. The latent columns are
/// excluded from the gradient.
pub fn gradient_penalty_graph<T: Scalar>(
    disc: &Discriminator,
    g: &mut Graph<T>,
    pv: &ParamVars,
    x: Var,
) -> Var {
    let (logit, dx) = disc.mlp.graph_with_input_grad(g, pv, x);
    let p = g.sigmoid(logit);
    let p2 = g.square(p);
    let dp = g.sub(p, p2);
    // Zero where the output clamp is active.
    let mask = g.value(p).mapv(|v| {
        let v = v.to_f64().unwrap();
        if v <= D_MIN || v >= D_MAX {
            T::zero()
        } else {
            T::one()
        }
    });
    let mask = g.input(mask);
    let dp = g.mul(dp, mask);
    let ds = g.slice_cols(dx, 0, 2 * OBS_DIM);
    let dd = g.mul_col(ds, dp);
    let sq = g.square(dd);
    let per_row = g.sum_cols(sq);
    g.mean(per_row)
}

/// Records the four-term discriminator loss.
pub fn disc_loss_graph<T: Scalar>(
    disc: &Discriminator,
    g: &mut Graph<T>,
    pv: &ParamVars,
    real: &Array2<T>,
    agent: &Array2<T>,
    other: &Array2<T>,
    cfg: &DiscLossConfig,
) -> Result<Var, DiscError> {
    for (name, b) in [("real", real), ("agent", agent), ("other", other)] {
        if b.nrows() == 0 {
            return Err(DiscError::EmptyBatch(name));
        }
    }
    let xr = g.input(real.clone());
    let xa = g.input(agent.clone());
    let xo = g.input(other.clone());
    let lr = disc.mlp.graph(g, pv, xr);
    let la = disc.mlp.graph(g, pv, xa);
    let lo = disc.mlp.graph(g, pv, xo);
    let pr = clamped_prob(g, lr);
    let pa = clamped_prob(g, la);
    let po = clamped_prob(g, lo);
    let t_real = mean_log(g, pr, false);
    let t_agent = mean_log(g, pa, true);
    let t_other = mean_log(g, po, true);
    let t_real = g.neg(t_real);
    let t_agent = g.scale(t_agent, T::from_f64(-cfg.w_d).unwrap());
    let t_other = g.scale(t_other, T::from_f64(-(1.0 - cfg.w_d)).unwrap());
    let mut loss = g.add(t_real, t_agent);
    loss = g.add(loss, t_other);
    if cfg.w_gp > 0.0 {
        let gp = gradient_penalty_graph(disc, g, pv, xr);
        let gp = g.scale(gp, T::from_f64(cfg.w_gp).unwrap());
        loss = g.add(loss, gp);
    }
    Ok(loss)
}

pub fn disc_loss(
    disc: &Discriminator,
    real: &[Transition],
    agent: &[Transition],
    other: &[Transition],
    cfg: &DiscLossConfig,
) -> Result<f64, DiscError> {
    let (r, a, o) = (disc.inputs::<f64>(real)?, disc.inputs::<f64>(agent)?, disc.inputs::<f64>(other)?);
    let p = disc.params.cast::<f64>();
    let mut g = Graph::new();
    let pv = g.params(&p);
    let l = disc_loss_graph(disc, &mut g, &pv, &r, &a, &o, cfg)?;
    Ok(g.scalar(l))
}

pub fn gradient_penalty(disc: &Discriminator, real: &[Transition]) -> Result<f64, DiscError> {
    if real.is_empty() {
        return Err(DiscError::EmptyBatch("real"));
    }
    let x = disc.inputs::<f64>(real)?;
    let p = disc.params.cast::<f64>();
    let mut g = Graph::new();
    let pv = g.params(&p);
    let xv = g.input(x);
    let gp = gradient_penalty_graph(disc, &mut g, &pv, xv);
    Ok(g.scalar(gp))
}

/// One Adam step on the discriminator loss; returns the pre-step loss.
pub fn disc_update(
    disc: &mut Discriminator,
    opt: &mut AdamState<f32>,
    real: &[Transition],
    agent: &[Transition],
    other: &[Transition],
    cfg: &DiscLossConfig,
    lr: f64,
) -> Result<f64, DiscError> {
    let (r, a, o) = (disc.inputs::<f32>(real)?, disc.inputs::<f32>(agent)?, disc.inputs::<f32>(other)?);
    let mut g = Graph::new();
    let pv = g.params(&disc.params);
    let l = disc_loss_graph(disc, &mut g, &pv, &r, &a, &o, cfg)?;
    let loss = g.scalar(l) as f64;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss(loss).into());
    }
    let grads = disc.params.with_arrays(g.backward(l)?);
    adam_step(opt, &mut disc.params, &grads, lr)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_disc(d_z: usize) -> Discriminator {
        let mut d = Discriminator::new(d_z, &[8], ObsNorm::identity(), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        d.params = d.params.zeros_like();
        d
    }

    fn tr(x: f64, z: &[f64]) -> Transition {
        Transition {
            s: [x; OBS_DIM],
            s_next: [x + 0.1; OBS_DIM],
            z: z.to_vec(),
        }
    }

    #[test]
    fn zero_network_scores_half() {
        let d = zero_disc(2);
        assert_eq!(d.disc_score(&tr(0.3, &[1.0, 0.0])).unwrap(), 0.5);
    }

    #[test]
    fn half_everywhere_gives_two_log_two() {
        let d = zero_disc(2);
        let b = vec![tr(0.1, &[1.0, 0.0]), tr(-0.4, &[0.0, 1.0])];
        let cfg = DiscLossConfig { w_d: 0.5, w_gp: 0.0 };
        let l = disc_loss(&d, &b, &b, &b, &cfg).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_output_has_no_penalty() {
        let d = zero_disc(2);
        assert_eq!(gradient_penalty(&d, &[tr(0.2, &[1.0, 0.0])]).unwrap(), 0.0);
    }

    #[test]
    fn reward_bounds() {
        assert!((skill_reward_from_score(0.5) - 2f64.ln()).abs() < 1e-15);
        assert!((skill_reward_from_score(D_MAX) - 9.21034).abs() < 1e-5);
        assert!((skill_reward_from_score(0.0) - 1.00005e-4).abs() < 1e-8);
    }

    #[test]
    fn wrong_latent_dim_rejected() {
        let d = zero_disc(2);
        assert!(d.disc_score(&tr(0.0, &[1.0])).is_err());
        assert!(disc_loss(&d, &[], &[tr(0.0, &[1.0, 0.0])], &[tr(0.0, &[1.0, 0.0])], &DiscLossConfig::default()).is_err());
    }
}
