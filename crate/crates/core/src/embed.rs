//! Joint motion/text skill embedding.
//!
//! Motion clips are encoded by a small attention network onto the unit
//! sphere and decoded back from a learned query sequence. Captions go through
//! a frozen hashed n-gram featurizer followed by a trainable two-layer head.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{random_subsequence, Dataset, Pose};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, NnError, ParamSet, ParamVars, Params, Scalar, Var};

pub const TEXT_DIM: usize = 256;
pub const POSE_DIM: usize = 7;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("caption {0:?} has no tokens")]
    EmptyCaption(String),
    #[error("caption {0:?} hashes to the zero vector")]
    DegenerateCaption(String),
    #[error("clip length {n} outside [2, {n_max}]")]
    Length { n: usize, n_max: usize },
    #[error("length mismatch: {0} vs {1} frames")]
    Mismatch(usize, usize),
    #[error("zero-norm latent")]
    ZeroVector,
    #[error("antipodal latents have no unique great-circle arc")]
    Antipodal,
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<EmbeddingModel>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] crate::motion::DataError),
}

// ---------------------------------------------------------------------------
// Latents

/// Unit-norm skill latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillLatent(Vec<f64>);

impl SkillLatent {
    pub fn new(v: Vec<f64>) -> Result<Self, EmbedError> {
        let n = norm(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn zeros_unchecked(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &SkillLatent) -> f64 {
        dot(&self.0, &other.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Spherical interpolation along the shorter great-circle arc.
pub fn slerp(z1: &SkillLatent, z2: &SkillLatent, t: f64) -> Result<SkillLatent, EmbedError> {
    if z1.dim() != z2.dim() {
        return Err(EmbedError::Dim(z1.dim(), z2.dim()));
    }
    let c = z1.cosine(z2).clamp(-1.0, 1.0);
    if c <= -1.0 + 1e-12 {
        return Err(EmbedError::Antipodal);
    }
    if t == 0.0 {
        return Ok(z1.clone());
    }
    if t == 1.0 {
        return Ok(z2.clone());
    }
    let omega = c.acos();
    if omega < 1e-9 {
        return Ok(z1.clone());
    }
    let s = omega.sin();
    let (a, b) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    let v = z1.0.iter().zip(&z2.0).map(|(x, y)| a * x + b * y).collect();
    SkillLatent::new(v)
}

// ---------------------------------------------------------------------------
// Text featurizer

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed unigram + bigram features, L2-normalised (frozen).
pub fn featurize_text(caption: &str) -> Result<Vec<f64>, EmbedError> {
    let toks = tokenize(caption);
    if toks.is_empty() {
        return Err(EmbedError::EmptyCaption(caption.to_string()));
    }
    let mut counts = [0i64; TEXT_DIM];
    let mut add = |gram: &str| {
        let h = fnv1a64(gram.as_bytes());
        let bucket = (h % TEXT_DIM as u64) as usize;
        counts[bucket] += if (h >> 63) == 0 { 1 } else { -1 };
    };
    for t in &toks {
        add(t);
    }
    for w in toks.windows(2) {
        add(&format!("{} {}", w[0], w[1]));
    }
    let n = (counts.iter().map(|c| c * c).sum::<i64>() as f64).sqrt();
    if n == 0.0 {
        return Err(EmbedError::DegenerateCaption(caption.to_string()));
    }
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

// ---------------------------------------------------------------------------
// Plain losses

/// `(1/n) Σ_t ‖q̂_t − q_t‖²`.
pub fn loss_recon(reconstructed: &[Pose], original: &[Pose]) -> Result<f64, EmbedError> {
    if reconstructed.len() != original.len() {
        return Err(EmbedError::Mismatch(reconstructed.len(), original.len()));
    }
    if original.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = reconstructed
        .iter()
        .zip(original)
        .map(|(a, b)| {
            let (a, b): ([f64; 7], [f64; 7]) = ((*a).into(), (*b).into());
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(total / original.len() as f64)
}

/// Cosine distance `1 − cos(z_m, z_l)`.
pub fn loss_align(z_m: &[f64], z_l: &[f64]) -> Result<f64, EmbedError> {
    if z_m.len() != z_l.len() {
        return Err(EmbedError::Dim(z_m.len(), z_l.len()));
    }
    if norm(z_m) == 0.0 || norm(z_l) == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(1.0 - cosine(z_m, z_l))
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub d_model: usize,
    pub d_z: usize,
    pub n_max: usize,
    pub ffn: usize,
    pub text_hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub align_weight: f64,
    pub min_subseq: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_z: 16,
            n_max: 300,
            ffn: 64,
            text_hidden: 64,
            lr: 1e-3,
            batch: 32,
            epochs: 2000,
            align_weight: 0.1,
            min_subseq: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub config: EmbedConfig,
    pub params: ParamSet,
    /// Per-feature normalisation of pose frames, in `Pose` order.
    pub feat_mean: [f64; POSE_DIM],
    pub feat_std: [f64; POSE_DIM],
}

fn dense<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    scale: f32,
    rng: &mut R,
) -> Result<(), NnError> {
    let bound = (6.0 / fan_in as f32).sqrt() * scale;
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    p.insert(format!("{name}.w"), Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)))?;
    p.insert(format!("{name}.b"), Array2::zeros((1, fan_out)))
}

fn attention_params<R: Rng + ?Sized>(
    p: &mut ParamSet,
    prefix: &str,
    d: usize,
    ffn: usize,
    rng: &mut R,
) -> Result<(), NnError> {
    let bound = (6.0 / d as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    for m in ["q", "k", "v"] {
        p.insert(format!("{prefix}.{m}"), Array2::from_shape_fn((d, d), |_| dist.sample(rng)))?;
    }
    let small = Uniform::new_inclusive(-0.3 * bound, 0.3 * bound).expect("finite bound");
    p.insert(format!("{prefix}.o"), Array2::from_shape_fn((d, d), |_| small.sample(rng)))?;
    dense(p, &format!("{prefix}.ff1"), d, ffn, 1.0, rng)?;
    dense(p, &format!("{prefix}.ff2"), ffn, d, 0.3, rng)
}

/// Row-selection matrix picking the first `n` rows of an `n_max`-row table.
fn first_rows<T: Scalar>(n: usize, n_max: usize) -> Array2<T> {
    Array2::from_shape_fn((n, n_max), |(i, j)| if i == j { T::one() } else { T::zero() })
}

fn affine<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, name: &str, x: Var) -> Var {
    let w = pv.get(&format!("{name}.w"));
    let b = pv.get(&format!("{name}.b"));
    let h = g.matmul(x, w);
    g.add_row(h, b)
}

/// Single-head bidirectional self-attention with residual and feed-forward.
fn attention_block<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, prefix: &str, h: Var) -> Var {
    let d = g.shape(h).1;
    let q = g.matmul(h, pv.get(&format!("{prefix}.q")));
    let k = g.matmul(h, pv.get(&format!("{prefix}.k")));
    let v = g.matmul(h, pv.get(&format!("{prefix}.v")));
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()).unwrap());
    let att = g.softmax_rows(scores);
    let mixed = g.matmul(att, v);
    let o = g.matmul(mixed, pv.get(&format!("{prefix}.o")));
    let h = g.add(h, o);
    let f = affine(g, pv, &format!("{prefix}.ff1"), h);
    let f = g.relu(f);
    let f = affine(g, pv, &format!("{prefix}.ff2"), f);
    g.add(h, f)
}

impl EmbeddingModel {
    pub fn new<R: Rng + ?Sized>(config: EmbedConfig, dataset: &Dataset, rng: &mut R) -> Result<Self, EmbedError> {
        let (feat_mean, feat_std) = feature_stats(dataset);
        Ok(Self {
            params: init_params(&config, rng)?,
            config,
            feat_mean,
            feat_std,
        })
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    fn check_len(&self, n: usize) -> Result<(), EmbedError> {
        if n < 2 || n > self.config.n_max {
            return Err(EmbedError::Length {
                n,
                n_max: self.config.n_max,
            });
        }
        Ok(())
    }

    fn normalized_frames<T: Scalar>(&self, frames: &[Pose]) -> Array2<T> {
        Array2::from_shape_fn((frames.len(), POSE_DIM), |(i, j)| {
            let a: [f64; 7] = frames[i].into();
            T::from_f64((a[j] - self.feat_mean[j]) / self.feat_std[j]).unwrap()
        })
    }

    /// Records the motion encoder; returns a unit-norm 1×d_z row.
    pub fn encoder_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, frames: &[Pose]) -> Var {
        let c = &self.config;
        let n = frames.len();
        let x = g.input(self.normalized_frames(frames));
        let h = affine(g, pv, "enc.in", x);
        let sel = g.input(first_rows(n, c.n_max));
        let pos = g.matmul(sel, pv.get("enc.pos"));
        let h = g.add(h, pos);
        let h = g.relu(h);
        let h = attention_block(g, pv, "enc.att", h);
        let pooled = g.mean_rows(h);
        let z = affine(g, pv, "enc.out", pooled);
        g.normalize_rows(z)
    }

    /// Records the decoder for `n` frames from a 1×d_z latent row; output is
    /// in raw pose units.
    pub fn decoder_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, z: Var, n: usize) -> Var {
        let c = &self.config;
        let sel = g.input(first_rows(n, c.n_max));
        let queries = g.matmul(sel, pv.get("dec.queries"));
        let zp = affine(g, pv, "dec.z", z);
        let h = g.add_row(queries, zp);
        let h = g.relu(h);
        let h = attention_block(g, pv, "dec.att", h);
        let f = affine(g, pv, "dec.out1", h);
        let f = g.relu(f);
        let y = affine(g, pv, "dec.out2", f);
        let std = g.input(Array2::from_shape_fn((1, POSE_DIM), |(_, j)| {
            T::from_f64(self.feat_std[j]).unwrap()
        }));
        let mean = g.input(Array2::from_shape_fn((1, POSE_DIM), |(_, j)| {
            T::from_f64(self.feat_mean[j]).unwrap()
        }));
        let std = g.repeat_rows(std, n);
        let y = g.mul(y, std);
        g.add_row(y, mean)
    }

    /// Records the text head on a B×256 block of featurized captions.
    pub fn text_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, feats: Var) -> Var {
        let h = affine(g, pv, "text.l0", feats);
        let h = g.relu(h);
        let z = affine(g, pv, "text.l1", h);
        g.normalize_rows(z)
    }

    pub fn encode_motion(&self, frames: &[Pose]) -> Result<SkillLatent, EmbedError> {
        self.check_len(frames.len())?;
        let mut g = Graph::<f32>::new();
        let pv = g.params(&self.params);
        let z = self.encoder_graph(&mut g, &pv, frames);
        SkillLatent::new(g.value(z).iter().map(|&x| x as f64).collect())
    }

    pub fn decode_motion(&self, z: &SkillLatent, n: usize) -> Result<Vec<Pose>, EmbedError> {
        self.check_len(n)?;
        if z.dim() != self.config.d_z {
            return Err(EmbedError::Dim(z.dim(), self.config.d_z));
        }
        let mut g = Graph::<f32>::new();
        let pv = g.params(&self.params);
        let zv = g.input(Array2::from_shape_fn((1, z.dim()), |(_, j)| z.0[j] as f32));
        let out = self.decoder_graph(&mut g, &pv, zv, n);
        Ok(g.value(out)
            .rows()
            .into_iter()
            .map(|r| {
                let mut a = [0.0; 7];
                for (k, v) in r.iter().enumerate() {
                    a[k] = *v as f64;
                }
                Pose::from(a)
            })
            .collect())
    }

    pub fn encode_text(&self, caption: &str) -> Result<SkillLatent, EmbedError> {
        let f = featurize_text(caption)?;
        let mut g = Graph::<f32>::new();
        let pv = g.params(&self.params);
        let x = g.input(Array2::from_shape_fn((1, TEXT_DIM), |(_, j)| f[j] as f32));
        let z = self.text_graph(&mut g, &pv, x);
        SkillLatent::new(g.value(z).iter().map(|&x| x as f64).collect())
    }

    /// Mean reconstruction loss of `decode(encode(m))` over full clips.
    pub fn corpus_recon_loss(&self, dataset: &Dataset) -> Result<f64, EmbedError> {
        let mut total = 0.0;
        for clip in &dataset.clips {
            let z = self.encode_motion(&clip.frames)?;
            let rec = self.decode_motion(&z, clip.len())?;
            total += loss_recon(&rec, &clip.frames)?;
        }
        Ok(total / dataset.len().max(1) as f64)
    }
}

pub fn init_params<R: Rng + ?Sized>(c: &EmbedConfig, rng: &mut R) -> Result<ParamSet, NnError> {
    let mut p = Params::new();
    let d = c.d_model;
    dense(&mut p, "enc.in", POSE_DIM, d, 1.0, rng)?;
    let pos = Uniform::new_inclusive(-0.1f32, 0.1).expect("finite");
    p.insert("enc.pos", Array2::from_shape_fn((c.n_max, d), |_| pos.sample(rng)))?;
    attention_params(&mut p, "enc.att", d, c.ffn, rng)?;
    dense(&mut p, "enc.out", d, c.d_z, 1.0, rng)?;
    p.insert("dec.queries", Array2::from_shape_fn((c.n_max, d), |_| pos.sample(rng)))?;
    dense(&mut p, "dec.z", c.d_z, d, 1.0, rng)?;
    attention_params(&mut p, "dec.att", d, c.ffn, rng)?;
    dense(&mut p, "dec.out1", d, c.ffn, 1.0, rng)?;
    dense(&mut p, "dec.out2", c.ffn, POSE_DIM, 0.1, rng)?;
    dense(&mut p, "text.l0", TEXT_DIM, c.text_hidden, 1.0, rng)?;
    dense(&mut p, "text.l1", c.text_hidden, c.d_z, 1.0, rng)?;
    Ok(p)
}

/// Per-feature mean and standard deviation over all frames (std floored at 0.05).
pub fn feature_stats(dataset: &Dataset) -> ([f64; POSE_DIM], [f64; POSE_DIM]) {
    let mut mean = [0.0; POSE_DIM];
    let mut sq = [0.0; POSE_DIM];
    let mut n = 0.0;
    for clip in &dataset.clips {
        for f in &clip.frames {
            let a: [f64; 7] = (*f).into();
            for j in 0..POSE_DIM {
                mean[j] += a[j];
                sq[j] += a[j] * a[j];
            }
            n += 1.0;
        }
    }
    let mut std = [1.0; POSE_DIM];
    if n > 0.0 {
        for j in 0..POSE_DIM {
            mean[j] /= n;
            std[j] = (sq[j] / n - mean[j] * mean[j]).max(0.0).sqrt().max(0.05);
        }
    }
    (mean, std)
}

// ---------------------------------------------------------------------------
// Training

/// One training item; `caption` is `None` for subsequences, which only
/// contribute to the reconstruction term.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub frames: Vec<Pose>,
    pub caption: Option<String>,
}

/// Records `mean(L_recon) + w·mean(L_align)` over a batch. Returns
/// `(total, recon, align)` scalar nodes.
pub fn embedding_loss_graph<T: Scalar>(
    model: &EmbeddingModel,
    g: &mut Graph<T>,
    pv: &ParamVars,
    batch: &[BatchItem],
) -> Result<(Var, Var, Var), EmbedError> {
    let mut recon_terms = Vec::new();
    let mut z_motion = Vec::new();
    let mut feats = Vec::new();
    for item in batch {
        model.check_len(item.frames.len())?;
        let z = model.encoder_graph(g, pv, &item.frames);
        let n = item.frames.len();
        let out = model.decoder_graph(g, pv, z, n);
        let target = g.input(Array2::from_shape_fn((n, POSE_DIM), |(i, j)| {
            let a: [f64; 7] = item.frames[i].into();
            T::from_f64(a[j]).unwrap()
        }));
        let diff = g.sub(out, target);
        let sq = g.square(diff);
        let s = g.sum(sq);
        recon_terms.push(g.scale(s, T::from_f64(1.0 / n as f64).unwrap()));
        if let Some(c) = &item.caption {
            z_motion.push(z);
            feats.push(featurize_text(c)?);
        }
    }
    let mut recon = g.constant(T::zero());
    for r in &recon_terms {
        recon = g.add(recon, *r);
    }
    let recon = g.scale(recon, T::from_f64(1.0 / batch.len().max(1) as f64).unwrap());
    let align = if feats.is_empty() {
        g.constant(T::zero())
    } else {
        let k = feats.len();
        let fx = g.input(Array2::from_shape_fn((k, TEXT_DIM), |(i, j)| T::from_f64(feats[i][j]).unwrap()));
        let zl = model.text_graph(g, pv, fx);
        let zm = g.concat_rows(&z_motion);
        let cos = g.dot_rows(zm, zl);
        let m = g.mean(cos);
        let neg = g.neg(m);
        g.add_scalar(neg, T::one())
    };
    let weighted = g.scale(align, T::from_f64(model.config.align_weight).unwrap());
    let total = g.add(recon, weighted);
    Ok((total, recon, align))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub align: f64,
}

/// Minimises `L_recon + 0.1·L_align` with Adam. Every minibatch holds full
/// clips (with one uniformly sampled caption each) and an equal number of
/// random subsequences.
pub fn train_embedding(
    dataset: &Dataset,
    config: &EmbedConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EmbedLogRow),
) -> Result<(EmbeddingModel, Vec<EmbedLogRow>), EmbedError> {
    if dataset.is_empty() {
        return Err(EmbedError::Data(crate::motion::DataError::Invalid("empty dataset".into())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = EmbeddingModel::new(config.clone(), dataset, &mut rng)?;
    let mut opt = AdamState::new(&model.params, AdamConfig::default());
    let mut log = Vec::with_capacity(config.epochs);
    let half = (config.batch / 2).max(1);
    for epoch in 0..config.epochs {
        let mut batch = Vec::with_capacity(2 * half);
        let picks: Vec<usize> = if dataset.len() <= half {
            (0..dataset.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, dataset.len(), half).into_vec()
        };
        for &i in &picks {
            let clip = &dataset.clips[i];
            let frames = clip.frames[..clip.len().min(config.n_max)].to_vec();
            let caption = clip.captions.choose(&mut rng).cloned();
            batch.push(BatchItem { frames, caption });
        }
        for &i in &picks {
            let clip = &dataset.clips[i];
            let min_len = config.min_subseq.min(clip.len()).max(2);
            let sub = random_subsequence(clip, &mut rng, min_len)?;
            let frames = sub.frames[..sub.len().min(config.n_max)].to_vec();
            batch.push(BatchItem { frames, caption: None });
        }
        let mut g = Graph::<f32>::new();
        let pv = g.params(&model.params);
        let (total, recon, align) = embedding_loss_graph(&model, &mut g, &pv, &batch)?;
        let loss = g.scalar(total) as f64;
        if !loss.is_finite() {
            return Err(EmbedError::Diverged {
                epoch,
                last_good: Box::new(model),
            });
        }
        let grads = model.params.with_arrays(g.backward(total)?);
        let row = EmbedLogRow {
            epoch,
            loss,
            recon: g.scalar(recon) as f64,
            align: g.scalar(align) as f64,
        };
        adam_step(&mut opt, &mut model.params, &grads, config.lr)?;
        on_epoch(&row);
        log.push(row);
    }
    Ok((model, log))
}

/// Fraction of (clip, caption) pairs whose caption latent is closer to that
/// clip than to every clip not carrying the caption.
pub fn retrieval_accuracy(model: &EmbeddingModel, dataset: &Dataset) -> Result<f64, EmbedError> {
    let zm: Vec<SkillLatent> = dataset
        .clips
        .iter()
        .map(|c| model.encode_motion(&c.frames[..c.len().min(model.config.n_max)]))
        .collect::<Result<_, _>>()?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, clip) in dataset.clips.iter().enumerate() {
        for cap in &clip.captions {
            let zl = model.encode_text(cap)?;
            let own = zl.cosine(&zm[i]);
            let ok = dataset
                .clips
                .iter()
                .enumerate()
                .filter(|(_, other)| !other.captions.contains(cap))
                .all(|(j, _)| own > zl.cosine(&zm[j]));
            hits += ok as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
