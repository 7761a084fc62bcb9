//! `charctl`: data generation, training, evaluation and the live service.

pub mod server;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use charctl_core::checkpoint::{self, Checkpoint, PolicyBundle};
use charctl_core::embed::{train_embedding, EmbedConfig, EmbeddingModel};
use charctl_core::eval::{
    ablation_joint_vs_marginal, baseline_comparison, coverage_curve, interpolation_sweep, summarize, sweep_csv,
    CoverageConfig, VariantResult,
};
use charctl_core::motion::{generate_synthetic_dataset, load_dataset, save_dataset, to_json, Dataset, DatasetConfig};
use charctl_core::qa::{BaselineCosineScorer, CardSet, ExternalScorer, Scorer, TaskPolicy};
use charctl_core::rl::{fit_caption_pca, log_to_csv, train_policy, LatentSource, TrainConfig};
use charctl_core::session::{Controller, Session};
use charctl_core::sim::{reset, EnvConfig, WorldState};
use charctl_core::tasks::TaskKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAULT: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "charctl", version, about = "Language-directed character control")]
pub struct Cli {
    /// Seed for data generation, training and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with configuration overrides for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; CSV-producing commands print to stdout without it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Facing,
    Location,
    Strike,
    None,
}

impl TaskArg {
    fn task(self) -> Option<TaskKind> {
        match self {
            TaskArg::Facing => Some(TaskKind::Facing),
            TaskArg::Location => Some(TaskKind::Location),
            TaskArg::Strike => Some(TaskKind::Strike),
            TaskArg::None => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConditioningArg {
    Learned,
    Raw,
    Pca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    /// Joint versus marginal discriminator.
    JointMarginal,
    /// Learned embedding versus raw and PCA caption features.
    Conditioning,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic captioned motion corpus.
    GenData,
    /// Train the motion/text skill embedding.
    TrainEmbed {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a policy for one task, or the skill-only policy.
    TrainPolicy {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "learned")]
        conditioning: ConditioningArg,
    },
    /// Coverage curve of a policy over the corpus (CSV "epsilon,coverage").
    EvalCoverage {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Slerp sweep between two commands (CSV "t,mean_speed,mean_height").
    EvalInterp {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long, default_value = "walk forward")]
        from: String,
        #[arg(long, default_value = "sprint forward while swinging arms")]
        to: String,
        #[arg(long, default_value_t = 9)]
        points: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
    /// Train and compare variants at equal budget over several seeds.
    EvalAblation {
        #[arg(long, value_enum, default_value = "joint-marginal")]
        kind: AblationKind,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Run the live controller and stream frames over WebSocket at /ws.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding embedding.json, facing.json, location.json, strike.json.
        #[arg(long, default_value = "models")]
        models: PathBuf,
        /// Record a JSON-lines session trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Multiple-choice scoring endpoint; the built-in scorer is used otherwise.
        #[arg(long)]
        scorer_url: Option<String>,
        #[arg(long, default_value = "walk forward")]
        skill: String,
        #[arg(long, default_value = "orient to face the red block")]
        task: String,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAULT
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg: DatasetConfig = load_config(cli.config.as_deref())?;
            let d = generate_synthetic_dataset(&cfg, cli.seed)?;
            match &cli.out {
                Some(p) => save_dataset(&d, p)?,
                None => println!("{}", to_json(&d)),
            }
        }
        Command::TrainEmbed { data } => {
            let cfg: EmbedConfig = load_config(cli.config.as_deref())?;
            let d = dataset(data.as_deref())?;
            let (model, log) = train_embedding(&d, &cfg, cli.seed, |r| {
                if r.epoch % 100 == 0 {
                    log::info!("epoch {} loss {:.5} recon {:.5} align {:.5}", r.epoch, r.loss, r.recon, r.align);
                }
            })?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                log::info!("recon {:.5} -> {:.5}", first.recon, last.recon);
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("embedding.json"));
            checkpoint::embedding_checkpoint(&model).save(&out)?;
        }
        Command::TrainPolicy {
            task,
            data,
            embedding,
            conditioning,
        } => {
            let cfg: TrainConfig = load_config(cli.config.as_deref())?;
            let d = dataset(data.as_deref())?;
            let latents = match conditioning {
                ConditioningArg::Learned => LatentSource::Learned(load_embedding(
                    embedding.as_deref().context("--embedding is required for learned conditioning")?,
                )?),
                ConditioningArg::Raw => LatentSource::Raw,
                ConditioningArg::Pca => {
                    let k = match embedding {
                        Some(p) => load_embedding(p)?.d_z(),
                        None => EmbedConfig::default().d_z,
                    };
                    LatentSource::Pca(fit_caption_pca(&d, k)?)
                }
            };
            let trained = train_policy(task.task(), &d, &latents, &cfg, cli.seed, |r| {
                if r.epoch % 50 == 0 {
                    log::info!("{}", r.csv());
                }
            })?;
            let out = cli.out.clone().unwrap_or_else(|| {
                PathBuf::from(format!("{}.json", task.task().map(|t| t.name()).unwrap_or("skills")))
            });
            checkpoint::policy_checkpoint(&trained, &latents).save(&out)?;
            checkpoint::discriminator_checkpoint(&trained.disc).save(&sibling(&out, "disc.json"))?;
            write_file(&sibling(&out, "log.csv"), &log_to_csv(&trained.log))?;
        }
        Command::EvalCoverage { policy, data, embedding } => {
            let cfg: CoverageConfig = load_config(cli.config.as_deref())?;
            let cfg = CoverageConfig { seed: cli.seed, ..cfg };
            let d = dataset(data.as_deref())?;
            let (bundle, latents) = load_policy(policy, embedding.as_deref())?;
            let report = coverage_curve(&bundle.policy, &latents, &d, &cfg)?;
            emit(cli, &report.csv())?;
            sidecar(cli, "eval-coverage", &cfg, &[cli.seed], &[policy.as_path()], embedding.as_deref())?;
        }
        Command::EvalInterp {
            policy,
            embedding,
            from,
            to,
            points,
            steps,
        } => {
            let (bundle, latents) = load_policy(policy, embedding.as_deref())?;
            let rows = interpolation_sweep(&bundle.policy, &latents, from, to, *points, *steps, cli.seed)?;
            emit(cli, &sweep_csv(&rows))?;
            let cfg = serde_json::json!({ "from": from, "to": to, "points": points, "steps": steps });
            sidecar(cli, "eval-interp", &cfg, &[cli.seed], &[policy.as_path()], embedding.as_deref())?;
        }
        Command::EvalAblation {
            kind,
            data,
            embedding,
            seeds,
        } => {
            #[derive(serde::Deserialize, Serialize, Default)]
            struct AblationConfig {
                #[serde(default)]
                train: TrainConfig,
                #[serde(default)]
                coverage: CoverageConfig,
            }
            let cfg: AblationConfig = load_config(cli.config.as_deref())?;
            let d = dataset(data.as_deref())?;
            let model = load_embedding(embedding)?;
            let results = match kind {
                AblationKind::JointMarginal => {
                    ablation_joint_vs_marginal(&d, &model, &cfg.train, seeds, &cfg.coverage)?
                }
                AblationKind::Conditioning => baseline_comparison(&d, &model, &cfg.train, seeds, &cfg.coverage)?,
            };
            emit(cli, &variants_csv(&results))?;
            for s in summarize(&results, 1.0) {
                log::info!("{}: coverage@1 {:.3}, min over skills {:.3}", s.name, s.at_eps, s.min_skill_at_eps);
            }
            sidecar(cli, "eval-ablation", &cfg, seeds, &[], Some(embedding))?;
        }
        Command::Serve {
            port,
            models,
            trace,
            scorer_url,
            skill,
            task,
        } => {
            let scorer: Box<dyn Scorer> = match scorer_url {
                Some(u) => Box::new(ExternalScorer::new(u.clone())?),
                None => Box::new(BaselineCosineScorer::default()),
            };
            let env = EnvConfig::default();
            let ctrl = load_controller(models, &env.object_colors, scorer)?;
            let world = scene(&env, cli.seed)?;
            let session = Session::new(world, skill.clone(), task.clone());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", *port)).await?;
                let handle = server::start(
                    listener,
                    ctrl,
                    session,
                    server::ServeOptions {
                        trace: trace.clone(),
                        max_ticks: None,
                    },
                )
                .await?;
                eprintln!("listening on ws://{}/ws", handle.addr);
                tokio::signal::ctrl_c().await?;
                handle.shutdown().await
            })?;
        }
    }
    Ok(())
}

/// Reads a JSON config, overlaying its fields on the type's defaults.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut base = serde_json::to_value(T::default())?;
    merge(&mut base, over);
    serde_json::from_value(base).with_context(|| format!("config {}", path.display()))
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Loads `path`, or generates the default corpus with data seed 0.
pub fn dataset(path: Option<&Path>) -> Result<Dataset> {
    Ok(match path {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => generate_synthetic_dataset(&DatasetConfig::default(), 0)?,
    })
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingModel> {
    let c = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(checkpoint::embedding_from_checkpoint(&c)?)
}

pub fn load_policy(path: &Path, embedding: Option<&Path>) -> Result<(PolicyBundle, LatentSource)> {
    let c = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let bundle = checkpoint::policy_from_checkpoint(&c)?;
    let model = embedding.map(load_embedding).transpose()?;
    let latents = bundle.conditioning.source(model.as_ref())?;
    Ok((bundle, latents))
}

/// Builds the three-policy controller from `dir`.
pub fn load_controller<S: AsRef<str>>(dir: &Path, colors: &[S], scorer: Box<dyn Scorer>) -> Result<Controller> {
    let model = load_embedding(&dir.join("embedding.json"))?;
    let emb = dir.join("embedding.json");
    let mut policies = HashMap::new();
    let mut latents = None;
    for task in [TaskKind::Strike, TaskKind::Location, TaskKind::Facing] {
        let (bundle, src) = load_policy(&dir.join(format!("{}.json", task.name())), Some(&emb))?;
        if bundle.task != Some(task) {
            bail!("{}.json holds a {:?} policy", task.name(), bundle.task);
        }
        latents.get_or_insert(src);
        policies.insert(
            task.name().to_string(),
            TaskPolicy {
                task,
                policy: bundle.policy,
            },
        );
    }
    let cards = CardSet::for_colors(colors);
    cards.validate()?;
    Ok(Controller {
        policies,
        cards,
        latents: latents.unwrap_or(LatentSource::Learned(model)),
        scorer,
    })
}

/// The live scene: default blocks around the character, placed by `seed`.
pub fn scene(env: &EnvConfig, seed: u64) -> Result<WorldState> {
    Ok(reset(env, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(cli: &Cli, csv: &str) -> Result<()> {
    match &cli.out {
        Some(p) => write_file(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// JSON summary next to an evaluation CSV: config, seeds and checkpoint hashes.
fn sidecar<C: Serialize>(
    cli: &Cli,
    command: &str,
    cfg: &C,
    seeds: &[u64],
    checkpoints: &[&Path],
    embedding: Option<&Path>,
) -> Result<()> {
    let Some(out) = &cli.out else { return Ok(()) };
    let mut hashes = serde_json::Map::new();
    for p in checkpoints.iter().copied().chain(embedding) {
        let c = Checkpoint::load(p)?;
        hashes.insert(p.display().to_string(), c.manifest.sha256.into());
    }
    let v = serde_json::json!({
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "checkpoints": hashes,
    });
    write_file(&sibling(out, "summary.json"), &serde_json::to_string_pretty(&v)?)
}

pub fn variants_csv(results: &[VariantResult]) -> String {
    let mut s = String::from("variant,seed,epsilon,coverage\n");
    for r in results {
        for (e, c) in r.report.epsilons.iter().zip(&r.report.mean) {
            s.push_str(&format!("{},{},{e},{c}\n", r.name, r.seed));
        }
    }
    s
}
