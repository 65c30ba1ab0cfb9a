use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{sha256_hex, Method, PolicyKind, RunConfig};
use super::plot::render_svg;
use super::report::{ExperimentReport, RunInfo, RUN_FILE};
use crate::baselines::{
    pretrain_gaussian, DawrTrainer, DrwrTrainer, GaussianPolicy, GaussianPpoTrainer,
    GaussianSampler, WrConfig,
};
use crate::diffusion::{pretrain_bc, DiffusionConfig, DiffusionPolicy, SampleMode};
use crate::dppo::{run_finetune, DppoConfig, DppoTrainer, Finetuner, LogRow};
use crate::envlab::{
    evaluate, generate_demos, trajectories_from_jsonl, trajectories_to_jsonl, ChunkPolicy,
    DemoDataset, Demonstrator, DiffusionSampler, EpisodeRecord, EvalSummary, Normalizer,
    ScriptedPolicy, ACT_DIM, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::ndcore::Checkpoint;

pub const PRETRAIN_LOSS_HEADER: &str = "# dppo-pretrain-loss v1";
pub const PRETRAIN_EVAL_HEADER: &str = "# dppo-pretrain-eval v1";
const EVAL_SEED_SALT: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenDemos,
    Pretrain,
    Finetune,
    Eval,
    Plot,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenDemos => "gen-demos",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Plot => "plot",
            Command::Report => "report",
        }
    }
}

/// Runs `command` once, or once per seed under `<out>/seed_<n>/` followed by
/// an aggregate report in `<out>`.
pub fn dispatch(command: Command, cfg: &RunConfig, seeds: Option<&[u64]>) -> Result<()> {
    cfg.validate()?;
    let Some(seeds) = seeds else {
        return run_one(command, cfg);
    };
    for &s in seeds {
        let mut c = cfg.clone();
        c.run.seed = s;
        c.run.out = cfg.run.out.join(format!("seed_{s}"));
        run_one(command, &c)?;
    }
    cmd_report(cfg)?;
    Ok(())
}

fn run_one(command: Command, cfg: &RunConfig) -> Result<()> {
    cfg.echo(command.name())?;
    match command {
        Command::GenDemos => cmd_gen_demos(cfg).map(|_| ()),
        Command::Pretrain => cmd_pretrain(cfg).map(|_| ()),
        Command::Finetune => cmd_finetune(cfg).map(|_| ()),
        Command::Eval => cmd_eval(cfg).map(|_| ()),
        Command::Plot => cmd_plot(cfg).map(|_| ()),
        Command::Report => cmd_report(cfg).map(|_| ()),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub file: String,
    pub sha256: String,
    pub mode_set: String,
    pub seed: u64,
    pub n_episodes: usize,
    pub events: BTreeMap<String, usize>,
}

/// Writes the dataset and `<stem>.manifest.json` beside it.
pub fn cmd_gen_demos(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = generate_demos(
        cfg.demos.mode_set,
        cfg.demos.n_episodes,
        cfg.run.seed,
        &cfg.env,
    )?;
    let path = cfg.demos_path();
    ds.save(&path)?;
    let bytes = fs::read(&path)?;
    let mut events = BTreeMap::new();
    for e in &ds.episodes {
        *events.entry(e.event.name().to_string()).or_insert(0) += 1;
    }
    let manifest = DemoManifest {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&bytes),
        mode_set: format!("{:?}", cfg.demos.mode_set),
        seed: cfg.run.seed,
        n_episodes: ds.episodes.len(),
        events,
    };
    write_json(&path.with_extension("manifest.json"), &manifest)?;
    Ok(path)
}

/// A checkpointed policy of either family.
#[derive(Debug, Clone)]
pub enum LoadedPolicy {
    Diffusion(DiffusionPolicy),
    Gaussian { policy: GaussianPolicy, t_p: usize },
}

impl LoadedPolicy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            LoadedPolicy::Diffusion(_) => PolicyKind::Diffusion,
            LoadedPolicy::Gaussian { .. } => PolicyKind::Gaussian,
        }
    }

    /// Deterministic-floor sampler together with `(t_a, t_p)`.
    pub fn eval_sampler(&self) -> (Box<dyn ChunkPolicy + '_>, usize, usize) {
        match self {
            LoadedPolicy::Diffusion(p) => (
                Box::new(DiffusionSampler {
                    policy: p,
                    mode: SampleMode::Eval,
                }),
                p.config.t_a,
                p.config.t_p,
            ),
            LoadedPolicy::Gaussian { policy, t_p } => (
                Box::new(GaussianSampler {
                    policy,
                    deterministic: true,
                }),
                *t_p,
                *t_p,
            ),
        }
    }
}

fn gaussian_hidden(ck: &Checkpoint) -> Result<Vec<usize>> {
    let mut widths = Vec::new();
    for i in 0.. {
        match ck.get(&format!("gaussian/mean.layer{i}.weight")) {
            Some(w) => widths.push(w.cols()),
            None => break,
        }
    }
    if widths.is_empty() {
        return Err(Error::Checkpoint("no gaussian mean network".into()));
    }
    widths.pop();
    Ok(widths)
}

/// Reads a policy checkpoint written by `pretrain` or `finetune`.
pub fn load_policy(dir: &Path) -> Result<(LoadedPolicy, Normalizer)> {
    let ck = Checkpoint::load(dir)?;
    let normalizer = Normalizer::from_checkpoint(&ck)?;
    if ck.has_prefix("gaussian") {
        let t_p = ck.config["t_p"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("gaussian checkpoint without t_p".into()))?
            as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = GaussianPolicy::new(
            OBS_DIM,
            t_p * ACT_DIM,
            &gaussian_hidden(&ck)?,
            0.1,
            &mut rng,
        )?;
        policy.load_checkpoint(&ck)?;
        return Ok((LoadedPolicy::Gaussian { policy, t_p }, normalizer));
    }
    let config: DiffusionConfig = serde_json::from_value(ck.config["diffusion"].clone())
        .map_err(|e| Error::Checkpoint(format!("diffusion config: {e}")))?;
    Ok((
        LoadedPolicy::Diffusion(DiffusionPolicy::from_checkpoint(config, &ck)?),
        normalizer,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEval {
    pub epoch: usize,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub losses: Vec<f64>,
    pub evals: Vec<PretrainEval>,
}

fn eval_row(s: &mut String, e: &PretrainEval) {
    let ev = |k: &str| e.summary.events.get(k).copied().unwrap_or(0);
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{}",
        e.epoch,
        e.summary.success_rate,
        e.summary.goal_rate,
        ev("goal_top"),
        ev("goal_other"),
        ev("collision"),
        ev("timeout"),
        e.summary.mean_length
    );
}

/// Behavior cloning on the demo file. Writes `pretrain/checkpoint/`,
/// `pretrain/loss.csv` and `pretrain/eval.csv`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    let demos_path = cfg.demos_path();
    let ds = DemoDataset::load(&demos_path)?;
    let dataset_sha = sha256_hex(&fs::read(&demos_path)?);
    let norm = ds.normalizer().clone();
    let t_p = cfg.policy.t_p;
    let (obs, chunks) = ds.samples(t_p)?;
    let bc = cfg.pretrain.bc_config(cfg.policy.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let eval_seed = cfg.run.seed ^ EVAL_SEED_SALT;
    let n_eval = cfg.pretrain.eval_episodes;
    let mut evals = Vec::new();

    let (losses, ck) = match cfg.policy.kind {
        PolicyKind::Diffusion => {
            let dc = cfg.policy.diffusion_config()?;
            let mut policy = DiffusionPolicy::new(dc.clone(), &mut rng)?;
            let every = cfg.pretrain.eval_every;
            let losses = pretrain_bc(
                &mut policy,
                &obs,
                &chunks,
                &bc,
                &mut rng,
                |epoch, _, view| {
                    let done = epoch + 1;
                    if n_eval > 0 && ((every > 0 && done % every == 0) || done == bc.epochs) {
                        let s = DiffusionSampler {
                            policy: view,
                            mode: SampleMode::Eval,
                        };
                        let (summary, _) =
                            evaluate(&s, &cfg.env, &norm, dc.t_a, dc.t_p, n_eval, eval_seed)?;
                        evals.push(PretrainEval {
                            epoch: done,
                            summary,
                        });
                    }
                    Ok(true)
                },
            )?;
            let mut ck = Checkpoint::new(
                cfg.run.seed,
                serde_json::json!({"policy": "diffusion", "diffusion": dc, "pretrain": bc, "dataset_sha256": dataset_sha}),
            );
            policy.to_checkpoint(&mut ck);
            (losses, ck)
        }
        PolicyKind::Gaussian => {
            let hidden = &cfg.policy.gaussian_hidden;
            let mut policy = GaussianPolicy::new(
                OBS_DIM,
                t_p * ACT_DIM,
                hidden,
                cfg.policy.gaussian_sigma,
                &mut rng,
            )?;
            let losses = pretrain_gaussian(&mut policy, &obs, &chunks, &bc, &mut rng)?;
            if n_eval > 0 {
                let s = GaussianSampler {
                    policy: &policy,
                    deterministic: true,
                };
                let (summary, _) = evaluate(&s, &cfg.env, &norm, t_p, t_p, n_eval, eval_seed)?;
                evals.push(PretrainEval {
                    epoch: losses.len(),
                    summary,
                });
            }
            let mut ck = Checkpoint::new(
                cfg.run.seed,
                serde_json::json!({"policy": "gaussian", "t_p": t_p, "hidden": hidden, "pretrain": bc, "dataset_sha256": dataset_sha}),
            );
            policy.to_checkpoint(&mut ck);
            (losses, ck)
        }
    };
    let mut ck = ck;
    norm.to_checkpoint(&mut ck);
    let dir = cfg.pretrain_dir();
    ck.save(&dir.join("checkpoint"))?;

    let mut loss_csv = format!("{PRETRAIN_LOSS_HEADER}\nepoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(loss_csv, "{},{l}", i + 1);
    }
    fs::write(dir.join("loss.csv"), loss_csv)?;
    let mut eval_csv = format!(
        "{PRETRAIN_EVAL_HEADER}\nepoch,success_rate,goal_rate,goal_top,goal_other,collision,timeout,mean_length\n"
    );
    for e in &evals {
        eval_row(&mut eval_csv, e);
    }
    fs::write(dir.join("eval.csv"), eval_csv)?;
    Ok(PretrainOutcome { dir, losses, evals })
}

/// One member of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub dppo: DppoConfig,
    pub wr: WrConfig,
    pub t_a: Option<usize>,
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Enumerates the configured sweeps, one variant per listed value; a config
/// without sweeps yields the single variant `base`.
pub fn variants(cfg: &RunConfig) -> Result<Vec<Variant>> {
    let a = &cfg.ablation;
    let base = Variant {
        name: "base".into(),
        dppo: cfg.finetune.dppo.clone(),
        wr: cfg.finetune.wr.clone(),
        t_a: None,
    };
    if a.is_empty() {
        return Ok(vec![base]);
    }
    let method = cfg.finetune.method;
    let dppo_only =
        !a.k_prime.is_empty() || !a.gamma_denoise.is_empty() || !a.sigma_exp_min.is_empty();
    if dppo_only && method != Method::Dppo {
        return Err(Error::Config(format!(
            "K', gamma_denoise and sigma_exp_min sweeps apply to dppo, not {}",
            method.name()
        )));
    }
    if !a.t_a.is_empty() && method == Method::GaussianPpo {
        return Err(Error::Config(
            "the T_a sweep needs a diffusion policy".into(),
        ));
    }
    let mut out = Vec::new();
    for &k in &a.k_prime {
        let mut v = base.clone();
        v.name = format!("k_prime_{k}");
        v.dppo.k_prime = k;
        out.push(v);
    }
    for &g in &a.gamma_denoise {
        let mut v = base.clone();
        v.name = format!("gamma_denoise_{}", fmt_value(g));
        v.dppo.gamma_denoise = g;
        out.push(v);
    }
    for &s in &a.sigma_exp_min {
        let mut v = base.clone();
        v.name = format!("sigma_exp_min_{}", fmt_value(s));
        v.dppo.sigma_exp_min = s;
        out.push(v);
    }
    for &t in &a.t_a {
        let mut v = base.clone();
        v.name = format!("t_a_{t}");
        v.t_a = Some(t);
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub dir: PathBuf,
    pub variant: String,
    pub train_csv: String,
    pub eval_csv: String,
}

fn drive<T: Finetuner>(
    t: &mut T,
    ckpt: impl Fn(&T) -> Checkpoint,
    dir: &Path,
    every: usize,
) -> Result<(String, String, Checkpoint)> {
    let log = run_finetune(t, |t: &T, row: &LogRow| {
        let done = row.iteration + 1;
        if every > 0 && done % every == 0 {
            ckpt(t).save(&dir.join("checkpoints").join(format!("iter_{done}")))?;
        }
        Ok(())
    })?;
    Ok((log.to_csv(), log.eval_csv(), ckpt(t)))
}

/// Fine-tunes the pre-trained checkpoint once per variant, writing
/// `finetune/<method>/<variant>/{train.csv,eval.csv,run.json,checkpoint/}`.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<Vec<FinetuneOutcome>> {
    let ck_dir = cfg.pretrained_checkpoint();
    let (loaded, norm) = load_policy(&ck_dir)?;
    let method = cfg.finetune.method;
    let compatible = matches!(
        (method, loaded.kind()),
        (Method::GaussianPpo, PolicyKind::Gaussian)
            | (
                Method::Dppo | Method::Drwr | Method::Dawr,
                PolicyKind::Diffusion
            )
    );
    if !compatible {
        return Err(Error::Config(format!(
            "method {} cannot fine-tune the {:?} checkpoint at {}",
            method.name(),
            loaded.kind(),
            ck_dir.display()
        )));
    }
    let seed = cfg.run.seed;
    let env = cfg.env.clone();
    let every = cfg.finetune.checkpoint_every;
    let base_hash = cfg.hash()?;
    let mut outcomes = Vec::new();
    for v in variants(cfg)? {
        let dir = cfg.out().join("finetune").join(method.name()).join(&v.name);
        fs::create_dir_all(&dir)?;
        let (train_csv, eval_csv, ck) = match &loaded {
            LoadedPolicy::Gaussian { policy, t_p } => {
                let mut t = GaussianPpoTrainer::new(
                    policy.clone(),
                    norm.clone(),
                    env.clone(),
                    *t_p,
                    v.dppo.clone(),
                    seed,
                )?;
                drive(&mut t, |t| t.checkpoint(), &dir, every)?
            }
            LoadedPolicy::Diffusion(p) => {
                let mut p = p.clone();
                if let Some(t_a) = v.t_a {
                    p.config.t_a = t_a;
                    p.config.validate()?;
                }
                match method {
                    Method::Dppo => {
                        let mut t =
                            DppoTrainer::new(p, norm.clone(), env.clone(), v.dppo.clone(), seed)?;
                        drive(&mut t, |t| t.checkpoint(), &dir, every)?
                    }
                    Method::Drwr => {
                        let mut t =
                            DrwrTrainer::new(p, norm.clone(), env.clone(), v.wr.clone(), seed)?;
                        drive(&mut t, |t| t.checkpoint(), &dir, every)?
                    }
                    Method::Dawr => {
                        let mut t =
                            DawrTrainer::new(p, norm.clone(), env.clone(), v.wr.clone(), seed)?;
                        drive(&mut t, |t| t.checkpoint(), &dir, every)?
                    }
                    Method::GaussianPpo => unreachable!("rejected by the compatibility check"),
                }
            }
        };
        ck.save(&dir.join("checkpoint"))?;
        fs::write(dir.join("train.csv"), &train_csv)?;
        fs::write(dir.join("eval.csv"), &eval_csv)?;
        let info = RunInfo {
            method: method.name().into(),
            variant: v.name.clone(),
            seed,
            config_hash: sha256_hex(format!("{base_hash}/{}", v.name).as_bytes()),
        };
        write_json(&dir.join(RUN_FILE), &info)?;
        outcomes.push(FinetuneOutcome {
            dir,
            variant: v.name,
            train_csv,
            eval_csv,
        });
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub seed: u64,
    pub summary: EvalSummary,
}

fn identity_normalizer() -> Normalizer {
    Normalizer {
        obs_min: vec![-1.0; OBS_DIM],
        obs_max: vec![1.0; OBS_DIM],
        act_min: vec![-1.0; ACT_DIM],
        act_max: vec![1.0; ACT_DIM],
    }
}

/// Deterministic-floor rollouts of a checkpoint or a scripted route. Writes
/// `eval/eval.json` and `eval/trajectories.jsonl`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(EvalReport, Vec<EpisodeRecord>)> {
    let n = cfg.eval.n_episodes;
    let seed = cfg.run.seed;
    let (source, summary, episodes) = match cfg.eval.scripted {
        Some(family) => {
            let demos = cfg.demos_path();
            let normalizer = if demos.is_file() {
                DemoDataset::load(&demos)?.normalizer().clone()
            } else {
                identity_normalizer()
            };
            let p = ScriptedPolicy {
                family,
                normalizer: normalizer.clone(),
                t_p: cfg.policy.t_p,
                lookahead: Demonstrator::new(cfg.demos.mode_set).lookahead,
                max_step: cfg.env.max_step,
            };
            let (s, eps) = evaluate(
                &p,
                &cfg.env,
                &normalizer,
                cfg.policy.t_a,
                cfg.policy.t_p,
                n,
                seed,
            )?;
            (format!("scripted:{family:?}"), s, eps)
        }
        None => {
            let dir = cfg
                .eval
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.pretrain_dir().join("checkpoint"));
            let (loaded, norm) = load_policy(&dir)?;
            let (sampler, t_a, t_p) = loaded.eval_sampler();
            let (s, eps) = evaluate(sampler.as_ref(), &cfg.env, &norm, t_a, t_p, n, seed)?;
            (dir.display().to_string(), s, eps)
        }
    };
    let report = EvalReport {
        source,
        seed,
        summary,
    };
    let dir = cfg.out().join("eval");
    write_json(&dir.join("eval.json"), &report)?;
    fs::write(
        dir.join("trajectories.jsonl"),
        trajectories_to_jsonl(&episodes)?,
    )?;
    Ok((report, episodes))
}

/// Renders trajectory files to `plot/trajectories.svg`.
pub fn cmd_plot(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = if cfg.plot.inputs.is_empty() {
        vec![cfg.out().join("eval").join("trajectories.jsonl")]
    } else {
        cfg.plot.inputs.clone()
    };
    let mut episodes = Vec::new();
    for p in &inputs {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
        episodes.extend(trajectories_from_jsonl(&fs::read_to_string(p)?)?);
    }
    let path = cfg.out().join("plot").join("trajectories.svg");
    fs::create_dir_all(path.parent().expect("plot dir"))?;
    fs::write(&path, render_svg(&cfg.env, &episodes))?;
    Ok(path)
}

/// Aggregates every fine-tuning run under the report root into
/// `report.json` and `report.md`.
pub fn cmd_report(cfg: &RunConfig) -> Result<ExperimentReport> {
    let root = cfg
        .report
        .root
        .clone()
        .unwrap_or_else(|| cfg.out().to_path_buf());
    let report = ExperimentReport::collect(&root)?;
    write_json(&cfg.out().join("report.json"), &report)?;
    fs::write(cfg.out().join("report.md"), report.to_markdown())?;
    Ok(report)
}
