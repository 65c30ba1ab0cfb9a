use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::WrConfig;
use crate::diffusion::{DiffusionConfig, PretrainConfig, SamplerKind};
use crate::dppo::DppoConfig;
use crate::envlab::{AvoidConfig, Family, ModeSet, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "DPPO_SEED";
pub const OUT_ENV: &str = "DPPO_OUT";

/// Everything a command needs, read from one TOML file. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: AvoidConfig,
    pub demos: DemoSection,
    pub policy: PolicySection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub ablation: AblationSection,
    pub eval: EvalSection,
    pub plot: PlotSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub mode_set: ModeSet,
    pub n_episodes: usize,
    /// Dataset file; `<out>/demos.jsonl` when unset.
    pub path: Option<PathBuf>,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            mode_set: ModeSet::M2,
            n_episodes: 50,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Diffusion,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub t_p: usize,
    pub t_a: usize,
    pub k: usize,
    pub sampler: SamplerKind,
    pub gaussian_hidden: Vec<usize>,
    pub gaussian_sigma: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Diffusion,
            t_p: 4,
            t_a: 4,
            k: 20,
            sampler: SamplerKind::Ddpm,
            gaussian_hidden: vec![64, 64],
            gaussian_sigma: 0.1,
        }
    }
}

impl PolicySection {
    pub fn diffusion_config(&self) -> Result<DiffusionConfig> {
        let mut c = DiffusionConfig::new(OBS_DIM, ACT_DIM, self.t_p);
        c.k = self.k;
        c.t_a = self.t_a;
        c.sampler = self.sampler;
        c.k_prime = c.k_prime.min(c.chain_len()).max(1);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Diffusion epochs.
    pub epochs: usize,
    pub gaussian_epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            gaussian_epochs: 5000,
            batch_size: p.batch_size,
            lr_start: p.lr_start,
            lr_end: p.lr_end,
            weight_decay: p.weight_decay,
            ema_decay: p.ema_decay,
            eval_every: 1000,
            eval_episodes: 100,
        }
    }
}

impl PretrainSection {
    pub fn bc_config(&self, kind: PolicyKind) -> PretrainConfig {
        PretrainConfig {
            epochs: match kind {
                PolicyKind::Diffusion => self.epochs,
                PolicyKind::Gaussian => self.gaussian_epochs,
            },
            batch_size: self.batch_size,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dppo,
    GaussianPpo,
    Drwr,
    Dawr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dppo => "dppo",
            Method::GaussianPpo => "gaussian_ppo",
            Method::Drwr => "drwr",
            Method::Dawr => "dawr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub method: Method,
    /// Pre-trained checkpoint directory; `<out>/pretrain/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
    /// Save an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub dppo: DppoConfig,
    pub wr: WrConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            method: Method::Dppo,
            checkpoint: None,
            checkpoint_every: 0,
            dppo: DppoConfig::default(),
            wr: WrConfig::default(),
        }
    }
}

/// One-dimensional sweeps, each enumerated separately from the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub k_prime: Vec<usize>,
    pub gamma_denoise: Vec<f64>,
    pub sigma_exp_min: Vec<f64>,
    pub t_a: Vec<usize>,
}

impl AblationSection {
    pub fn is_empty(&self) -> bool {
        self.k_prime.is_empty()
            && self.gamma_denoise.is_empty()
            && self.sigma_exp_min.is_empty()
            && self.t_a.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint directory; `<out>/pretrain/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
    pub n_episodes: usize,
    /// Evaluate the carrot-following demonstrator of this route instead.
    pub scripted: Option<Family>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            n_episodes: 100,
            scripted: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    /// Trajectory files; `<out>/eval/trajectories.jsonl` when empty.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Directory scanned for run logs; `<out>` when unset.
    pub root: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `DPPO_SEED` / `DPPO_OUT` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = lookup(SEED_ENV) {
            self.run.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        if let Some(o) = lookup(OUT_ENV) {
            self.run.out = PathBuf::from(o);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.finetune.dppo.validate()?;
        self.finetune.wr.validate()?;
        if self.policy.kind == PolicyKind::Diffusion {
            self.policy.diffusion_config()?;
        }
        if self.demos.n_episodes == 0 {
            return Err(Error::Config("demos.n_episodes must be positive".into()));
        }
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::Config(
                "seed must fit in a signed 64-bit integer".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn out(&self) -> &Path {
        &self.run.out
    }

    pub fn demos_path(&self) -> PathBuf {
        self.demos
            .path
            .clone()
            .unwrap_or_else(|| self.run.out.join("demos.jsonl"))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.run.out.join("pretrain")
    }

    pub fn pretrained_checkpoint(&self) -> PathBuf {
        self.finetune
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.pretrain_dir().join("checkpoint"))
    }

    /// Writes the resolved config to `<out>/<command>.config.toml`.
    pub fn echo(&self, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.run.out)?;
        let path = self.run.out.join(format!("{command}.config.toml"));
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses `"1,2, 3"` into seeds.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {p:?} in list")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(seeds)
}
