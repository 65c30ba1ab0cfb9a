use std::path::PathBuf;

use dppo_core::baselines::GaussianSampler;
use dppo_core::cli::{self, Command, LoadedPolicy, RunConfig};
use dppo_core::diffusion::{cosine_schedule as schedule, DiffusionPolicy, SampleMode};
use dppo_core::dppo::{clip_schedule as clip, gae_simple, ppo_loss as ppo};
use dppo_core::envlab::{
    self, trajectories_from_jsonl, ChunkPolicy, DiffusionSampler, Normalizer, ACT_DIM,
};
use dppo_core::ndcore::Tensor;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: dppo_core::Error) -> PyErr {
    match e {
        dppo_core::Error::MissingFile(_) | dppo_core::Error::Io(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(format!("{}: {e}", e.kind())),
    }
}

#[pyclass(name = "RunConfig")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.run.seed = seed;
    }

    #[getter]
    fn out(&self) -> String {
        self.inner.run.out.display().to_string()
    }

    #[setter]
    fn set_out(&mut self, out: String) {
        self.inner.run.out = PathBuf::from(out);
    }
}

/// Runs one of `gen-demos`, `pretrain`, `finetune`, `eval`, `plot`, `report`.
#[pyfunction]
#[pyo3(signature = (command, config, seeds=None))]
fn run_command(
    py: Python<'_>,
    command: &str,
    config: &PyRunConfig,
    seeds: Option<Vec<u64>>,
) -> PyResult<()> {
    let cmd = match command {
        "gen-demos" => Command::GenDemos,
        "pretrain" => Command::Pretrain,
        "finetune" => Command::Finetune,
        "eval" => Command::Eval,
        "plot" => Command::Plot,
        "report" => Command::Report,
        other => return Err(PyValueError::new_err(format!("unknown command {other}"))),
    };
    let cfg = config.inner.clone();
    py.allow_threads(|| cli::dispatch(cmd, &cfg, seeds.as_deref()))
        .map_err(py_err)
}

#[pyclass(name = "AvoidEnv")]
struct PyAvoidEnv {
    env: envlab::AvoidEnv,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyAvoidEnv {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> Self {
        Self {
            env: envlab::AvoidEnv::new(envlab::AvoidConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn reset(&mut self) -> Vec<f64> {
        self.env.reset(&mut self.rng).to_vec()
    }

    /// Moves toward `target`; returns `(obs, reward, done, event)`.
    fn step(&mut self, target: [f64; 2]) -> PyResult<(Vec<f64>, f64, bool, Option<&'static str>)> {
        let s = self.env.step(target).map_err(py_err)?;
        Ok((s.obs.to_vec(), s.reward, s.done, s.event.map(|e| e.name())))
    }
}

/// A pre-trained or fine-tuned checkpoint of either policy family.
#[pyclass(name = "Policy")]
struct PyPolicy {
    policy: LoadedPolicy,
    normalizer: Normalizer,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (policy, normalizer) = cli::load_policy(&path).map_err(py_err)?;
        Ok(Self { policy, normalizer })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.policy {
            LoadedPolicy::Diffusion(_) => "diffusion",
            LoadedPolicy::Gaussian { .. } => "gaussian",
        }
    }

    /// World-frame target chunks `[T_p * 2]` for raw observations.
    #[pyo3(signature = (obs, seed=0, explore=false))]
    fn sample(&self, obs: Vec<Vec<f64>>, seed: u64, explore: bool) -> PyResult<Vec<Vec<f64>>> {
        let rows: Vec<Vec<f64>> = obs
            .iter()
            .map(|o| self.normalizer.normalize_obs(o))
            .collect();
        let t = Tensor::from_rows(&rows).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = match &self.policy {
            LoadedPolicy::Diffusion(p) => sample_with(p, explore).act(&t, &mut rng),
            LoadedPolicy::Gaussian { policy, .. } => GaussianSampler {
                policy,
                deterministic: !explore,
            }
            .act(&t, &mut rng),
        }
        .map_err(py_err)?;
        Ok((0..out.chunks.rows())
            .map(|r| {
                out.chunks
                    .row(r)
                    .chunks(ACT_DIM)
                    .flat_map(|a| self.normalizer.denormalize_act(a))
                    .collect()
            })
            .collect())
    }
}

fn sample_with(p: &DiffusionPolicy, explore: bool) -> DiffusionSampler<'_> {
    DiffusionSampler {
        policy: p,
        mode: if explore {
            SampleMode::Explore
        } else {
            SampleMode::Eval
        },
    }
}

/// `(alpha_bar, sigma)` of the cosine schedule for levels `1..=k`.
#[pyfunction]
#[pyo3(signature = (k, s=0.008))]
fn cosine_schedule(k: usize, s: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let sc = schedule(k, s).map_err(py_err)?;
    Ok((sc.alpha_bar, sc.sigma))
}

/// `(advantages, returns)`; `dones[t]` marks termination after step `t`.
#[pyfunction]
fn gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    gae_simple(&rewards, &values, &dones, bootstrap, gamma, lam).map_err(py_err)
}

#[pyfunction]
fn clip_schedule(eps0: f64, k_prime: usize) -> PyResult<Vec<f64>> {
    clip(eps0, k_prime).map_err(py_err)
}

/// `(loss, clip_fraction, approx_kl)` of the clipped surrogate.
#[pyfunction]
fn ppo_loss(
    new: Vec<f64>,
    old: Vec<f64>,
    adv: Vec<f64>,
    eps: Vec<f64>,
) -> PyResult<(f64, f64, f64)> {
    let s = ppo(&new, &old, &adv, &eps).map_err(py_err)?;
    Ok((s.loss, s.clip_fraction, s.approx_kl))
}

/// SVG of trajectory JSONL on the default board.
#[pyfunction]
fn render_svg(trajectories_jsonl: &str) -> PyResult<String> {
    let eps = trajectories_from_jsonl(trajectories_jsonl).map_err(py_err)?;
    Ok(cli::render_svg(&envlab::AvoidConfig::default(), &eps))
}

#[pymodule]
fn dppo_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyAvoidEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(clip_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(ppo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(render_svg, m)?)?;
    Ok(())
}
